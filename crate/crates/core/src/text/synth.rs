//! Deterministic desk-scale stand-in for a real VQA corpus.
//!
//! Every image gets `k` regions, each labelled with an attribute and an
//! object. A region's feature vector is the sum of fixed random prototypes
//! for its two labels plus small noise, so labels are recoverable from the
//! features. Each question names the attribute of the region whose object is
//! the answer, and the template depends on the answer, so a model has to
//! attend to the right region to produce it.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use super::RawInstance;
use crate::error::{Error, Result};
use crate::features::{write_features, RegionalFeatureSet};
use crate::rng;

const OBJECTS: [&str; 8] = ["dog", "cat", "horse", "car", "bus", "tree", "boat", "bird"];
const ATTRIBUTES: [&str; 8] = ["brown", "red", "white", "black", "green", "blue", "small", "large"];
const TEMPLATES: [&str; 3] = [
    "what is the {} thing ?",
    "what {} object is shown ?",
    "which {} item is in the picture ?",
];
const NOISE: f32 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub seed: u64,
    pub n_images: usize,
    pub k: usize,
    pub d_v: usize,
    pub qa_per_image: usize,
    /// Object label pool size, at most 8.
    pub n_objects: usize,
    /// Attribute label pool size, at most 8.
    pub n_attributes: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            seed: 42,
            n_images: 8,
            k: 4,
            d_v: 16,
            qa_per_image: 1,
            n_objects: 6,
            n_attributes: 6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub features: Vec<RegionalFeatureSet>,
    pub dataset: Vec<RawInstance>,
}

pub fn synth_dataset(spec: &SynthSpec) -> Result<SynthData> {
    if spec.n_images == 0 || spec.k == 0 || spec.d_v == 0 || spec.qa_per_image == 0 {
        return Err(Error::Config("synthetic dataset sizes must be positive".into()));
    }
    if !(1..=OBJECTS.len()).contains(&spec.n_objects) || !(1..=ATTRIBUTES.len()).contains(&spec.n_attributes) {
        return Err(Error::Config(format!(
            "label pools must hold between 1 and {} labels",
            OBJECTS.len()
        )));
    }
    let mut rng = rng::stream(spec.seed, rng::STREAM_SYNTH);
    let prototype =
        |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f32> { (0..spec.d_v).map(|_| rng.gen_range(-1.0f32..1.0)).collect() };
    let object_protos: Vec<Vec<f32>> = (0..spec.n_objects).map(|_| prototype(&mut rng)).collect();
    let attr_protos: Vec<Vec<f32>> = (0..spec.n_attributes).map(|_| prototype(&mut rng)).collect();

    let mut features = Vec::with_capacity(spec.n_images);
    let mut dataset = Vec::with_capacity(spec.n_images * spec.qa_per_image);
    for img in 0..spec.n_images {
        let image_id = format!("synth{img:05}");
        let objects: Vec<usize> = if spec.k <= spec.n_objects {
            let mut pool: Vec<usize> = (0..spec.n_objects).collect();
            pool.shuffle(&mut rng);
            pool.truncate(spec.k);
            pool
        } else {
            (0..spec.k).map(|_| rng.gen_range(0..spec.n_objects)).collect()
        };
        let attrs: Vec<usize> = (0..spec.k).map(|_| rng.gen_range(0..spec.n_attributes)).collect();
        let rows = objects
            .iter()
            .zip(&attrs)
            .map(|(&o, &a)| {
                object_protos[o]
                    .iter()
                    .zip(&attr_protos[a])
                    .map(|(x, y)| x + y + NOISE * rng.gen_range(-1.0f32..1.0))
                    .collect()
            })
            .collect();
        features.push(RegionalFeatureSet {
            image_id: image_id.clone(),
            k: spec.k,
            d_v: spec.d_v,
            features: rows,
            attributes: attrs.iter().map(|&a| ATTRIBUTES[a].to_string()).collect(),
            objects: objects.iter().map(|&o| OBJECTS[o].to_string()).collect(),
        });
        for _ in 0..spec.qa_per_image {
            let region = rng.gen_range(0..spec.k);
            let obj = objects[region];
            let question = TEMPLATES[obj % TEMPLATES.len()].replace("{}", ATTRIBUTES[attrs[region]]);
            dataset.push(RawInstance {
                image_id: image_id.clone(),
                answer: OBJECTS[obj].to_string(),
                question,
            });
        }
    }
    Ok(SynthData { features, dataset })
}

/// Writes `features.jsonl` and `dataset.jsonl` into `dir`.
pub fn write_synth(dir: &Path, data: &SynthData) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_features(&dir.join("features.jsonl"), &data.features)?;
    super::write_dataset(&dir.join("dataset.jsonl"), &data.dataset)
}
