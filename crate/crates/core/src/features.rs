//! Regional detector outputs and the semantic/enhanced feature assembly.
//!
//! A feature file holds one JSON object per image:
//! `{"image_id", "k", "d_v", "features": [[f32; d_v]; k], "attributes": [..k], "objects": [..k]}`
//! with regions ordered by descending detector confidence.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};
use crate::text::EmbeddingTable;

/// Per-region visual vectors and their attribute/object labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionalFeatureSet {
    pub image_id: String,
    pub k: usize,
    pub d_v: usize,
    pub features: Vec<Vec<f32>>,
    pub attributes: Vec<String>,
    pub objects: Vec<String>,
}

impl RegionalFeatureSet {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.k == 0 || self.d_v == 0 {
            return Err("k and d_v must be positive".into());
        }
        if self.features.len() != self.k {
            return Err(format!("declared k={} but {} feature rows", self.k, self.features.len()));
        }
        if let Some(row) = self.features.iter().position(|r| r.len() != self.d_v) {
            return Err(format!(
                "declared d_v={} but feature row {row} has {} values",
                self.d_v,
                self.features[row].len()
            ));
        }
        if self.attributes.len() != self.k || self.objects.len() != self.k {
            return Err(format!(
                "declared k={} but {} attributes and {} objects",
                self.k,
                self.attributes.len(),
                self.objects.len()
            ));
        }
        if self.features.iter().flatten().any(|x| !x.is_finite()) {
            return Err("non-finite feature value".into());
        }
        Ok(())
    }
}

/// Attribute and object label embeddings per region, and their concatenation.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticFeatureSet {
    pub attributes: Vec<Vec<f64>>,
    pub objects: Vec<Vec<f64>>,
    pub semantic: Vec<Vec<f64>>,
}

/// Per-region `[visual; semantic]` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct EnhancedFeatureSet {
    pub rows: Vec<Vec<f64>>,
}

pub fn load_features(path: &Path) -> Result<BTreeMap<String, RegionalFeatureSet>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = BTreeMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RegionalFeatureSet = serde_json::from_str(&line).map_err(|e| Error::parse(path, i + 1, e.to_string()))?;
        rec.validate().map_err(|msg| Error::parse(path, i + 1, msg))?;
        if out.contains_key(&rec.image_id) {
            return Err(Error::parse(path, i + 1, format!("duplicate image_id {:?}", rec.image_id)));
        }
        out.insert(rec.image_id.clone(), rec);
    }
    Ok(out)
}

pub fn write_features<'a>(path: &Path, sets: impl IntoIterator<Item = &'a RegionalFeatureSet>) -> Result<()> {
    let mut buf = Vec::new();
    for set in sets {
        serde_json::to_writer(&mut buf, set).expect("serialize feature record");
        buf.push(b'\n');
    }
    fs::File::create(path)
        .and_then(|mut f| f.write_all(&buf))
        .map_err(|e| Error::io(path, e))
}

pub fn assemble_semantic(rfs: &RegionalFeatureSet, emb: &EmbeddingTable) -> SemanticFeatureSet {
    let attributes: Vec<Vec<f64>> = rfs.attributes.iter().map(|l| emb.phrase(l)).collect();
    let objects: Vec<Vec<f64>> = rfs.objects.iter().map(|l| emb.phrase(l)).collect();
    let semantic = attributes
        .iter()
        .zip(&objects)
        .map(|(b, o)| b.iter().chain(o).copied().collect())
        .collect();
    SemanticFeatureSet {
        attributes,
        objects,
        semantic,
    }
}

pub fn assemble_enhanced(rfs: &RegionalFeatureSet, sfs: &SemanticFeatureSet) -> Result<EnhancedFeatureSet> {
    if sfs.semantic.len() != rfs.k {
        return Err(Error::Dimension(format!(
            "{} visual regions but {} semantic regions",
            rfs.k,
            sfs.semantic.len()
        )));
    }
    let rows = rfs
        .features
        .iter()
        .zip(&sfs.semantic)
        .map(|(v, s)| v.iter().map(|&x| x as f64).chain(s.iter().copied()).collect())
        .collect();
    Ok(EnhancedFeatureSet { rows })
}

/// Model-ready tensors for one image: visual `[k×d_v]`, semantic
/// `[k×2d_e]`, and enhanced `[k×(d_v+2d_e)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageInputs<F> {
    pub visual: Tensor<F>,
    pub semantic: Tensor<F>,
    pub enhanced: Tensor<F>,
}

impl<F: Real> ImageInputs<F> {
    pub fn new(visual: Tensor<F>, semantic: Tensor<F>) -> Result<Self> {
        let (k, d_v) = dims(&visual)?;
        let (k2, d_s) = dims(&semantic)?;
        if k != k2 {
            return Err(Error::Dimension(format!("visual has {k} regions, semantic {k2}")));
        }
        let mut rows = Vec::with_capacity(k * (d_v + d_s));
        for (v, s) in visual.values().chunks(d_v).zip(semantic.values().chunks(d_s)) {
            rows.extend_from_slice(v);
            rows.extend_from_slice(s);
        }
        let enhanced = Tensor::matrix(k, d_v + d_s, rows)?;
        Ok(Self {
            visual,
            semantic,
            enhanced,
        })
    }

    pub fn from_sets(rfs: &RegionalFeatureSet, emb: &EmbeddingTable) -> Result<Self> {
        let sfs = assemble_semantic(rfs, emb);
        let visual = Tensor::matrix(
            rfs.k,
            rfs.d_v,
            rfs.features.iter().flatten().map(|&x| F::lit(x as f64)).collect(),
        )?;
        let semantic = Tensor::matrix(
            rfs.k,
            2 * emb.dim(),
            sfs.semantic.iter().flatten().map(|&x| F::lit(x)).collect(),
        )?;
        Self::new(visual, semantic)
    }

    pub fn regions(&self) -> usize {
        self.visual.shape()[0]
    }

    pub fn visual_dim(&self) -> usize {
        self.visual.shape()[1]
    }

    pub fn semantic_dim(&self) -> usize {
        self.semantic.shape()[1]
    }
}

fn dims<F: Real>(t: &Tensor<F>) -> Result<(usize, usize)> {
    match t.shape() {
        &[r, c] => Ok((r, c)),
        s => Err(Error::Dimension(format!("expected a matrix, got shape {s:?}"))),
    }
}

/// Builds inputs for every image, requiring a uniform region count.
pub fn build_inputs<F: Real>(
    sets: &BTreeMap<String, RegionalFeatureSet>,
    emb: &EmbeddingTable,
) -> Result<BTreeMap<String, ImageInputs<F>>> {
    let mut k = None;
    let mut d_v = None;
    let mut out = BTreeMap::new();
    for (id, set) in sets {
        if *k.get_or_insert(set.k) != set.k {
            return Err(Error::Dimension(format!(
                "image {id:?} has k={} but earlier images have k={}",
                set.k,
                k.unwrap()
            )));
        }
        if *d_v.get_or_insert(set.d_v) != set.d_v {
            return Err(Error::Dimension(format!(
                "image {id:?} has d_v={} but earlier images have d_v={}",
                set.d_v,
                d_v.unwrap()
            )));
        }
        out.insert(id.clone(), ImageInputs::from_sets(set, emb)?);
    }
    Ok(out)
}
