use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::features::{ImageInputs, RegionalFeatureSet};
use crate::tensor::Real;
use crate::text::{DatasetInstance, EmbeddingTable, RawInstance, Vocabulary};

/// One encoded instance pointing at its image's inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub image_id: String,
    pub image: usize,
    pub instance: DatasetInstance,
}

/// Encoded instances and per-image tensors ready for the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus<F> {
    pub images: Vec<ImageInputs<F>>,
    pub examples: Vec<Example>,
}

impl<F: Real> Corpus<F> {
    /// Encodes every instance and assembles inputs for the images they use.
    /// All images must share one region count and visual size.
    pub fn build(
        raw: &[RawInstance],
        features: &BTreeMap<String, RegionalFeatureSet>,
        vocab: &Vocabulary,
        emb: &EmbeddingTable,
        question_len: usize,
        answer_len: usize,
    ) -> Result<Self> {
        if raw.is_empty() {
            return Err(Error::Empty("dataset"));
        }
        let mut index: BTreeMap<&str, usize> = BTreeMap::new();
        let mut images = Vec::new();
        let mut examples = Vec::with_capacity(raw.len());
        for r in raw {
            let image = match index.get(r.image_id.as_str()) {
                Some(&i) => i,
                None => {
                    let set = features
                        .get(&r.image_id)
                        .ok_or_else(|| Error::MissingFeatures(r.image_id.clone()))?;
                    if let Some(first) = images.first() {
                        let first: &ImageInputs<F> = first;
                        if set.k != first.regions() || set.d_v != first.visual_dim() {
                            return Err(Error::Dimension(format!(
                                "image {:?} has k={}, d_v={} but earlier images have k={}, d_v={}",
                                r.image_id,
                                set.k,
                                set.d_v,
                                first.regions(),
                                first.visual_dim()
                            )));
                        }
                    }
                    images.push(ImageInputs::from_sets(set, emb)?);
                    index.insert(&r.image_id, images.len() - 1);
                    images.len() - 1
                }
            };
            examples.push(Example {
                image_id: r.image_id.clone(),
                image,
                instance: DatasetInstance::encode(r, vocab, question_len, answer_len)?,
            });
        }
        Ok(Self { images, examples })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn inputs(&self, ex: &Example) -> &ImageInputs<F> {
        &self.images[ex.image]
    }

    /// Region count and visual size shared by every image.
    pub fn dims(&self) -> (usize, usize) {
        let first = &self.images[0];
        (first.regions(), first.visual_dim())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::synth::{synth_dataset, SynthSpec};
    use crate::text::{build_vocabulary, ANSWER_LEN, QUESTION_LEN};

    #[test]
    fn images_are_shared_between_instances() {
        let data = synth_dataset(&SynthSpec {
            qa_per_image: 2,
            ..SynthSpec::default()
        })
        .unwrap();
        let (vocab, kept) = build_vocabulary(&data.dataset, 3000).unwrap();
        let emb = EmbeddingTable::random(&vocab, 4, 1);
        let feats = data.features.iter().map(|f| (f.image_id.clone(), f.clone())).collect();
        let c = Corpus::<f32>::build(&kept, &feats, &vocab, &emb, QUESTION_LEN, ANSWER_LEN).unwrap();
        assert_eq!(c.len(), 16);
        assert_eq!(c.images.len(), 8);
        assert_eq!(c.dims(), (4, 16));
        assert_eq!(c.examples[0].image, c.examples[1].image);
    }

    #[test]
    fn missing_image_is_reported() {
        let data = synth_dataset(&SynthSpec::default()).unwrap();
        let (vocab, kept) = build_vocabulary(&data.dataset, 3000).unwrap();
        let emb = EmbeddingTable::random(&vocab, 4, 1);
        let r = Corpus::<f32>::build(&kept, &BTreeMap::new(), &vocab, &emb, QUESTION_LEN, ANSWER_LEN);
        assert!(matches!(r, Err(Error::MissingFeatures(id)) if id == kept[0].image_id));
    }
}
