//! Fixtures shared by the benchmarks.

use ivqa_core::model::{Model, ModelConfig, INIT_SCALE};
use ivqa_core::text::synth::{synth_dataset, SynthSpec};
use ivqa_core::text::{build_vocabulary, EmbeddingTable, Vocabulary, ANSWER_LEN, QUESTION_LEN};
use ivqa_core::training::Corpus;

/// The synthetic corpus and a freshly initialized desk-scale model.
pub struct DeskFixture {
    pub vocab: Vocabulary,
    pub corpus: Corpus<f32>,
    pub model: Model<f32>,
}

pub fn desk_fixture(n_images: usize) -> DeskFixture {
    let spec = SynthSpec {
        n_images,
        ..SynthSpec::default()
    };
    let data = synth_dataset(&spec).expect("synthetic data");
    let (vocab, kept) = build_vocabulary(&data.dataset, 3000).expect("vocabulary");
    let cfg = ModelConfig::desk(vocab.len(), spec.k, spec.d_v);
    let emb = EmbeddingTable::random(&vocab, cfg.d_e, spec.seed);
    let feats = data.features.iter().map(|f| (f.image_id.clone(), f.clone())).collect();
    let corpus = Corpus::build(&kept, &feats, &vocab, &emb, QUESTION_LEN, ANSWER_LEN).expect("corpus");
    let model = Model::init(cfg, spec.seed, Some(&emb), INIT_SCALE).expect("model");
    DeskFixture { vocab, corpus, model }
}
