//! Straight-line re-implementations of the model equations on nested
//! `Vec<f64>`, written without the tape, plus fixtures shared by the
//! integration tests.

#![allow(dead_code)]

use ivqa_core::features::ImageInputs;
use ivqa_core::inference::DecodeOptions;
use ivqa_core::model::layers;
use ivqa_core::model::{
    Attended, DynamicAttentionParams, EmbeddingParams, GruParams, GuideAttentionParams, MfbParams, Model, ModelConfig,
    OutputParams,
};
use ivqa_core::tensor::{Real, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Mat = Vec<Vec<f64>>;

pub fn rows<F: Real>(t: &Tensor<F>) -> Mat {
    let cols = *t.shape().last().unwrap();
    t.values()
        .chunks(cols)
        .map(|r| r.iter().map(|x| x.as_f64()).collect())
        .collect()
}

pub fn flat<F: Real>(t: &Tensor<F>) -> Vec<f64> {
    t.values().iter().map(|x| x.as_f64()).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

fn mv(m: &Mat, x: &[f64]) -> Vec<f64> {
    m.iter().map(|r| dot(r, x)).collect()
}

fn plus(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn gru<F: Real>(p: &GruParams<Tensor<F>>, x: &[f64], h: &[f64]) -> Vec<f64> {
    let gate =
        |w: &Tensor<F>, u: &Tensor<F>, b: &Tensor<F>, hh: &[f64]| plus(&plus(&mv(&rows(w), x), &mv(&rows(u), hh)), &flat(b));
    let z: Vec<f64> = gate(&p.w_z, &p.u_z, &p.b_z, h).into_iter().map(sigmoid).collect();
    let r: Vec<f64> = gate(&p.w_r, &p.u_r, &p.b_r, h).into_iter().map(sigmoid).collect();
    let rh: Vec<f64> = r.iter().zip(h).map(|(a, b)| a * b).collect();
    let cand: Vec<f64> = gate(&p.w_h, &p.u_h, &p.b_h, &rh).into_iter().map(f64::tanh).collect();
    (0..h.len()).map(|i| (1.0 - z[i]) * h[i] + z[i] * cand[i]).collect()
}

pub fn embed<F: Real>(p: &EmbeddingParams<Tensor<F>>, token: usize) -> Vec<f64> {
    plus(&rows(&p.table)[token], &flat(&p.bias))
}

pub fn answer_vector<F: Real>(model: &Model<F>, answer: &[usize]) -> Vec<f64> {
    let p = &model.params;
    let mut h = vec![0.0; model.config.hidden];
    for &id in answer {
        if id == ivqa_core::text::PAD {
            break;
        }
        h = gru(&p.answer_gru, &rows(&p.embedding.table)[id], &h);
    }
    h
}

/// Returns `(β, ĉ)`.
pub fn guide<F: Real>(p: &GuideAttentionParams<Tensor<F>>, feats: &Mat, a: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let u = rows(&p.feature_proj);
    let bu = flat(&p.feature_bias);
    let cue: Vec<f64> = plus(&mv(&rows(&p.answer_proj), a), &flat(&p.answer_bias))
        .into_iter()
        .map(f64::tanh)
        .collect();
    let w = flat(&p.score);
    let mut alpha = Vec::new();
    for f in feats {
        let reg: Vec<f64> = plus(&mv(&u, f), &bu).into_iter().map(f64::tanh).collect();
        let joint: Vec<f64> = reg.iter().zip(&cue).map(|(x, y)| x * y).collect();
        alpha.push(dot(&w, &joint));
    }
    let beta = softmax(&alpha);
    let mut c = vec![0.0; feats[0].len()];
    for (b, f) in beta.iter().zip(feats) {
        for (ci, fi) in c.iter_mut().zip(f) {
            *ci += b * fi;
        }
    }
    (beta, c)
}

pub fn mfb<F: Real>(p: &MfbParams<Tensor<F>>, enhanced: &Mat, a: &[f64], window: usize) -> Mat {
    let u1 = rows(&p.feature_proj);
    let b1 = flat(&p.feature_bias);
    let cue = plus(&mv(&rows(&p.answer_proj), a), &flat(&p.answer_bias));
    let mut out = Vec::new();
    for e in enhanced {
        let f: Vec<f64> = plus(&mv(&u1, e), &b1).iter().zip(&cue).map(|(x, y)| x * y).collect();
        let pooled: Vec<f64> = f.chunks(window).map(|w| w.iter().sum()).collect();
        let rooted: Vec<f64> = pooled.iter().map(|&x| x.signum() * x.abs().sqrt()).collect();
        let norm = rooted.iter().map(|x| x * x).sum::<f64>().sqrt();
        out.push(if norm < 1e-12 {
            rooted
        } else {
            rooted.iter().map(|x| x / norm).collect()
        });
    }
    out
}

pub fn encoder<F: Real>(
    p: &GruParams<Tensor<F>>,
    word: &[f64],
    h2: &[f64],
    att0: Option<&[f64]>,
    h1: &[f64],
    a: &[f64],
) -> Vec<f64> {
    let mut r = word.to_vec();
    r.extend_from_slice(h2);
    if let Some(att0) = att0 {
        r.extend_from_slice(att0);
    }
    gru(p, &r, &plus(h1, a))
}

/// Returns `(β_t, ĉ_t)`; weights come from `fused`, the sum runs over `visual`.
pub fn dynamic<F: Real>(p: &DynamicAttentionParams<Tensor<F>>, fused: &Mat, visual: &Mat, h1: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let wz = rows(&p.fused_proj);
    let state = mv(&rows(&p.state_proj), h1);
    let bz = flat(&p.fused_bias);
    let w = flat(&p.score);
    let alpha: Vec<f64> = fused
        .iter()
        .map(|z| {
            let hidden: Vec<f64> = (0..w.len()).map(|n| (dot(&wz[n], z) + bz[n] + state[n]).tanh()).collect();
            dot(&w, &hidden)
        })
        .collect();
    let beta = softmax(&alpha);
    let mut c = vec![0.0; visual[0].len()];
    for (b, v) in beta.iter().zip(visual) {
        for (ci, vi) in c.iter_mut().zip(v) {
            *ci += b * vi;
        }
    }
    (beta, c)
}

pub fn decoder<F: Real>(p: &GruParams<Tensor<F>>, c: &[f64], h1: &[f64], h2: &[f64]) -> Vec<f64> {
    let mut x = c.to_vec();
    x.extend_from_slice(h1);
    gru(p, &x, h2)
}

pub fn output<F: Real>(p: &OutputParams<Tensor<F>>, h2: &[f64]) -> Vec<f64> {
    softmax(&plus(&mv(&rows(&p.proj), h2), &flat(&p.bias)))
}

/// Teacher-forced distributions of the whole network.
pub fn forward<F: Real>(model: &Model<F>, inputs: &ImageInputs<F>, answer: &[usize], gold: &[usize]) -> Vec<Vec<f64>> {
    let c = &model.config;
    let p = &model.params;
    let a = answer_vector(model, answer);
    let visual = rows(&inputs.visual);
    let semantic = rows(&inputs.semantic);
    let att0 = if c.ablate_semantic {
        None
    } else {
        let (_, cv) = guide(p.visual_attention.as_ref().unwrap(), &visual, &a);
        let (_, cs) = guide(p.semantic_attention.as_ref().unwrap(), &semantic, &a);
        Some([cv, cs].concat())
    };
    let enhanced = if c.ablate_semantic {
        visual.clone()
    } else {
        rows(&inputs.enhanced)
    };
    let z = mfb(&p.mfb, &enhanced, &a, c.pool_window);
    let mut h1 = vec![0.0; c.hidden];
    let mut h2 = vec![0.0; c.decoder_hidden];
    let mut prev = ivqa_core::text::START;
    let mut out = Vec::new();
    for &tok in gold {
        let m = embed(&p.embedding, prev);
        h1 = encoder(&p.encoder_gru, &m, &h2, att0.as_deref(), &h1, &a);
        let (_, ctx) = dynamic(&p.dynamic_attention, &z, &visual, &h1);
        h2 = decoder(&p.decoder_gru, &ctx, &h1, &h2);
        out.push(output(&p.output, &h2));
        prev = tok;
    }
    out
}

/// A model with every parameter, biases included, drawn uniformly from
/// `±scale`.
pub fn random_model(cfg: &ModelConfig, seed: u64, scale: f64) -> Model<f64> {
    let mut model = Model::<f64>::init(cfg.clone(), seed, None, scale).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for (_, t) in model.params.entries_mut() {
        for x in t.values_mut() {
            *x = rng.gen_range(-scale..scale);
        }
    }
    model
}

pub fn random_inputs(cfg: &ModelConfig, seed: u64) -> ImageInputs<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = |r: usize, c: usize| Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    ImageInputs::new(m(cfg.k, cfg.d_v), m(cfg.k, cfg.semantic_dim())).unwrap()
}

pub fn random_vector(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Random token ids excluding the reserved ones.
pub fn random_tokens(rng: &mut impl Rng, n: usize, vocab: usize) -> Vec<usize> {
    (0..n).map(|_| rng.gen_range(ivqa_core::text::UNK + 1..vocab)).collect()
}

pub fn cast_inputs<F: Real>(inputs: &ImageInputs<f64>) -> ImageInputs<F> {
    ImageInputs::new(inputs.visual.cast(), inputs.semantic.cast()).unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Small configurations with distinct sizes so transposition mistakes
/// cannot hide behind square matrices.
pub fn small_configs() -> Vec<ModelConfig> {
    let tiny = ModelConfig::tiny();
    vec![
        tiny.clone(),
        ModelConfig {
            hidden: 4,
            decoder_hidden: 4,
            att_hidden: 5,
            d_v: 4,
            d_e: 3,
            k: 3,
            pool_window: 2,
            fused_expansion: 10,
            vocab_size: 11,
            ..tiny.clone()
        },
        ModelConfig { k: 1, ..tiny },
    ]
}

fn round<F: Real>(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| F::lit(x).as_f64()).collect()
}

fn konst<F: Real>(t: &mut Tape<'_, F>, shape: Vec<usize>, v: &[f64]) -> Var {
    t.constant(shape, v.iter().map(|&x| F::lit(x)).collect()).unwrap()
}

fn value<F: Real>(t: &Tape<'_, F>, v: Var) -> Vec<f64> {
    t.value(v).iter().map(|x| x.as_f64()).collect()
}

/// Worst absolute difference between each model equation, run on the tape
/// in precision `F`, and its straight-line re-implementation. One random
/// instance per `seed`.
pub fn equation_errors<F: Real>(seed: u64) -> Vec<(&'static str, f64)> {
    let configs = small_configs();
    let cfg = &configs[seed as usize % configs.len()];
    let model: Model<F> = random_model(cfg, seed, 0.6).cast();
    let inputs: ImageInputs<F> = cast_inputs(&random_inputs(cfg, seed + 1000));
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 2000);
    let p = &model.params;
    let (k, h) = (cfg.k, cfg.hidden);
    let a = round::<F>(&random_vector(&mut rng, h));
    let word = round::<F>(&random_vector(&mut rng, cfg.d_e));
    let h1 = round::<F>(&random_vector(&mut rng, h));
    let h2 = round::<F>(&random_vector(&mut rng, cfg.decoder_hidden));
    let att0 = round::<F>(&random_vector(&mut rng, cfg.guide_dim()));
    let ctx = round::<F>(&random_vector(&mut rng, cfg.d_v));
    let fused: Vec<f64> = round::<F>(&random_vector(&mut rng, k * cfg.fused_dim()));
    let visual = rows(&inputs.visual);
    let semantic = rows(&inputs.semantic);
    let enhanced = rows(&inputs.enhanced);

    let mut t = Tape::<F>::new();
    let pv = model.bind(&mut t);
    let va = konst(&mut t, vec![h], &a);
    let vv = t.leaf(&inputs.visual);
    let vs = t.leaf(&inputs.semantic);
    let ve = t.leaf(&inputs.enhanced);
    let vword = konst(&mut t, vec![cfg.d_e], &word);
    let vh1 = konst(&mut t, vec![h], &h1);
    let vh2 = konst(&mut t, vec![cfg.decoder_hidden], &h2);
    let vatt0 = konst(&mut t, vec![cfg.guide_dim()], &att0);
    let vctx = konst(&mut t, vec![cfg.d_v], &ctx);
    let vfused = konst(&mut t, vec![k, cfg.fused_dim()], &fused);
    let fused_rows: Mat = fused.chunks(cfg.fused_dim()).map(<[f64]>::to_vec).collect();

    let mut out = Vec::new();
    let attended = |t: &Tape<'_, F>, got: Attended, want: (Vec<f64>, Vec<f64>)| {
        max_abs_diff(&value(t, got.weights), &want.0).max(max_abs_diff(&value(t, got.context), &want.1))
    };

    let vp = pv.visual_attention.as_ref().unwrap();
    let got = layers::visual_attention(&mut t, vp, vv, va).unwrap();
    out.push((
        "visual_attention",
        attended(&t, got, guide(p.visual_attention.as_ref().unwrap(), &visual, &a)),
    ));

    let sp = pv.semantic_attention.as_ref().unwrap();
    let got = layers::semantic_attention(&mut t, sp, vs, va).unwrap();
    out.push((
        "semantic_attention",
        attended(&t, got, guide(p.semantic_attention.as_ref().unwrap(), &semantic, &a)),
    ));

    let got = layers::mfb_fuse(&mut t, &pv.mfb, ve, va, cfg.pool_window).unwrap();
    let want: Vec<f64> = mfb(&p.mfb, &enhanced, &a, cfg.pool_window).concat();
    out.push(("mfb_fuse", max_abs_diff(&value(&t, got), &want)));

    let got = layers::encoder_step(&mut t, &pv.encoder_gru, vword, vh2, Some(vatt0), vh1, va).unwrap();
    let want = encoder(&p.encoder_gru, &word, &h2, Some(&att0), &h1, &a);
    out.push(("encoder_step", max_abs_diff(&value(&t, got), &want)));

    let got = layers::dynamic_attention(&mut t, &pv.dynamic_attention, vfused, vv, vh1).unwrap();
    out.push((
        "dynamic_attention",
        attended(&t, got, dynamic(&p.dynamic_attention, &fused_rows, &visual, &h1)),
    ));

    let got = layers::decoder_step(&mut t, &pv.decoder_gru, vctx, vh1, vh2).unwrap();
    let want = decoder(&p.decoder_gru, &ctx, &h1, &h2);
    out.push(("decoder_step", max_abs_diff(&value(&t, got), &want)));

    let got = layers::output_distribution(&mut t, &pv.output, vh2).unwrap();
    let want = output(&p.output, &h2);
    out.push(("output_distribution", max_abs_diff(&value(&t, got), &want)));
    out
}

/// Worst error per equation over `n` random instances.
pub fn worst_equation_errors<F: Real>(n: u64) -> Vec<(&'static str, f64)> {
    let mut worst: Vec<(&'static str, f64)> = Vec::new();
    for seed in 0..n {
        for (name, e) in equation_errors::<F>(seed) {
            match worst.iter_mut().find(|(w, _)| *w == name) {
                Some((_, m)) => *m = m.max(e),
                None => worst.push((name, e)),
            }
        }
    }
    worst
}

pub struct Overfit {
    pub log: Vec<ivqa_core::training::EpochLog>,
    pub exact: usize,
    pub total: usize,
    pub vocab_size: usize,
    pub model: Model<f32>,
}

/// Trains the desk network on the default 8-instance synthetic set with a
/// constant learning rate and greedily decodes every instance afterwards.
/// The synthetic desk corpus (seed 42, 8 images) and a matching network.
pub struct Desk {
    pub vocab: ivqa_core::text::Vocabulary,
    pub corpus: ivqa_core::training::Corpus<f32>,
    pub cfg: ModelConfig,
    pub seed: u64,
}

pub fn desk(ablate: bool) -> Desk {
    use ivqa_core::text::synth::{synth_dataset, SynthSpec};
    use ivqa_core::text::{build_vocabulary, EmbeddingTable, ANSWER_LEN, QUESTION_LEN};
    use ivqa_core::training::Corpus;

    let spec = SynthSpec::default();
    let data = synth_dataset(&spec).unwrap();
    let (vocab, kept) = build_vocabulary(&data.dataset, 3000).unwrap();
    let mut cfg = ModelConfig::desk(vocab.len(), spec.k, spec.d_v);
    cfg.ablate_semantic = ablate;
    let emb = EmbeddingTable::random(&vocab, cfg.d_e, spec.seed);
    let feats = data.features.iter().map(|f| (f.image_id.clone(), f.clone())).collect();
    let corpus = Corpus::build(&kept, &feats, &vocab, &emb, QUESTION_LEN, ANSWER_LEN).unwrap();
    Desk {
        vocab,
        corpus,
        cfg,
        seed: spec.seed,
    }
}

impl Desk {
    pub fn init(&self) -> Model<f32> {
        let emb = ivqa_core::text::EmbeddingTable::random(&self.vocab, self.cfg.d_e, self.seed);
        Model::init(self.cfg.clone(), self.seed, Some(&emb), ivqa_core::model::INIT_SCALE).unwrap()
    }
}

pub fn overfit(epochs: usize, lr: f64, ablate: bool) -> Overfit {
    use ivqa_core::inference::greedy_decode;
    use ivqa_core::text::QUESTION_LEN;
    use ivqa_core::training::{train, TrainConfig};

    let d = desk(ablate);
    let model = d.init();
    let Desk { vocab, corpus, seed, .. } = &d;
    let tc = TrainConfig {
        epochs,
        seed: *seed,
        ..TrainConfig::desk().constant_lr(lr)
    };
    let out = train(model, corpus, &tc, |_| {}).unwrap();
    let opts = DecodeOptions::for_vocab(vocab, QUESTION_LEN);
    let exact = corpus
        .examples
        .iter()
        .filter(|ex| {
            let r = greedy_decode(&out.model, corpus.inputs(ex), &ex.instance.answer_ids, &opts).unwrap();
            r.tokens == ex.instance.gold()
        })
        .count();
    Overfit {
        log: out.log,
        exact,
        total: corpus.len(),
        vocab_size: vocab.len(),
        model: out.model,
    }
}

/// A random tiny model with `vocab` words, an input and an answer.
pub fn draw(vocab: usize, seed: u64) -> (Model<f64>, ImageInputs<f64>, Vec<usize>) {
    let cfg = ModelConfig {
        vocab_size: vocab,
        ..ModelConfig::tiny()
    };
    let model = random_model(&cfg, seed, 1.5);
    let inputs = random_inputs(&cfg, seed + 500);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let answer = random_tokens(&mut rng, 3, vocab);
    (model, inputs, answer)
}

/// Every sequence the decoder could emit: selectable tokens, ending at the
/// stop token or at `max_len`.
pub fn all_sequences(opts: &DecodeOptions, vocab: usize) -> Vec<Vec<usize>> {
    let tokens: Vec<usize> = (0..vocab).filter(|&t| opts.selectable(t)).collect();
    let mut done = Vec::new();
    let mut frontier = vec![Vec::new()];
    while let Some(prefix) = frontier.pop() {
        for &t in &tokens {
            let mut s = prefix.clone();
            s.push(t);
            if Some(t) == opts.stop_token || s.len() == opts.max_len {
                done.push(s);
            } else {
                frontier.push(s);
            }
        }
    }
    done
}
