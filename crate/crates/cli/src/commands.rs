use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use ivqa_core::features::{load_features, ImageInputs, RegionalFeatureSet};
use ivqa_core::inference::{
    beam_decode, greedy_decode, write_jsonl, DecodeOptions, GenerationRecord, GenerationResult, TraceRecord,
};
use ivqa_core::metrics::evaluate_corpus;
use ivqa_core::model::Model;
use ivqa_core::tensor::{BackwardFault, Precision, Real};
use ivqa_core::text::synth::{synth_dataset, write_synth, SynthSpec};
use ivqa_core::text::{
    build_vocabulary, encode_sequence, load_dataset, load_embeddings, tokenize, write_dataset, EmbeddingTable, Vocabulary,
};
use ivqa_core::training::{
    gradcheck_model, load_checkpoint, save_checkpoint, train as run_training, write_loss_log, Checkpoint, CheckpointMeta, Corpus,
    GRADCHECK_TOLERANCE,
};
use rayon::prelude::*;
use serde::Deserialize;

use crate::config::RunConfig;
use crate::{BuildVocabArgs, EvaluateArgs, Failure, GenerateArgs, GradcheckArgs, SynthArgs, TrainArgs};

pub const VOCAB_FILE: &str = "vocab.txt";
pub const FILTERED_FILE: &str = "dataset.filtered.jsonl";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LOSS_FILE: &str = "loss.csv";

type CmdResult = std::result::Result<(), Failure>;

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

pub fn build_vocab(a: &BuildVocabArgs) -> CmdResult {
    let data = load_dataset(&a.data)?;
    let (vocab, kept) = build_vocabulary(&data, a.answer_top)?;
    create_dir(&a.out)?;
    vocab.save(&a.out.join(VOCAB_FILE))?;
    write_dataset(&a.out.join(FILTERED_FILE), &kept)?;
    println!(
        "kept {} of {} instances, vocabulary of {} tokens",
        kept.len(),
        data.len(),
        vocab.len()
    );
    Ok(())
}

pub fn synth(a: &SynthArgs) -> CmdResult {
    let spec = SynthSpec {
        seed: a.seed,
        n_images: a.images,
        k: a.k,
        d_v: a.dv,
        qa_per_image: a.qa_per_image,
        ..SynthSpec::default()
    };
    let data = synth_dataset(&spec)?;
    write_synth(&a.out_dir, &data)?;
    println!(
        "wrote {} images and {} instances to {}",
        data.features.len(),
        data.dataset.len(),
        a.out_dir.display()
    );
    Ok(())
}

fn resolve_config(a: &TrainArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::preset(a.preset);
    if let Some(path) = &a.config {
        cfg.apply_file(path)?;
    }
    let paths = [
        (&a.data, &mut cfg.data),
        (&a.features, &mut cfg.features),
        (&a.vocab, &mut cfg.vocab),
        (&a.emb, &mut cfg.emb),
        (&a.out, &mut cfg.out),
    ];
    for (flag, slot) in paths {
        if flag.is_some() {
            slot.clone_from(flag);
        }
    }
    if a.ablate {
        cfg.ablate_semantic = true;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(lr) = a.lr {
        cfg.train = cfg.train.clone().constant_lr(lr);
    }
    if let Some(b) = a.batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(w) = a.workers {
        cfg.train.workers = w;
    }
    cfg.apply_overrides(&a.set)?;
    Ok(cfg)
}

fn required<'c>(value: &'c Option<PathBuf>, key: &str) -> Result<&'c Path> {
    value
        .as_deref()
        .ok_or_else(|| anyhow!("{key} is required (set --{key} or `{key} = ...` in the config file)"))
}

fn embedding_table(path: Option<&Path>, vocab: &Vocabulary, dim: usize, seed: u64) -> Result<EmbeddingTable> {
    Ok(match path {
        Some(p) => load_embeddings(p, vocab, dim, seed)?,
        None => EmbeddingTable::random(vocab, dim, seed),
    })
}

pub fn train(a: &TrainArgs) -> CmdResult {
    let cfg = resolve_config(a)?;
    if a.print_config {
        print!("{}", cfg.render());
        return Ok(());
    }
    cfg.validate()?;
    match cfg.precision {
        Precision::F64 => train_with::<f64>(&cfg),
        _ => train_with::<f32>(&cfg),
    }
}

fn train_with<F: Real>(cfg: &RunConfig) -> CmdResult {
    let features = load_features(required(&cfg.features, "features")?)?;
    let data = load_dataset(required(&cfg.data, "data")?)?;
    let vocab = Vocabulary::load(required(&cfg.vocab, "vocab")?)?;
    let out = required(&cfg.out, "out")?;
    let seed = cfg.train.seed;
    let emb = embedding_table(cfg.emb.as_deref(), &vocab, cfg.d_e, seed)?;
    let corpus = Corpus::<F>::build(&data, &features, &vocab, &emb, cfg.max_question_len, cfg.answer_len)?;
    let (k, d_v) = corpus.dims();
    let model_cfg = cfg.model_config(vocab.len(), k, d_v)?;
    let model = Model::<F>::init(model_cfg, seed, Some(&emb), cfg.init_scale)?;
    create_dir(out)?;

    println!(
        "training on {} instances, {} images, vocabulary {}, {} parameters",
        corpus.len(),
        corpus.images.len(),
        vocab.len(),
        model.params.count()
    );
    let outcome = run_training(model, &corpus, &cfg.train, |e| {
        println!("epoch {:>3}  lr {:.3e}  loss {:.6}", e.epoch, e.lr, e.mean_loss);
    })?;

    let meta = CheckpointMeta {
        model: outcome.model.config.clone(),
        seed,
        vocab: vocab.tokens().to_vec(),
        embeddings: cfg.emb.clone(),
        train: Some(cfg.train.clone()),
        adam_step: None,
        epochs_completed: outcome.log.len(),
    };
    let ckpt = Checkpoint::new(meta, &outcome.model, Some(&outcome.adam));
    save_checkpoint(&out.join(CHECKPOINT_FILE), &ckpt)?;
    write_loss_log(&out.join(LOSS_FILE), &outcome.log, cfg.train.grad_clip)?;
    println!("wrote {}", out.display());
    Ok(())
}

#[derive(Debug, Deserialize)]
struct GenerateInput {
    image_id: String,
    answer: String,
}

fn read_inputs(path: &Path) -> Result<Vec<GenerateInput>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(line).with_context(|| format!("{}:{}", path.display(), i + 1))?;
        out.push(rec);
    }
    if out.is_empty() {
        bail!("{} has no inputs", path.display());
    }
    Ok(out)
}

/// Rebuilds the label embeddings the checkpoint was trained with.
fn checkpoint_embeddings(ckpt: &Checkpoint, vocab: &Vocabulary) -> Result<EmbeddingTable> {
    let meta = &ckpt.meta;
    embedding_table(meta.embeddings.as_deref(), vocab, meta.model.d_e, meta.seed)
        .context("rebuilding the checkpoint's label embeddings")
}

pub fn generate(a: &GenerateArgs) -> CmdResult {
    if a.beam == 0 || a.top == 0 || a.top > a.beam {
        return Err(anyhow!("need 1 <= --top <= --beam, got --top {} --beam {}", a.top, a.beam).into());
    }
    if a.workers == 0 {
        return Err(anyhow!("--workers must be positive").into());
    }
    let ckpt = load_checkpoint(&a.ckpt)?;
    let vocab = Vocabulary::from_tokens(ckpt.meta.vocab.clone())?;
    let emb = checkpoint_embeddings(&ckpt, &vocab)?;
    let model: Model<f32> = ckpt.model()?;
    let features = load_features(&a.features)?;
    let inputs = read_inputs(&a.input)?;
    let images = image_inputs(&model, &features, &emb, &inputs)?;
    let opts = DecodeOptions::for_vocab(&vocab, a.max_len.unwrap_or(model.config.max_question_len));

    let decode = |inp: &GenerateInput| -> ivqa_core::Result<Vec<GenerationResult>> {
        let (answer, _) = encode_sequence(&tokenize(&inp.answer), model.config.answer_len, &vocab);
        let image = &images[inp.image_id.as_str()];
        if a.beam == 1 {
            greedy_decode(&model, image, &answer, &opts).map(|r| vec![r])
        } else {
            beam_decode(&model, image, &answer, &opts, a.beam, a.top)
        }
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(a.workers)
        .build()
        .map_err(|e| anyhow!("cannot start {} workers: {e}", a.workers))?;
    let results: Vec<Vec<GenerationResult>> = pool.install(|| inputs.par_iter().map(decode).collect::<ivqa_core::Result<_>>())?;

    let mut records = Vec::new();
    let mut trace = Vec::new();
    for (inp, hyps) in inputs.iter().zip(&results) {
        for h in hyps {
            records.push(GenerationRecord {
                image_id: inp.image_id.clone(),
                answer: inp.answer.clone(),
                question: vocab.decode(&h.tokens).join(" "),
                logprob: h.logprob,
            });
        }
        if let Some(best) = hyps.first() {
            trace.extend(TraceRecord::from_trace(&inp.image_id, &best.trace, &vocab));
        }
    }
    write_jsonl(&a.out, &records)?;
    if let Some(path) = &a.trace {
        write_jsonl(path, &trace)?;
    }
    println!("wrote {} questions for {} inputs", records.len(), inputs.len());
    Ok(())
}

/// Inputs for every image the requests mention, checked against the model.
fn image_inputs<'f>(
    model: &Model<f32>,
    features: &'f BTreeMap<String, RegionalFeatureSet>,
    emb: &EmbeddingTable,
    requests: &[GenerateInput],
) -> Result<BTreeMap<&'f str, ImageInputs<f32>>> {
    let mut out = BTreeMap::new();
    for r in requests {
        let (id, set) = features
            .get_key_value(&r.image_id)
            .ok_or_else(|| anyhow!("no features for image {:?}", r.image_id))?;
        if out.contains_key(id.as_str()) {
            continue;
        }
        let inputs = ImageInputs::from_sets(set, emb)?;
        model
            .check_inputs(&inputs)
            .with_context(|| format!("features of image {id:?} do not fit the checkpoint"))?;
        out.insert(id.as_str(), inputs);
    }
    Ok(out)
}

pub fn evaluate(a: &EvaluateArgs) -> CmdResult {
    let report = evaluate_corpus(&a.generated, &a.gold)?;
    let json = serde_json::to_string_pretty(&report).map_err(anyhow::Error::from)?;
    if let Some(path) = &a.out {
        fs::write(path, format!("{json}\n")).with_context(|| format!("writing {}", path.display()))?;
    }
    println!("{json}");
    Ok(())
}

pub fn gradcheck(a: &GradcheckArgs) -> CmdResult {
    let mut cfg = RunConfig::tiny();
    if let Some(path) = &a.config {
        cfg.apply_file(path)?;
    }
    let fault = a
        .inject_fault
        .as_deref()
        .map(str::parse::<BackwardFault>)
        .transpose()
        .map_err(|e| anyhow!(e))?;
    let tiny = ivqa_core::ModelConfig::tiny();
    let model_cfg = cfg.model_config(tiny.vocab_size, cfg.k.unwrap_or(tiny.k), cfg.d_v.unwrap_or(tiny.d_v))?;
    let report = gradcheck_model(&model_cfg, a.seed, fault)?;
    for (group, err) in &report.groups {
        println!("{group:<24} {err:.3e}");
    }
    let verdict = if report.passed() { "PASS" } else { "FAIL" };
    println!(
        "max relative error {:.3e} over {} coordinates (tolerance {:.0e}): {verdict}",
        report.max_error(),
        report.coordinates,
        GRADCHECK_TOLERANCE
    );
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::Verification(anyhow!("gradient check failed")))
    }
}
