//! Flat `key = value` run configuration.
//!
//! A preset supplies every value, a config file may override any of them,
//! and command-line flags override the file. Unknown keys are rejected.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use clap::ValueEnum;
use ivqa_core::model::{ModelConfig, INIT_SCALE};
use ivqa_core::tensor::Precision;
use ivqa_core::text::{ANSWER_LEN, QUESTION_LEN};
use ivqa_core::training::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Small network and batches for CPU runs on synthetic data.
    Desk,
    /// Published hyperparameters.
    Full,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub hidden: usize,
    pub att_hidden: usize,
    pub d_e: usize,
    /// Region count and visual size. `None` takes them from the features.
    pub k: Option<usize>,
    pub d_v: Option<usize>,
    pub pool_window: usize,
    pub fused_expansion: usize,
    pub max_question_len: usize,
    pub answer_len: usize,
    pub ablate_semantic: bool,
    pub init_scale: f64,
    pub precision: Precision,
    pub train: TrainConfig,
    pub data: Option<PathBuf>,
    pub features: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub emb: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

const KEYS: &[&str] = &[
    "hidden",
    "att_hidden",
    "d_e",
    "k",
    "d_v",
    "pool_window",
    "fused_expansion",
    "max_question_len",
    "answer_len",
    "ablate_semantic",
    "init_scale",
    "precision",
    "batch_size",
    "epochs",
    "lr_initial",
    "lr_after",
    "lr_drop_epoch",
    "seed",
    "workers",
    "grad_clip",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "data",
    "features",
    "vocab",
    "emb",
    "out",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| anyhow::anyhow!("{key}: cannot parse {value:?}: {e}"))
}

fn auto<T: FromStr>(key: &str, value: &str) -> Result<Option<T>>
where
    T::Err: std::fmt::Display,
{
    if value == "auto" || value == "none" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

/// An empty value clears a path.
fn path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| value.into())
}

fn show<T: ToString>(v: &Option<T>, none: &str) -> String {
    v.as_ref().map_or_else(|| none.to_string(), T::to_string)
}

fn show_path(v: &Option<PathBuf>) -> String {
    v.as_ref().map_or_else(String::new, |p| p.display().to_string())
}

impl RunConfig {
    pub fn preset(p: Preset) -> Self {
        let (model, k, d_v, train) = match p {
            Preset::Desk => (ModelConfig::desk(0, 0, 0), None, None, TrainConfig::desk()),
            Preset::Full => {
                let m = ModelConfig::full_scale(0);
                (m.clone(), Some(m.k), Some(m.d_v), TrainConfig::full_scale())
            }
        };
        Self {
            hidden: model.hidden,
            att_hidden: model.att_hidden,
            d_e: model.d_e,
            k,
            d_v,
            pool_window: model.pool_window,
            fused_expansion: model.fused_expansion,
            max_question_len: QUESTION_LEN,
            answer_len: ANSWER_LEN,
            ablate_semantic: false,
            init_scale: INIT_SCALE,
            precision: Precision::F32,
            train,
            data: None,
            features: None,
            vocab: None,
            emb: None,
            out: None,
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let t = &mut self.train;
        match key {
            "hidden" => self.hidden = parse(key, value)?,
            "att_hidden" => self.att_hidden = parse(key, value)?,
            "d_e" => self.d_e = parse(key, value)?,
            "k" => self.k = auto(key, value)?,
            "d_v" => self.d_v = auto(key, value)?,
            "pool_window" => self.pool_window = parse(key, value)?,
            "fused_expansion" => self.fused_expansion = parse(key, value)?,
            "max_question_len" => self.max_question_len = parse(key, value)?,
            "answer_len" => self.answer_len = parse(key, value)?,
            "ablate_semantic" => self.ablate_semantic = parse(key, value)?,
            "init_scale" => self.init_scale = parse(key, value)?,
            "precision" => {
                self.precision = match value {
                    "f32" => Precision::F32,
                    "f64" => Precision::F64,
                    _ => bail!("precision: expected f32 or f64, got {value:?}"),
                }
            }
            "batch_size" => t.batch_size = parse(key, value)?,
            "epochs" => t.epochs = parse(key, value)?,
            "lr_initial" => t.lr_initial = parse(key, value)?,
            "lr_after" => t.lr_after = parse(key, value)?,
            "lr_drop_epoch" => t.lr_drop_epoch = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "workers" => t.workers = parse(key, value)?,
            "grad_clip" => t.grad_clip = auto(key, value)?,
            "adam_beta1" => t.adam.beta1 = parse(key, value)?,
            "adam_beta2" => t.adam.beta2 = parse(key, value)?,
            "adam_eps" => t.adam.eps = parse(key, value)?,
            "data" => self.data = path(value),
            "features" => self.features = path(value),
            "vocab" => self.vocab = path(value),
            "emb" => self.emb = path(value),
            "out" => self.out = path(value),
            _ => bail!("unknown config key {key:?} (known keys: {})", KEYS.join(", ")),
        }
        Ok(())
    }

    /// Applies `key = value` lines. `#` starts a comment; blank lines are
    /// skipped. A key may appear once per file.
    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let ctx = || format!("{}:{}", origin.display(), i + 1);
            let (key, value) = line
                .split_once('=')
                .with_context(|| format!("{}: expected key = value", ctx()))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                bail!("{}: duplicate key {key:?}", ctx());
            }
            self.set(key, value).with_context(ctx)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        self.apply_text(&text, path)
    }

    /// Applies `key=value` overrides given on the command line.
    pub fn apply_overrides(&mut self, pairs: &[String]) -> Result<()> {
        for p in pairs {
            let (key, value) = p
                .split_once('=')
                .with_context(|| format!("--set expects key=value, got {p:?}"))?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    /// Every key with its resolved value, one `key = value` per line. The
    /// output parses back to the same configuration.
    pub fn render(&self) -> String {
        let t = &self.train;
        let precision = match self.precision {
            Precision::F64 => "f64",
            _ => "f32",
        };
        let values: Vec<(&str, String)> = vec![
            ("hidden", self.hidden.to_string()),
            ("att_hidden", self.att_hidden.to_string()),
            ("d_e", self.d_e.to_string()),
            ("k", show(&self.k, "auto")),
            ("d_v", show(&self.d_v, "auto")),
            ("pool_window", self.pool_window.to_string()),
            ("fused_expansion", self.fused_expansion.to_string()),
            ("max_question_len", self.max_question_len.to_string()),
            ("answer_len", self.answer_len.to_string()),
            ("ablate_semantic", self.ablate_semantic.to_string()),
            ("init_scale", self.init_scale.to_string()),
            ("precision", precision.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("epochs", t.epochs.to_string()),
            ("lr_initial", t.lr_initial.to_string()),
            ("lr_after", t.lr_after.to_string()),
            ("lr_drop_epoch", t.lr_drop_epoch.to_string()),
            ("seed", t.seed.to_string()),
            ("workers", t.workers.to_string()),
            ("grad_clip", show(&t.grad_clip, "none")),
            ("adam_beta1", t.adam.beta1.to_string()),
            ("adam_beta2", t.adam.beta2.to_string()),
            ("adam_eps", t.adam.eps.to_string()),
            ("data", show_path(&self.data)),
            ("features", show_path(&self.features)),
            ("vocab", show_path(&self.vocab)),
            ("emb", show_path(&self.emb)),
            ("out", show_path(&self.out)),
        ];
        debug_assert_eq!(values.len(), KEYS.len());
        let mut s = String::new();
        for (k, v) in values {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Network dimensions for the data actually loaded. Explicit `k`/`d_v`
    /// must agree with the features.
    pub fn model_config(&self, vocab_size: usize, k: usize, d_v: usize) -> Result<ModelConfig> {
        for (name, want, got) in [("k", self.k, k), ("d_v", self.d_v, d_v)] {
            if let Some(w) = want.filter(|&w| w != got) {
                bail!("config sets {name} = {w} but the features have {name} = {got}");
            }
        }
        let cfg = ModelConfig {
            hidden: self.hidden,
            att_hidden: self.att_hidden,
            decoder_hidden: self.hidden,
            d_v,
            d_e: self.d_e,
            k,
            pool_window: self.pool_window,
            fused_expansion: self.fused_expansion,
            vocab_size,
            max_question_len: self.max_question_len,
            answer_len: self.answer_len,
            ablate_semantic: self.ablate_semantic,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks everything that does not depend on the data.
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if !(self.init_scale.is_finite() && self.init_scale > 0.0) {
            bail!("init_scale must be positive");
        }
        self.model_config(8, self.k.unwrap_or(1), self.d_v.unwrap_or(1))?;
        Ok(())
    }

    /// Starting point for `gradcheck`: the tiny network in 64-bit mode.
    pub fn tiny() -> Self {
        let m = ModelConfig::tiny();
        Self {
            hidden: m.hidden,
            att_hidden: m.att_hidden,
            d_e: m.d_e,
            k: Some(m.k),
            d_v: Some(m.d_v),
            pool_window: m.pool_window,
            fused_expansion: m.fused_expansion,
            precision: Precision::F64,
            ..Self::preset(Preset::Desk)
        }
    }
}
