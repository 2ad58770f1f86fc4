//! Sequence loss, Adam, the epoch loop, checkpoints, and the full-model
//! gradient check.

mod adam;
mod checkpoint;
mod corpus;
mod gradcheck;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use corpus::{Corpus, Example};
pub use gradcheck::{gradcheck_model, GradCheckReport, GRADCHECK_STEP, GRADCHECK_TOLERANCE};

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::ImageInputs;
use crate::model::Model;
use crate::rng;
use crate::tensor::{BackwardFault, Real, Tape, Tensor, TensorError, Var};

/// Probabilities are clamped to this before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_initial: f64,
    pub lr_after: f64,
    /// Last epoch (1-based, inclusive) trained at `lr_initial`.
    pub lr_drop_epoch: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Global-norm gradient clipping threshold. Off when `None`.
    pub grad_clip: Option<f64>,
    /// Threads used to evaluate instances of a batch. Results do not depend
    /// on this value.
    pub workers: usize,
}

impl TrainConfig {
    /// Desk-scale defaults: small batches, otherwise the full schedule.
    pub fn desk() -> Self {
        Self {
            batch_size: 8,
            ..Self::full_scale()
        }
    }

    pub fn full_scale() -> Self {
        Self {
            batch_size: 1000,
            epochs: 14,
            lr_initial: 9.9e-4,
            lr_after: 9.9e-5,
            lr_drop_epoch: 5,
            seed: 42,
            adam: AdamConfig::default(),
            grad_clip: None,
            workers: 1,
        }
    }

    /// A single constant learning rate for every epoch.
    pub fn constant_lr(mut self, lr: f64) -> Self {
        self.lr_initial = lr;
        self.lr_after = lr;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 || self.workers == 0 {
            return Err(Error::Config("batch_size, epochs and workers must be positive".into()));
        }
        let lrs = [self.lr_initial, self.lr_after];
        if lrs.iter().any(|lr| !(lr.is_finite() && *lr > 0.0)) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.lr_drop_epoch >= self.epochs && self.lr_initial != self.lr_after {
            return Err(Error::Config(format!(
                "lr_drop_epoch ({}) must be below epochs ({})",
                self.lr_drop_epoch, self.epochs
            )));
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || a.eps <= 0.0 {
            return Err(Error::Config("adam needs betas in [0, 1) and a positive eps".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::Config("grad_clip must be positive".into()));
            }
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// `lr_initial` up to and including `lr_drop_epoch`, `lr_after` afterwards.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    if epoch <= cfg.lr_drop_epoch {
        cfg.lr_initial
    } else {
        cfg.lr_after
    }
}

/// `−(1/T) Σ_t ln max(p_t[gold_t], 1e-12)`.
pub fn sequence_loss<F: Real>(distributions: &[Vec<F>], gold: &[usize]) -> Result<f64> {
    Ok(sequence_loss_exact(distributions, gold)?.as_f64())
}

/// [`sequence_loss`] evaluated in the precision of `F`.
pub fn sequence_loss_exact<F: Real>(distributions: &[Vec<F>], gold: &[usize]) -> Result<F> {
    if distributions.len() != gold.len() {
        return Err(Error::Dimension(format!(
            "{} distributions for {} gold tokens",
            distributions.len(),
            gold.len()
        )));
    }
    if gold.is_empty() {
        return Err(Error::Empty("gold sequence"));
    }
    let floor = F::lit(PROB_FLOOR);
    let mut total = F::zero();
    for (p, &g) in distributions.iter().zip(gold) {
        let pg = *p.get(g).ok_or(Error::InvalidToken { id: g, size: p.len() })?;
        total += pg.larger(floor).ln();
    }
    Ok(-total / F::lit(gold.len() as f64))
}

/// The same loss recorded on a tape.
pub fn sequence_loss_var<F: Real>(tape: &mut Tape<'_, F>, distributions: &[Var], gold: &[usize]) -> Result<Var> {
    if distributions.len() != gold.len() {
        return Err(Error::Dimension(format!(
            "{} distributions for {} gold tokens",
            distributions.len(),
            gold.len()
        )));
    }
    if gold.is_empty() {
        return Err(Error::Empty("gold sequence"));
    }
    let mut logs = Vec::with_capacity(gold.len());
    for (&p, &g) in distributions.iter().zip(gold) {
        let pg = tape.pick(p, g)?;
        logs.push(tape.ln_clamped(pg, PROB_FLOOR)?);
    }
    let joined = tape.concat(&logs)?;
    let total = tape.sum(joined)?;
    Ok(tape.scale(total, -1.0 / gold.len() as f64)?)
}

/// Loss of one instance and its gradient for every parameter tensor, in
/// canonical parameter order.
pub fn instance_gradient<F: Real>(
    model: &Model<F>,
    inputs: &ImageInputs<F>,
    answer_ids: &[usize],
    gold: &[usize],
    fault: Option<BackwardFault>,
) -> Result<(f64, Vec<Vec<F>>)> {
    let mut tape = Tape::new().with_fault(fault);
    let tf = model.teacher_forced(&mut tape, inputs, answer_ids, gold)?;
    let probs: Vec<Var> = tf.steps.iter().map(|s| s.probs).collect();
    let loss = sequence_loss_var(&mut tape, &probs, gold)?;
    let value = tape.value(loss)[0].as_f64();
    let grads = tape.backward(loss)?;
    let out = tf
        .params
        .entries()
        .into_iter()
        .zip(model.params.entries())
        .map(|((_, &v), (_, t))| grads.get(v).map_or_else(|| vec![F::zero(); t.len()], <[F]>::to_vec))
        .collect();
    Ok((value, out))
}

/// Loss of one instance without recording gradients.
pub fn instance_loss<F: Real>(model: &Model<F>, inputs: &ImageInputs<F>, answer_ids: &[usize], gold: &[usize]) -> Result<f64> {
    let out = model.forward_teacher_forced(inputs, answer_ids, gold)?;
    sequence_loss(&out.distributions, gold)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<F> {
    pub model: Model<F>,
    pub adam: AdamState<F>,
    pub log: Vec<EpochLog>,
}

fn global_norm<F: Real>(grads: &[Vec<F>]) -> f64 {
    grads
        .iter()
        .flatten()
        .map(|g| {
            let g = g.as_f64();
            g * g
        })
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` so their global L2 norm is at most `threshold`.
/// Returns the norm before clipping.
pub fn clip_global_norm<F: Real>(grads: &mut [Vec<F>], threshold: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > threshold {
        let k = F::lit(threshold / norm);
        grads.iter_mut().flatten().for_each(|g| *g *= k);
    }
    norm
}

fn as_nonfinite(e: Error, epoch: usize, image_id: &str) -> Error {
    match e {
        Error::Tensor(TensorError::NonFinite { .. }) => Error::NonFiniteLoss {
            epoch,
            image_id: image_id.to_string(),
        },
        other => other,
    }
}

/// Runs the epoch loop: seeded shuffle, teacher-forced forward and backward
/// per instance, batch-mean gradient, one Adam step per batch.
///
/// Instance gradients are summed in batch order whatever the worker count,
/// so results are bitwise reproducible.
pub fn train<F: Real>(
    model: Model<F>,
    corpus: &Corpus<F>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome<F>> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::Empty("training corpus"));
    }
    for img in &corpus.images {
        model.check_inputs(img)?;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {} workers: {e}", cfg.workers)))?;

    let mut model = model;
    let mut adam = AdamState::new(model.params.entries().into_iter().map(|(_, t)| t.shape()));
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut shuffle = rng::stream(cfg.seed, rng::STREAM_SHUFFLE);
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let lr = lr_schedule(epoch, cfg);
        order.shuffle(&mut shuffle);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let eval = |&i: &usize| {
                let ex = &corpus.examples[i];
                instance_gradient(&model, corpus.inputs(ex), &ex.instance.answer_ids, ex.instance.gold(), None)
                    .map_err(|e| as_nonfinite(e, epoch, &ex.image_id))
            };
            let results: Vec<Result<(f64, Vec<Vec<F>>)>> = if cfg.workers > 1 {
                pool.install(|| batch.par_iter().map(eval).collect())
            } else {
                batch.iter().map(eval).collect()
            };

            let mut sum: Option<Vec<Vec<F>>> = None;
            for (r, &i) in results.into_iter().zip(batch) {
                let (loss, grads) = r?;
                if !loss.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        epoch,
                        image_id: corpus.examples[i].image_id.clone(),
                    });
                }
                epoch_loss += loss;
                match &mut sum {
                    None => sum = Some(grads),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(grads) {
                            a.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                        }
                    }
                }
            }
            let mut grads = sum.expect("non-empty batch");
            let inv = F::lit(1.0 / batch.len() as f64);
            grads.iter_mut().flatten().for_each(|g| *g *= inv);
            if let Some(c) = cfg.grad_clip {
                clip_global_norm(&mut grads, c);
            }
            let grad_refs: Vec<&[F]> = grads.iter().map(Vec::as_slice).collect();
            let mut params: Vec<&mut Tensor<F>> = model.params.entries_mut().into_iter().map(|(_, t)| t).collect();
            adam_step(&mut params, &grad_refs, &mut adam, lr, &cfg.adam)?;
            if params.iter().any(|t| t.values().iter().any(|x| !x.finite())) {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    image_id: corpus.examples[batch[0]].image_id.clone(),
                });
            }
        }
        let entry = EpochLog {
            epoch,
            lr,
            mean_loss: epoch_loss / corpus.len() as f64,
        };
        on_epoch(&entry);
        log.push(entry);
    }
    Ok(TrainOutcome { model, adam, log })
}

/// Writes `epoch,lr,mean_loss` rows. When clipping was on, a `#` comment
/// line records the threshold first.
pub fn write_loss_log(path: &Path, log: &[EpochLog], grad_clip: Option<f64>) -> Result<()> {
    let mut out = String::new();
    if let Some(c) = grad_clip {
        out.push_str(&format!("# gradient clipping enabled: global norm <= {c}\n"));
    }
    out.push_str("epoch,lr,mean_loss\n");
    for e in log {
        out.push_str(&format!("{},{},{}\n", e.epoch, e.lr, e.mean_loss));
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}
