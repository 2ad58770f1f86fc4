use rand::Rng;
use serde::Serialize;

use super::{instance_gradient, sequence_loss_exact};
use crate::error::Result;
use crate::features::ImageInputs;
use crate::model::{Model, ModelConfig, GROUPS};
use crate::rng;
use crate::tensor::{f128, relative_error, BackwardFault, Real, Tensor};

/// Central-difference step.
pub const GRADCHECK_STEP: f64 = 1e-5;
/// Largest acceptable relative error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
/// Initialization half-width for the checked model. Larger than the
/// training default so gradients sit well above finite-difference noise.
const PROBE_SCALE: f64 = 0.5;
const PROBE_QUESTION_LEN: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    /// Worst relative error per parameter group, in canonical order.
    pub groups: Vec<(String, f64)>,
    pub coordinates: usize,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.groups.iter().map(|(_, e)| *e).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_error() < GRADCHECK_TOLERANCE
    }
}

/// Builds a random 64-bit model and instance from `seed` and compares the
/// backward pass of the sequence loss against central differences for
/// every coordinate of every parameter.
pub fn gradcheck_model(cfg: &ModelConfig, seed: u64, fault: Option<BackwardFault>) -> Result<GradCheckReport> {
    cfg.validate()?;
    let model = Model::<f64>::init(cfg.clone(), seed, None, PROBE_SCALE)?;
    let mut r = rng::stream(seed, rng::STREAM_PROBE);
    let mut matrix =
        |rows: usize, cols: usize| Tensor::matrix(rows, cols, (0..rows * cols).map(|_| r.gen_range(-1.0..1.0)).collect());
    let inputs = ImageInputs::new(matrix(cfg.k, cfg.d_v)?, matrix(cfg.k, cfg.semantic_dim())?)?;
    let first_word = crate::text::UNK + 1;
    let answer: Vec<usize> = (0..cfg.answer_len).map(|_| r.gen_range(first_word..cfg.vocab_size)).collect();
    let gold: Vec<usize> = (0..PROBE_QUESTION_LEN.min(cfg.max_question_len))
        .map(|_| r.gen_range(first_word..cfg.vocab_size))
        .collect();

    let (_, analytic) = instance_gradient(&model, &inputs, &answer, &gold, fault)?;

    // Differences are taken in quad precision. In f64 the cancellation in
    // `plus - minus` leaves ~1e-11 of noise, which swamps gradients near 1e-8.
    let mut reference: Model<f128> = model.cast();
    let wide_inputs = ImageInputs::new(inputs.visual.cast(), inputs.semantic.cast())?;
    let step = f128::lit(GRADCHECK_STEP);
    let eval = |reference: &mut Model<f128>, pi: usize, j: usize, x: f128| -> Result<f128> {
        reference.params.entries_mut()[pi].1.values_mut()[j] = x;
        let out = reference.forward_teacher_forced(&wide_inputs, &answer, &gold)?;
        sequence_loss_exact(&out.distributions, &gold)
    };

    let mut groups: Vec<(String, f64)> = Vec::new();
    let mut coordinates = 0;
    let names: Vec<_> = model.params.entries().into_iter().map(|(n, _)| n).collect();
    for (pi, name) in names.iter().enumerate() {
        let mut worst = 0.0f64;
        for (j, &a) in analytic[pi].iter().enumerate() {
            let original = f128::lit(model.params.entries()[pi].1.values()[j]);
            let plus = eval(&mut reference, pi, j, original + step)?;
            let minus = eval(&mut reference, pi, j, original - step)?;
            reference.params.entries_mut()[pi].1.values_mut()[j] = original;
            let numeric = ((plus - minus) / (step * f128::lit(2.0))).as_f64();
            worst = worst.max(relative_error(a, numeric));
            coordinates += 1;
        }
        match groups.iter_mut().find(|(g, _)| g == name.group) {
            Some((_, e)) => *e = e.max(worst),
            None => groups.push((name.group.to_string(), worst)),
        }
    }
    debug_assert!(groups.iter().all(|(g, _)| GROUPS.contains(&g.as_str())));
    Ok(GradCheckReport { groups, coordinates })
}
