use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments, one pair per parameter tensor, plus the
/// number of updates applied so far.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<F> {
    pub step: u64,
    pub m: Vec<Tensor<F>>,
    pub v: Vec<Tensor<F>>,
}

impl<F: Real> AdamState<F> {
    pub fn new<'s>(shapes: impl IntoIterator<Item = &'s [usize]>) -> Self {
        let m: Vec<Tensor<F>> = shapes.into_iter().map(|s| Tensor::zeros(s.to_vec())).collect();
        Self {
            step: 0,
            v: m.clone(),
            m,
        }
    }
}

/// One bias-corrected Adam update:
/// `m ← β₁m + (1−β₁)g`, `v ← β₂v + (1−β₂)g²`,
/// `θ ← θ − lr · m̂ / (√v̂ + ε)`.
pub fn adam_step<F: Real>(
    params: &mut [&mut Tensor<F>],
    grads: &[&[F]],
    state: &mut AdamState<F>,
    lr: f64,
    hp: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != state.v.len() {
        return Err(Error::Dimension(format!(
            "adam: {} parameters, {} gradients, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || p.shape() != state.m[i].shape() || p.shape() != state.v[i].shape() {
            return Err(Error::Dimension(format!(
                "adam: parameter {i} has shape {:?} but gradient has {} values and moments {:?}",
                p.shape(),
                g.len(),
                state.m[i].shape()
            )));
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let b1 = F::lit(hp.beta1);
    let b2 = F::lit(hp.beta2);
    let c1 = F::one() - F::lit(hp.beta1.powi(t));
    let c2 = F::one() - F::lit(hp.beta2.powi(t));
    let eps = F::lit(hp.eps);
    let lr = F::lit(lr);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.m[i].values_mut();
        let v = state.v[i].values_mut();
        for (j, (theta, &gj)) in p.values_mut().iter_mut().zip(g.iter()).enumerate() {
            m[j] = b1 * m[j] + (F::one() - b1) * gj;
            v[j] = b2 * v[j] + (F::one() - b2) * gj * gj;
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            *theta -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(x: f64) -> Tensor<f64> {
        Tensor::vector(vec![x])
    }

    #[test]
    fn first_step_moves_by_lr_against_the_gradient() {
        let mut p = Tensor::vector(vec![1.0, -2.0, 0.5, 3.0]);
        let g = [0.3, -7.0, 1e-3, -0.02];
        let mut st = AdamState::new([p.shape()]);
        let lr = 0.01;
        adam_step(&mut [&mut p], &[&g], &mut st, lr, &AdamConfig::default()).unwrap();
        for ((&after, before), &gi) in p.values().iter().zip([1.0, -2.0, 0.5, 3.0]).zip(&g) {
            let delta: f64 = after - before;
            assert_eq!(delta.signum(), -gi.signum());
            assert!(delta.abs() <= lr && delta.abs() >= lr * (1.0 - 1e-5), "{delta}");
        }
    }

    #[test]
    fn zero_gradient_keeps_parameters_and_decays_moments() {
        let mut p = one(0.7);
        let mut st = AdamState::new([p.shape()]);
        let hp = AdamConfig::default();
        adam_step(&mut [&mut p], &[&[1.0]], &mut st, 0.1, &hp).unwrap();
        let before = p.clone();
        let (m, v) = (st.m[0].values()[0], st.v[0].values()[0]);
        // A zero gradient still applies m̂ from the history, so isolate the
        // no-history case separately.
        let mut fresh = one(0.7);
        let mut fresh_st = AdamState::new([fresh.shape()]);
        adam_step(&mut [&mut fresh], &[&[0.0]], &mut fresh_st, 0.1, &hp).unwrap();
        assert_eq!(fresh.values(), &[0.7]);
        adam_step(&mut [&mut p], &[&[0.0]], &mut st, 0.1, &hp).unwrap();
        assert_eq!(st.m[0].values()[0], 0.9 * m);
        assert_eq!(st.v[0].values()[0], 0.999 * v);
        assert_ne!(p, before);
    }

    #[test]
    fn three_steps_on_square_match_scalar_adam() {
        // Plain scalar Adam, written without the tensor machinery.
        let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8f64, 0.05f64);
        let (mut x, mut m, mut v) = (1.5f64, 0.0f64, 0.0f64);
        let mut expected = Vec::new();
        for t in 1..=3 {
            let g = 2.0 * x;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            x -= lr * mh / (vh.sqrt() + eps);
            expected.push(x);
        }

        let mut p = one(1.5);
        let mut st = AdamState::new([p.shape()]);
        for want in expected {
            let g = [2.0 * p.values()[0]];
            adam_step(&mut [&mut p], &[&g], &mut st, lr, &AdamConfig::default()).unwrap();
            assert!((p.values()[0] - want).abs() < 1e-10);
        }
        assert_eq!(st.step, 3);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut p = Tensor::vector(vec![0.0; 3]);
        let mut st = AdamState::new([p.shape()]);
        let r = adam_step(&mut [&mut p], &[&[1.0, 2.0]], &mut st, 0.1, &AdamConfig::default());
        assert!(matches!(r, Err(Error::Dimension(_))));
        assert_eq!(st.step, 0);
    }
}
