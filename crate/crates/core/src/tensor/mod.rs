//! Dense tensors and a define-by-run reverse-mode differentiation tape.
//!
//! Every model computation is expressed as a sequence of primitive ops
//! recorded on a [`Tape`]. A tape is built fresh for each forward pass and
//! consumed by exactly one call to [`Tape::backward`].
//!
//! Precision is chosen by the scalar type: `f32` for training, `f64` for
//! gradient checking, and quad [`f128`] for the reference side of the
//! full-model check. A single run uses one scalar type throughout.

mod gradcheck;
mod tape;

pub use gradcheck::{grad_check, relative_error};
pub use tape::{BackwardFault, Gradients, Tape, Var};

use std::fmt::{Debug, Display};
use std::ops::{AddAssign, MulAssign, SubAssign};

pub use f128::f128;
use num_traits::{Float, FromPrimitive};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Stabilizer added to the signed-square-root derivative denominator.
pub const SIGNED_SQRT_EPS: f64 = 1e-8;
/// Norm below which `l2_normalize` leaves its input untouched.
pub const L2_NORM_EPS: f64 = 1e-12;

/// Floating-point precision of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
    F128,
}

/// Scalar types the tape can run on.
pub trait Real: Float + FromPrimitive + AddAssign + SubAssign + MulAssign + Debug + Display + Send + Sync + 'static {
    const PRECISION: Precision;

    fn lit(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("f64 literal representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite float")
    }

    fn finite(self) -> bool {
        self.is_finite()
    }

    /// The larger of two finite values. Tape code uses this rather than
    /// `Float::max`, which `f128` gets wrong for negative operands.
    fn larger(self, other: Self) -> Self {
        if other > self {
            other
        } else {
            self
        }
    }

    fn total(values: impl IntoIterator<Item = Self>) -> Self {
        values.into_iter().fold(Self::zero(), |a, b| a + b)
    }
}

impl Real for f32 {
    const PRECISION: Precision = Precision::F32;
}

impl Real for f64 {
    const PRECISION: Precision = Precision::F64;
}

// Quad precision is only used as a reference when differencing the model
// numerically, where f64 roundoff would swamp small gradients.
impl Real for f128 {
    const PRECISION: Precision = Precision::F128;
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid shape {shape:?} for {len} values")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("{op}: length {len} is not divisible by window {window}")]
    NotDivisible { op: &'static str, len: usize, window: usize },
    #[error("concat of an empty sequence")]
    EmptyConcat,
    #[error("{op}: index {index} out of range for size {size}")]
    IndexOutOfRange { op: &'static str, index: usize, size: usize },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward already ran on this tape; record a new forward pass")]
    StaleTape,
    #[error("variable belongs to a different tape")]
    ForeignVar,
}

/// A dense row-major tensor with an optional accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    values: Vec<F>,
    pub requires_grad: bool,
    pub grad: Option<Vec<F>>,
}

impl<F: Real> Tensor<F> {
    pub fn new(shape: Vec<usize>, values: Vec<F>) -> Result<Self, TensorError> {
        check_shape(&shape, values.len())?;
        Ok(Self {
            shape,
            values,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self::new(shape, vec![F::zero(); len]).expect("zeros: shape with a zero dimension")
    }

    pub fn vector(values: Vec<F>) -> Self {
        let n = values.len();
        Self::new(vec![n], values).expect("vector: empty values")
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<F>) -> Result<Self, TensorError> {
        Self::new(vec![rows, cols], values)
    }

    pub fn trainable(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[F] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [F] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Converts to another precision, dropping any gradient.
    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            values: self.values.iter().map(|v| G::lit(v.as_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }
}

pub(crate) fn check_shape(shape: &[usize], len: usize) -> Result<(), TensorError> {
    if shape.is_empty() || shape.contains(&0) || shape.iter().product::<usize>() != len {
        return Err(TensorError::InvalidShape {
            shape: shape.to_vec(),
            len,
        });
    }
    Ok(())
}
