//! Answer-conditioned visual question generation.
//!
//! The crate covers the whole pipeline: a small reverse-mode autodiff
//! engine, vocabulary and feature loading, the multi-level attention
//! network, training, decoding, and caption metrics.

pub mod error;
pub mod features;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod text;
pub mod training;

pub use error::{CheckpointError, Error, Result};
pub use features::ImageInputs;
pub use model::{Model, ModelConfig};
pub use tensor::{Real, Tensor};
