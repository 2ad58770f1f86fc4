use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::TensorError;

/// Ways a checkpoint file can be unreadable.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum CheckpointError {
    #[error("bad magic bytes (not a checkpoint file)")]
    BadMagic,
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("file is truncated")]
    Truncated,
    #[error("{0} trailing bytes after the last tensor")]
    TrailingBytes(usize),
    #[error("invalid config block: {0}")]
    Config(String),
    #[error("invalid tensor table: {0}")]
    Tensors(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}:{line}: {msg}", path.display())]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("checkpoint {}: {source}", path.display())]
    Checkpoint {
        path: PathBuf,
        #[source]
        source: CheckpointError,
    },

    #[error("{0} is empty")]
    Empty(&'static str),

    #[error("no features for image {0:?}")]
    MissingFeatures(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("token id {id} outside vocabulary of size {size}")]
    InvalidToken { id: usize, size: usize },

    #[error("non-finite loss at epoch {epoch} (image {image_id:?})")]
    NonFiniteLoss { epoch: usize, image_id: String },

    #[error("generated and gold files disagree: {} keys missing from generated, {} keys missing from gold: {}", missing_generated.len(), missing_gold.len(), preview(missing_generated, missing_gold))]
    KeyMismatch {
        missing_generated: Vec<String>,
        missing_gold: Vec<String>,
    },
}

fn preview(a: &[String], b: &[String]) -> String {
    a.iter().chain(b).take(10).cloned().collect::<Vec<_>>().join(", ")
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }
}
