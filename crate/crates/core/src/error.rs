//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("index {index} out of range for dimension {dim}")]
    IndexOutOfRange { index: usize, dim: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid config field `{field}`: {reason}")]
    InvalidConfig { field: String, reason: String },

    #[error("token {token} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },

    #[error("sequence length {len} exceeds max_seq {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("checkpoint: bad magic bytes {0:?}")]
    BadMagic([u8; 4]),

    #[error("checkpoint: unsupported version {0}")]
    UnsupportedVersion(u8),

    #[error("checkpoint: truncated while reading {0}")]
    Truncated(String),

    #[error("checkpoint: tensor `{tensor}` has {found} elements, config expects {expected}")]
    ShapeMismatch {
        tensor: String,
        expected: usize,
        found: usize,
    },

    #[error("checkpoint: {0} trailing bytes after last tensor")]
    TrailingBytes(usize),

    #[error("checkpoint: embedded config: {0}")]
    CheckpointConfig(String),

    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
