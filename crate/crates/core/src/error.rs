use thiserror::Error;

/// Errors raised by the learning-from-demonstration toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("dimension mismatch at layer {layer}: expected {expected}, got {got}")]
    LayerDim {
        layer: usize,
        expected: usize,
        got: usize,
    },

    #[error("sequence of length {len} exceeds the unroll limit of {limit}")]
    SequenceTooLong { len: usize, limit: usize },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: {detail}")]
    Diverged {
        epoch: usize,
        batch: usize,
        detail: String,
    },

    #[error("file format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
