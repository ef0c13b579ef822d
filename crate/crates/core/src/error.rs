use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate embedding: zero or non-finite norm")]
    DegenerateEmbedding,

    #[error("index {index} out of range for {len} entries")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("k = {k} is not valid for {available} candidates")]
    InvalidK { k: usize, available: usize },

    #[error("predictor not ready")]
    PredictorNotReady,

    #[error("no negative pairs in batch")]
    NoNegativePairs,

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("not enough labels: need {needed}, have {available}")]
    NotEnoughLabels { needed: usize, available: usize },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("numerical divergence at epoch {epoch}: {what}")]
    Divergence { epoch: usize, what: String },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidK { .. } | Error::NotEnoughLabels { .. } => 2,
            Error::Divergence { .. } => 4,
            _ => 3,
        }
    }
}
