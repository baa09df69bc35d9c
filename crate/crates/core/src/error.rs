use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: `{field}` {reason}")]
    Config { field: String, reason: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numeric input error: {0}")]
    NumericInput(String),

    #[error("distillation incompatibility: {0}")]
    DistillationCompat(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("no overlap between curves: reference {reference:?}, test {test:?}")]
    NoOverlap { reference: (f64, f64), test: (f64, f64) },

    #[error("unsupported layer(s) for FLOP counting: {0:?}")]
    UnsupportedLayers(Vec<String>),

    #[error("capability unavailable: {0}")]
    Capability(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("checkpoint schema {found} not supported (expected {expected})")]
    SchemaVersion { found: u32, expected: u32 },

    #[error("ingestion error for {path}: {reason}")]
    Ingestion { path: PathBuf, reason: String },

    #[error("parse error at {path}:{line}: {reason}")]
    Parse { path: PathBuf, line: usize, reason: String },

    #[error("evaluating {image}: {source}")]
    Evaluation {
        image: String,
        #[source]
        source: Box<Error>,
    },

    #[error("training aborted at step {step}: {reason}")]
    TrainingAborted { step: u64, reason: String },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config { field: field.into(), reason: reason.into() }
    }

    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { context: context.into(), source }
    }
}
