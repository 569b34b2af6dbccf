use std::path::PathBuf;

/// Errors produced anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate features: {0}")]
    DegenerateFeatures(String),

    #[error("zero vector: {0}")]
    ZeroVector(String),

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("degenerate test: {0}")]
    DegenerateTest(String),

    #[error("teacher pretraining failed: {0}")]
    PretrainFailure(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("run {0} is locked by another process")]
    Locked(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
