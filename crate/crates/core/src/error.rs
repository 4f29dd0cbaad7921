use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid weights: {0}")]
    InvalidWeights(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid batch: {0}")]
    InvalidBatch(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("malformed attention dump: {0}")]
    MalformedDump(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("policy evaluation failed: {0}")]
    Policy(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
