use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by every stage of the pipeline.
#[derive(Debug, Error)]
pub enum PantherError {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("unknown attribute `{name}` at line {line}")]
    UnknownAttribute { name: String, line: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("token id {id} out of range for vocabulary of size {size}")]
    TokenRange { id: usize, size: usize },

    #[error("schema mismatch: {0}")]
    Schema(String),

    #[error("sequence of length {len} exceeds the model limit {max}; truncate upstream")]
    SequenceTooLong { len: usize, max: usize },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("vocabulary hash mismatch: expected {expected}, found {found}")]
    VocabMismatch { expected: String, found: String },

    #[error("non-finite loss: {0}")]
    NonFinite(String),

    #[error("invalid file format: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, PantherError>;

pub(crate) fn config_err(msg: impl Into<String>) -> PantherError {
    PantherError::Config(msg.into())
}

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> PantherError {
    PantherError::Shape {
        op,
        detail: detail.into(),
    }
}
