use std::path::PathBuf;

use thiserror::Error;

/// Failures raised by tensor construction and tape operations.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },
    #[error("index error in {op}: {index} out of range 0..{bound}")]
    Index { op: &'static str, index: usize, bound: usize },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("lookup error: {0}")]
    Lookup(String),
}

impl TensorError {
    pub(crate) fn dimension(op: &'static str, detail: impl Into<String>) -> Self {
        TensorError::Dimension { op, detail: detail.into() }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("config error: {0}")]
    Config(String),
    #[error("format error in {path}: {detail}")]
    Format { path: PathBuf, detail: String },
    #[error("sampling error: {0}")]
    Sampling(String),
    #[error("encoding error: {0}")]
    Encoding(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("parse error at line {line}: {detail}")]
    Parse { line: usize, detail: String },
    #[error("numerical divergence at step {step}: {detail}")]
    Diverged { step: u64, detail: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format { path: path.into(), detail: detail.into() }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
