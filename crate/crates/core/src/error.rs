use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("numeric error in {op}: non-finite value produced")]
    Numeric { op: &'static str },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("token index {index} out of range for vocabulary of size {size}")]
    Vocabulary { index: usize, size: usize },

    #[error("loss builder is non-deterministic: two evaluations gave {first} and {second}")]
    Determinism { first: f64, second: f64 },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("label '{label}' is not in the class catalog")]
    Catalog { label: String },

    #[error("cannot sample episode: {0}")]
    Sampling(String),

    #[error("checkpoint format version {found} is incompatible with {expected}")]
    Incompatible { found: u32, expected: u32 },

    #[error("parameter '{name}' has shape {found:?}, expected {expected:?}")]
    Shape {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },

    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }
}
