use std::path::PathBuf;

use halluc_tensor::TensorError;
use thiserror::Error;

use crate::data::PairKind;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot decode image {path}: {message}")]
    Decode { path: PathBuf, message: String },
    #[error("dataset structure: {0}")]
    DatasetStructure(String),
    #[error("size error: {0}")]
    Size(String),
    #[error("insufficient diversity to sample {kind:?} pairs: {reason}")]
    InsufficientDiversity { kind: PairKind, reason: String },
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("non-finite {term} at step {step}")]
    NonFinite { term: String, step: u64 },
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("checkpoint integrity: {0}")]
    Integrity(String),
    #[error("evaluation protocol: {0}")]
    Protocol(String),
    #[error("invalid input: {0}")]
    Input(String),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Self::Tensor(TensorError::Shape(msg.into()))
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
