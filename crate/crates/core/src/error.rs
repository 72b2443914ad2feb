use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },

    #[error("log of nonpositive value {value} at flat index {index}")]
    LogDomain { index: usize, value: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("tape is not topologically ordered: node {node} has parent {parent}")]
    Cycle { node: usize, parent: usize },

    #[error("backward root must be scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("empty supervision: every pixel is labelled ignore")]
    EmptySupervision,

    #[error("malformed {what}: {detail}")]
    Format { what: String, detail: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("non-finite loss at iteration {iteration} (batch seed {batch_seed}): {detail}")]
    NanLoss {
        iteration: usize,
        batch_seed: u64,
        detail: String,
    },

    #[error("config fingerprint mismatch: checkpoint {checkpoint}, current {current}")]
    Fingerprint { checkpoint: String, current: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(what: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Format {
            what: what.into(),
            detail: detail.into(),
        }
    }
}
