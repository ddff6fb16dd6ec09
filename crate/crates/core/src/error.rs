use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("numeric error in {op}: {detail}")]
    Numeric { op: &'static str, detail: String },

    #[error("degenerate input to {op}: {detail}")]
    DegenerateInput { op: &'static str, detail: String },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: malformed data: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("corrupt checkpoint {path}: {detail}")]
    CorruptCheckpoint { path: PathBuf, detail: String },

    #[error("non-finite loss at step {step} (batch seed {batch_seed:#018x}): {detail}")]
    NonFiniteLoss {
        step: u64,
        batch_seed: u64,
        detail: String,
    },

    #[error("internal consistency error: {0}")]
    Internal(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
