use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Shapes of the operands do not line up.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A network, dataset or training configuration is invalid.
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A dataset file is missing, unreadable or malformed.
    #[error("cannot ingest {path}: {reason}")]
    Ingestion { path: PathBuf, reason: String },

    /// A checkpoint or manifest failed its integrity check.
    #[error("integrity error: {0}")]
    Integrity(String),

    /// A loss term or parameter update produced NaN or infinity.
    #[error("non-finite value in `{term}` at step {step}")]
    NonFinite { term: String, step: u64 },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn ingestion(path: impl Into<PathBuf>, reason: impl ToString) -> Self {
        Error::Ingestion {
            path: path.into(),
            reason: reason.to_string(),
        }
    }
}

macro_rules! ensure {
    ($cond:expr, $variant:ident, $($arg:tt)+) => {
        if !$cond {
            return Err($crate::error::Error::$variant(format!($($arg)+)));
        }
    };
}

pub(crate) use ensure;
