use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the detection toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid box: {0}")]
    InvalidBox(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("dimension mismatch: expected {expected}, got {actual} ({what})")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("value out of range: {0}")]
    OutOfRange(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("singular system: {0}")]
    Singular(String),

    #[error("{path}: line {line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("{path}: schema mismatch: expected {expected}, found {found}")]
    Schema {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("undefined metric: {0}")]
    Undefined(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
