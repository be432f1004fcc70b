use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed PGM: {0}")]
    Pgm(String),

    #[error("invalid manifest: {0}")]
    Manifest(String),

    #[error("dimension mismatch: expected {expected:?}, got {actual:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Input has no usable structure (constant frame, too few distinct values, ...).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("series is aperiodic: {0}")]
    Aperiodic(String),

    #[error("model format error: {0}")]
    ModelFormat(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// True for failures caused by unreadable or missing input files.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. } | Error::Pgm(_) | Error::Manifest(_))
    }
}
