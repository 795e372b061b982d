use std::path::PathBuf;

use thiserror::Error;

/// Coarse error category, used by the command line front-end to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Data,
    Numeric,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: {left} vs {right}")]
    Dimension {
        context: &'static str,
        left: String,
        right: String,
    },
    #[error("index out of range in {context}: {index} not below {bound}")]
    Index {
        context: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("invalid input: {0}")]
    Validation(String),
    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },
    #[error("bad magic in {0}")]
    BadMagic(String),
    #[error("unsupported version {found} (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },
    #[error("truncated input: {0}")]
    Truncated(String),
    #[error("checksum mismatch: stored {stored:#018x}, computed {computed:#018x}")]
    Checksum { stored: u64, computed: u64 },
    #[error("non-finite value during {0}")]
    NonFinite(String),
    #[error("no convergence: {0}")]
    NoConvergence(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(context: &'static str, left: (usize, usize), right: (usize, usize)) -> Self {
        Error::Dimension {
            context,
            left: format!("{}x{}", left.0, left.1),
            right: format!("{}x{}", right.0, right.1),
        }
    }

    pub(crate) fn len(context: &'static str, left: usize, right: usize) -> Self {
        Error::Dimension {
            context,
            left: left.to_string(),
            right: right.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::NonFinite(_) | Error::NoConvergence(_) => ErrorKind::Numeric,
            _ => ErrorKind::Data,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
