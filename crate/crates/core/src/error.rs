use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse failure class, used for CLI exit codes and FFI status codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numeric,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("patch is empty")]
    EmptyPatch,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimensions { expected: String, got: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("insufficient tissue: {tissue_pixels} pixel(s) above the optical-density threshold, need at least 2")]
    InsufficientTissue { tissue_pixels: usize },
    #[error("degenerate stains: {0}")]
    DegenerateStains(String),
    #[error("no valid patch found under {0}")]
    EmptyDataset(PathBuf),
    #[error("batch size {0} is too small, need at least 2")]
    BatchTooSmall(usize),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("numerical failure: {0}")]
    Numeric(String),
    #[error("config key `{key}`: {message}")]
    Config { key: String, message: String },
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("{path}: {message}")]
    Csv { path: PathBuf, message: String },
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::InvalidArgument(_) | Error::Config { .. } => ErrorKind::Config,
            Error::DegenerateStains(_) | Error::NonFinite(_) | Error::Numeric(_) => {
                ErrorKind::Numeric
            }
            _ => ErrorKind::Data,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dims(expected: impl ToString, got: impl ToString) -> Self {
        Error::Dimensions {
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}
