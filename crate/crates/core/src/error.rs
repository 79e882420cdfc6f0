use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("parameter `{0}` not found")]
    MissingParam(String),

    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),

    #[error("malformed EDF file: {0}")]
    Edf(String),

    #[error("archive error: {0}")]
    Archive(String),

    #[error("model file error: {0}")]
    ModelFile(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("download failed for {url}: {reason}")]
    Download { url: String, reason: String },

    #[error("report error: {0}")]
    Report(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

macro_rules! shape_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Shape(format!($($arg)*))
    };
}
pub(crate) use shape_err;
