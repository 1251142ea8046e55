use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("invalid configuration: {field}: {reason}")]
    Config { field: String, reason: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("numerical error in {location}: {detail}")]
    Numerical { location: String, detail: String },

    #[error("integrity check failed for {path}: {detail}")]
    Integrity { path: PathBuf, detail: String },

    #[error("no correctly generated samples for task `{task}` ({total} evaluated); train longer or enlarge the dataset")]
    NoCorrectSamples { task: String, total: usize },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn numerical(location: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numerical {
            location: location.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
