use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed json in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    /// A minicube (or part of one) violates a data-model invariant.
    #[error("validation error: {0}")]
    Validation(String),

    #[error("shape error for `{name}`: {detail}")]
    Shape { name: String, detail: String },

    #[error("unsupported format version {found} (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("pixel fully occluded at (y, x) = {0:?}")]
    FullyOccluded(Vec<(usize, usize)>),

    #[error("zero variance in channel `{0}`")]
    ZeroVariance(String),

    #[error("{0}")]
    Invalid(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(name: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Shape {
            name: name.into(),
            detail: detail.into(),
        }
    }
}
