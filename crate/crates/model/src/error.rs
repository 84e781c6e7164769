use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Data(#[from] vegecast_core::Error),

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

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("timestep {t} out of range for a {steps}-step schedule")]
    Timestep { t: usize, steps: usize },

    #[error("configuration drift in `{field}`: checkpoint has {stored}, caller expects {expected}")]
    ConfigDrift {
        field: String,
        stored: String,
        expected: String,
    },

    #[error("checkpoint array `{name}` is corrupted: {detail}")]
    Corrupt { name: String, detail: String },

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("non-finite loss at step {step} (batch {batch})")]
    NonFiniteLoss { step: usize, batch: usize },

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
}
