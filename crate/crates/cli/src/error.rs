use std::path::PathBuf;

use serde::Serialize;
use serde_json::json;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{0}")]
    Usage(String),

    /// Every offending key of a config file, reported together.
    #[error("invalid config {}: {}", path.as_deref().map_or("<defaults>".into(), |p| p.display().to_string()), errors.join("; "))]
    Schema { path: Option<PathBuf>, errors: Vec<String> },

    #[error(transparent)]
    Data(#[from] vegecast_core::Error),

    #[error(transparent)]
    Model(#[from] vegecast_model::Error),

    #[error(transparent)]
    Eval(#[from] vegecast_eval::Error),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Error::Usage(_) => "usage",
            Error::Schema { .. } => "config_schema",
            Error::Data(_) => "data",
            Error::Model(_) => "model",
            Error::Eval(_) => "evaluation",
            Error::Io { .. } => "io",
        }
    }

    /// 2 for bad invocations and configs, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::Schema { .. } => 2,
            _ => 1,
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        let details: Vec<String> = match self {
            Error::Schema { errors, .. } => errors.clone(),
            _ => Vec::new(),
        };
        json!({
            "error": ErrorBody {
                kind: self.kind(),
                message: self.to_string(),
                details,
            }
        })
    }
}

#[derive(Serialize)]
struct ErrorBody {
    kind: &'static str,
    message: String,
    details: Vec<String>,
}
