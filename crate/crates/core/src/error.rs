use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the inference pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty request: {0}")]
    EmptyRequest(&'static str),

    #[error("value {value} outside domain {domain}")]
    Domain { value: f64, domain: &'static str },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("empty sequence: {0}")]
    EmptySequence(&'static str),

    #[error("rank error: requested {requested} components but at most {available} are available")]
    Rank { requested: usize, available: usize },

    #[error("invalid state: {0}")]
    State(&'static str),

    #[error("training diverged: non-finite gradient in parameter `{param}`")]
    Divergence { param: String },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("ODE solver produced a non-finite state at step {step}")]
    Solver { step: usize },

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(&'static str),

    #[error("malformed model output: {reason}")]
    Format { reason: String, raw: String },

    #[error("transport failure: {0}")]
    Transport(String),

    #[error("authentication rejected by endpoint (status {status})")]
    Auth { status: u16 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("artifact format error in {path}: {reason}")]
    Artifact { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn artifact(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Artifact {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
