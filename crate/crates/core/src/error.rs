use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = ArgbError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum ArgbError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("missing input {}: {reason}", .path.display())]
    MissingInput { path: PathBuf, reason: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image codec: {0}")]
    Image(#[from] image::ImageError),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl ArgbError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Self::InvalidInput(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Self::Shape(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Self::Numerical(msg.into())
    }

    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Self::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn missing(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Self::MissingInput {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Process exit code used by the command line front end:
    /// 1 for configuration errors, 2 for runtime or numerical failures,
    /// 3 for missing inputs.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config { .. } | Self::Json(_) => 1,
            Self::MissingInput { .. } => 3,
            _ => 2,
        }
    }
}
