use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = MindError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum MindError {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("layer {layer}: need {needed} free parameters, only {free} left")]
    Capacity { layer: usize, needed: usize, free: usize },

    #[error("invalid state: {0}")]
    State(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("format error in field `{field}`: {reason}")]
    Format { field: &'static str, reason: String },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl MindError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        MindError::Io { path: path.into(), source }
    }

    pub(crate) fn format(field: &'static str, reason: impl Into<String>) -> Self {
        MindError::Format { field, reason: reason.into() }
    }

    /// True for errors caused by user input (bad config, bad usage) rather
    /// than failures while running.
    pub fn is_usage(&self) -> bool {
        matches!(self, MindError::Config(_))
    }
}
