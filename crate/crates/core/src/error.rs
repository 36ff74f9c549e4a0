use std::io;

use thiserror::Error;

/// Errors produced anywhere in the enrichment pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("truncated data: {0}")]
    Truncated(String),

    #[error("missing weight entries: {}", .0.join(", "))]
    MissingWeights(Vec<String>),

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit status for this error: 2 for unreadable or malformed
    /// files, 3 for shape and configuration problems, 4 for divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } | Error::Format(_) | Error::Truncated(_) => 2,
            Error::Shape(_) | Error::InvalidValue(_) | Error::Config(_) | Error::MissingWeights(_) => 3,
            Error::Divergence { .. } => 4,
        }
    }
}
