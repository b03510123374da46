use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("format error in {source_name}{}: {message}", .row.map(|r| format!(" (row {r})")).unwrap_or_default())]
    Format {
        source_name: String,
        row: Option<usize>,
        message: String,
    },

    #[error("training diverged at step {step} (train loss {loss})")]
    Divergence { step: usize, loss: f64 },

    #[error("memory guard: {0}")]
    Memory(String),

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn format(source_name: impl Into<String>, row: Option<usize>, message: impl Into<String>) -> Self {
        Error::Format {
            source_name: source_name.into(),
            row,
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
