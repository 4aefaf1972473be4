use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: row {row}: {message}")]
    Format {
        path: PathBuf,
        row: usize,
        message: String,
    },

    #[error("{path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("cannot normalize a zero vector: {0}")]
    ZeroVector(String),

    #[error("config error at `{field}`: {message}")]
    Config { field: String, message: String },

    #[error(
        "non-finite loss at epoch {epoch} step {step}: loss={loss} tau={tau} bias={bias} grad_norm={grad_norm}"
    )]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        loss: f64,
        tau: f64,
        bias: f64,
        grad_norm: f64,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{what} format version {found} is newer than supported version {supported}")]
    Version {
        what: &'static str,
        found: u32,
        supported: u32,
    },

    #[error("gallery: {0}")]
    Gallery(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
