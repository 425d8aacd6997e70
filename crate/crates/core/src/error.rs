//! Crate-wide error type.
//!
//! One enum keeps signatures uniform across modules; the CLI maps variants to
//! exit codes (usage, data/format, numeric divergence).

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration value (dimensions, rates, weights out of range).
    #[error("configuration error: {0}")]
    Config(String),

    /// Array or vector shape does not match what the operation expects.
    #[error("dimension error: {0}")]
    Dim(String),

    /// Index out of range (latent dimension, frame, fold).
    #[error("index error: {0}")]
    Index(String),

    /// Malformed file content; `offset` is the byte position of the problem.
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    /// Checkpoint manifest and parameter blob disagree.
    #[error("integrity error: {0}")]
    Integrity(String),

    /// Non-finite value where finite arithmetic is required.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn dim(msg: impl Into<String>) -> Self {
        Error::Dim(msg.into())
    }

    pub fn index(msg: impl Into<String>) -> Self {
        Error::Index(msg.into())
    }

    pub fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            msg: msg.into(),
        }
    }

    pub fn integrity(msg: impl Into<String>) -> Self {
        Error::Integrity(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
}
