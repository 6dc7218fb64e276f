use std::io;

use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid mode {mode} for a tensor of order {order}")]
    InvalidMode { mode: usize, order: usize },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("invalid rank {rank} for mode {mode} of extent {extent}")]
    InvalidRank {
        mode: usize,
        rank: usize,
        extent: usize,
    },

    #[error("domain index {index} out of range for {count} domains")]
    InvalidDomain { index: usize, count: usize },

    #[error("empty batch")]
    EmptyBatch,

    #[error("empty domain: {0}")]
    EmptyDomain(String),

    #[error("label space error: {0}")]
    LabelSpace(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}
