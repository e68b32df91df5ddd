use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value in heatmap channel {channel}")]
    NonFiniteChannel { channel: usize },

    #[error("heatmap must be normalized before soft-argmax (got raw logits)")]
    NotNormalized,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("singular linear system: {0}")]
    Singular(String),

    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },

    #[error("cannot read image {path}: {message}")]
    ImageRead { path: PathBuf, message: String },

    #[error("non-finite {component} loss")]
    NonFiniteLoss { component: &'static str },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
