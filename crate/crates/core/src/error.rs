use thiserror::Error;

use crate::study::ViewId;

#[derive(Debug, Error)]
pub enum SofaError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("missing view {0}")]
    MissingView(ViewId),

    #[error("missing training target: {0}")]
    MissingTarget(String),

    #[error("model hash mismatch: expected {expected}, found {found}")]
    HashMismatch { expected: String, found: String },

    #[error("non-finite loss {value} at {context}")]
    NonFiniteLoss { value: f64, context: String },

    #[error("malformed file {path}: {reason}")]
    Format { path: String, reason: String },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, SofaError>;
