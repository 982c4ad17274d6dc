use std::io;

use thiserror::Error;

/// Errors produced anywhere in the quantization toolkit.
#[derive(Debug, Error)]
pub enum QuantError {
    #[error("value {value} at index {index} is outside the symmetric 4-bit range [-7, 7]")]
    Range { index: usize, value: i32 },

    #[error("corrupt data: {0}")]
    Corrupt(String),

    #[error("container format error: {0}")]
    Format(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("missing entry: {0}")]
    Missing(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl QuantError {
    /// Configuration and usage problems, as opposed to runtime or numeric failures.
    pub fn is_config(&self) -> bool {
        matches!(self, QuantError::Config(_) | QuantError::Shape(_))
    }
}

pub type Result<T> = std::result::Result<T, QuantError>;
