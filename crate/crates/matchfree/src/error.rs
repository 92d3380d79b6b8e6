//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Matrix or gradient-buffer dimensions do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Input violates a documented precondition (bad box, class id out of
    /// range, non-finite cost entry, ...).
    #[error("validation error: {0}")]
    Validation(String),

    /// A numeric evaluation produced a non-finite value.
    #[error("evaluation error: {0}")]
    Eval(String),

    /// Synthetic data generation could not satisfy its constraints.
    #[error("generation error: {0}")]
    Generation(String),

    /// Configuration document is malformed or inconsistent.
    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
