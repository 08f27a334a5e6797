//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument is outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),
    /// Input data violates a contract (bad labels, unnormalized probabilities).
    #[error("data error: {0}")]
    Data(String),
    /// Shapes or layer wiring are inconsistent.
    #[error("structural error: {0}")]
    Structure(String),
    /// A non-finite value was produced where finite math is required.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// A configuration value is invalid.
    #[error("config error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
