//! Crate-wide error type.
//!
//! Every fallible operation in the engine maps onto one of these classes;
//! the CLI turns them into exit codes (invalid input -> 2, divergence -> 3).

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes are inconsistent with the requested operation.
    #[error("shape error: {0}")]
    Shape(String),

    /// A value is outside the mathematical domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// An invalid configuration was supplied (bad spec, bad flag, bad preset).
    #[error("configuration error: {0}")]
    Config(String),

    /// A file does not match its declared format.
    #[error("format error: {0}")]
    Format(String),

    /// A file parsed but its contents are internally inconsistent.
    #[error("corruption error: {0}")]
    Corrupt(String),

    /// Training produced a non-finite value.
    #[error("training divergence: {0}")]
    Divergence(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
    pub fn corrupt(msg: impl Into<String>) -> Self {
        Error::Corrupt(msg.into())
    }
    pub fn divergence(msg: impl Into<String>) -> Self {
        Error::Divergence(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
