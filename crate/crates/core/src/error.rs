//! Error type shared across the crate.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    /// Tensor or layer dimensions do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),
    /// A non-finite value appeared where the contract requires finite arithmetic.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// An API precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),
    /// The input data is unusable (empty after filtering, not enough users, ...).
    #[error("data error: {0}")]
    Data(String),
    /// A file does not follow the expected format.
    #[error("format error: {0}")]
    Format(String),
    /// A configuration value is out of range or infeasible.
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
