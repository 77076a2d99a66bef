//! Crate-wide error type.
//!
//! Every fallible operation returns [`Result`]. Variants map onto the
//! failure classes used throughout the crate: shape problems, bad
//! parameters, invalid configuration, missing state, broken caller
//! contracts, and malformed files.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or image shapes do not line up.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A value passed by the caller is out of range or malformed.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// A model configuration violates one of its invariants.
    #[error("invalid config: {0}")]
    Config(String),

    /// An operation was invoked before its prerequisites ran.
    #[error("invalid state: {0}")]
    State(String),

    /// An internal calling contract was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A file did not match its documented binary layout.
    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn state(msg: impl Into<String>) -> Self {
        Error::State(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}
