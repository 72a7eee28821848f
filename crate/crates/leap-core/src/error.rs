//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, LeapError>;

#[derive(Debug, Error)]
pub enum LeapError {
    /// Tensor shapes do not line up for the requested operation.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Input is degenerate for the operation (zero-norm vector, empty mask, ...).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// A precondition of an operation contract was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    /// An operation produced a non-finite value.
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    /// Checkpoint file is corrupt or inconsistent with its header.
    #[error("corrupt checkpoint: {0}")]
    Checkpoint(String),

    /// Configuration is missing a key or holds an invalid value.
    #[error("config error: {0}")]
    Config(String),

    /// Training diverged (non-finite loss or gradient).
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl LeapError {
    pub fn dimension(msg: impl Into<String>) -> Self {
        LeapError::Dimension(msg.into())
    }

    pub fn degenerate(msg: impl Into<String>) -> Self {
        LeapError::Degenerate(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        LeapError::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        LeapError::Config(msg.into())
    }

    pub fn checkpoint(msg: impl Into<String>) -> Self {
        LeapError::Checkpoint(msg.into())
    }
}
