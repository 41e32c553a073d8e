//! Error taxonomy shared across the workspace.
//!
//! The CLI maps these onto exit codes: configuration errors exit 2,
//! missing/corrupt artifacts exit 3, numeric or training failures exit 4.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MagError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("bounds error: {0}")]
    Bounds(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("mask error: {0}")]
    Mask(String),
    #[error("cache error: {0}")]
    Cache(String),
    #[error("horizon error: {0}")]
    Horizon(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("dependency error: {0}")]
    Dependency(String),
    #[error("training failure: {0}")]
    Training(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, MagError>;

impl MagError {
    pub fn config(msg: impl Into<String>) -> Self {
        MagError::Config(msg.into())
    }

    /// Exit code the CLI should use for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            MagError::Config(_) | MagError::Bounds(_) | MagError::Shape(_) => 2,
            MagError::Checkpoint(_) | MagError::Dependency(_) => 3,
            MagError::Numeric(_) | MagError::Training(_) => 4,
            _ => 1,
        }
    }
}
