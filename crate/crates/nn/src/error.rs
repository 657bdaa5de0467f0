use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite gradient in parameter '{0}'")]
    NonFiniteGradient(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("gradient check failed: {0}")]
    GradCheck(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Core(#[from] sparsepose::Error),

    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
}

pub type Result<T, E = NnError> = std::result::Result<T, E>;
