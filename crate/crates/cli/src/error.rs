use std::io;

use sparsepose_nn::NnError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl CliError {
    /// Process exit code: 2 config, 3 data, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }
}

impl From<sparsepose::Error> for CliError {
    fn from(e: sparsepose::Error) -> Self {
        use sparsepose::Error as E;
        match e {
            E::Degenerate(_) => CliError::Numerical(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<NnError> for CliError {
    fn from(e: NnError) -> Self {
        match e {
            NnError::Core(inner) => inner.into(),
            NnError::NonFinite(_) | NnError::NonFiniteGradient(_) | NnError::GradCheck(_) => CliError::Numerical(e.to_string()),
            NnError::Shape(_) | NnError::Checkpoint(_) | NnError::Io(_) => CliError::Data(e.to_string()),
        }
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
