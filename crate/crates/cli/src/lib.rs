//! Config-driven command line surface of the quantization engine.

use thiserror::Error;

pub mod config;
pub mod run;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Numerical(String),
    #[error("{0}")]
    Capacity(String),
    #[error("{0}")]
    Io(String),
    #[error("verification failed:\n{0}")]
    Verification(String),
}

impl CliError {
    /// Process exit code: 2 config, 3 numerical, 4 capacity.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) | CliError::Verification(_) => 3,
            CliError::Capacity(_) => 4,
            CliError::Io(_) => 1,
        }
    }
}
