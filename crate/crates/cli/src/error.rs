use std::process::ExitCode;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{0}")]
    Io(String),
    #[error("equivalence check failed: {0}")]
    Check(String),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Check(_) => 4,
        })
    }
}

impl From<axcv::Error> for CliError {
    fn from(e: axcv::Error) -> Self {
        match e {
            axcv::Error::Format(f) => CliError::Io(f.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<axcv::nn::FormatError> for CliError {
    fn from(e: axcv::nn::FormatError) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;
