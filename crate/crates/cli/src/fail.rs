use std::path::PathBuf;

use dipt_core::error::Error;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("missing {}: {hint}", path.display())]
    Missing { path: PathBuf, hint: &'static str },
    #[error("empty input: {0}")]
    Empty(String),
    #[error("{failed} of {total} files failed")]
    Partial { failed: usize, total: usize },
    #[error(transparent)]
    Core(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(msg) => CliError::Config(msg),
            Error::Empty(what) => CliError::Empty(what),
            other => CliError::Core(other),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Missing { .. } => 3,
            CliError::Empty(_) => 4,
            CliError::Partial { .. } | CliError::Core(_) => 1,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
