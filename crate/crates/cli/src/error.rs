use std::path::PathBuf;

use thiserror::Error;

/// Failures of a CLI run, mapped to process exit codes.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("cannot write {path}: {source}")]
    Write {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] fxlv_core::Error),

    #[error("{failed} of {total} report checks failed")]
    ChecksFailed { failed: usize, total: usize },
}

impl CliError {
    /// 2 for input and configuration problems, 1 for numerical failures.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Read { .. } => 2,
            CliError::Core(e) if e.is_input_error() => 2,
            CliError::Write { .. } | CliError::Core(_) | CliError::ChecksFailed { .. } => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

pub fn config(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}
