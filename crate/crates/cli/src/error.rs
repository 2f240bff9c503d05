use std::path::PathBuf;

use psc_core::PscError;
use thiserror::Error;

pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_COMPUTE: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    /// Missing flags, missing upstream artifacts, malformed config.
    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Core(#[from] PscError),

    #[error("cannot write {path}: {source}")]
    Output {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_VALIDATION,
            CliError::Core(e) if e.is_validation() => EXIT_VALIDATION,
            CliError::Core(_) | CliError::Output { .. } => EXIT_COMPUTE,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
