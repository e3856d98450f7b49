use std::path::PathBuf;

use thiserror::Error;

pub type CliResult<T> = std::result::Result<T, CliError>;

pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_VALIDATION: i32 = 2;

#[derive(Debug, Error)]
pub enum CliError {
    /// The config or an argument is unusable. The message starts with the field path.
    #[error("{0}")]
    Validation(String),

    #[error(transparent)]
    Core(#[from] flowrefine_core::Error),

    #[error("cannot parse {path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("cannot write {path}: {source}")]
    Output {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// The run started but a round failed; the manifest records where.
    #[error("run failed in round {round}: {message}")]
    RunFailed { round: usize, message: String },
}

impl CliError {
    pub fn validation(field: &str, message: impl std::fmt::Display) -> Self {
        CliError::Validation(format!("{field}: {message}"))
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) | CliError::Parse { .. } => EXIT_VALIDATION,
            CliError::Core(e) if e.is_validation() => EXIT_VALIDATION,
            CliError::Core(_) | CliError::Output { .. } | CliError::RunFailed { .. } => EXIT_RUNTIME,
        }
    }
}
