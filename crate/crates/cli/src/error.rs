use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

/// Exit code for usage and configuration errors.
pub const EXIT_USAGE: i32 = 2;
/// Exit code for failures while running an otherwise valid command.
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config {path}: {msg}")]
    Config { path: PathBuf, msg: String },
    #[error("{path}: file not found")]
    MissingInput { path: PathBuf },
    #[error(transparent)]
    Core(#[from] metadomain::Error),
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    pub fn exit_code(&self) -> i32 {
        use metadomain::Error as E;
        match self {
            CliError::Usage(_) | CliError::Config { .. } | CliError::MissingInput { .. } => EXIT_USAGE,
            // Violated preconditions on user-supplied values and data sets.
            CliError::Core(
                E::Contract(_)
                | E::Manifest { .. }
                | E::LabelMap(_)
                | E::EmptyCalibration
                | E::InsufficientCalibration { .. }
                | E::NoNegatives
                | E::TooSmall { .. },
            ) => EXIT_USAGE,
            CliError::Core(_) => EXIT_RUNTIME,
        }
    }
}
