//! Experiment runner: configuration loading, the subcommands and their
//! CSV/JSON artifacts.

pub mod args;
pub mod commands;
pub mod config;
pub mod output;

use drl::training::TrainError;
use drl::DrlError;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Numerical(_) => EXIT_NUMERICAL,
            CliError::Other(_) => EXIT_FAILURE,
        }
    }
}

impl From<DrlError> for CliError {
    fn from(e: DrlError) -> Self {
        match e {
            DrlError::Config(_)
            | DrlError::UnknownStrategy { .. }
            | DrlError::Budget { .. }
            | DrlError::Label { .. }
            | DrlError::Precondition(_) => CliError::Config(e.to_string()),
            DrlError::NonFinite(_) | DrlError::DegenerateFeature { .. } | DrlError::DegenerateUpdate { .. } => {
                CliError::Numerical(e.to_string())
            }
            DrlError::Shape { .. } | DrlError::Io(_) => CliError::Other(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Numerical { .. } => CliError::Numerical(e.to_string()),
            TrainError::Other(inner) => inner.into(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Other(e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
