use seqtriage_core::dataio::DataError;
use seqtriage_core::simgen::SimError;
use seqtriage_core::triage::TriageError;
use seqtriage_core::FitError;
use thiserror::Error;

/// Every failure maps to one process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    NonConvergence(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            CliError::NonConvergence(_) => 3,
            CliError::Io(_) => 4,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Io { .. } => CliError::Io(e.to_string()),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<FitError> for CliError {
    fn from(e: FitError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::TooManyExclusions { .. } => CliError::NonConvergence(e.to_string()),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<TriageError> for CliError {
    fn from(e: TriageError) -> Self {
        CliError::Validation(e.to_string())
    }
}
