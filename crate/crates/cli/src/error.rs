use std::fmt;

use replica_core::Error;

/// Command failures, each with its process exit code.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Io(String),
    NonConvergence(String),
    Acceptance(String),
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Failed(_) => 1,
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::NonConvergence(_) => 4,
            CliError::Acceptance(_) => 5,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Io(m) => write!(f, "io error: {m}"),
            CliError::NonConvergence(m) => write!(f, "did not converge: {m}"),
            CliError::Acceptance(m) => write!(f, "check failed: {m}"),
            CliError::Failed(m) => write!(f, "{m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Io { .. } | Error::Format { .. } | Error::Checkpoint(_) => {
                CliError::Io(e.to_string())
            }
            Error::InvalidArgument(_) | Error::Indivisible { .. } | Error::Json(_) => {
                CliError::Config(e.to_string())
            }
            other => CliError::Failed(other.to_string()),
        }
    }
}
