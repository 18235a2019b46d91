//! Process-level error classification. Every failure funnels into one of
//! three exit codes: configuration problems (2), numerical aborts (3),
//! and everything else (1).

use std::process::ExitCode;

/// Top-level failure, tagged with how the process should exit.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// The config file, command line, or environment is unusable.
    #[error("config error: {0}")]
    Config(String),
    /// Training or evaluation produced non-finite numbers.
    #[error("numerical abort: {0}")]
    Numerical(String),
    /// I/O and other runtime failures.
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        match self {
            CliError::Config(_) => ExitCode::from(2),
            CliError::Numerical(_) => ExitCode::from(3),
            CliError::Other(_) => ExitCode::from(1),
        }
    }

    /// Wraps a library error found while loading or validating
    /// configuration, where any failure is the config's fault.
    pub fn from_config_phase(err: fseb::error::Error) -> Self {
        CliError::Config(err.to_string())
    }

    /// Wraps a library error raised mid-run, where only numerical
    /// failures get the dedicated exit code.
    pub fn from_run_phase(err: fseb::error::Error) -> Self {
        match err {
            fseb::error::Error::Numerical(msg) => CliError::Numerical(msg),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(err: std::io::Error) -> Self {
        CliError::Other(err.to_string())
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
