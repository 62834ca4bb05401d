//! Experiment runner behind the `nvrm` binary.
//!
//! A run reads an [`config::ExperimentConfig`], executes one experiment per
//! trial seed and appends [`records::MetricRecord`]s to a CSV or JSONL file.

pub mod config;
pub mod records;
pub mod run;

use std::fmt;

#[derive(Debug)]
pub enum CliError {
    /// Unreadable or malformed config, or a refused rerun.
    Config(String),
    /// A config that parsed but failed validation, one entry per field.
    Invalid(Vec<String>),
    /// Anything that went wrong while running.
    Runtime(String),
    /// The run finished but its pass criterion did not hold.
    CheckFailed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Invalid(_) => 2,
            CliError::Runtime(_) | CliError::CheckFailed(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Invalid(problems) => {
                write!(f, "invalid config:")?;
                for p in problems {
                    write!(f, "\n  {p}")?;
                }
                Ok(())
            }
            CliError::Runtime(m) => write!(f, "run failed: {m}"),
            CliError::CheckFailed(m) => write!(f, "check failed: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<nvrm::Error> for CliError {
    fn from(e: nvrm::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}
