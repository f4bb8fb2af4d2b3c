//! Experiment harness around the `morec` library: data preparation, a cached
//! pretrain, a sweep of continual-training runs, evaluation and a report
//! bundle (`report.json`, `table.csv`, `frontier.csv`, `alpha_trace.csv`).

pub mod config;
pub mod pipeline;
pub mod report;

use std::fmt;

pub use config::{ExperimentConfig, Overrides, SweepEntry};
pub use pipeline::run_experiment;
pub use report::{emit_report, Report};

/// Exit code for configuration problems.
pub const EXIT_CONFIG: i32 = 2;
/// Exit code for failures while running.
pub const EXIT_FAILED: i32 = 1;

#[derive(Debug)]
pub enum RunError {
    /// Every problem found while validating the configuration.
    Config(Vec<String>),
    Failed(anyhow::Error),
}

impl RunError {
    pub fn config(msg: impl Into<String>) -> Self {
        RunError::Config(vec![msg.into()])
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => EXIT_CONFIG,
            RunError::Failed(_) => EXIT_FAILED,
        }
    }
}

impl fmt::Display for RunError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RunError::Config(msgs) => {
                write!(f, "invalid configuration:")?;
                for m in msgs {
                    write!(f, "\n  - {m}")?;
                }
                Ok(())
            }
            RunError::Failed(e) => write!(f, "{e:#}"),
        }
    }
}

impl std::error::Error for RunError {}

impl From<anyhow::Error> for RunError {
    fn from(e: anyhow::Error) -> Self {
        RunError::Failed(e)
    }
}

impl From<morec::Error> for RunError {
    fn from(e: morec::Error) -> Self {
        RunError::Failed(e.into())
    }
}

impl From<std::io::Error> for RunError {
    fn from(e: std::io::Error) -> Self {
        RunError::Failed(e.into())
    }
}
