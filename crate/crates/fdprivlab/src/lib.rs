//! Experiment harness around `fdlab`: JSON configs in, `report.json`,
//! `roc_<attack>.csv`, and a per-round `trace.ndjson` out.

pub mod config;
pub mod experiment;
pub mod report;
pub mod sweep;

pub use config::SCHEMA_VERSION;

/// Failures split by exit code: a bad request (2) versus a run that
/// started and then aborted (3).
#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("runtime abort: {0}")]
    Runtime(String),
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Runtime(_) => 3,
        }
    }
}
