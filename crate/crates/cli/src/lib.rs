//! Experiment runner behind the `adapter-lens` binary: configuration,
//! run-directory layout, and one function per subcommand.

mod commands;
mod config;

use std::path::PathBuf;

pub use commands::{run, Command, Layout, RunOutput};
pub use config::{hash_json, AdaptSection, AnalysisConfig, CorpusSection, ExperimentConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Schema(String),

    #[error("missing checkpoint {}", .0.display())]
    MissingCheckpoint(PathBuf),

    #[error("numerical failure: {0}")]
    NonFinite(String),

    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Schema(_) => 2,
            CliError::MissingCheckpoint(_) => 3,
            CliError::NonFinite(_) => 4,
            CliError::Other(_) => 1,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Schema(_) => "schema",
            CliError::MissingCheckpoint(_) => "missing_checkpoint",
            CliError::NonFinite(_) => "non_finite",
            CliError::Other(_) => "error",
        }
    }

    /// The machine-readable line printed on failure.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "status": "error",
            "kind": self.kind(),
            "exit_code": self.exit_code(),
            "message": self.to_string(),
        })
    }
}

impl From<adapter_lens::Error> for CliError {
    fn from(e: adapter_lens::Error) -> Self {
        match e {
            adapter_lens::Error::NonFiniteLoss { .. } => CliError::NonFinite(e.to_string()),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Other(e.to_string())
    }
}
