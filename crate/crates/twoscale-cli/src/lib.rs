//! Configuration, reproducibility and I/O shell around the `twoscale`
//! library: parses experiment configs, runs one pipeline stage per
//! subcommand and records every output in a manifest.

pub mod commands;
pub mod config;
pub mod manifest;

use std::path::Path;
use thiserror::Error;
use twoscale::container::ContainerError;
use twoscale::corrector::CorrectorError;
use twoscale::environment::EnvError;
use twoscale::experiment::ExperimentError;
use twoscale::path_clt::PathError;
use twoscale::pde_solver::PdeError;
use twoscale::stream_solver::StreamError;

pub use commands::{run, RunOptions, Stage};
pub use config::{config_to_toml, parse_config, parse_config_str, ConfigError};
pub use manifest::{RunManifest, CSV_SCHEMA_VERSION};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Stream(#[from] StreamError),
    #[error(transparent)]
    Corrector(#[from] CorrectorError),
    #[error(transparent)]
    Path(#[from] PathError),
    #[error(transparent)]
    Pde(#[from] PdeError),
    #[error(transparent)]
    Experiment(#[from] ExperimentError),
    #[error("run failed; partial report written to {partial}: {error}")]
    Partial { partial: String, error: ExperimentError },
    #[error("{0}")]
    Invalid(String),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.display().to_string(), source }
    }

    /// Stable machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Config(ConfigError::Parse { .. }) => "parse",
            Self::Config(ConfigError::Validation(_)) => "validation",
            Self::Config(_) => "config",
            Self::Io { .. } => "io",
            Self::Json(_) | Self::Csv(_) => "serialization",
            Self::Container(_) => "container",
            Self::Env(_) => "environment",
            Self::Stream(_) => "stream",
            Self::Corrector(_) => "corrector",
            Self::Path(_) => "path",
            Self::Pde(_) => "pde",
            Self::Experiment(_) => "experiment",
            Self::Partial { .. } => "partial-run",
            Self::Invalid(_) => "invalid-argument",
        }
    }

    /// Error document printed on failure.
    pub fn to_json(&self) -> serde_json::Value {
        let mut chain = Vec::new();
        let mut cur: Option<&dyn std::error::Error> = std::error::Error::source(self);
        while let Some(e) = cur {
            chain.push(e.to_string());
            cur = e.source();
        }
        let mut body = serde_json::json!({ "kind": self.kind(), "message": self.to_string(), "causes": chain });
        if let Self::Config(ConfigError::Parse { line, column, .. }) = self {
            body["line"] = (*line).into();
            body["column"] = (*column).into();
        }
        serde_json::json!({ "error": body })
    }
}
