//! Experiment runner for the neural minimizing-movement scheme: presets,
//! flat config files, CSV ingestion and trajectory emission.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod compare;
pub mod config;
pub mod experiment;
pub mod ingest;
pub mod targets;

use std::path::PathBuf;

pub use config::{ExperimentConfig, Preset, SolverKind};
pub use experiment::{run_experiment, Experiment, ExperimentReport, SolverOutcome};
pub use ingest::{ingest_csv, CsvSchema, Ingested};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] neural_mms::Error),
    #[error("config key '{key}': {message}")]
    Config { key: String, message: String },
    #[error("{path}: row {row}, column '{column}': {message}")]
    Ingest {
        path: PathBuf,
        row: usize,
        column: String,
        message: String,
    },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Input(String),
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
    let path = path.into();
    move |source| CliError::Io { path, source }
}
