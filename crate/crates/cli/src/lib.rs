//! Command-line orchestration of the classification pipeline.

pub mod args;
pub mod config;
pub mod pipeline;
pub mod report;

use args::Cli;
use config::PipelineConfig;
use pipeline::{ErrorKind, Inputs, Pipeline, StageError};

/// Builds the configuration for `cli` and runs its subcommand.
pub fn run(cli: &Cli) -> Result<(), StageError> {
    let mut cfg = match &cli.overrides.config {
        Some(p) => PipelineConfig::load(p).map_err(|error| StageError {
            stage: "config",
            kind: ErrorKind::Config,
            error,
        })?,
        None => PipelineConfig::default(),
    };
    cli.overrides.apply(&mut cfg).map_err(|error| StageError {
        stage: "config",
        kind: ErrorKind::Config,
        error,
    })?;
    let inputs = Inputs {
        model: cli.overrides.model.clone(),
        model_id: cli.overrides.model_id.clone(),
        parts: cli.overrides.parts.clone(),
    };
    Pipeline::new(cfg, inputs)?.run(cli.command)
}
