use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use funcda_core::backend::Hyperparameters;
use funcda_core::eval::Metric;

use crate::config::{BackendKind, PipelineConfig};

#[derive(Debug, Parser)]
#[command(name = "funcda", version, about = "Functional-basis classification pipeline for mechanical parts")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub overrides: Overrides,
    /// Repeat for more log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Parse and clean the OSDR export.
    Ingest,
    /// Keep ABC parts whose names occur in the cleaned OSDR records.
    Match,
    /// Split records into train and test sets.
    Split,
    /// Write JSONL chat files for the train and test sets.
    Prepare,
    /// Random hyperparameter search, plus the training-set-size study.
    Search,
    /// Train one model with the fixed or searched hyperparameters.
    Train,
    /// Evaluate the trained model (and baseline) on train and test sets.
    Evaluate,
    /// Label unlabeled parts with the trained model.
    Annotate,
    /// Render comparison tables and distribution data from earlier stages.
    Report,
    /// Every stage from ingest to report.
    Run,
    /// Serve the mock fine-tuning API until interrupted.
    MockServer {
        #[arg(long, default_value_t = 8787)]
        port: u16,
    },
}

/// Flags override values from `--config`. Secrets are never flags.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// JSON pipeline configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub workdir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub osdr: Option<PathBuf>,
    /// ABC metadata chunk (CSV or JSONL); repeatable.
    #[arg(long, global = true)]
    pub abc: Vec<PathBuf>,
    #[arg(long, global = true)]
    pub taxonomy: Option<PathBuf>,
    /// Sets the split, search and training seeds together.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub test_fraction: Option<f64>,
    /// Fraction of the training pool kept after the split.
    #[arg(long, global = true)]
    pub subsample: Option<f64>,
    #[arg(long, global = true)]
    pub stratified: Option<bool>,
    #[arg(long, global = true)]
    pub trials: Option<usize>,
    #[arg(long, global = true)]
    pub parallel_trials: Option<usize>,
    #[arg(long, global = true)]
    pub objective: Option<Metric>,
    #[arg(long, global = true, value_enum)]
    pub backend: Option<BackendKind>,
    #[arg(long, global = true)]
    pub base_rate: Option<f64>,
    #[arg(long, global = true)]
    pub feature_dim: Option<usize>,
    #[arg(long, global = true)]
    pub epochs: Option<u32>,
    #[arg(long, global = true)]
    pub batch_size: Option<u32>,
    #[arg(long, global = true)]
    pub lr: Option<f64>,
    /// Comma-separated fractions for the training-set-size study, or `none`.
    #[arg(long, global = true)]
    pub subsample_fractions: Option<String>,
    #[arg(long, global = true)]
    pub macro_all_classes: bool,
    #[arg(long, global = true)]
    pub no_baseline: bool,
    #[arg(long, global = true)]
    pub system_message: Option<String>,
    /// Native model file for evaluate/annotate (default: workdir model).
    #[arg(long, global = true)]
    pub model: Option<PathBuf>,
    /// Remote fine-tuned model id for evaluate/annotate.
    #[arg(long, global = true)]
    pub model_id: Option<String>,
    /// Parts to annotate (ABC CSV/JSONL; default: matched parts).
    #[arg(long, global = true)]
    pub parts: Option<PathBuf>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut PipelineConfig) -> anyhow::Result<()> {
        if let Some(v) = &self.workdir {
            cfg.workdir = v.clone();
        }
        if let Some(v) = &self.osdr {
            cfg.osdr = Some(v.clone());
        }
        if !self.abc.is_empty() {
            cfg.abc = self.abc.clone();
        }
        if let Some(v) = &self.taxonomy {
            cfg.taxonomy = Some(v.clone());
        }
        if let Some(s) = self.seed {
            cfg.split.seed = s;
            cfg.search.seed = s;
            cfg.train_seed = s;
        }
        if let Some(v) = self.test_fraction {
            cfg.split.test_fraction = v;
        }
        if let Some(v) = self.subsample {
            cfg.split.train_subsample_fraction = v;
        }
        if let Some(v) = self.stratified {
            cfg.split.stratified = v;
        }
        if let Some(v) = self.trials {
            cfg.search.trials = v;
        }
        if let Some(v) = self.parallel_trials {
            cfg.parallel_trials = v;
        }
        if let Some(v) = self.objective {
            cfg.objective = v;
        }
        if let Some(v) = self.backend {
            cfg.backend = v;
        }
        if let Some(v) = self.base_rate {
            cfg.native.base_rate = v;
        }
        if let Some(v) = self.feature_dim {
            cfg.native.featurizer.dim = v;
        }
        match (self.epochs, self.batch_size, self.lr) {
            (None, None, None) => {}
            (Some(e), Some(b), Some(lr)) => cfg.train = Some(Hyperparameters::new(e, b, lr)),
            _ => {
                let base = cfg.train.unwrap_or(Hyperparameters::new(12, 20, 20.0));
                cfg.train = Some(Hyperparameters::new(
                    self.epochs.unwrap_or(base.epochs),
                    self.batch_size.unwrap_or(base.batch_size),
                    self.lr.unwrap_or(base.lr_multiplier),
                ));
            }
        }
        if let Some(v) = &self.subsample_fractions {
            cfg.subsample_fractions = parse_fractions(v)?;
        }
        if self.macro_all_classes {
            cfg.macro_all_classes = true;
        }
        if self.no_baseline {
            cfg.baseline = false;
        }
        if let Some(v) = &self.system_message {
            cfg.remote.system_message = Some(v.clone());
        }
        Ok(())
    }
}

fn parse_fractions(text: &str) -> anyhow::Result<Vec<f64>> {
    let t = text.trim();
    if t.is_empty() || t.eq_ignore_ascii_case("none") {
        return Ok(Vec::new());
    }
    t.split(',')
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .map_err(|e| anyhow::anyhow!("--subsample-fractions: {p:?}: {e}"))
        })
        .collect()
}
