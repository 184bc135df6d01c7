//! Pipeline configuration: a JSON file plus command-line overrides.

use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context};
use funcda_core::backend::remote::RetryPolicy;
use funcda_core::backend::{Hyperparameters, NativeConfig, RemoteConfig};
use funcda_core::corpus::SplitSpec;
use funcda_core::eval::{EvalOptions, Metric};
use funcda_core::search::SearchSpace;
use funcda_core::taxonomy::{builtin_taxonomy, Taxonomy};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Native,
    Remote,
}

/// Remote settings that may live in a config file. The API key is read from
/// the environment only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RemoteSettings {
    /// Overrides FUNC_DA_BASE_URL when set.
    pub base_url: Option<String>,
    pub base_model: String,
    pub max_attempts: u32,
    pub min_request_interval_ms: u64,
    pub max_in_flight: usize,
    pub poll_interval_ms: u64,
    pub poll_timeout_secs: u64,
    pub request_timeout_secs: u64,
    pub system_message: Option<String>,
}

impl Default for RemoteSettings {
    fn default() -> Self {
        let d = RemoteConfig::default();
        RemoteSettings {
            base_url: None,
            base_model: d.base_model,
            max_attempts: d.retry.max_attempts,
            min_request_interval_ms: d.min_request_interval.as_millis() as u64,
            max_in_flight: d.max_in_flight,
            poll_interval_ms: d.poll_interval.as_millis() as u64,
            poll_timeout_secs: d.poll_timeout.as_secs(),
            request_timeout_secs: d.request_timeout.as_secs(),
            system_message: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub osdr: Option<PathBuf>,
    pub abc: Vec<PathBuf>,
    pub workdir: PathBuf,
    pub taxonomy: Option<PathBuf>,
    pub split: SplitSpec,
    pub search: SearchSpace,
    pub objective: Metric,
    pub parallel_trials: usize,
    pub macro_all_classes: bool,
    pub backend: BackendKind,
    pub native: NativeConfig,
    pub train_seed: u64,
    /// Fixed training configuration; when absent the search winner is used.
    pub train: Option<Hyperparameters>,
    /// Fractions for the training-set-size study; empty skips it.
    pub subsample_fractions: Vec<f64>,
    /// Also evaluate an untrained baseline (zero weights, or the remote base model).
    pub baseline: bool,
    /// Annotation checkpoint block size; 0 disables checkpointing.
    pub checkpoint_block: usize,
    pub remote: RemoteSettings,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            osdr: None,
            abc: Vec::new(),
            workdir: PathBuf::from("work"),
            taxonomy: None,
            split: SplitSpec::default(),
            search: SearchSpace::default(),
            objective: Metric::Accuracy,
            parallel_trials: 1,
            macro_all_classes: false,
            backend: BackendKind::Native,
            native: NativeConfig::default(),
            train_seed: 0,
            train: None,
            subsample_fractions: vec![0.1, 0.3, 0.4, 0.5, 0.75, 0.9],
            baseline: true,
            checkpoint_block: 100,
            remote: RemoteSettings::default(),
        }
    }
}

/// Hash and seeds written into every artifact.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub split_seed: u64,
    pub search_seed: u64,
    pub train_seed: u64,
}

impl Provenance {
    pub fn comment_line(&self) -> String {
        format!(
            "# provenance config_hash={} split_seed={} search_seed={} train_seed={}\n",
            self.config_hash, self.split_seed, self.search_seed, self.train_seed
        )
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.split.validate()?;
        self.search.validate()?;
        self.native.featurizer.validate()?;
        if !(self.native.base_rate.is_finite() && self.native.base_rate > 0.0) {
            bail!("native.base_rate must be > 0, got {}", self.native.base_rate);
        }
        if let Some(hp) = &self.train {
            hp.validate()?;
        }
        for &f in &self.subsample_fractions {
            if !(f > 0.0 && f <= 1.0) {
                bail!("subsample fraction {f} is outside (0, 1]");
            }
        }
        if self.parallel_trials == 0 {
            bail!("parallel_trials must be ≥ 1");
        }
        if self.remote.max_attempts == 0 || self.remote.max_in_flight == 0 {
            bail!("remote.max_attempts and remote.max_in_flight must be ≥ 1");
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON of every setting except file locations,
    /// so relocating inputs or the workdir keeps the hash.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.osdr = None;
        c.abc.clear();
        c.workdir = PathBuf::new();
        c.taxonomy = None;
        let json = serde_json::to_string(&c).expect("config serializes");
        Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn provenance(&self) -> Provenance {
        Provenance {
            config_hash: self.hash(),
            split_seed: self.split.seed,
            search_seed: self.search.seed,
            train_seed: self.train_seed,
        }
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            macro_all_classes: self.macro_all_classes,
        }
    }

    pub fn load_taxonomy(&self) -> anyhow::Result<Taxonomy> {
        match &self.taxonomy {
            Some(p) => Taxonomy::load(p).with_context(|| format!("loading taxonomy {}", p.display())),
            None => Ok(builtin_taxonomy()),
        }
    }

    /// Client settings from the environment, with config-file values taking precedence.
    pub fn remote_config(&self) -> RemoteConfig {
        let mut cfg = RemoteConfig::from_env();
        let r = &self.remote;
        if let Some(url) = &r.base_url {
            cfg.base_url = url.clone();
        }
        cfg.base_model = r.base_model.clone();
        cfg.retry = RetryPolicy {
            max_attempts: r.max_attempts,
            ..cfg.retry
        };
        cfg.min_request_interval = Duration::from_millis(r.min_request_interval_ms);
        cfg.max_in_flight = r.max_in_flight;
        cfg.poll_interval = Duration::from_millis(r.poll_interval_ms);
        cfg.poll_timeout = Duration::from_secs(r.poll_timeout_secs);
        cfg.request_timeout = Duration::from_secs(r.request_timeout_secs);
        cfg.system_message = r.system_message.clone();
        cfg.cache_path = Some(self.workdir.join("remote_cache.jsonl"));
        cfg
    }
}
