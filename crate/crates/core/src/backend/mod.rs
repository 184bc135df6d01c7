//! Classifier backends.
//!
//! Two implementations sit behind [`Classifier`]: a native linear softmax
//! head over hashed n-gram features, trained with plain minibatch SGD, and a
//! client for a hosted fine-tuning/chat-completions service. A mock of that
//! service lives in [`mock`] for contract tests and offline runs.

pub mod features;
pub mod mock;
pub mod remote;
pub mod softmax;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CorpusError, LabeledExample};

pub use features::{featurize, FeatureVector, FeaturizerConfig};
pub use remote::{RemoteClassifier, RemoteClient, RemoteConfig, RemoteError, RemoteFactory};
pub use softmax::{NativeClassifier, NativeConfig, NativeFactory, SoftmaxModel, TrainingTrace};

/// Searched fine-tuning knobs: epochs, batch size and learning-rate
/// multiplier.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    pub epochs: u32,
    pub batch_size: u32,
    pub lr_multiplier: f64,
}

impl Hyperparameters {
    pub fn new(epochs: u32, batch_size: u32, lr_multiplier: f64) -> Self {
        Hyperparameters {
            epochs,
            batch_size,
            lr_multiplier,
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.epochs < 1 {
            return Err(BackendError::InvalidHyperparameters("epochs must be ≥ 1".into()));
        }
        if self.batch_size < 1 {
            return Err(BackendError::InvalidHyperparameters(
                "batch size must be ≥ 1".into(),
            ));
        }
        if !(self.lr_multiplier.is_finite() && self.lr_multiplier > 0.0) {
            return Err(BackendError::InvalidHyperparameters(format!(
                "learning-rate multiplier must be > 0, got {}",
                self.lr_multiplier
            )));
        }
        Ok(())
    }
}

impl std::fmt::Display for Hyperparameters {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "(E={}, B={}, LR={})",
            self.epochs, self.batch_size, self.lr_multiplier
        )
    }
}

/// Output of one classification call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionResult {
    pub raw_text: String,
    /// Class probabilities in taxonomy order (native backend only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probabilities: Option<Vec<f64>>,
    /// Served from the response cache without a wire call.
    #[serde(default)]
    pub cached: bool,
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("feature dimension must be at least 2, got {0}")]
    FeatureDimension(usize),
    #[error("invalid n-gram range {0}..={1}")]
    NgramRange(usize, usize),
    #[error("feature vector has dimension {got}, model expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite values: {0}")]
    NonFinite(String),
    #[error("training diverged: non-finite gradient in epoch {epoch}, batch {batch}")]
    Divergence { epoch: usize, batch: usize },
    #[error("invalid hyperparameters: {0}")]
    InvalidHyperparameters(String),
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("label {0:?} is not one of the eight classes")]
    OutOfVocabulary(String),
    #[error(transparent)]
    Prompt(#[from] CorpusError),
    #[error(transparent)]
    Remote(#[from] RemoteError),
    #[error("fine-tuning job {job_id} ended as {status}")]
    JobNotSucceeded { job_id: String, status: String },
    #[error("classifier not ready: {0}")]
    NotReady(String),
    #[error("model file {path}: {message}")]
    ModelFile { path: String, message: String },
}

/// Anything that maps a (part, assembly) pair to raw label text.
pub trait Classifier: Send + Sync {
    /// Identifier recorded next to each prediction (model path or remote id).
    fn id(&self) -> &str;

    /// Cheap readiness check made before a batch starts.
    fn ensure_ready(&self) -> Result<(), BackendError> {
        Ok(())
    }

    fn predict(&self, part_name: &str, assembly_name: &str)
        -> Result<PredictionResult, BackendError>;

    /// Predicts a batch; output order matches `queries`.
    fn predict_many(
        &self,
        queries: &[(String, String)],
    ) -> Vec<Result<PredictionResult, BackendError>> {
        queries
            .iter()
            .map(|(part, assembly)| self.predict(part, assembly))
            .collect()
    }
}

/// Trains a fresh classifier per hyperparameter trial.
pub trait ClassifierFactory: Sync {
    /// Whether trials may train concurrently.
    fn supports_parallel_trials(&self) -> bool {
        false
    }

    fn build(
        &self,
        hp: &Hyperparameters,
        train: &[LabeledExample],
        trial: usize,
    ) -> Result<Box<dyn Classifier>, BackendError>;
}
