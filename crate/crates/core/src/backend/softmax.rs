//! Linear softmax classifier over hashed prompt features.
//!
//! Class probabilities are `softmax(xᵀW)` for a feature vector `x` and an
//! `F × 8` weight matrix `W`. Training minimizes summed cross-entropy with
//! minibatch gradient steps `W ← W − (LR · base_rate) · Σ_batch x (p − onehot(y))ᵀ`,
//! visiting batches in a freshly seeded shuffle each epoch.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::features::{featurize, FeatureVector, FeaturizerConfig};
use super::{BackendError, Classifier, ClassifierFactory, Hyperparameters, PredictionResult};
use crate::corpus::{render_prompt, LabeledExample};
use crate::taxonomy::{FunctionLabel, Taxonomy};

pub const NUM_CLASSES: usize = FunctionLabel::COUNT;

const MODEL_FORMAT: &str = "funcda-softmax/1";

/// Weights of the softmax head plus the featurizer settings needed to
/// reproduce its inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftmaxModel {
    format: String,
    featurizer: FeaturizerConfig,
    labels: Vec<String>,
    /// Row-major `dim × NUM_CLASSES`.
    weights: Vec<f64>,
}

fn canonical_labels() -> Vec<String> {
    FunctionLabel::ALL.iter().map(|l| l.name().to_string()).collect()
}

impl SoftmaxModel {
    pub fn zeros(featurizer: FeaturizerConfig) -> Result<Self, BackendError> {
        featurizer.validate()?;
        Ok(SoftmaxModel {
            format: MODEL_FORMAT.into(),
            featurizer,
            labels: canonical_labels(),
            weights: vec![0.0; featurizer.dim * NUM_CLASSES],
        })
    }

    pub fn from_weights(featurizer: FeaturizerConfig, weights: Vec<f64>) -> Result<Self, BackendError> {
        featurizer.validate()?;
        if weights.len() != featurizer.dim * NUM_CLASSES {
            return Err(BackendError::DimensionMismatch {
                expected: featurizer.dim * NUM_CLASSES,
                got: weights.len(),
            });
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(BackendError::NonFinite("model weights".into()));
        }
        Ok(SoftmaxModel {
            format: MODEL_FORMAT.into(),
            featurizer,
            labels: canonical_labels(),
            weights,
        })
    }

    pub fn featurizer(&self) -> &FeaturizerConfig {
        &self.featurizer
    }

    pub fn dim(&self) -> usize {
        self.featurizer.dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weight(&self, feature: usize, class: usize) -> f64 {
        self.weights[feature * NUM_CLASSES + class]
    }

    pub fn set_weight(&mut self, feature: usize, class: usize, value: f64) {
        self.weights[feature * NUM_CLASSES + class] = value;
    }

    pub fn logits(&self, x: &FeatureVector) -> Result<[f64; NUM_CLASSES], BackendError> {
        if x.dim() != self.dim() {
            return Err(BackendError::DimensionMismatch {
                expected: self.dim(),
                got: x.dim(),
            });
        }
        let mut z = [0.0; NUM_CLASSES];
        for &(f, v) in x.entries() {
            let row = &self.weights[f * NUM_CLASSES..(f + 1) * NUM_CLASSES];
            for (zc, w) in z.iter_mut().zip(row) {
                *zc += v * w;
            }
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(BackendError::NonFinite("logits".into()));
        }
        Ok(z)
    }

    pub fn save(&self, path: &Path) -> Result<(), BackendError> {
        let bytes = serde_json::to_vec(self).map_err(|e| BackendError::ModelFile {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        std::fs::write(path, bytes).map_err(|e| BackendError::ModelFile {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, BackendError> {
        let model_err = |message: String| BackendError::ModelFile {
            path: path.display().to_string(),
            message,
        };
        let bytes = std::fs::read(path).map_err(|e| model_err(e.to_string()))?;
        let model: SoftmaxModel =
            serde_json::from_slice(&bytes).map_err(|e| model_err(e.to_string()))?;
        if model.format != MODEL_FORMAT {
            return Err(model_err(format!("unsupported format {:?}", model.format)));
        }
        if model.labels != canonical_labels() {
            return Err(model_err("class columns do not match the taxonomy order".into()));
        }
        SoftmaxModel::from_weights(model.featurizer, model.weights)
            .map_err(|e| model_err(e.to_string()))
    }
}

fn log_sum_exp(z: &[f64; NUM_CLASSES]) -> f64 {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Max-shifted softmax.
pub fn softmax(z: &[f64; NUM_CLASSES]) -> [f64; NUM_CLASSES] {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut p = [0.0; NUM_CLASSES];
    let mut sum = 0.0;
    for (pc, zc) in p.iter_mut().zip(z) {
        *pc = (zc - max).exp();
        sum += *pc;
    }
    for pc in p.iter_mut() {
        *pc /= sum;
    }
    p
}

/// Lowest index among the maxima.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

pub fn softmax_predict(model: &SoftmaxModel, x: &FeatureVector) -> Result<[f64; NUM_CLASSES], BackendError> {
    Ok(softmax(&model.logits(x)?))
}

fn class_index(y: &FunctionLabel) -> Result<usize, BackendError> {
    y.index()
        .ok_or_else(|| BackendError::OutOfVocabulary(y.name().to_string()))
}

/// Cross-entropy `−log P(y | x)`.
pub fn example_loss(model: &SoftmaxModel, x: &FeatureVector, y: &FunctionLabel) -> Result<f64, BackendError> {
    let y = class_index(y)?;
    let z = model.logits(x)?;
    Ok((log_sum_exp(&z) - z[y]).max(0.0))
}

/// Loss and its dense gradient with respect to `W` (row-major, like the
/// weights).
pub fn loss_gradient(
    model: &SoftmaxModel,
    x: &FeatureVector,
    y: &FunctionLabel,
) -> Result<(f64, Vec<f64>), BackendError> {
    let y = class_index(y)?;
    let z = model.logits(x)?;
    let p = softmax(&z);
    let mut grad = vec![0.0; model.weights.len()];
    for &(f, v) in x.entries() {
        for c in 0..NUM_CLASSES {
            let target = if c == y { 1.0 } else { 0.0 };
            grad[f * NUM_CLASSES + c] = v * (p[c] - target);
        }
    }
    Ok(((log_sum_exp(&z) - z[y]).max(0.0), grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NativeConfig {
    pub featurizer: FeaturizerConfig,
    /// Scaled by the learning-rate multiplier to get the SGD step size.
    pub base_rate: f64,
}

impl Default for NativeConfig {
    fn default() -> Self {
        NativeConfig {
            featurizer: FeaturizerConfig::default(),
            base_rate: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingTrace {
    /// Mean per-example loss of each epoch, measured before each batch's update.
    pub epoch_losses: Vec<f64>,
    pub train_accuracy: f64,
    /// Number of gradient steps taken.
    pub steps: usize,
}

/// One pass over `data` in seeded-shuffled batches of `hp.batch_size`; the
/// last batch may be smaller. Returns the epoch's mean loss.
pub fn sgd_epoch(
    model: &mut SoftmaxModel,
    data: &[(FeatureVector, usize)],
    hp: &Hyperparameters,
    base_rate: f64,
    rng: &mut ChaCha8Rng,
    epoch: usize,
) -> Result<(f64, usize), BackendError> {
    hp.validate()?;
    if data.is_empty() {
        return Err(BackendError::EmptyTrainingSet);
    }
    let step = hp.lr_multiplier * base_rate;
    let dim = model.dim();
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);

    let mut grad = vec![0.0; dim * NUM_CLASSES];
    let mut touched = Vec::new();
    let mut marked = vec![false; dim];
    let mut total_loss = 0.0;
    let mut steps = 0;

    for (batch_no, batch) in order.chunks(hp.batch_size as usize).enumerate() {
        for &i in batch {
            let (x, y) = &data[i];
            let z = model.logits(x).map_err(|e| match e {
                BackendError::NonFinite(_) => BackendError::Divergence {
                    epoch,
                    batch: batch_no,
                },
                other => other,
            })?;
            let p = softmax(&z);
            total_loss += log_sum_exp(&z) - z[*y];
            for &(f, v) in x.entries() {
                if !marked[f] {
                    marked[f] = true;
                    touched.push(f);
                }
                let row = &mut grad[f * NUM_CLASSES..(f + 1) * NUM_CLASSES];
                for (c, g) in row.iter_mut().enumerate() {
                    let target = if c == *y { 1.0 } else { 0.0 };
                    *g += v * (p[c] - target);
                }
            }
        }
        if touched
            .iter()
            .any(|&f| grad[f * NUM_CLASSES..(f + 1) * NUM_CLASSES].iter().any(|g| !g.is_finite()))
        {
            return Err(BackendError::Divergence {
                epoch,
                batch: batch_no,
            });
        }
        for &f in &touched {
            for c in 0..NUM_CLASSES {
                let k = f * NUM_CLASSES + c;
                model.weights[k] -= step * grad[k];
                grad[k] = 0.0;
            }
            marked[f] = false;
        }
        touched.clear();
        steps += 1;
    }
    Ok((total_loss / data.len() as f64, steps))
}

/// Trains from zero weights on pre-featurized data.
pub fn train_features(
    data: &[(FeatureVector, usize)],
    featurizer: FeaturizerConfig,
    hp: &Hyperparameters,
    base_rate: f64,
    seed: u64,
) -> Result<(SoftmaxModel, TrainingTrace), BackendError> {
    hp.validate()?;
    if data.is_empty() {
        return Err(BackendError::EmptyTrainingSet);
    }
    if !(base_rate.is_finite() && base_rate > 0.0) {
        return Err(BackendError::InvalidHyperparameters(format!(
            "base rate must be > 0, got {base_rate}"
        )));
    }
    let mut model = SoftmaxModel::zeros(featurizer)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut epoch_losses = Vec::with_capacity(hp.epochs as usize);
    let mut steps = 0;
    for epoch in 0..hp.epochs as usize {
        let (loss, n) = sgd_epoch(&mut model, data, hp, base_rate, &mut rng, epoch)?;
        tracing::debug!(epoch, loss, "epoch finished");
        epoch_losses.push(loss);
        steps += n;
    }
    let mut correct = 0usize;
    for (x, y) in data {
        if argmax(&softmax_predict(&model, x)?) == *y {
            correct += 1;
        }
    }
    Ok((
        model,
        TrainingTrace {
            epoch_losses,
            train_accuracy: correct as f64 / data.len() as f64,
            steps,
        },
    ))
}

/// Featurizes each example's rendered prompt.
pub fn prepare_features(
    examples: &[LabeledExample],
    taxonomy: &Taxonomy,
    featurizer: &FeaturizerConfig,
) -> Result<Vec<(FeatureVector, usize)>, BackendError> {
    examples
        .iter()
        .map(|ex| {
            let y = class_index(&ex.label)?;
            let prompt = render_prompt(&ex.part_name, &ex.system_name, taxonomy)?;
            Ok((featurize(&prompt, featurizer)?, y))
        })
        .collect()
}

/// Trains a native classifier on labeled examples.
pub fn train(
    examples: &[LabeledExample],
    hp: &Hyperparameters,
    seed: u64,
    config: &NativeConfig,
    taxonomy: &Taxonomy,
) -> Result<(SoftmaxModel, TrainingTrace), BackendError> {
    hp.validate()?;
    if examples.is_empty() {
        return Err(BackendError::EmptyTrainingSet);
    }
    let data = prepare_features(examples, taxonomy, &config.featurizer)?;
    train_features(&data, config.featurizer, hp, config.base_rate, seed)
}

/// A trained softmax model bound to a taxonomy for prompt rendering.
#[derive(Debug, Clone)]
pub struct NativeClassifier {
    id: String,
    model: SoftmaxModel,
    taxonomy: Taxonomy,
}

impl NativeClassifier {
    pub fn new(id: impl Into<String>, model: SoftmaxModel, taxonomy: Taxonomy) -> Self {
        NativeClassifier {
            id: id.into(),
            model,
            taxonomy,
        }
    }

    pub fn model(&self) -> &SoftmaxModel {
        &self.model
    }
}

impl Classifier for NativeClassifier {
    fn id(&self) -> &str {
        &self.id
    }

    fn predict(&self, part_name: &str, assembly_name: &str) -> Result<PredictionResult, BackendError> {
        let prompt = render_prompt(part_name, assembly_name, &self.taxonomy)?;
        let x = featurize(&prompt, self.model.featurizer())?;
        let p = softmax_predict(&self.model, &x)?;
        let best = argmax(&p);
        Ok(PredictionResult {
            raw_text: FunctionLabel::ALL[best].name().to_string(),
            probabilities: Some(p.to_vec()),
            cached: false,
        })
    }
}

/// Builds native classifiers for hyperparameter search.
#[derive(Debug, Clone)]
pub struct NativeFactory {
    pub taxonomy: Taxonomy,
    pub config: NativeConfig,
    pub seed: u64,
}

impl ClassifierFactory for NativeFactory {
    fn supports_parallel_trials(&self) -> bool {
        true
    }

    fn build(
        &self,
        hp: &Hyperparameters,
        train_set: &[LabeledExample],
        trial: usize,
    ) -> Result<Box<dyn Classifier>, BackendError> {
        let (model, trace) = train(train_set, hp, self.seed, &self.config, &self.taxonomy)?;
        tracing::info!(trial, %hp, train_accuracy = trace.train_accuracy, "native trial trained");
        Ok(Box::new(NativeClassifier::new(
            format!("native-trial-{trial}"),
            model,
            self.taxonomy.clone(),
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taxonomy::builtin_taxonomy;
    use rand::Rng;

    fn small_cfg(dim: usize) -> FeaturizerConfig {
        FeaturizerConfig {
            dim,
            ngram_min: 1,
            ngram_max: 1,
            hash_seed: 0,
        }
    }

    fn random_instance(rng: &mut ChaCha8Rng, dim: usize) -> (SoftmaxModel, FeatureVector, FunctionLabel) {
        let weights: Vec<f64> = (0..dim * NUM_CLASSES).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let model = SoftmaxModel::from_weights(small_cfg(dim), weights).unwrap();
        let mut dense: Vec<f64> = (0..dim).map(|_| rng.gen_range(-2.0..2.0)).collect();
        dense[dim - 1] = 1.0;
        let y = FunctionLabel::ALL[rng.gen_range(0..NUM_CLASSES)].clone();
        (model, FeatureVector::from_dense(&dense), y)
    }

    // Direct evaluation of the loss without max-shifting, as an independent
    // reference for small logits.
    fn naive_loss(model: &SoftmaxModel, x: &[f64], y: usize) -> f64 {
        let z: Vec<f64> = (0..NUM_CLASSES)
            .map(|c| (0..x.len()).map(|f| x[f] * model.weight(f, c)).sum())
            .collect();
        let denom: f64 = z.iter().map(|v| v.exp()).sum();
        -(z[y].exp() / denom).ln()
    }

    #[test]
    fn zero_weights_give_uniform_and_ln8() {
        let model = SoftmaxModel::zeros(small_cfg(6)).unwrap();
        let x = FeatureVector::from_dense(&[1.0, 0.0, 2.0, 0.0, 0.0, 1.0]);
        let p = softmax_predict(&model, &x).unwrap();
        assert!(p.iter().all(|v| *v == 0.125));
        let loss = example_loss(&model, &x, &FunctionLabel::Signal).unwrap();
        assert!((loss - 8f64.ln()).abs() < 1e-15);
        assert!((loss - 2.0794).abs() < 1e-4);
    }

    #[test]
    fn single_hot_logit_probability() {
        let p = softmax(&[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let e = std::f64::consts::E;
        assert!((p[0] - e / (e + 7.0)).abs() < 1e-15);
        assert!((p[0] - 0.2797).abs() < 1e-4);
    }

    #[test]
    fn shift_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let z: [f64; 8] = std::array::from_fn(|_| rng.gen_range(-30.0..30.0));
            let k = rng.gen_range(-500.0..500.0);
            let shifted: [f64; 8] = std::array::from_fn(|i| z[i] + k);
            let (a, b) = (softmax(&z), softmax(&shifted));
            assert_eq!(argmax(&a), argmax(&b));
            for i in 0..8 {
                assert!((a[i] - b[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn loss_matches_direct_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let (model, x, y) = random_instance(&mut rng, 5);
            let fast = example_loss(&model, &x, &y).unwrap();
            let slow = naive_loss(&model, &x.to_dense(), y.index().unwrap());
            assert!((fast - slow).abs() < 1e-12, "{fast} vs {slow}");
            assert!(fast >= 0.0);
        }
    }

    #[test]
    fn certain_prediction_has_zero_loss_and_gradient() {
        let mut model = SoftmaxModel::zeros(small_cfg(3)).unwrap();
        model.set_weight(2, 1, 800.0);
        let x = FeatureVector::from_dense(&[0.0, 0.0, 1.0]);
        assert_eq!(example_loss(&model, &x, &FunctionLabel::Channel).unwrap(), 0.0);
        let (_, g) = loss_gradient(&model, &x, &FunctionLabel::Channel).unwrap();
        assert!(g.iter().all(|v| *v == 0.0));

        let before = model.clone();
        let data = vec![(x, 1usize)];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        sgd_epoch(&mut model, &data, &Hyperparameters::new(1, 1, 1.0), 0.1, &mut rng, 0).unwrap();
        assert_eq!(model, before);
    }

    #[test]
    fn out_of_vocabulary_target_is_rejected() {
        let model = SoftmaxModel::zeros(small_cfg(3)).unwrap();
        let x = FeatureVector::from_dense(&[1.0, 0.0, 1.0]);
        let y = FunctionLabel::OutOfVocabulary("gizmo".into());
        assert!(matches!(example_loss(&model, &x, &y), Err(BackendError::OutOfVocabulary(_))));
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let model = SoftmaxModel::zeros(small_cfg(4)).unwrap();
        let x = FeatureVector::from_dense(&[1.0, 1.0]);
        assert!(matches!(
            softmax_predict(&model, &x),
            Err(BackendError::DimensionMismatch { expected: 4, got: 2 })
        ));
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = 1e-4;
        for _ in 0..100 {
            let (model, x, y) = random_instance(&mut rng, 5);
            let (_, analytic) = loss_gradient(&model, &x, &y).unwrap();
            let mut numeric = vec![0.0; analytic.len()];
            for (k, num) in numeric.iter_mut().enumerate() {
                let mut plus = model.clone();
                plus.weights[k] += h;
                let mut minus = model.clone();
                minus.weights[k] -= h;
                *num = (example_loss(&plus, &x, &y).unwrap()
                    - example_loss(&minus, &x, &y).unwrap())
                    / (2.0 * h);
            }
            let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
            let scale = analytic.iter().map(|a| a * a).sum::<f64>().sqrt().max(
                numeric.iter().map(|a| a * a).sum::<f64>().sqrt(),
            );
            assert!(diff / scale.max(1e-12) < 1e-5, "relative error {}", diff / scale);
        }
    }

    #[test]
    fn one_small_step_reduces_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let (mut model, x, y) = random_instance(&mut rng, 6);
            let before = example_loss(&model, &x, &y).unwrap();
            let data = vec![(x.clone(), y.index().unwrap())];
            let mut shuffle = ChaCha8Rng::seed_from_u64(0);
            sgd_epoch(&mut model, &data, &Hyperparameters::new(1, 1, 0.01), 0.1, &mut shuffle, 0).unwrap();
            let after = example_loss(&model, &x, &y).unwrap();
            assert!(after < before, "{after} !< {before}");
        }
    }

    #[test]
    fn full_batch_single_epoch_is_one_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let data: Vec<(FeatureVector, usize)> = (0..7)
            .map(|_| {
                let (_, x, y) = random_instance(&mut rng, 4);
                (x, y.index().unwrap())
            })
            .collect();
        let hp = Hyperparameters::new(1, 50, 2.0);
        let (model, trace) = train_features(&data, small_cfg(4), &hp, 0.1, 0).unwrap();
        assert_eq!(trace.steps, 1);
        assert_eq!(trace.epoch_losses.len(), 1);
        assert!((trace.epoch_losses[0] - 8f64.ln()).abs() < 1e-12);

        // W = 0 − 0.2 · Σ gradients at W = 0
        let zero = SoftmaxModel::zeros(small_cfg(4)).unwrap();
        let mut expected = vec![0.0; zero.weights().len()];
        for (x, y) in &data {
            let (_, g) = loss_gradient(&zero, x, &FunctionLabel::ALL[*y]).unwrap();
            for (e, gk) in expected.iter_mut().zip(g) {
                *e -= 0.2 * gk;
            }
        }
        for (w, e) in model.weights().iter().zip(&expected) {
            assert!((w - e).abs() < 1e-12);
        }
    }

    #[test]
    fn partial_last_batch_is_trained() {
        let data: Vec<(FeatureVector, usize)> = (0..5)
            .map(|i| (FeatureVector::from_dense(&[1.0, 0.0, 1.0]), i % 8))
            .collect();
        let (_, trace) = train_features(&data, small_cfg(3), &Hyperparameters::new(3, 2, 1.0), 0.1, 0).unwrap();
        assert_eq!(trace.steps, 3 * 3);
    }

    #[test]
    fn divergence_is_reported() {
        let mut model = SoftmaxModel::zeros(small_cfg(2)).unwrap();
        model.weights[0] = f64::MAX;
        model.weights[1] = -f64::MAX;
        let data = vec![(FeatureVector::from_dense(&[4.0, 1.0]), 0usize)];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = sgd_epoch(&mut model, &data, &Hyperparameters::new(1, 1, 1.0), 0.1, &mut rng, 3);
        assert!(matches!(err, Err(BackendError::Divergence { epoch: 3, batch: 0 })));
    }

    fn keyword_examples() -> Vec<LabeledExample> {
        (0..200)
            .map(|i| {
                let (kw, label) = if i % 2 == 0 {
                    ("bracket", FunctionLabel::Support)
                } else {
                    ("hose", FunctionLabel::Channel)
                };
                LabeledExample {
                    part_name: format!("{kw} {}", i % 5),
                    system_name: format!("assembly {}", i % 3),
                    label,
                }
            })
            .collect()
    }

    #[test]
    fn separable_two_label_set_is_learned() {
        let tax = builtin_taxonomy();
        let examples = keyword_examples();
        let hp = Hyperparameters::new(20, 4, 0.1);
        let (model, trace) = train(&examples, &hp, 1, &NativeConfig::default(), &tax).unwrap();
        assert_eq!(trace.train_accuracy, 1.0);
        assert_eq!(trace.epoch_losses.len(), 20);
        let violations = trace.epoch_losses[1..]
            .windows(2)
            .filter(|w| w[1] > w[0])
            .count();
        assert!(violations <= 1, "{:?}", trace.epoch_losses);

        let clf = NativeClassifier::new("toy", model, tax);
        let pred = clf.predict("bracket 9", "assembly 7").unwrap();
        assert_eq!(pred.raw_text, "Support");
        let p = pred.probabilities.unwrap();
        assert!(p[FunctionLabel::Support.index().unwrap()] > 0.9);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn training_is_deterministic() {
        let tax = builtin_taxonomy();
        let examples = keyword_examples();
        let hp = Hyperparameters::new(5, 3, 0.5);
        let a = train(&examples, &hp, 77, &NativeConfig::default(), &tax).unwrap();
        let b = train(&examples, &hp, 77, &NativeConfig::default(), &tax).unwrap();
        assert_eq!(a, b);
        for (x, y) in a.1.epoch_losses.iter().zip(&b.1.epoch_losses) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn zero_model_predicts_first_label() {
        let clf = NativeClassifier::new(
            "zero",
            SoftmaxModel::zeros(FeaturizerConfig::default()).unwrap(),
            builtin_taxonomy(),
        );
        let pred = clf.predict("Washer", "Tablet Stand").unwrap();
        assert_eq!(pred.raw_text, "Branch");
    }

    #[test]
    fn model_file_round_trip() {
        let tax = builtin_taxonomy();
        let (model, _) = train(
            &keyword_examples(),
            &Hyperparameters::new(2, 4, 1.0),
            0,
            &NativeConfig::default(),
            &tax,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        model.save(&path).unwrap();
        assert_eq!(SoftmaxModel::load(&path).unwrap(), model);

        std::fs::write(&path, b"{\"format\":\"other\"}").unwrap();
        assert!(matches!(SoftmaxModel::load(&path), Err(BackendError::ModelFile { .. })));
    }
}
