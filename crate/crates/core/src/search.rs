//! Random hyperparameter search over (epochs, batch size, learning-rate
//! multiplier) and selection of the best trial.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{Classifier, ClassifierFactory, Hyperparameters};
use crate::corpus::{subsample, CorpusError, LabeledExample};
use crate::eval::{evaluate_with, render_table, table_cells, table_headers, EvalError, EvalOptions, EvaluationReport, Metric};
use crate::taxonomy::{normalize_label, FunctionLabel};

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("search space: {0}")]
    InvalidSpace(String),
    #[error("{trials} trials requested but the space only has {product} distinct configurations")]
    TooManyTrials { trials: usize, product: usize },
    #[error("{0} set is empty")]
    EmptyData(&'static str),
    #[error("no successful trials to select from")]
    NoSuccessfulTrials,
    #[error("all {} trials failed: {}", .0.len(), .0.iter().map(|(i, hp, e)| format!("trial {i} {hp}: {e}")).collect::<Vec<_>>().join("; "))]
    AllTrialsFailed(Vec<(usize, Hyperparameters, String)>),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchSpace {
    pub epoch_choices: Vec<u32>,
    pub batch_choices: Vec<u32>,
    pub lr_choices: Vec<f64>,
    pub trials: usize,
    pub seed: u64,
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace {
            epoch_choices: vec![1, 8, 10, 12, 15, 20, 30],
            batch_choices: vec![20, 24, 48, 100],
            lr_choices: vec![0.5, 0.6, 20.0, 30.0, 40.0],
            trials: 10,
            seed: 42,
        }
    }
}

impl SearchSpace {
    pub fn validate(&self) -> Result<(), SearchError> {
        if self.epoch_choices.is_empty() || self.batch_choices.is_empty() || self.lr_choices.is_empty() {
            return Err(SearchError::InvalidSpace("every axis needs at least one choice".into()));
        }
        if self.trials == 0 {
            return Err(SearchError::InvalidSpace("trials must be ≥ 1".into()));
        }
        for hp in self.cartesian() {
            hp.validate()
                .map_err(|e| SearchError::InvalidSpace(format!("{hp}: {e}")))?;
        }
        Ok(())
    }

    pub fn product_size(&self) -> usize {
        self.epoch_choices.len() * self.batch_choices.len() * self.lr_choices.len()
    }

    /// Every combination, epochs varying slowest.
    pub fn cartesian(&self) -> Vec<Hyperparameters> {
        let mut out = Vec::with_capacity(self.product_size());
        for &e in &self.epoch_choices {
            for &b in &self.batch_choices {
                for &lr in &self.lr_choices {
                    out.push(Hyperparameters::new(e, b, lr));
                }
            }
        }
        out
    }
}

/// Seeded uniform draw without replacement from the Cartesian product.
pub fn sample_configs(space: &SearchSpace) -> Result<Vec<Hyperparameters>, SearchError> {
    space.validate()?;
    let all = space.cartesian();
    if space.trials > all.len() {
        return Err(SearchError::TooManyTrials {
            trials: space.trials,
            product: all.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(space.seed);
    Ok(rand::seq::index::sample(&mut rng, all.len(), space.trials)
        .into_iter()
        .map(|i| all[i])
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchTrial {
    pub index: usize,
    pub hp: Hyperparameters,
    pub train_report: Option<EvaluationReport>,
    pub test_report: Option<EvaluationReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl SearchTrial {
    pub fn succeeded(&self) -> bool {
        self.error.is_none() && self.test_report.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchReport {
    pub objective: Metric,
    pub seed: u64,
    pub trials: Vec<SearchTrial>,
    pub best_index: usize,
    pub best: Hyperparameters,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SearchOptions {
    pub objective: Metric,
    /// Trials trained at once; only honored when the factory allows it.
    pub parallel_trials: usize,
    pub eval: EvalOptions,
}

/// Label text used for a prediction that failed after retries.
pub const ERROR_OUTPUT: &str = "<error>";

/// Predicts every example and evaluates against its label. Failed
/// predictions count as out-of-vocabulary outputs.
pub fn score(
    classifier: &dyn Classifier,
    examples: &[LabeledExample],
    options: EvalOptions,
) -> Result<EvaluationReport, SearchError> {
    let queries: Vec<(String, String)> = examples
        .iter()
        .map(|e| (e.part_name.clone(), e.system_name.clone()))
        .collect();
    let pairs: Vec<(FunctionLabel, FunctionLabel)> = classifier
        .predict_many(&queries)
        .into_iter()
        .zip(examples)
        .map(|(pred, ex)| {
            let label = match pred {
                Ok(p) => normalize_label(&p.raw_text),
                Err(e) => {
                    tracing::warn!(part = %ex.part_name, error = %e, "prediction failed");
                    FunctionLabel::OutOfVocabulary(ERROR_OUTPUT.into())
                }
            };
            (ex.label.clone(), label)
        })
        .collect();
    Ok(evaluate_with(&pairs, options)?)
}

fn run_trial(
    index: usize,
    hp: Hyperparameters,
    train: &[LabeledExample],
    test: &[LabeledExample],
    factory: &dyn ClassifierFactory,
    options: &SearchOptions,
) -> SearchTrial {
    let outcome = factory
        .build(&hp, train, index)
        .map_err(|e| e.to_string())
        .and_then(|clf| {
            clf.ensure_ready().map_err(|e| e.to_string())?;
            let tr = score(clf.as_ref(), train, options.eval).map_err(|e| e.to_string())?;
            let te = score(clf.as_ref(), test, options.eval).map_err(|e| e.to_string())?;
            Ok((tr, te))
        });
    match outcome {
        Ok((tr, te)) => {
            tracing::info!(index, %hp, test_accuracy = te.accuracy, "trial finished");
            SearchTrial {
                index,
                hp,
                train_report: Some(tr),
                test_report: Some(te),
                error: None,
            }
        }
        Err(e) => {
            tracing::warn!(index, %hp, error = %e, "trial failed");
            SearchTrial {
                index,
                hp,
                train_report: None,
                test_report: None,
                error: Some(e),
            }
        }
    }
}

/// Objective maximum over successful trials; ties go to the earliest.
pub fn select_best_index(trials: &[SearchTrial], objective: Metric) -> Result<usize, SearchError> {
    let mut best: Option<(usize, f64)> = None;
    for (pos, t) in trials.iter().enumerate() {
        let Some(report) = t.test_report.as_ref().filter(|_| t.error.is_none()) else {
            continue;
        };
        let v = objective.value(report);
        if best.is_none_or(|(_, bv)| v > bv) {
            best = Some((pos, v));
        }
    }
    best.map(|(pos, _)| pos).ok_or(SearchError::NoSuccessfulTrials)
}

pub fn select_best(trials: &[SearchTrial], objective: Metric) -> Result<Hyperparameters, SearchError> {
    Ok(trials[select_best_index(trials, objective)?].hp)
}

/// Trains and scores one classifier per sampled configuration.
pub fn run_search(
    space: &SearchSpace,
    train: &[LabeledExample],
    test: &[LabeledExample],
    factory: &dyn ClassifierFactory,
    options: &SearchOptions,
) -> Result<SearchReport, SearchError> {
    if train.is_empty() {
        return Err(SearchError::EmptyData("training"));
    }
    if test.is_empty() {
        return Err(SearchError::EmptyData("test"));
    }
    let configs = sample_configs(space)?;
    let width = if factory.supports_parallel_trials() {
        options.parallel_trials.max(1)
    } else {
        1
    };

    let mut trials = Vec::with_capacity(configs.len());
    for (chunk_no, chunk) in configs.chunks(width).enumerate() {
        let base = chunk_no * width;
        if chunk.len() == 1 {
            trials.push(run_trial(base, chunk[0], train, test, factory, options));
            continue;
        }
        let done: Vec<SearchTrial> = std::thread::scope(|scope| {
            let handles: Vec<_> = chunk
                .iter()
                .enumerate()
                .map(|(k, hp)| scope.spawn(move || run_trial(base + k, *hp, train, test, factory, options)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("trial thread panicked"))
                .collect()
        });
        trials.extend(done);
    }

    let best_index = match select_best_index(&trials, options.objective) {
        Ok(i) => i,
        Err(_) => {
            return Err(SearchError::AllTrialsFailed(
                trials
                    .iter()
                    .map(|t| (t.index, t.hp, t.error.clone().unwrap_or_default()))
                    .collect(),
            ))
        }
    };
    Ok(SearchReport {
        objective: options.objective,
        seed: space.seed,
        best: trials[best_index].hp,
        best_index,
        trials,
    })
}

impl SearchReport {
    /// One row per trial: hyperparameters, then train and test metrics.
    pub fn to_table(&self) -> String {
        let mut headers: Vec<String> = ["E", "B", "LR"].iter().map(|s| s.to_string()).collect();
        headers.extend(table_headers("Train "));
        headers.extend(table_headers("Test "));
        let rows: Vec<Vec<String>> = self
            .trials
            .iter()
            .map(|t| {
                let mut row = vec![
                    t.hp.epochs.to_string(),
                    t.hp.batch_size.to_string(),
                    t.hp.lr_multiplier.to_string(),
                ];
                match (&t.train_report, &t.test_report) {
                    (Some(tr), Some(te)) => {
                        row.extend(table_cells(tr));
                        row.extend(table_cells(te));
                    }
                    _ => row.extend(std::iter::repeat_n("failed".to_string(), 20)),
                }
                row
            })
            .collect();
        let mut out = render_table(&headers, &rows);
        out.push_str(&format!(
            "\nbest by test {}: {} (trial {})\n",
            self.objective, self.best, self.best_index
        ));
        out
    }
}

/// One row of a training-set-size study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsampleRow {
    pub fraction: f64,
    pub train_size: usize,
    pub train_report: Option<EvaluationReport>,
    pub test_report: Option<EvaluationReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Retrains a fixed configuration on subsamples of the training pool.
#[allow(clippy::too_many_arguments)]
pub fn subsample_study(
    hp: Hyperparameters,
    fractions: &[f64],
    pool: &[LabeledExample],
    test: &[LabeledExample],
    factory: &dyn ClassifierFactory,
    seed: u64,
    stratified: bool,
    eval: EvalOptions,
) -> Result<Vec<SubsampleRow>, SearchError> {
    let options = SearchOptions {
        eval,
        ..SearchOptions::default()
    };
    let mut rows = Vec::with_capacity(fractions.len());
    for (i, &fraction) in fractions.iter().enumerate() {
        let train = subsample(pool, fraction, seed, stratified)?;
        let trial = run_trial(i, hp, &train, test, factory, &options);
        rows.push(SubsampleRow {
            fraction,
            train_size: train.len(),
            train_report: trial.train_report,
            test_report: trial.test_report,
            error: trial.error,
        });
    }
    Ok(rows)
}

pub fn subsample_table(rows: &[SubsampleRow]) -> String {
    let mut headers = vec!["Training Set Size".to_string()];
    headers.extend(table_headers("Train "));
    headers.extend(table_headers("Test "));
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let mut row = vec![format!("{}% ({} samples)", (r.fraction * 100.0).round(), r.train_size)];
            match (&r.train_report, &r.test_report) {
                (Some(tr), Some(te)) => {
                    row.extend(table_cells(tr));
                    row.extend(table_cells(te));
                }
                _ => row.extend(std::iter::repeat_n("failed".to_string(), 20)),
            }
            row
        })
        .collect();
    render_table(&headers, &body)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{BackendError, PredictionResult};
    use proptest::prelude::*;
    use std::collections::{BTreeMap, HashSet};

    fn space(e: &[u32], b: &[u32], lr: &[f64], trials: usize, seed: u64) -> SearchSpace {
        SearchSpace {
            epoch_choices: e.to_vec(),
            batch_choices: b.to_vec(),
            lr_choices: lr.to_vec(),
            trials,
            seed,
        }
    }

    #[test]
    fn single_choice_space() {
        let got = sample_configs(&space(&[12], &[20], &[20.0], 1, 0)).unwrap();
        assert_eq!(got, vec![Hyperparameters::new(12, 20, 20.0)]);
    }

    #[test]
    fn full_product_without_repeats() {
        let s = space(&[1, 2, 3], &[4, 5], &[0.5, 0.6], 12, 9);
        let got = sample_configs(&s).unwrap();
        assert_eq!(got.len(), 12);
        let keys: HashSet<String> = got.iter().map(|h| h.to_string()).collect();
        assert_eq!(keys.len(), 12);
        let all: HashSet<String> = s.cartesian().iter().map(|h| h.to_string()).collect();
        assert_eq!(keys, all);
    }

    #[test]
    fn too_many_trials() {
        let s = space(&[1], &[2], &[0.5, 0.6], 3, 0);
        assert!(matches!(
            sample_configs(&s),
            Err(SearchError::TooManyTrials { trials: 3, product: 2 })
        ));
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(sample_configs(&space(&[0], &[2], &[0.5], 1, 0)).is_err());
        assert!(sample_configs(&space(&[1], &[], &[0.5], 1, 0)).is_err());
        assert!(sample_configs(&space(&[1], &[2], &[-1.0], 1, 0)).is_err());
    }

    /// Answers correctly for the first `round(accuracy · n)` parts named
    /// `p{i}` and wrongly for the rest.
    struct Rigged {
        accuracy: f64,
        n: usize,
    }

    impl Classifier for Rigged {
        fn id(&self) -> &str {
            "rigged"
        }
        fn predict(&self, part: &str, _assembly: &str) -> Result<PredictionResult, BackendError> {
            let i: usize = part[1..].parse().unwrap();
            let truth = FunctionLabel::ALL[i % 8].clone();
            let correct = i < (self.accuracy * self.n as f64).round() as usize;
            let label = if correct { truth } else { FunctionLabel::ALL[(i + 1) % 8].clone() };
            Ok(PredictionResult {
                raw_text: label.name().to_string(),
                probabilities: None,
                cached: false,
            })
        }
    }

    struct RiggedFactory {
        presets: BTreeMap<String, Option<f64>>,
        n: usize,
    }

    impl ClassifierFactory for RiggedFactory {
        fn supports_parallel_trials(&self) -> bool {
            true
        }
        fn build(
            &self,
            hp: &Hyperparameters,
            _train: &[LabeledExample],
            _trial: usize,
        ) -> Result<Box<dyn Classifier>, BackendError> {
            match self.presets[&hp.to_string()] {
                Some(accuracy) => Ok(Box::new(Rigged { accuracy, n: self.n })),
                None => Err(BackendError::NotReady("rigged failure".into())),
            }
        }
    }

    fn examples(n: usize) -> Vec<LabeledExample> {
        (0..n)
            .map(|i| LabeledExample {
                part_name: format!("p{i}"),
                system_name: "s".into(),
                label: FunctionLabel::ALL[i % 8].clone(),
            })
            .collect()
    }

    #[test]
    fn higher_test_accuracy_wins() {
        let s = space(&[12, 20], &[20], &[20.0], 2, 3);
        let mut presets = BTreeMap::new();
        presets.insert(Hyperparameters::new(12, 20, 20.0).to_string(), Some(0.42));
        presets.insert(Hyperparameters::new(20, 20, 20.0).to_string(), Some(0.37));
        let data = examples(100);
        let report = run_search(&s, &data, &data, &RiggedFactory { presets, n: 100 }, &SearchOptions::default()).unwrap();
        assert_eq!(report.best, Hyperparameters::new(12, 20, 20.0));
        assert_eq!(report.trials.len(), 2);
        let best = report.trials[report.best_index].test_report.as_ref().unwrap();
        assert!((best.accuracy - 0.42).abs() < 1e-12);
    }

    #[test]
    fn failures_are_recorded_and_skipped() {
        let s = space(&[1, 2, 3], &[20], &[1.0], 3, 0);
        let mut presets = BTreeMap::new();
        presets.insert(Hyperparameters::new(1, 20, 1.0).to_string(), None);
        presets.insert(Hyperparameters::new(2, 20, 1.0).to_string(), Some(0.1));
        presets.insert(Hyperparameters::new(3, 20, 1.0).to_string(), None);
        let data = examples(40);
        let factory = RiggedFactory { presets, n: 40 };
        let report = run_search(&s, &data, &data, &factory, &SearchOptions::default()).unwrap();
        assert_eq!(report.best, Hyperparameters::new(2, 20, 1.0));
        assert_eq!(report.trials.iter().filter(|t| !t.succeeded()).count(), 2);
        assert!(report.to_table().contains("failed"));
    }

    #[test]
    fn all_failures_list_causes() {
        let s = space(&[1, 2], &[20], &[1.0], 2, 0);
        let presets = s.cartesian().iter().map(|h| (h.to_string(), None)).collect();
        let data = examples(8);
        let err = run_search(&s, &data, &data, &RiggedFactory { presets, n: 8 }, &SearchOptions::default()).unwrap_err();
        match &err {
            SearchError::AllTrialsFailed(causes) => assert_eq!(causes.len(), 2),
            other => panic!("{other}"),
        }
        assert!(err.to_string().contains("rigged failure"));
    }

    #[test]
    fn parallel_and_sequential_reports_agree() {
        let s = space(&[1, 2, 3], &[20, 24], &[1.0], 6, 5);
        let presets: BTreeMap<String, Option<f64>> = s
            .cartesian()
            .iter()
            .enumerate()
            .map(|(i, h)| (h.to_string(), Some(i as f64 / 10.0)))
            .collect();
        let data = examples(50);
        let factory = RiggedFactory { presets, n: 50 };
        let seq = run_search(&s, &data, &data, &factory, &SearchOptions::default()).unwrap();
        let par = run_search(
            &s,
            &data,
            &data,
            &factory,
            &SearchOptions {
                parallel_trials: 4,
                ..SearchOptions::default()
            },
        )
        .unwrap();
        assert_eq!(seq, par);
    }

    #[test]
    fn empty_selection_is_an_error() {
        assert!(matches!(
            select_best(&[], Metric::Accuracy),
            Err(SearchError::NoSuccessfulTrials)
        ));
    }

    proptest! {
        #[test]
        fn sampling_is_deterministic_and_distinct(seed in any::<u64>(), trials in 1usize..=12) {
            let s = space(&[1, 2, 3], &[4, 5], &[0.5, 0.6], trials, seed);
            let a = sample_configs(&s).unwrap();
            prop_assert_eq!(&a, &sample_configs(&s).unwrap());
            let keys: HashSet<String> = a.iter().map(|h| h.to_string()).collect();
            prop_assert_eq!(keys.len(), trials);
        }
    }
}
