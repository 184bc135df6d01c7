//! Accuracy, per-class precision/recall/F1, their weighted, macro and micro
//! averages, and confusion matrices.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::taxonomy::FunctionLabel;

const K: usize = FunctionLabel::COUNT;
/// Column holding out-of-vocabulary predictions.
pub const OOV_COLUMN: usize = K;
pub const OOV_COLUMN_NAME: &str = "<out-of-vocabulary>";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("nothing to evaluate")]
    Empty,
    #[error("true label {0:?} is not one of the eight classes")]
    OutOfVocabularyTruth(String),
    #[error("unknown metric {0:?}")]
    UnknownMetric(String),
}

/// Rows are true labels in taxonomy order; columns are predictions with an
/// extra out-of-vocabulary column.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub labels: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl Default for ConfusionMatrix {
    fn default() -> Self {
        let mut labels: Vec<String> = FunctionLabel::ALL.iter().map(|l| l.name().to_string()).collect();
        labels.push(OOV_COLUMN_NAME.into());
        ConfusionMatrix {
            labels,
            counts: vec![vec![0; K + 1]; K],
        }
    }
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn support(&self, class: usize) -> u64 {
        self.counts[class].iter().sum()
    }

    pub fn correct(&self) -> u64 {
        (0..K).map(|c| self.counts[c][c]).sum()
    }

    pub fn out_of_vocabulary(&self) -> u64 {
        self.counts.iter().map(|row| row[OOV_COLUMN]).sum()
    }

    /// Predictions of `class` whose true label differs.
    pub fn false_positives(&self, class: usize) -> u64 {
        (0..K).filter(|&r| r != class).map(|r| self.counts[r][class]).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("true\\predicted");
        for l in &self.labels {
            out.push(',');
            out.push_str(l);
        }
        out.push('\n');
        for (row, label) in self.counts.iter().zip(&self.labels) {
            out.push_str(label);
            for v in row {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

pub fn confusion(pairs: &[(FunctionLabel, FunctionLabel)]) -> Result<ConfusionMatrix, EvalError> {
    let mut cm = ConfusionMatrix::default();
    for (truth, pred) in pairs {
        let r = truth
            .index()
            .ok_or_else(|| EvalError::OutOfVocabularyTruth(truth.name().to_string()))?;
        let c = pred.index().unwrap_or(OOV_COLUMN);
        cm.counts[r][c] += 1;
    }
    Ok(cm)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub label: FunctionLabel,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

/// All eight classes, zero-support ones included.
pub fn per_class_metrics(cm: &ConfusionMatrix) -> Vec<ClassMetrics> {
    (0..K)
        .map(|c| {
            let tp = cm.counts[c][c];
            let support = cm.support(c);
            let precision = ratio(tp, tp + cm.false_positives(c));
            let recall = ratio(tp, support);
            ClassMetrics {
                label: FunctionLabel::ALL[c].clone(),
                precision,
                recall,
                f1: harmonic(precision, recall),
                support,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Averaged {
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Average macro metrics over all eight classes instead of the classes
    /// present in the ground truth.
    pub macro_all_classes: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub sample_count: u64,
    pub accuracy: f64,
    pub weighted: Averaged,
    #[serde(rename = "macro")]
    pub macro_avg: Averaged,
    pub micro: Averaged,
    pub per_class: Vec<ClassMetrics>,
    pub confusion: ConfusionMatrix,
    pub macro_all_classes: bool,
}

pub fn evaluate(pairs: &[(FunctionLabel, FunctionLabel)]) -> Result<EvaluationReport, EvalError> {
    evaluate_with(pairs, EvalOptions::default())
}

pub fn evaluate_with(
    pairs: &[(FunctionLabel, FunctionLabel)],
    options: EvalOptions,
) -> Result<EvaluationReport, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::Empty);
    }
    report_from_confusion(confusion(pairs)?, options)
}

pub fn report_from_confusion(cm: ConfusionMatrix, options: EvalOptions) -> Result<EvaluationReport, EvalError> {
    let s = cm.total();
    if s == 0 {
        return Err(EvalError::Empty);
    }
    let per_class = per_class_metrics(&cm);

    let mut weighted = Averaged::default();
    for m in &per_class {
        weighted.f1 += m.support as f64 * m.f1;
        weighted.precision += m.support as f64 * m.precision;
        weighted.recall += m.support as f64 * m.recall;
    }
    weighted.f1 /= s as f64;
    weighted.precision /= s as f64;
    weighted.recall /= s as f64;

    let averaged: Vec<&ClassMetrics> = per_class
        .iter()
        .filter(|m| options.macro_all_classes || m.support > 0)
        .collect();
    let n = averaged.len() as f64;
    let macro_avg = Averaged {
        f1: averaged.iter().map(|m| m.f1).sum::<f64>() / n,
        precision: averaged.iter().map(|m| m.precision).sum::<f64>() / n,
        recall: averaged.iter().map(|m| m.recall).sum::<f64>() / n,
    };

    // Pooled counts: every wrong prediction is a false negative of its true
    // class; only in-vocabulary wrong predictions are false positives.
    let tp = cm.correct();
    let fn_ = s - tp;
    let fp = fn_ - cm.out_of_vocabulary();
    let micro = Averaged {
        f1: ratio(2 * tp, 2 * tp + fp + fn_),
        precision: ratio(tp, tp + fp),
        recall: ratio(tp, tp + fn_),
    };

    Ok(EvaluationReport {
        sample_count: s,
        accuracy: ratio(tp, s),
        weighted,
        macro_avg,
        micro,
        per_class,
        confusion: cm,
        macro_all_classes: options.macro_all_classes,
    })
}

/// A scalar drawn from an [`EvaluationReport`], used as a search objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    Accuracy,
    WeightedF1,
    WeightedPrecision,
    WeightedRecall,
    MacroF1,
    MacroPrecision,
    MacroRecall,
    MicroF1,
    MicroPrecision,
    MicroRecall,
}

impl Metric {
    pub const ALL: [Metric; 10] = [
        Metric::Accuracy,
        Metric::WeightedF1,
        Metric::WeightedPrecision,
        Metric::WeightedRecall,
        Metric::MacroF1,
        Metric::MacroPrecision,
        Metric::MacroRecall,
        Metric::MicroF1,
        Metric::MicroPrecision,
        Metric::MicroRecall,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Accuracy => "accuracy",
            Metric::WeightedF1 => "weighted_f1",
            Metric::WeightedPrecision => "weighted_precision",
            Metric::WeightedRecall => "weighted_recall",
            Metric::MacroF1 => "macro_f1",
            Metric::MacroPrecision => "macro_precision",
            Metric::MacroRecall => "macro_recall",
            Metric::MicroF1 => "micro_f1",
            Metric::MicroPrecision => "micro_precision",
            Metric::MicroRecall => "micro_recall",
        }
    }

    pub fn value(self, r: &EvaluationReport) -> f64 {
        match self {
            Metric::Accuracy => r.accuracy,
            Metric::WeightedF1 => r.weighted.f1,
            Metric::WeightedPrecision => r.weighted.precision,
            Metric::WeightedRecall => r.weighted.recall,
            Metric::MacroF1 => r.macro_avg.f1,
            Metric::MacroPrecision => r.macro_avg.precision,
            Metric::MacroRecall => r.macro_avg.recall,
            Metric::MicroF1 => r.micro.f1,
            Metric::MicroPrecision => r.micro.precision,
            Metric::MicroRecall => r.micro.recall,
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key = s.trim().to_ascii_lowercase().replace(['-', ' '], "_");
        Metric::ALL
            .into_iter()
            .find(|m| m.name() == key)
            .ok_or_else(|| EvalError::UnknownMetric(s.to_string()))
    }
}

/// Header cells for one evaluated split, in the order accuracy, then
/// F1/precision/recall for weighted, macro and micro.
pub fn table_headers(prefix: &str) -> Vec<String> {
    let mut h = vec![format!("{prefix}Accuracy")];
    for avg in ["Weighted", "Macro", "Micro"] {
        for m in ["F1", "P", "R"] {
            h.push(format!("{prefix}{avg} {m}"));
        }
    }
    h
}

pub fn table_cells(r: &EvaluationReport) -> Vec<String> {
    let mut v = vec![r.accuracy];
    for a in [r.weighted, r.macro_avg, r.micro] {
        v.extend([a.f1, a.precision, a.recall]);
    }
    v.into_iter().map(|x| format!("{x:.2}")).collect()
}

/// Pipe-separated text table with padded columns.
pub fn render_table(headers: &[String], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = headers.iter().map(|h| h.chars().count()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: &[String]| {
        let padded: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:>w$}", w = *w))
            .collect();
        format!("| {} |\n", padded.join(" | "))
    };
    let mut out = line(headers);
    let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
    out.push_str(&format!("|-{}-|\n", rule.join("-|-")));
    for row in rows {
        out.push_str(&line(row));
    }
    out
}

impl EvaluationReport {
    pub fn to_table(&self) -> String {
        let mut out = render_table(&table_headers(""), &[table_cells(self)]);
        out.push('\n');
        let headers: Vec<String> = ["Class", "Precision", "Recall", "F1", "Support"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let rows: Vec<Vec<String>> = self
            .per_class
            .iter()
            .map(|m| {
                vec![
                    m.label.name().to_string(),
                    format!("{:.2}", m.precision),
                    format!("{:.2}", m.recall),
                    format!("{:.2}", m.f1),
                    m.support.to_string(),
                ]
            })
            .collect();
        out.push_str(&render_table(&headers, &rows));
        out
    }
}
