//! Labeling of unlabeled parts with a trained classifier, the label
//! distribution report, and annotation CSV files.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, Classifier};
use crate::ingest::AbcPartRecord;
use crate::search::ERROR_OUTPUT;
use crate::taxonomy::{normalize_label, FunctionLabel};

#[derive(Debug, Error)]
pub enum AnnotateError {
    #[error("classifier unavailable: {0}")]
    NotReady(#[source] BackendError),
    #[error("no annotation results to report on")]
    Empty,
    #[error("part {index} has an empty {field}")]
    EmptyName { index: usize, field: &'static str },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
    #[error("checkpoint {path}: line {line}: {message}")]
    Checkpoint {
        path: String,
        line: usize,
        message: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnlabeledPart {
    pub part_name: String,
    pub assembly_name: String,
    pub chunk: Option<u32>,
    pub assembly_id: Option<i64>,
    pub part_id: Option<i64>,
}

impl UnlabeledPart {
    pub fn new(part_name: impl Into<String>, assembly_name: impl Into<String>) -> Self {
        UnlabeledPart {
            part_name: part_name.into(),
            assembly_name: assembly_name.into(),
            chunk: None,
            assembly_id: None,
            part_id: None,
        }
    }
}

impl From<&AbcPartRecord> for UnlabeledPart {
    fn from(r: &AbcPartRecord) -> Self {
        UnlabeledPart {
            part_name: r.part_name.clone(),
            assembly_name: r.assembly_name.clone(),
            chunk: Some(r.chunk),
            assembly_id: Some(r.assembly_id),
            part_id: Some(r.part_id),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationResult {
    pub part: UnlabeledPart,
    pub raw_text: String,
    pub label: FunctionLabel,
    pub classifier_id: String,
    pub cached: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl AnnotationResult {
    pub fn from_raw(part: UnlabeledPart, raw_text: String, classifier_id: &str, cached: bool) -> Self {
        AnnotationResult {
            label: normalize_label(&raw_text),
            part,
            raw_text,
            classifier_id: classifier_id.to_string(),
            cached,
            error: None,
        }
    }

    fn failed(part: UnlabeledPart, classifier_id: &str, error: String) -> Self {
        AnnotationResult {
            error: Some(error),
            ..AnnotationResult::from_raw(part, ERROR_OUTPUT.into(), classifier_id, false)
        }
    }
}

fn check_parts(parts: &[UnlabeledPart]) -> Result<(), AnnotateError> {
    for (index, p) in parts.iter().enumerate() {
        if p.part_name.trim().is_empty() {
            return Err(AnnotateError::EmptyName { index, field: "part name" });
        }
        if p.assembly_name.trim().is_empty() {
            return Err(AnnotateError::EmptyName { index, field: "assembly name" });
        }
    }
    Ok(())
}

fn predict_parts(parts: &[UnlabeledPart], classifier: &dyn Classifier) -> Vec<AnnotationResult> {
    let queries: Vec<(String, String)> = parts
        .iter()
        .map(|p| (p.part_name.clone(), p.assembly_name.clone()))
        .collect();
    classifier
        .predict_many(&queries)
        .into_iter()
        .zip(parts)
        .map(|(pred, part)| match pred {
            Ok(p) => AnnotationResult::from_raw(part.clone(), p.raw_text, classifier.id(), p.cached),
            Err(e) => {
                tracing::warn!(part = %part.part_name, error = %e, "annotation failed");
                AnnotationResult::failed(part.clone(), classifier.id(), e.to_string())
            }
        })
        .collect()
}

/// One result per part, in input order. Per-part failures become
/// out-of-vocabulary `<error>` results instead of aborting the batch.
pub fn annotate_batch(
    parts: &[UnlabeledPart],
    classifier: &dyn Classifier,
) -> Result<Vec<AnnotationResult>, AnnotateError> {
    check_parts(parts)?;
    classifier.ensure_ready().map_err(AnnotateError::NotReady)?;
    Ok(predict_parts(parts, classifier))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointLine {
    index: usize,
    part_name: String,
    assembly_name: String,
    raw_text: String,
    classifier_id: String,
}

fn load_checkpoint(path: &Path) -> Result<HashMap<usize, CheckpointLine>, AnnotateError> {
    let mut done = HashMap::new();
    if !path.exists() {
        return Ok(done);
    }
    let file = File::open(path).map_err(|source| AnnotateError::Io {
        path: path.display().to_string(),
        source,
    })?;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| AnnotateError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: CheckpointLine = serde_json::from_str(&line).map_err(|e| AnnotateError::Checkpoint {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        done.insert(entry.index, entry);
    }
    Ok(done)
}

/// Like [`annotate_batch`], but records successful results in a JSONL
/// checkpoint after every block of `block_size` parts and skips parts already
/// recorded there. Failed parts are not recorded, so a rerun retries them.
pub fn annotate_with_checkpoint(
    parts: &[UnlabeledPart],
    classifier: &dyn Classifier,
    checkpoint: &Path,
    block_size: usize,
) -> Result<Vec<AnnotationResult>, AnnotateError> {
    check_parts(parts)?;
    classifier.ensure_ready().map_err(AnnotateError::NotReady)?;
    let io_err = |source| AnnotateError::Io {
        path: checkpoint.display().to_string(),
        source,
    };
    let done = load_checkpoint(checkpoint)?;
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(checkpoint)
        .map_err(io_err)?;

    let mut results: Vec<Option<AnnotationResult>> = vec![None; parts.len()];
    let mut pending = Vec::new();
    for (i, part) in parts.iter().enumerate() {
        match done.get(&i) {
            Some(entry) if entry.part_name == part.part_name && entry.assembly_name == part.assembly_name => {
                results[i] = Some(AnnotationResult::from_raw(
                    part.clone(),
                    entry.raw_text.clone(),
                    &entry.classifier_id,
                    true,
                ));
            }
            _ => pending.push(i),
        }
    }
    tracing::info!(resumed = parts.len() - pending.len(), pending = pending.len(), "annotating");

    for block in pending.chunks(block_size.max(1)) {
        let block_parts: Vec<UnlabeledPart> = block.iter().map(|&i| parts[i].clone()).collect();
        let annotated = predict_parts(&block_parts, classifier);
        for (&i, r) in block.iter().zip(annotated) {
            if r.error.is_none() {
                let line = serde_json::to_string(&CheckpointLine {
                    index: i,
                    part_name: r.part.part_name.clone(),
                    assembly_name: r.part.assembly_name.clone(),
                    raw_text: r.raw_text.clone(),
                    classifier_id: r.classifier_id.clone(),
                })
                .expect("checkpoint line serializes");
                writeln!(file, "{line}").map_err(io_err)?;
            }
            results[i] = Some(r);
        }
        file.flush().map_err(io_err)?;
    }
    Ok(results.into_iter().map(|r| r.expect("every part annotated")).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelCount {
    pub label: String,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationReport {
    pub total: usize,
    /// The eight classes in taxonomy order, then the out-of-vocabulary bucket.
    pub per_label: Vec<LabelCount>,
    pub out_of_vocabulary: usize,
    pub in_vocabulary_fraction: f64,
}

pub const OOV_BUCKET: &str = "<out-of-vocabulary>";

pub fn distribution_report(results: &[AnnotationResult]) -> Result<AnnotationReport, AnnotateError> {
    if results.is_empty() {
        return Err(AnnotateError::Empty);
    }
    let mut counts = [0usize; FunctionLabel::COUNT + 1];
    for r in results {
        counts[r.label.index().unwrap_or(FunctionLabel::COUNT)] += 1;
    }
    let oov = counts[FunctionLabel::COUNT];
    let mut per_label: Vec<LabelCount> = FunctionLabel::ALL
        .iter()
        .zip(counts)
        .map(|(l, count)| LabelCount {
            label: l.name().to_string(),
            count,
        })
        .collect();
    per_label.push(LabelCount {
        label: OOV_BUCKET.into(),
        count: oov,
    });
    let total = results.len();
    Ok(AnnotationReport {
        total,
        per_label,
        out_of_vocabulary: oov,
        in_vocabulary_fraction: (total - oov) as f64 / total as f64,
    })
}

impl AnnotationReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("label,count,fraction\n");
        for lc in &self.per_label {
            out.push_str(&format!(
                "{},{},{:.4}\n",
                lc.label,
                lc.count,
                lc.count as f64 / self.total as f64
            ));
        }
        out
    }
}

pub const ANNOTATION_COLUMNS: [&str; 7] = [
    "chunk",
    "assembly_id",
    "assembly_name",
    "part_id",
    "part_name",
    "function",
    "raw_output",
];

/// One line of an annotations CSV.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRow {
    pub chunk: Option<u32>,
    pub assembly_id: Option<i64>,
    pub assembly_name: String,
    pub part_id: Option<i64>,
    pub part_name: String,
    pub function: String,
    pub raw_output: String,
}

impl From<&AnnotationResult> for AnnotationRow {
    fn from(r: &AnnotationResult) -> Self {
        AnnotationRow {
            chunk: r.part.chunk,
            assembly_id: r.part.assembly_id,
            assembly_name: r.part.assembly_name.clone(),
            part_id: r.part.part_id,
            part_name: r.part.part_name.clone(),
            function: r.label.name().to_string(),
            raw_output: r.raw_text.clone(),
        }
    }
}

pub fn write_annotations<W: Write>(results: &[AnnotationResult], out: W) -> Result<(), csv::Error> {
    let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    writer.write_record(ANNOTATION_COLUMNS)?;
    for r in results {
        writer.serialize(AnnotationRow::from(r))?;
    }
    writer.flush()?;
    Ok(())
}

pub fn export_annotations(results: &[AnnotationResult], path: &Path) -> Result<(), AnnotateError> {
    let file = File::create(path).map_err(|source| AnnotateError::Io {
        path: path.display().to_string(),
        source,
    })?;
    write_annotations(results, file).map_err(|source| AnnotateError::Csv {
        path: path.display().to_string(),
        source,
    })
}

/// Reads an annotations CSV; `#` lines are skipped.
pub fn read_annotations(path: &Path) -> Result<Vec<AnnotationRow>, AnnotateError> {
    let csv_err = |source| AnnotateError::Csv {
        path: path.display().to_string(),
        source,
    };
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(csv_err)?;
    reader
        .deserialize()
        .collect::<Result<Vec<AnnotationRow>, _>>()
        .map_err(csv_err)
}
