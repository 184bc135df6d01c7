//! Train/test splitting, prompt rendering and chat-format JSONL files.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::DesignRecord;
use crate::taxonomy::{FunctionLabel, Taxonomy};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot split an empty record list")]
    EmptyInput,
    #[error("invalid split fraction {name} = {value}")]
    Fraction { name: &'static str, value: f64 },
    #[error("prompt needs a non-empty {0}")]
    EmptyName(&'static str),
    #[error("training examples need an in-vocabulary label, got {0:?}")]
    OutOfVocabulary(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: line {line}: {message}")]
    Malformed {
        path: String,
        line: usize,
        message: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabeledExample {
    pub part_name: String,
    pub system_name: String,
    pub label: FunctionLabel,
}

impl From<&DesignRecord> for LabeledExample {
    fn from(rec: &DesignRecord) -> Self {
        LabeledExample {
            part_name: rec.part_name.clone(),
            system_name: rec.system_name.clone(),
            label: rec.label.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSpec {
    pub test_fraction: f64,
    pub train_subsample_fraction: f64,
    pub seed: u64,
    pub stratified: bool,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            test_fraction: 0.1,
            train_subsample_fraction: 1.0,
            seed: 42,
            stratified: true,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<(), CorpusError> {
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(CorpusError::Fraction {
                name: "test_fraction",
                value: self.test_fraction,
            });
        }
        if !(self.train_subsample_fraction > 0.0 && self.train_subsample_fraction <= 1.0) {
            return Err(CorpusError::Fraction {
                name: "train_subsample_fraction",
                value: self.train_subsample_fraction,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit<T> {
    pub train: Vec<T>,
    pub test: Vec<T>,
}

/// Indices chosen by a split, in input order. `train` is after subsampling;
/// `train_pool` is everything not in `test`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub train_pool: Vec<usize>,
    pub test: Vec<usize>,
}

/// Largest-remainder apportionment of `round(fraction * Σ sizes)` items over
/// groups, so each group receives floor or ceil of `fraction * size`.
fn apportion(sizes: &[usize], fraction: f64) -> Vec<usize> {
    let total: usize = sizes.iter().sum();
    let target = (fraction * total as f64).round() as usize;
    let exact: Vec<f64> = sizes.iter().map(|&n| fraction * n as f64).collect();
    let mut alloc: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut remaining = target.saturating_sub(alloc.iter().sum());
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    // stable sort keeps lower group index first among equal remainders
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).unwrap_or(std::cmp::Ordering::Equal)
    });
    for idx in order {
        if remaining == 0 {
            break;
        }
        if alloc[idx] < sizes[idx] && exact[idx] > alloc[idx] as f64 {
            alloc[idx] += 1;
            remaining -= 1;
        }
    }
    alloc
}

/// Picks `counts[g]` members of each group at random.
fn sample_groups(groups: &[Vec<usize>], counts: &[usize], rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut picked = Vec::new();
    for (members, &k) in groups.iter().zip(counts) {
        let mut shuffled = members.clone();
        shuffled.shuffle(rng);
        picked.extend_from_slice(&shuffled[..k]);
    }
    picked.sort_unstable();
    picked
}

fn group_by_label(indices: &[usize], labels: &[FunctionLabel], stratified: bool) -> Vec<Vec<usize>> {
    if !stratified {
        return vec![indices.to_vec()];
    }
    let mut groups = vec![Vec::new(); FunctionLabel::COUNT + 1];
    for &i in indices {
        let slot = labels[i].index().unwrap_or(FunctionLabel::COUNT);
        groups[slot].push(i);
    }
    groups
}

/// Seeded split over a list of labels: test set first, then the remaining
/// training pool is subsampled. Stratification works per top-tier label.
pub fn split_indices(labels: &[FunctionLabel], spec: &SplitSpec) -> Result<SplitIndices, CorpusError> {
    spec.validate()?;
    if labels.is_empty() {
        return Err(CorpusError::EmptyInput);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let all: Vec<usize> = (0..labels.len()).collect();

    let groups = group_by_label(&all, labels, spec.stratified);
    let sizes: Vec<usize> = groups.iter().map(Vec::len).collect();
    let test = sample_groups(&groups, &apportion(&sizes, spec.test_fraction), &mut rng);

    let mut in_test = vec![false; labels.len()];
    for &i in &test {
        in_test[i] = true;
    }
    let train_pool: Vec<usize> = all.into_iter().filter(|&i| !in_test[i]).collect();

    let train = if spec.train_subsample_fraction >= 1.0 {
        train_pool.clone()
    } else {
        let groups = group_by_label(&train_pool, labels, spec.stratified);
        let sizes: Vec<usize> = groups.iter().map(Vec::len).collect();
        sample_groups(
            &groups,
            &apportion(&sizes, spec.train_subsample_fraction),
            &mut rng,
        )
    };
    Ok(SplitIndices {
        train,
        train_pool,
        test,
    })
}

/// Splits labeled examples; both halves keep input order.
pub fn split(
    records: &[LabeledExample],
    spec: &SplitSpec,
) -> Result<DatasetSplit<LabeledExample>, CorpusError> {
    let labels: Vec<FunctionLabel> = records.iter().map(|r| r.label.clone()).collect();
    let idx = split_indices(&labels, spec)?;
    Ok(DatasetSplit {
        train: idx.train.iter().map(|&i| records[i].clone()).collect(),
        test: idx.test.iter().map(|&i| records[i].clone()).collect(),
    })
}

/// Uniform (per-label when `stratified`) subsample of a training pool.
pub fn subsample(
    pool: &[LabeledExample],
    fraction: f64,
    seed: u64,
    stratified: bool,
) -> Result<Vec<LabeledExample>, CorpusError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(CorpusError::Fraction {
            name: "train_subsample_fraction",
            value: fraction,
        });
    }
    if pool.is_empty() {
        return Err(CorpusError::EmptyInput);
    }
    if fraction >= 1.0 {
        return Ok(pool.to_vec());
    }
    let labels: Vec<FunctionLabel> = pool.iter().map(|r| r.label.clone()).collect();
    let all: Vec<usize> = (0..pool.len()).collect();
    let groups = group_by_label(&all, &labels, stratified);
    let sizes: Vec<usize> = groups.iter().map(Vec::len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked = sample_groups(&groups, &apportion(&sizes, fraction), &mut rng);
    Ok(picked.into_iter().map(|i| pool[i].clone()).collect())
}

/// Per-label counts in taxonomy order.
pub fn label_histogram(examples: &[LabeledExample]) -> Vec<(FunctionLabel, usize)> {
    FunctionLabel::ALL
        .iter()
        .map(|label| {
            let n = examples.iter().filter(|e| &e.label == label).count();
            (label.clone(), n)
        })
        .collect()
}

/// The classification prompt for one part.
pub fn render_prompt(
    part_name: &str,
    assembly_name: &str,
    taxonomy: &Taxonomy,
) -> Result<String, CorpusError> {
    let part_name = part_name.trim();
    let assembly_name = assembly_name.trim();
    if part_name.is_empty() {
        return Err(CorpusError::EmptyName("part name"));
    }
    if assembly_name.is_empty() {
        return Err(CorpusError::EmptyName("assembly name"));
    }
    let classes = taxonomy
        .definitions()
        .iter()
        .map(|d| format!("{}: {}", d.label.name(), d.definition))
        .collect::<Vec<_>>()
        .join("; ");
    Ok(format!(
        "Given the following function classes and their definitions, {classes}, \
         what is the function of a part {part_name} in the system {assembly_name}?"
    ))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChatExample {
    pub system_message: Option<String>,
    pub user_message: String,
    /// Canonical label name; empty for inference-only examples.
    pub assistant_message: String,
}

pub fn to_chat_example(
    example: &LabeledExample,
    taxonomy: &Taxonomy,
    system_message: Option<&str>,
) -> Result<ChatExample, CorpusError> {
    if !example.label.is_in_vocabulary() {
        return Err(CorpusError::OutOfVocabulary(example.label.name().to_string()));
    }
    Ok(ChatExample {
        system_message: system_message.map(str::to_string),
        user_message: render_prompt(&example.part_name, &example.system_name, taxonomy)?,
        assistant_message: example.label.name().to_string(),
    })
}

/// Chat example without an answer, for inference requests.
pub fn to_inference_example(
    part_name: &str,
    assembly_name: &str,
    taxonomy: &Taxonomy,
    system_message: Option<&str>,
) -> Result<ChatExample, CorpusError> {
    Ok(ChatExample {
        system_message: system_message.map(str::to_string),
        user_message: render_prompt(part_name, assembly_name, taxonomy)?,
        assistant_message: String::new(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct ChatLine {
    messages: Vec<ChatMessage>,
}

impl ChatExample {
    /// Wire messages: optional system turn, user turn, and the assistant turn
    /// when an answer is present.
    pub fn messages(&self) -> Vec<ChatMessage> {
        let mut out = Vec::with_capacity(3);
        if let Some(system) = &self.system_message {
            out.push(ChatMessage {
                role: "system".into(),
                content: system.clone(),
            });
        }
        out.push(ChatMessage {
            role: "user".into(),
            content: self.user_message.clone(),
        });
        if !self.assistant_message.is_empty() {
            out.push(ChatMessage {
                role: "assistant".into(),
                content: self.assistant_message.clone(),
            });
        }
        out
    }

    /// Messages for an inference request: never includes an assistant turn.
    pub fn request_messages(&self) -> Vec<ChatMessage> {
        let mut msgs = self.messages();
        msgs.retain(|m| m.role != "assistant");
        msgs
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(&ChatLine {
            messages: self.messages(),
        })
        .expect("chat line serializes")
    }

    fn from_messages(messages: Vec<ChatMessage>) -> Result<Self, String> {
        let mut system_message = None;
        let mut user_message = None;
        let mut assistant_message = String::new();
        for m in messages {
            match m.role.as_str() {
                "system" if system_message.is_none() => system_message = Some(m.content),
                "user" if user_message.is_none() => user_message = Some(m.content),
                "assistant" => assistant_message = m.content,
                other => return Err(format!("unexpected or repeated role {other:?}")),
            }
        }
        Ok(ChatExample {
            system_message,
            user_message: user_message.ok_or("no user message")?,
            assistant_message,
        })
    }
}

/// Serializes examples into JSONL bytes, one `{"messages":[...]}` per line.
pub fn to_jsonl_bytes(examples: &[ChatExample]) -> Vec<u8> {
    let mut out = Vec::new();
    for ex in examples {
        out.extend_from_slice(ex.to_json_line().as_bytes());
        out.push(b'\n');
    }
    out
}

pub fn write_jsonl(examples: &[ChatExample], path: &Path) -> Result<(), CorpusError> {
    let io_err = |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut out = BufWriter::new(File::create(path).map_err(io_err)?);
    out.write_all(&to_jsonl_bytes(examples)).map_err(io_err)?;
    out.flush().map_err(io_err)
}

pub fn read_jsonl(path: &Path) -> Result<Vec<ChatExample>, CorpusError> {
    let io_err = |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    };
    let reader = BufReader::new(File::open(path).map_err(io_err)?);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |message: String| CorpusError::Malformed {
            path: path.display().to_string(),
            line: idx + 1,
            message,
        };
        let parsed: ChatLine = serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        out.push(ChatExample::from_messages(parsed.messages).map_err(malformed)?);
    }
    Ok(out)
}
