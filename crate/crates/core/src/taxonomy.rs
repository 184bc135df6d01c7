//! Three-tier functional-basis hierarchy and label normalization.
//!
//! Only the eight top-tier functions are classification targets. Tier-2
//! subfunctions map onto them for label resolution during ingest; tier-3
//! entries are carried along for completeness and are never used as labels.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// One of the eight top-tier function classes, or a raw string that failed
/// to normalize to any of them.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FunctionLabel {
    Branch,
    Channel,
    Connect,
    ControlMagnitude,
    Convert,
    Provision,
    Signal,
    Support,
    /// Verbatim text that did not match any class name.
    OutOfVocabulary(String),
}

impl FunctionLabel {
    /// The eight in-vocabulary labels in fixed taxonomy order.
    pub const ALL: [FunctionLabel; 8] = [
        FunctionLabel::Branch,
        FunctionLabel::Channel,
        FunctionLabel::Connect,
        FunctionLabel::ControlMagnitude,
        FunctionLabel::Convert,
        FunctionLabel::Provision,
        FunctionLabel::Signal,
        FunctionLabel::Support,
    ];

    pub const COUNT: usize = 8;

    pub fn is_in_vocabulary(&self) -> bool {
        !matches!(self, FunctionLabel::OutOfVocabulary(_))
    }

    /// Position in taxonomy order; `None` for out-of-vocabulary labels.
    pub fn index(&self) -> Option<usize> {
        match self {
            FunctionLabel::Branch => Some(0),
            FunctionLabel::Channel => Some(1),
            FunctionLabel::Connect => Some(2),
            FunctionLabel::ControlMagnitude => Some(3),
            FunctionLabel::Convert => Some(4),
            FunctionLabel::Provision => Some(5),
            FunctionLabel::Signal => Some(6),
            FunctionLabel::Support => Some(7),
            FunctionLabel::OutOfVocabulary(_) => None,
        }
    }

    pub fn from_index(index: usize) -> Option<FunctionLabel> {
        Self::ALL.get(index).cloned()
    }

    /// Canonical spelling for in-vocabulary labels; the raw text otherwise.
    pub fn name(&self) -> &str {
        match self {
            FunctionLabel::Branch => "Branch",
            FunctionLabel::Channel => "Channel",
            FunctionLabel::Connect => "Connect",
            FunctionLabel::ControlMagnitude => "Control Magnitude",
            FunctionLabel::Convert => "Convert",
            FunctionLabel::Provision => "Provision",
            FunctionLabel::Signal => "Signal",
            FunctionLabel::Support => "Support",
            FunctionLabel::OutOfVocabulary(raw) => raw,
        }
    }

    /// Canonical-name lookup used by normalization; no trimming or folding.
    fn from_folded(folded: &str) -> Option<FunctionLabel> {
        Self::ALL
            .iter()
            .find(|label| label.name().to_lowercase() == folded)
            .cloned()
    }
}

impl fmt::Display for FunctionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

// Labels travel as plain strings. Out-of-vocabulary raw text never normalizes
// to a class name, so decoding through `normalize_label` restores the variant.
impl Serialize for FunctionLabel {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for FunctionLabel {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(deserializer)?;
        Ok(normalize_label(&raw))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunctionDefinition {
    pub label: FunctionLabel,
    pub definition: String,
}

#[derive(Debug, Error)]
pub enum TaxonomyError {
    #[error("failed to read taxonomy file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed taxonomy JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("taxonomy label {0:?} is not one of the eight top-tier functions")]
    UnknownLabel(String),
    #[error("taxonomy must define each top-tier function exactly once; {0} is {1}")]
    Coverage(String, &'static str),
    #[error("empty definition for {0}")]
    EmptyDefinition(String),
    #[error("subfunction {0:?} maps to an empty name")]
    EmptyKey(String),
}

/// The function hierarchy plus the textual class definitions that go into
/// every prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct Taxonomy {
    tier1: Vec<FunctionLabel>,
    definitions: Vec<FunctionDefinition>,
    tier2_to_tier1: BTreeMap<String, FunctionLabel>,
    tier3_to_tier2: BTreeMap<String, String>,
}

/// On-disk form accepted by `--taxonomy`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaxonomyDocument {
    pub definitions: Vec<DefinitionEntry>,
    #[serde(default)]
    pub tier2_to_tier1: BTreeMap<String, String>,
    #[serde(default)]
    pub tier3_to_tier2: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DefinitionEntry {
    pub label: String,
    pub definition: String,
}

const BUILTIN_DEFINITIONS: [(FunctionLabel, &str); 8] = [
    (
        FunctionLabel::Branch,
        "To cause a material or energy to no longer be joined or mixed.",
    ),
    (
        FunctionLabel::Channel,
        "To cause material or energy to move from one location to another location.",
    ),
    (
        FunctionLabel::Connect,
        "To bring two or more energies or materials together.",
    ),
    (
        FunctionLabel::ControlMagnitude,
        "To alter or govern the size or amplitude of material or energy.",
    ),
    (
        FunctionLabel::Convert,
        "To change from one form of energy or material to another.",
    ),
    (
        FunctionLabel::Provision,
        "To accumulate or provide material or energy.",
    ),
    (FunctionLabel::Signal, "To provide information."),
    (
        FunctionLabel::Support,
        "To firmly fix a material into a defined location or secure energy into a specific course.",
    ),
];

// Secondary (tier-2) functions of the functional basis.
const BUILTIN_TIER2: [(&str, FunctionLabel); 21] = [
    ("separate", FunctionLabel::Branch),
    ("distribute", FunctionLabel::Branch),
    ("import", FunctionLabel::Channel),
    ("export", FunctionLabel::Channel),
    ("transfer", FunctionLabel::Channel),
    ("guide", FunctionLabel::Channel),
    ("couple", FunctionLabel::Connect),
    ("mix", FunctionLabel::Connect),
    ("actuate", FunctionLabel::ControlMagnitude),
    ("regulate", FunctionLabel::ControlMagnitude),
    ("change", FunctionLabel::ControlMagnitude),
    ("stop", FunctionLabel::ControlMagnitude),
    ("convert", FunctionLabel::Convert),
    ("store", FunctionLabel::Provision),
    ("supply", FunctionLabel::Provision),
    ("sense", FunctionLabel::Signal),
    ("indicate", FunctionLabel::Signal),
    ("process", FunctionLabel::Signal),
    ("stabilize", FunctionLabel::Support),
    ("secure", FunctionLabel::Support),
    ("position", FunctionLabel::Support),
];

const BUILTIN_TIER3: [(&str, &str); 20] = [
    ("divide", "separate"),
    ("extract", "separate"),
    ("remove", "separate"),
    ("transport", "transfer"),
    ("transmit", "transfer"),
    ("translate", "guide"),
    ("rotate", "guide"),
    ("allow degree of freedom", "guide"),
    ("join", "couple"),
    ("link", "couple"),
    ("increment", "change"),
    ("decrement", "change"),
    ("shape", "change"),
    ("condition", "change"),
    ("prevent", "stop"),
    ("inhibit", "stop"),
    ("detect", "sense"),
    ("measure", "sense"),
    ("track", "indicate"),
    ("display", "indicate"),
];

/// The built-in hierarchy: eight top-tier classes with their definitions and
/// the standard secondary/tertiary functions beneath them.
pub fn builtin_taxonomy() -> Taxonomy {
    Taxonomy {
        tier1: FunctionLabel::ALL.to_vec(),
        definitions: BUILTIN_DEFINITIONS
            .iter()
            .map(|(label, text)| FunctionDefinition {
                label: label.clone(),
                definition: (*text).to_string(),
            })
            .collect(),
        tier2_to_tier1: BUILTIN_TIER2
            .iter()
            .map(|(name, label)| ((*name).to_string(), label.clone()))
            .collect(),
        tier3_to_tier2: BUILTIN_TIER3
            .iter()
            .map(|(t3, t2)| ((*t3).to_string(), (*t2).to_string()))
            .collect(),
    }
}

impl Default for Taxonomy {
    fn default() -> Self {
        builtin_taxonomy()
    }
}

impl Taxonomy {
    /// Top-tier labels in fixed order.
    pub fn tier1(&self) -> &[FunctionLabel] {
        &self.tier1
    }

    /// Definitions in the same order as [`Taxonomy::tier1`].
    pub fn definitions(&self) -> &[FunctionDefinition] {
        &self.definitions
    }

    pub fn definition(&self, label: &FunctionLabel) -> Option<&str> {
        label
            .index()
            .map(|idx| self.definitions[idx].definition.as_str())
    }

    pub fn tier2_to_tier1(&self) -> &BTreeMap<String, FunctionLabel> {
        &self.tier2_to_tier1
    }

    pub fn tier3_to_tier2(&self) -> &BTreeMap<String, String> {
        &self.tier3_to_tier2
    }

    /// Builds a taxonomy from its document form, validating that every
    /// top-tier class is defined exactly once.
    pub fn from_document(doc: TaxonomyDocument) -> Result<Self, TaxonomyError> {
        let mut slots: [Option<String>; 8] = Default::default();
        for entry in doc.definitions {
            let label = normalize_label(&entry.label);
            let idx = label
                .index()
                .ok_or_else(|| TaxonomyError::UnknownLabel(entry.label.clone()))?;
            if slots[idx].is_some() {
                return Err(TaxonomyError::Coverage(label.to_string(), "duplicated"));
            }
            if entry.definition.trim().is_empty() {
                return Err(TaxonomyError::EmptyDefinition(label.to_string()));
            }
            slots[idx] = Some(entry.definition.trim().to_string());
        }
        let mut definitions = Vec::with_capacity(FunctionLabel::COUNT);
        for (idx, slot) in slots.into_iter().enumerate() {
            let label = FunctionLabel::ALL[idx].clone();
            let definition =
                slot.ok_or_else(|| TaxonomyError::Coverage(label.to_string(), "missing"))?;
            definitions.push(FunctionDefinition { label, definition });
        }

        let mut tier2_to_tier1 = BTreeMap::new();
        for (sub, parent) in doc.tier2_to_tier1 {
            let key = fold(&sub);
            if key.is_empty() {
                return Err(TaxonomyError::EmptyKey(sub));
            }
            let label = normalize_label(&parent);
            if !label.is_in_vocabulary() {
                return Err(TaxonomyError::UnknownLabel(parent));
            }
            tier2_to_tier1.insert(key, label);
        }
        let mut tier3_to_tier2 = BTreeMap::new();
        for (t3, t2) in doc.tier3_to_tier2 {
            let key = fold(&t3);
            if key.is_empty() {
                return Err(TaxonomyError::EmptyKey(t3));
            }
            tier3_to_tier2.insert(key, fold(&t2));
        }

        Ok(Taxonomy {
            tier1: FunctionLabel::ALL.to_vec(),
            definitions,
            tier2_to_tier1,
            tier3_to_tier2,
        })
    }

    pub fn to_document(&self) -> TaxonomyDocument {
        TaxonomyDocument {
            definitions: self
                .definitions
                .iter()
                .map(|d| DefinitionEntry {
                    label: d.label.to_string(),
                    definition: d.definition.clone(),
                })
                .collect(),
            tier2_to_tier1: self
                .tier2_to_tier1
                .iter()
                .map(|(k, v)| (k.clone(), v.to_string()))
                .collect(),
            tier3_to_tier2: self.tier3_to_tier2.clone(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, TaxonomyError> {
        Self::from_document(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_document()).expect("taxonomy serializes")
    }

    pub fn load(path: &Path) -> Result<Self, TaxonomyError> {
        let text = std::fs::read_to_string(path).map_err(|source| TaxonomyError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }
}

/// Case-folds, maps `_`/`-` to spaces, collapses whitespace and strips
/// surrounding punctuation.
fn fold(raw: &str) -> String {
    let trimmed = raw.trim_matches(|c: char| !c.is_alphanumeric());
    trimmed
        .to_lowercase()
        .replace(['_', '-'], " ")
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

/// Maps raw model or dataset text to one of the eight classes. Anything that
/// is not a class name (after trimming and case folding) comes back as
/// `OutOfVocabulary` carrying the input verbatim. Synonyms are not resolved.
pub fn normalize_label(raw: &str) -> FunctionLabel {
    FunctionLabel::from_folded(&fold(raw))
        .unwrap_or_else(|| FunctionLabel::OutOfVocabulary(raw.to_string()))
}

/// Top-tier class of a tier-2 subfunction (or of a tier-3 one through its
/// tier-2 parent), else `OutOfVocabulary(subfunction)`.
pub fn tier1_of(subfunction: &str, taxonomy: &Taxonomy) -> FunctionLabel {
    let key = fold(subfunction);
    let tier2 = taxonomy.tier3_to_tier2.get(&key).unwrap_or(&key);
    taxonomy
        .tier2_to_tier1
        .get(&key)
        .or_else(|| taxonomy.tier2_to_tier1.get(tier2))
        .cloned()
        .unwrap_or_else(|| FunctionLabel::OutOfVocabulary(subfunction.to_string()))
}
