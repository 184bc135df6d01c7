//! OSDR export parsing, preprocessing and ABC name matching.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::taxonomy::{normalize_label, tier1_of, FunctionLabel, Taxonomy};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot open {path}: {source}")]
    Open {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: header is missing required column {column:?}")]
    MissingColumn { path: String, column: &'static str },
    #[error("{path}: line {line}: {message}")]
    Parse {
        path: String,
        line: u64,
        message: String,
    },
}

/// One OSDR row as exported; cells may be empty.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawDesignRow {
    pub name: String,
    pub component_basis: String,
    pub sys_name: String,
    pub subfunction_basis: String,
    pub parent_subfunction: String,
}

/// A complete, labeled design record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DesignRecord {
    pub part_name: String,
    pub component_basis: String,
    pub system_name: String,
    pub subfunction: String,
    pub label: FunctionLabel,
}

impl From<&DesignRecord> for RawDesignRow {
    fn from(rec: &DesignRecord) -> Self {
        RawDesignRow {
            name: rec.part_name.clone(),
            component_basis: rec.component_basis.clone(),
            sys_name: rec.system_name.clone(),
            subfunction_basis: rec.subfunction.clone(),
            parent_subfunction: rec.label.name().to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AbcPartRecord {
    pub chunk: u32,
    pub assembly_id: i64,
    pub assembly_name: String,
    pub part_id: i64,
    pub part_name: String,
}

/// Row accounting for a preprocessing (or matching) pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub raw_count: usize,
    pub dropped_incomplete: usize,
    pub dropped_duplicate: usize,
    pub retained: usize,
}

impl CorpusStats {
    pub fn is_conserved(&self) -> bool {
        self.raw_count == self.dropped_incomplete + self.dropped_duplicate + self.retained
    }
}

const OSDR_COLUMNS: [&str; 5] = [
    "name",
    "component_basis",
    "sys_name",
    "subfunction_basis",
    "parent_subfunction",
];

const ABC_COLUMNS: [&str; 5] = ["chunk", "assembly_id", "assembly_name", "part_id", "part_name"];

fn open(path: &Path) -> Result<File, IngestError> {
    File::open(path).map_err(|source| IngestError::Open {
        path: path.display().to_string(),
        source,
    })
}

fn csv_error(path: &Path, err: csv::Error) -> IngestError {
    let line = err.position().map(|p| p.line()).unwrap_or(0);
    IngestError::Parse {
        path: path.display().to_string(),
        line,
        message: err.to_string(),
    }
}

/// Locates each required column in the header; column order is free.
fn column_positions<const N: usize>(
    path: &Path,
    headers: &csv::StringRecord,
    required: [&'static str; N],
) -> Result<[usize; N], IngestError> {
    let folded: Vec<String> = headers.iter().map(|h| h.trim().to_lowercase()).collect();
    let mut out = [0usize; N];
    for (slot, column) in out.iter_mut().zip(required) {
        *slot = folded
            .iter()
            .position(|h| h == column)
            .ok_or_else(|| IngestError::MissingColumn {
                path: path.display().to_string(),
                column,
            })?;
    }
    Ok(out)
}

fn csv_reader<R: Read>(input: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(input)
}

/// Reads an OSDR CSV export with a header naming the five design columns.
pub fn parse_osdr_csv(path: &Path) -> Result<Vec<RawDesignRow>, IngestError> {
    let mut reader = csv_reader(open(path)?);
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    if headers.is_empty() {
        return Ok(Vec::new());
    }
    let [name, basis, sys, sub, parent] = column_positions(path, &headers, OSDR_COLUMNS)?;
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let cell = |i: usize| record.get(i).unwrap_or("").to_string();
        rows.push(RawDesignRow {
            name: cell(name),
            component_basis: cell(basis),
            sys_name: cell(sys),
            subfunction_basis: cell(sub),
            parent_subfunction: cell(parent),
        });
    }
    Ok(rows)
}

fn dedup_key(parts: &[&str]) -> Vec<String> {
    parts.iter().map(|p| p.trim().to_lowercase()).collect()
}

/// Drops incomplete rows, resolves the top-tier label and collapses exact
/// duplicates (first occurrence wins).
///
/// The label comes from `parent_subfunction` when it already names a
/// top-tier class, otherwise from mapping `subfunction_basis` through the
/// taxonomy. A row whose label cannot be resolved either way counts as
/// incomplete.
pub fn preprocess(rows: &[RawDesignRow], taxonomy: &Taxonomy) -> (Vec<DesignRecord>, CorpusStats) {
    let mut stats = CorpusStats {
        raw_count: rows.len(),
        ..CorpusStats::default()
    };
    let mut seen = HashSet::new();
    let mut records = Vec::new();

    for row in rows {
        let part_name = row.name.trim();
        let component_basis = row.component_basis.trim();
        let system_name = row.sys_name.trim();
        if part_name.is_empty() || component_basis.is_empty() || system_name.is_empty() {
            stats.dropped_incomplete += 1;
            continue;
        }
        let label = match normalize_label(&row.parent_subfunction) {
            label @ FunctionLabel::OutOfVocabulary(_) => {
                let mapped = tier1_of(&row.subfunction_basis, taxonomy);
                if mapped.is_in_vocabulary() {
                    mapped
                } else {
                    label
                }
            }
            label => label,
        };
        if !label.is_in_vocabulary() {
            stats.dropped_incomplete += 1;
            continue;
        }
        let subfunction = row.subfunction_basis.trim();
        let key = dedup_key(&[
            part_name,
            component_basis,
            system_name,
            subfunction,
            label.name(),
        ]);
        if !seen.insert(key) {
            stats.dropped_duplicate += 1;
            continue;
        }
        records.push(DesignRecord {
            part_name: part_name.to_string(),
            component_basis: component_basis.to_string(),
            system_name: system_name.to_string(),
            subfunction: subfunction.to_string(),
            label,
        });
    }
    stats.retained = records.len();
    (records, stats)
}

/// Writes preprocessed records with the OSDR column names so the file can be
/// fed back through [`parse_osdr_csv`].
pub fn write_records_csv<W: std::io::Write>(
    records: &[DesignRecord],
    out: W,
) -> Result<(), csv::Error> {
    let mut writer = csv::Writer::from_writer(out);
    writer.write_record(OSDR_COLUMNS)?;
    for rec in records {
        let row = RawDesignRow::from(rec);
        writer.write_record([
            &row.name,
            &row.component_basis,
            &row.sys_name,
            &row.subfunction_basis,
            &row.parent_subfunction,
        ])?;
    }
    writer.flush()?;
    Ok(())
}

#[derive(Deserialize)]
struct AbcJsonLine {
    chunk: serde_json::Value,
    assembly_id: serde_json::Value,
    assembly_name: String,
    part_id: serde_json::Value,
    part_name: String,
}

fn parse_int<T: std::str::FromStr>(
    path: &Path,
    line: u64,
    field: &str,
    raw: &str,
) -> Result<T, IngestError> {
    raw.trim().parse::<T>().map_err(|_| IngestError::Parse {
        path: path.display().to_string(),
        line,
        message: format!("{field} is not an integer: {raw:?}"),
    })
}

fn json_int<T: std::str::FromStr>(
    path: &Path,
    line: u64,
    field: &str,
    value: &serde_json::Value,
) -> Result<T, IngestError> {
    match value {
        serde_json::Value::Number(n) => parse_int(path, line, field, &n.to_string()),
        serde_json::Value::String(s) => parse_int(path, line, field, s),
        other => parse_int(path, line, field, &other.to_string()),
    }
}

fn non_empty_part(path: &Path, line: u64, name: &str) -> Result<String, IngestError> {
    let name = name.trim();
    if name.is_empty() {
        return Err(IngestError::Parse {
            path: path.display().to_string(),
            line,
            message: "part_name is empty".into(),
        });
    }
    Ok(name.to_string())
}

fn is_json_lines(path: &Path) -> Result<bool, IngestError> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("jsonl") | Some("ndjson") | Some("json") => return Ok(true),
        Some("csv") => return Ok(false),
        _ => {}
    }
    let mut reader = BufReader::new(open(path)?);
    let mut line = String::new();
    while reader.read_line(&mut line).unwrap_or(0) > 0 {
        let t = line.trim_start();
        if !t.is_empty() {
            return Ok(t.starts_with('{'));
        }
        line.clear();
    }
    Ok(false)
}

/// Reads ABC part metadata from CSV (header with chunk, assembly_id,
/// assembly_name, part_id, part_name) or JSON lines with the same keys.
pub fn parse_abc_metadata(path: &Path) -> Result<Vec<AbcPartRecord>, IngestError> {
    if is_json_lines(path)? {
        return parse_abc_jsonl(path);
    }
    let mut reader = csv_reader(open(path)?);
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    if headers.is_empty() {
        return Ok(Vec::new());
    }
    let [chunk, asm_id, asm_name, part_id, part_name] =
        column_positions(path, &headers, ABC_COLUMNS)?;
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let cell = |i: usize| record.get(i).unwrap_or("");
        out.push(AbcPartRecord {
            chunk: parse_int(path, line, "chunk", cell(chunk))?,
            assembly_id: parse_int(path, line, "assembly_id", cell(asm_id))?,
            assembly_name: cell(asm_name).to_string(),
            part_id: parse_int(path, line, "part_id", cell(part_id))?,
            part_name: non_empty_part(path, line, cell(part_name))?,
        });
    }
    Ok(out)
}

fn parse_abc_jsonl(path: &Path) -> Result<Vec<AbcPartRecord>, IngestError> {
    let reader = BufReader::new(open(path)?);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx as u64 + 1;
        let line = line.map_err(|e| IngestError::Parse {
            path: path.display().to_string(),
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: AbcJsonLine = serde_json::from_str(&line).map_err(|e| IngestError::Parse {
            path: path.display().to_string(),
            line: line_no,
            message: e.to_string(),
        })?;
        out.push(AbcPartRecord {
            chunk: json_int(path, line_no, "chunk", &raw.chunk)?,
            assembly_id: json_int(path, line_no, "assembly_id", &raw.assembly_id)?,
            assembly_name: raw.assembly_name.trim().to_string(),
            part_id: json_int(path, line_no, "part_id", &raw.part_id)?,
            part_name: non_empty_part(path, line_no, &raw.part_name)?,
        });
    }
    Ok(out)
}

/// Parses several chunk files concurrently; output follows the order of
/// `paths`.
pub fn parse_abc_chunks(paths: &[PathBuf]) -> Result<Vec<AbcPartRecord>, IngestError> {
    let results: Vec<Result<Vec<AbcPartRecord>, IngestError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = paths
            .iter()
            .map(|p| scope.spawn(move || parse_abc_metadata(p)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("chunk parser panicked"))
            .collect()
    });
    let mut out = Vec::new();
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

pub fn write_abc_csv<W: std::io::Write>(
    records: &[AbcPartRecord],
    out: W,
) -> Result<(), csv::Error> {
    let mut writer = csv::Writer::from_writer(out);
    writer.write_record(ABC_COLUMNS)?;
    for r in records {
        writer.write_record([
            r.chunk.to_string(),
            r.assembly_id.to_string(),
            r.assembly_name.clone(),
            r.part_id.to_string(),
            r.part_name.clone(),
        ])?;
    }
    writer.flush()?;
    Ok(())
}

/// Keeps ABC parts whose name equals some OSDR part name after trimming and
/// case folding, then drops repeats of (part_name, assembly_name).
pub fn match_abc_to_osdr(abc: &[AbcPartRecord], osdr: &[DesignRecord]) -> Vec<AbcPartRecord> {
    let known: HashSet<String> = osdr
        .iter()
        .map(|r| r.part_name.trim().to_lowercase())
        .collect();
    let mut seen: HashSet<(String, String)> = HashSet::new();
    abc.iter()
        .filter(|part| known.contains(&part.part_name.trim().to_lowercase()))
        .filter(|part| {
            let key = (
                part.part_name.trim().to_lowercase(),
                part.assembly_name.trim().to_lowercase(),
            );
            seen.insert(key)
        })
        .cloned()
        .collect()
}
