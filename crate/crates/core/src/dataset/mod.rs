//! Ambiguous text-to-SQL examples: the canonical JSONL format, validation,
//! empty-result filtering, and adapters for the AmbiQT and Ambrosia layouts.
//!
//! A canonical record looks like
//!
//! ```json
//! {"example_id":"e1","db_id":"concert","db_dump_path":"db/concert.sql",
//!  "question":"Show name, country, age for all singers",
//!  "gold_sql":["SELECT artist_name, ...","SELECT performer_name, ..."],
//!  "gold_interpretations":["...","..."],"is_ambiguous":true,"tags":["column"]}
//! ```
//!
//! The database is either inlined (`db_dump`) or referenced by a path relative
//! to the JSONL file (`db_dump_path`). Records naming the same `db_id` share a
//! single [`DatabaseSpec`] after loading.

mod adapters;

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::write_atomic;
use crate::sandbox::{build_database, ExecLimits, ExecOutcome, SandboxError};

pub use adapters::AdapterOptions;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("example {index}: missing required field `{field}`")]
    MissingField { index: usize, field: String },
    #[error("example {index}: field `{field}`: {message}")]
    BadField { index: usize, field: String, message: String },
    #[error("example {index} is invalid: {}", .violations.iter().map(|v| v.message.as_str()).collect::<Vec<_>>().join("; "))]
    Invalid { index: usize, violations: Vec<Violation> },
    #[error("db_id `{0}` is used with two different dumps")]
    DbIdCollision(String),
    #[error("unknown dataset format `{0}` (expected canonical, ambiqt or ambrosia)")]
    UnknownFormat(String),
    #[error("database `{db_id}` referenced by the dataset could not be resolved: {message}")]
    MissingDatabase { db_id: String, message: String },
    #[error(transparent)]
    Sandbox(#[from] SandboxError),
}

impl DatasetError {
    fn io(path: &Path, source: io::Error) -> Self {
        DatasetError::Io { path: path.to_path_buf(), source }
    }
}

/// Schema plus content of one database, as replayable SQL.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatabaseSpec {
    pub db_id: String,
    pub dump_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub descriptions: Option<BTreeMap<String, String>>,
    /// Where the dump was read from, as written in the source record. When
    /// set, [`write_canonical`] references the dump instead of inlining it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dump_path: Option<String>,
}

impl DatabaseSpec {
    pub fn new(db_id: impl Into<String>, dump_text: impl Into<String>) -> Self {
        DatabaseSpec {
            db_id: db_id.into(),
            dump_text: dump_text.into(),
            descriptions: None,
            dump_path: None,
        }
    }
}

/// One question with its set of valid gold queries.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub example_id: String,
    pub db: Arc<DatabaseSpec>,
    pub question: String,
    pub gold_sql: Vec<String>,
    /// Natural-language readings aligned index-by-index with `gold_sql`.
    pub gold_interpretations: Option<Vec<String>>,
    /// Advisory only; never consulted at inference time.
    pub is_ambiguous: Option<bool>,
    pub tags: Vec<String>,
    /// Synonym pair for synonym-rewrite synthesis (AmbiQT-style sources).
    pub synonyms: Vec<String>,
}

impl Example {
    pub fn new(
        example_id: impl Into<String>,
        db: Arc<DatabaseSpec>,
        question: impl Into<String>,
        gold_sql: Vec<String>,
    ) -> Self {
        Example {
            example_id: example_id.into(),
            db,
            question: question.into(),
            gold_sql,
            gold_interpretations: None,
            is_ambiguous: None,
            tags: Vec::new(),
            synonyms: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub severity: Severity,
    pub field: String,
    pub message: String,
}

impl Violation {
    fn error(field: &str, message: impl Into<String>) -> Self {
        Violation { severity: Severity::Error, field: field.to_string(), message: message.into() }
    }

    fn warning(field: &str, message: impl Into<String>) -> Self {
        Violation { severity: Severity::Warning, field: field.to_string(), message: message.into() }
    }
}

/// Check an example's invariants. An empty list means valid.
pub fn validate_example(example: &Example) -> Vec<Violation> {
    let mut out = Vec::new();
    if example.example_id.trim().is_empty() {
        out.push(Violation::error("example_id", "example_id is empty"));
    }
    if example.question.trim().is_empty() {
        out.push(Violation::error("question", "question is empty"));
    }
    if example.gold_sql.is_empty() {
        out.push(Violation::error("gold_sql", "gold_sql must contain at least one query"));
    }
    for (i, q) in example.gold_sql.iter().enumerate() {
        if q.trim().is_empty() {
            out.push(Violation::error("gold_sql", format!("gold query {i} is empty")));
        }
    }
    if let Some(interps) = &example.gold_interpretations {
        if interps.len() != example.gold_sql.len() {
            out.push(Violation::error(
                "gold_interpretations",
                format!(
                    "{} gold interpretations for {} gold queries",
                    interps.len(),
                    example.gold_sql.len()
                ),
            ));
        }
    }
    if example.is_ambiguous == Some(true) && example.gold_sql.len() < 2 {
        out.push(Violation::warning(
            "is_ambiguous",
            "flagged ambiguous but has fewer than two gold queries",
        ));
    }
    if example.db.dump_text.trim().is_empty() {
        out.push(Violation::warning("db_dump", format!("database `{}` has an empty dump", example.db.db_id)));
    }
    out
}

/// On-disk dataset layouts understood by [`load_dataset`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetFormat {
    Canonical,
    Ambiqt,
    Ambrosia,
}

impl std::str::FromStr for DatasetFormat {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "canonical" => Ok(DatasetFormat::Canonical),
            "ambiqt" => Ok(DatasetFormat::Ambiqt),
            "ambrosia" => Ok(DatasetFormat::Ambrosia),
            _ => Err(DatasetError::UnknownFormat(s.to_string())),
        }
    }
}

/// Load examples from `path`, checking every invariant.
pub fn load_dataset(path: &Path, format: DatasetFormat) -> Result<Vec<Example>, DatasetError> {
    load_dataset_with(path, format, &AdapterOptions::default())
}

pub fn load_dataset_with(
    path: &Path,
    format: DatasetFormat,
    options: &AdapterOptions,
) -> Result<Vec<Example>, DatasetError> {
    let examples = match format {
        DatasetFormat::Canonical => load_canonical(path)?,
        DatasetFormat::Ambiqt => adapters::load_ambiqt(path, options)?,
        DatasetFormat::Ambrosia => adapters::load_ambrosia(path, options)?,
    };
    for (index, example) in examples.iter().enumerate() {
        let violations = validate_example(example);
        if violations.iter().any(|v| v.severity == Severity::Error) {
            return Err(DatasetError::Invalid { index, violations });
        }
        for v in &violations {
            log::warn!("example {index} ({}): {}", example.example_id, v.message);
        }
    }
    Ok(examples)
}

#[derive(Debug, Serialize, Deserialize)]
struct CanonicalRecord {
    example_id: String,
    db_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    db_dump: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    db_dump_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    db_descriptions: Option<BTreeMap<String, String>>,
    question: String,
    gold_sql: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gold_interpretations: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    is_ambiguous: Option<bool>,
    #[serde(default)]
    tags: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    synonyms: Vec<String>,
}

const REQUIRED_FIELDS: [&str; 4] = ["example_id", "db_id", "question", "gold_sql"];

/// Interns database specs by id so examples over one database share it.
#[derive(Default)]
pub(crate) struct DbRegistry {
    specs: HashMap<String, Arc<DatabaseSpec>>,
}

impl DbRegistry {
    pub(crate) fn intern(&mut self, spec: DatabaseSpec) -> Result<Arc<DatabaseSpec>, DatasetError> {
        match self.specs.get(&spec.db_id) {
            Some(existing) if existing.dump_text != spec.dump_text => {
                Err(DatasetError::DbIdCollision(spec.db_id))
            }
            Some(existing) => Ok(existing.clone()),
            None => {
                let arc = Arc::new(spec);
                self.specs.insert(arc.db_id.clone(), arc.clone());
                Ok(arc)
            }
        }
    }
}

fn load_canonical(path: &Path) -> Result<Vec<Example>, DatasetError> {
    let text = fs::read_to_string(path).map_err(|e| DatasetError::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut registry = DbRegistry::default();
    let mut dumps: HashMap<String, String> = HashMap::new();
    let mut out = Vec::new();

    for (index, line) in text.lines().filter(|l| !l.trim().is_empty()).enumerate() {
        let value: serde_json::Value = serde_json::from_str(line).map_err(|e| DatasetError::BadField {
            index,
            field: "<record>".to_string(),
            message: e.to_string(),
        })?;
        let obj = value.as_object().ok_or_else(|| DatasetError::BadField {
            index,
            field: "<record>".to_string(),
            message: "record is not a JSON object".to_string(),
        })?;
        for field in REQUIRED_FIELDS {
            if obj.get(field).is_none_or(|v| v.is_null()) {
                return Err(DatasetError::MissingField { index, field: field.to_string() });
            }
        }
        if !obj.contains_key("db_dump") && !obj.contains_key("db_dump_path") {
            return Err(DatasetError::MissingField { index, field: "db_dump".to_string() });
        }
        let rec: CanonicalRecord = serde_json::from_value(value).map_err(|e| DatasetError::BadField {
            index,
            field: "<record>".to_string(),
            message: e.to_string(),
        })?;

        let dump_text = match (&rec.db_dump, &rec.db_dump_path) {
            (Some(inline), _) => inline.clone(),
            (None, Some(rel)) => match dumps.get(rel) {
                Some(t) => t.clone(),
                None => {
                    let full = base.join(rel);
                    let t = fs::read_to_string(&full).map_err(|e| DatasetError::io(&full, e))?;
                    dumps.insert(rel.clone(), t.clone());
                    t
                }
            },
            (None, None) => unreachable!("checked above"),
        };
        let spec = DatabaseSpec {
            db_id: rec.db_id,
            dump_text,
            descriptions: rec.db_descriptions,
            dump_path: if rec.db_dump.is_some() { None } else { rec.db_dump_path },
        };
        let db = registry.intern(spec)?;
        out.push(Example {
            example_id: rec.example_id,
            db,
            question: rec.question,
            gold_sql: rec.gold_sql,
            gold_interpretations: rec.gold_interpretations,
            is_ambiguous: rec.is_ambiguous,
            tags: rec.tags,
            synonyms: rec.synonyms,
        });
    }
    Ok(out)
}

fn to_record(example: &Example) -> CanonicalRecord {
    let (db_dump, db_dump_path) = match &example.db.dump_path {
        Some(p) => (None, Some(p.clone())),
        None => (Some(example.db.dump_text.clone()), None),
    };
    CanonicalRecord {
        example_id: example.example_id.clone(),
        db_id: example.db.db_id.clone(),
        db_dump,
        db_dump_path,
        db_descriptions: example.db.descriptions.clone(),
        question: example.question.clone(),
        gold_sql: example.gold_sql.clone(),
        gold_interpretations: example.gold_interpretations.clone(),
        is_ambiguous: example.is_ambiguous,
        tags: example.tags.clone(),
        synonyms: example.synonyms.clone(),
    }
}

/// Write examples as canonical JSONL, one record per line.
///
/// Databases loaded from a dump file keep referencing that file (by the same
/// relative path); all others are inlined.
pub fn write_canonical(examples: &[Example], path: &Path) -> Result<(), DatasetError> {
    write_atomic(path, |w| {
        for ex in examples {
            serde_json::to_writer(&mut *w, &to_record(ex))?;
            w.write_all(b"\n")?;
        }
        Ok(())
    })
    .map_err(|e| DatasetError::io(path, e))
}

/// Keep exactly the examples whose gold queries all execute and return at
/// least one row.
///
/// Databases are built once per `db_id`; distinct databases are processed in
/// parallel. A database that fails to build is a hard error; a failing gold
/// query only drops its example.
pub fn filter_nonempty(examples: Vec<Example>, limits: ExecLimits) -> Result<Vec<Example>, DatasetError> {
    let mut groups: Vec<(Arc<DatabaseSpec>, Vec<usize>)> = Vec::new();
    let mut by_db: HashMap<String, usize> = HashMap::new();
    for (i, ex) in examples.iter().enumerate() {
        let slot = *by_db.entry(ex.db.db_id.clone()).or_insert_with(|| {
            groups.push((ex.db.clone(), Vec::new()));
            groups.len() - 1
        });
        groups[slot].1.push(i);
    }

    let verdicts: Vec<Vec<(usize, bool)>> = groups
        .par_iter()
        .map(|(spec, members)| {
            let handle = build_database(spec, limits)?;
            Ok(members
                .iter()
                .map(|&i| {
                    let ex = &examples[i];
                    let keep = ex.gold_sql.iter().enumerate().all(|(g, sql)| match handle.execute(sql) {
                        ExecOutcome::Ok(d) if !d.is_empty() => true,
                        ExecOutcome::Ok(_) => {
                            log::info!("dropping {}: gold {g} returns no rows", ex.example_id);
                            false
                        }
                        other => {
                            log::warn!(
                                "dropping {}: gold {g} failed ({}): {}",
                                ex.example_id,
                                other.kind(),
                                other.error_message().unwrap_or_default()
                            );
                            false
                        }
                    });
                    (i, keep)
                })
                .collect())
        })
        .collect::<Result<_, DatasetError>>()?;

    let mut keep = vec![false; examples.len()];
    for (i, k) in verdicts.into_iter().flatten() {
        keep[i] = k;
    }
    Ok(examples
        .into_iter()
        .zip(keep)
        .filter_map(|(ex, k)| k.then_some(ex))
        .collect())
}
