//! Adapters from the published dataset layouts into [`Example`]s.
//!
//! Both adapters accept JSON (an array of objects) or JSONL; the Ambrosia
//! adapter also reads the CSV release. List-valued columns may be JSON
//! arrays or JSON-array strings (as found in CSV cells). Gold queries are
//! copied as-is: an adapter never adds or removes a gold query.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde_json::{Map, Value as Json};
use sha2::{Digest, Sha256};

use super::{DatabaseSpec, DatasetError, DbRegistry, Example};
use crate::sandbox::dump_sqlite_file;

/// Where adapters look for databases that are not inlined in the records.
#[derive(Debug, Clone, Default)]
pub struct AdapterOptions {
    /// Root directory of per-database folders. Defaults to `database/` next to
    /// the dataset file (the Spider convention).
    pub db_root: Option<PathBuf>,
}

type Record = Map<String, Json>;

fn read_records(path: &Path) -> Result<Vec<Record>, DatasetError> {
    let io_err = |e| DatasetError::Io { path: path.to_path_buf(), source: e };
    let is_csv = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    if is_csv {
        let mut reader = csv::Reader::from_path(path).map_err(|e| DatasetError::BadField {
            index: 0,
            field: "<csv>".into(),
            message: e.to_string(),
        })?;
        let headers = reader
            .headers()
            .map_err(|e| DatasetError::BadField { index: 0, field: "<csv>".into(), message: e.to_string() })?
            .clone();
        let mut out = Vec::new();
        for (index, row) in reader.records().enumerate() {
            let row = row.map_err(|e| DatasetError::BadField {
                index,
                field: "<csv>".into(),
                message: e.to_string(),
            })?;
            let obj = headers
                .iter()
                .zip(row.iter())
                .map(|(k, v)| (k.to_string(), Json::String(v.to_string())))
                .collect();
            out.push(obj);
        }
        return Ok(out);
    }

    let text = fs::read_to_string(path).map_err(io_err)?;
    let trimmed = text.trim_start();
    let values: Vec<Json> = if trimmed.starts_with('[') {
        serde_json::from_str(trimmed).map_err(|e| DatasetError::BadField {
            index: 0,
            field: "<json>".into(),
            message: e.to_string(),
        })?
    } else {
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(index, l)| {
                serde_json::from_str(l).map_err(|e| DatasetError::BadField {
                    index,
                    field: "<json>".into(),
                    message: e.to_string(),
                })
            })
            .collect::<Result<_, _>>()?
    };
    values
        .into_iter()
        .enumerate()
        .map(|(index, v)| match v {
            Json::Object(o) => Ok(o),
            _ => Err(DatasetError::BadField {
                index,
                field: "<record>".into(),
                message: "record is not an object".into(),
            }),
        })
        .collect()
}

fn get_str(rec: &Record, index: usize, field: &str) -> Result<Option<String>, DatasetError> {
    match rec.get(field) {
        None | Some(Json::Null) => Ok(None),
        Some(Json::String(s)) if s.trim().is_empty() => Ok(None),
        Some(Json::String(s)) => Ok(Some(s.clone())),
        Some(Json::Number(n)) => Ok(Some(n.to_string())),
        Some(_) => Err(DatasetError::BadField {
            index,
            field: field.into(),
            message: "expected a string".into(),
        }),
    }
}

fn require_str(rec: &Record, index: usize, field: &str) -> Result<String, DatasetError> {
    get_str(rec, index, field)?.ok_or_else(|| DatasetError::MissingField { index, field: field.into() })
}

/// A list given as a JSON array, a JSON-array string, or a string split on
/// `separator`.
fn get_list(rec: &Record, index: usize, field: &str, separator: &str) -> Result<Option<Vec<String>>, DatasetError> {
    let bad = |message: String| DatasetError::BadField { index, field: field.into(), message };
    match rec.get(field) {
        None | Some(Json::Null) => Ok(None),
        Some(Json::Array(items)) => items
            .iter()
            .map(|v| match v {
                Json::String(s) => Ok(s.clone()),
                other => Err(bad(format!("expected strings, found {other}"))),
            })
            .collect::<Result<Vec<_>, _>>()
            .map(Some),
        Some(Json::String(s)) => {
            let t = s.trim();
            if t.is_empty() {
                return Ok(None);
            }
            if t.starts_with('[') {
                let parsed: Vec<String> = serde_json::from_str(t).map_err(|e| bad(e.to_string()))?;
                return Ok(Some(parsed));
            }
            Ok(Some(
                t.split(separator)
                    .map(str::trim)
                    .filter(|p| !p.is_empty())
                    .map(str::to_string)
                    .collect(),
            ))
        }
        Some(other) => Err(bad(format!("expected a list, found {other}"))),
    }
}

fn get_bool(rec: &Record, field: &str) -> Option<bool> {
    match rec.get(field)? {
        Json::Bool(b) => Some(*b),
        Json::String(s) => match s.trim().to_ascii_lowercase().as_str() {
            "true" | "1" | "yes" => Some(true),
            "false" | "0" | "no" => Some(false),
            _ => None,
        },
        Json::Number(n) => n.as_i64().map(|i| i != 0),
        _ => None,
    }
}

/// Loads dump text for a database file, caching by path.
struct DumpCache {
    loaded: HashMap<PathBuf, String>,
}

impl DumpCache {
    fn new() -> Self {
        DumpCache { loaded: HashMap::new() }
    }

    fn load(&mut self, path: &Path) -> Result<String, DatasetError> {
        if let Some(t) = self.loaded.get(path) {
            return Ok(t.clone());
        }
        let is_sql = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("sql"));
        let text = if is_sql {
            fs::read_to_string(path).map_err(|e| DatasetError::Io { path: path.to_path_buf(), source: e })?
        } else {
            dump_sqlite_file(path)?
        };
        self.loaded.insert(path.to_path_buf(), text.clone());
        Ok(text)
    }
}

fn dataset_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."))
}

/// AmbiQT: two golds per question (`query1`/`query2`, or a `gold_queries`
/// list), databases inlined as `db_dump` or found under
/// `<db_root>/<db_id>/<db_id>.{sqlite,sql}`.
pub(crate) fn load_ambiqt(path: &Path, options: &AdapterOptions) -> Result<Vec<Example>, DatasetError> {
    let records = read_records(path)?;
    let db_root = options.db_root.clone().unwrap_or_else(|| dataset_dir(path).join("database"));
    let mut registry = DbRegistry::default();
    let mut dumps = DumpCache::new();
    let mut out = Vec::with_capacity(records.len());

    for (index, rec) in records.iter().enumerate() {
        let db_id = require_str(rec, index, "db_id")?;
        let question = require_str(rec, index, "question")?;

        let mut gold_sql = Vec::new();
        if let Some(list) = get_list(rec, index, "gold_queries", "\n\n")? {
            gold_sql = list;
        } else {
            for field in ["query1", "query2"] {
                gold_sql.push(require_str(rec, index, field)?);
            }
        }

        let dump_text = match get_str(rec, index, "db_dump")? {
            Some(inline) => inline,
            None => {
                let candidates = [
                    db_root.join(&db_id).join(format!("{db_id}.sqlite")),
                    db_root.join(&db_id).join(format!("{db_id}.sql")),
                    db_root.join(format!("{db_id}.sqlite")),
                    db_root.join(format!("{db_id}.sql")),
                ];
                let found = candidates.iter().find(|p| p.is_file()).ok_or_else(|| {
                    DatasetError::MissingDatabase {
                        db_id: db_id.clone(),
                        message: format!("no database file under {}", db_root.display()),
                    }
                })?;
                dumps.load(found)?
            }
        };
        let db = registry.intern(DatabaseSpec::new(db_id, dump_text))?;

        let example_id = get_str(rec, index, "id")?
            .or(get_str(rec, index, "example_id")?)
            .unwrap_or_else(|| format!("ambiqt-{index}"));
        let mut tags = Vec::new();
        for field in ["type", "ambig_type", "ambiguity_type"] {
            if let Some(t) = get_str(rec, index, field)? {
                tags.push(t);
            }
        }
        let mut synonyms = get_list(rec, index, "synonyms", "\n")?.unwrap_or_default();
        if synonyms.is_empty() {
            if let (Some(a), Some(b)) = (get_str(rec, index, "synonym1")?, get_str(rec, index, "synonym2")?) {
                synonyms = vec![a, b];
            }
        }

        out.push(Example {
            example_id,
            db,
            question,
            gold_sql,
            gold_interpretations: get_list(rec, index, "interpretations", "\n")?,
            is_ambiguous: Some(true),
            tags,
            synonyms,
        });
    }
    Ok(out)
}

/// Ambrosia: CSV or JSON(L) with `question`, `gold_queries`,
/// `nl_interpretations`, `ambig_type`, `is_ambiguous`, and the database as
/// `db_dump` or a `db_file` path relative to the dataset file.
pub(crate) fn load_ambrosia(path: &Path, options: &AdapterOptions) -> Result<Vec<Example>, DatasetError> {
    let records = read_records(path)?;
    let base = options.db_root.clone().unwrap_or_else(|| dataset_dir(path));
    let mut registry = DbRegistry::default();
    let mut dumps = DumpCache::new();
    let mut out = Vec::with_capacity(records.len());

    for (index, rec) in records.iter().enumerate() {
        let question = require_str(rec, index, "question")?;
        let gold_sql = get_list(rec, index, "gold_queries", "\n\n")?
            .ok_or_else(|| DatasetError::MissingField { index, field: "gold_queries".into() })?;

        let (db_id, dump_text) = match (get_str(rec, index, "db_dump")?, get_str(rec, index, "db_file")?) {
            (Some(inline), file) => {
                let id = match file {
                    Some(f) => db_id_from_file(&f),
                    None => format!("db-{}", &hex::encode(Sha256::digest(inline.as_bytes()))[..12]),
                };
                (id, inline)
            }
            (None, Some(file)) => (db_id_from_file(&file), dumps.load(&base.join(&file))?),
            (None, None) => return Err(DatasetError::MissingField { index, field: "db_dump".into() }),
        };
        let db = registry.intern(DatabaseSpec::new(db_id, dump_text))?;

        let mut interps = get_list(rec, index, "nl_interpretations", "\n")?;
        if interps.as_ref().is_some_and(|i| i.len() != gold_sql.len()) {
            log::warn!(
                "ambrosia record {index}: {} interpretations for {} gold queries; dropping interpretations",
                interps.as_ref().map_or(0, Vec::len),
                gold_sql.len()
            );
            interps = None;
        }

        let mut tags = Vec::new();
        for field in ["ambig_type", "domain"] {
            if let Some(t) = get_str(rec, index, field)? {
                tags.push(t);
            }
        }
        let example_id = get_str(rec, index, "id")?
            .or(get_str(rec, index, "example_id")?)
            .unwrap_or_else(|| format!("ambrosia-{index}"));

        out.push(Example {
            example_id,
            db,
            question,
            gold_sql,
            gold_interpretations: interps,
            is_ambiguous: get_bool(rec, "is_ambiguous"),
            tags,
            synonyms: Vec::new(),
        });
    }
    Ok(out)
}

fn db_id_from_file(file: &str) -> String {
    let p = Path::new(file);
    let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    match p.parent().and_then(|d| d.file_name()) {
        Some(dir) => format!("{}/{stem}", dir.to_string_lossy()),
        None => stem,
    }
}
