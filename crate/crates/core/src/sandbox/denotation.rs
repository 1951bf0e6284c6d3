//! Normalized execution results.
//!
//! A [`Denotation`] is what every equivalence decision in the crate is made
//! on. Raw SQLite values are canonicalized first:
//!
//! * `NULL` becomes [`Value::Null`];
//! * reals are rounded to 6 decimal places, and a real whose rounded form is
//!   integral (and fits in an `i64`) is stored as [`Value::Integer`], so
//!   `1`, `1.0` and `1.0000004` all compare equal;
//! * text and blobs are kept byte-exact.
//!
//! Rounding is applied once at normalization time rather than as a pairwise
//! epsilon, which keeps equality transitive.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::SandboxError;

/// One canonical cell value.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "type", content = "value", rename_all = "snake_case")]
pub enum Value {
    Null,
    Integer(i64),
    /// Decimal text of a non-integral (or out of `i64` range) real, already
    /// rounded to 6 places with trailing zeros removed.
    Real(String),
    Text(String),
    Blob(Vec<u8>),
}

impl Value {
    /// Canonicalize a floating point value.
    pub fn from_f64(x: f64) -> Value {
        if x.is_nan() {
            // SQLite never yields NaN, but keep normalization total.
            return Value::Null;
        }
        if x.is_infinite() {
            return Value::Real(if x > 0.0 { "inf" } else { "-inf" }.to_string());
        }
        let rounded = format!("{x:.6}");
        let (int_part, frac_part) = rounded.split_once('.').expect("fixed precision format");
        if frac_part.bytes().all(|b| b == b'0') {
            if let Ok(i) = int_part.parse::<i64>() {
                // Also folds "-0" into 0.
                return Value::Integer(i);
            }
            return Value::Real(int_part.to_string());
        }
        let frac = frac_part.trim_end_matches('0');
        Value::Real(format!("{int_part}.{frac}"))
    }

    fn tag(&self) -> u8 {
        match self {
            Value::Null => b'N',
            Value::Integer(_) => b'I',
            Value::Real(_) => b'R',
            Value::Text(_) => b'T',
            Value::Blob(_) => b'B',
        }
    }

    /// Type-tagged, length-prefixed canonical encoding.
    fn encode_into(&self, out: &mut Vec<u8>) {
        out.push(self.tag());
        match self {
            Value::Null => {}
            Value::Integer(i) => out.extend_from_slice(&i.to_be_bytes()),
            Value::Real(s) | Value::Text(s) => {
                out.extend_from_slice(&(s.len() as u64).to_be_bytes());
                out.extend_from_slice(s.as_bytes());
            }
            Value::Blob(b) => {
                out.extend_from_slice(&(b.len() as u64).to_be_bytes());
                out.extend_from_slice(b);
            }
        }
    }
}

impl From<rusqlite::types::Value> for Value {
    fn from(v: rusqlite::types::Value) -> Self {
        use rusqlite::types::Value as Raw;
        match v {
            Raw::Null => Value::Null,
            Raw::Integer(i) => Value::Integer(i),
            Raw::Real(f) => Value::from_f64(f),
            Raw::Text(s) => Value::Text(s),
            Raw::Blob(b) => Value::Blob(b),
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Null => f.write_str("NULL"),
            Value::Integer(i) => write!(f, "{i}"),
            Value::Real(s) | Value::Text(s) => f.write_str(s),
            Value::Blob(b) => write!(f, "x'{}'", hex::encode(b)),
        }
    }
}

/// How two denotations are compared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComparisonMode {
    /// Row order ignored, duplicates counted, column positions significant.
    #[default]
    Multiset,
    /// Row sequence must also be identical.
    Ordered,
}

impl std::str::FromStr for ComparisonMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "multiset" => Ok(ComparisonMode::Multiset),
            "ordered" => Ok(ComparisonMode::Ordered),
            other => Err(format!("unknown comparison mode `{other}` (expected multiset or ordered)")),
        }
    }
}

/// The normalized result of executing one query.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Denotation {
    pub columns: usize,
    /// Rows in the order the engine produced them.
    pub rows: Vec<Vec<Value>>,
    /// Set when the result was cut at the row limit.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub truncated: bool,
    /// SHA-256 over the canonical serialization of the sorted row multiset.
    pub fingerprint: String,
}

impl Denotation {
    /// Build a denotation from already-normalized rows.
    pub fn new(columns: usize, rows: Vec<Vec<Value>>, truncated: bool) -> Result<Self, SandboxError> {
        if let Some((i, row)) = rows.iter().enumerate().find(|(_, r)| r.len() != columns) {
            return Err(SandboxError::RaggedRows { row: i, expected: columns, found: row.len() });
        }
        let fingerprint = fingerprint_of(columns, truncated, sorted_refs(&rows).into_iter());
        Ok(Denotation { columns, rows, truncated, fingerprint })
    }

    pub fn row_count(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Hash of the row *sequence*; equal for two denotations exactly when
    /// they are equal in [`ComparisonMode::Ordered`].
    pub fn ordered_fingerprint(&self) -> String {
        fingerprint_of(self.columns, self.truncated, self.rows.iter())
    }

    /// The grouping key matching [`denotation_equal`] under `mode`.
    pub fn key(&self, mode: ComparisonMode) -> String {
        match mode {
            ComparisonMode::Multiset => self.fingerprint.clone(),
            ComparisonMode::Ordered => self.ordered_fingerprint(),
        }
    }

    /// Rows sorted into canonical order.
    pub fn sorted_rows(&self) -> Vec<&Vec<Value>> {
        sorted_refs(&self.rows)
    }
}

fn sorted_refs(rows: &[Vec<Value>]) -> Vec<&Vec<Value>> {
    let mut sorted: Vec<&Vec<Value>> = rows.iter().collect();
    sorted.sort_by(|a, b| cmp_rows(a, b));
    sorted
}

fn cmp_rows(a: &[Value], b: &[Value]) -> Ordering {
    a.cmp(b)
}

fn fingerprint_of<'a>(
    columns: usize,
    truncated: bool,
    rows: impl Iterator<Item = &'a Vec<Value>>,
) -> String {
    let mut buf = Vec::with_capacity(64);
    buf.extend_from_slice(&(columns as u64).to_be_bytes());
    buf.push(truncated as u8);
    let mut hasher = Sha256::new();
    hasher.update(&buf);
    for row in rows {
        buf.clear();
        buf.push(b'(');
        for v in row {
            v.encode_into(&mut buf);
        }
        buf.push(b')');
        hasher.update(&buf);
    }
    hex::encode(hasher.finalize())
}

/// Normalize raw engine rows into a [`Denotation`].
///
/// Fails only when the rows are not rectangular.
pub fn normalize_result(
    raw_rows: Vec<Vec<rusqlite::types::Value>>,
    column_count: usize,
) -> Result<Denotation, SandboxError> {
    let rows = raw_rows
        .into_iter()
        .map(|r| r.into_iter().map(Value::from).collect())
        .collect();
    Denotation::new(column_count, rows, false)
}

/// Execution-result equality.
pub fn denotation_equal(a: &Denotation, b: &Denotation, mode: ComparisonMode) -> bool {
    if a.columns != b.columns || a.truncated != b.truncated || a.rows.len() != b.rows.len() {
        return false;
    }
    match mode {
        ComparisonMode::Multiset => a.fingerprint == b.fingerprint,
        ComparisonMode::Ordered => a.rows == b.rows,
    }
}
