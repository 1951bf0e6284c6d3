//! Parsers for model output: interpretation lists and SQL.

use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ExtractError {
    #[error("no SQL found in model output: {0:?}")]
    NoSql(String),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedInterpretations {
    pub interps: Vec<String>,
    /// The unstripped line each interpretation came from, index-aligned.
    pub raw_lines: Vec<String>,
    /// The output contained the "all covered" sentinel.
    pub all_covered: bool,
}

static ENUM_MARKER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^\s*(?:\(?\d+[.):]|[-*•])\s*").unwrap());

fn is_sentinel(line: &str) -> bool {
    let stripped = line
        .trim()
        .trim_matches(|c: char| matches!(c, '"' | '\'' | '“' | '”' | '`'))
        .trim_end_matches(['.', '!', ';'])
        .trim();
    let normalized = stripped.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
    normalized == "all interpretations are covered" || normalized == "all possible interpretations are covered"
}

/// Split a model reply into interpretations, one per non-empty line.
///
/// Leading enumeration markers (`1.`, `2)`, `-`, `*`) are removed. Lines that
/// state that all interpretations are covered (either phrasing) set
/// `all_covered` and are not returned as interpretations.
pub fn parse_interpretations(text: &str) -> ParsedInterpretations {
    let mut out = ParsedInterpretations::default();
    for raw in text.lines() {
        let body = ENUM_MARKER.replace(raw, "");
        let body = body.trim();
        if body.is_empty() {
            continue;
        }
        if is_sentinel(body) {
            out.all_covered = true;
            continue;
        }
        out.interps.push(body.to_string());
        out.raw_lines.push(raw.to_string());
    }
    out
}

static FENCE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?s)```[ \t]*[A-Za-z0-9_+-]*[ \t]*\r?\n?(.*?)```").unwrap());
static SELECT_KW: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)\bSELECT\b").unwrap());
static WITH_CTE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r#"(?i)\bWITH\s+(?:RECURSIVE\s+)?[\w"`\[\]]+\s*(?:\([^)]*\)\s*)?AS\s*(?:NOT\s+)?(?:MATERIALIZED\s+)?\("#)
        .unwrap()
});

/// Pull a SQL query out of a model reply.
///
/// A fenced code block wins; otherwise the text from the first `SELECT` (or
/// CTE-introducing `WITH`) onward is taken, cut after its final semicolon.
pub fn extract_sql(text: &str) -> Result<String, ExtractError> {
    for cap in FENCE.captures_iter(text) {
        let body = cap[1].trim();
        if !body.is_empty() {
            return Ok(body.to_string());
        }
    }

    let start = [SELECT_KW.find(text), WITH_CTE.find(text)]
        .into_iter()
        .flatten()
        .map(|m| m.start())
        .min()
        .ok_or_else(|| ExtractError::NoSql(text.chars().take(200).collect()))?;
    let mut sql = text[start..].trim_end();
    if let Some(end) = sql.rfind(';') {
        sql = &sql[..=end];
    }
    // A fence opened but never closed (truncated output).
    let sql = sql.trim_end_matches('`').trim();
    Ok(sql.to_string())
}

/// Split a multi-query reply on blank lines and on `;` followed by a newline,
/// keeping pieces that contain SQL.
pub fn split_sql_statements(text: &str) -> Vec<String> {
    let without_fences: String = text
        .lines()
        .filter(|l| !l.trim_start().starts_with("```"))
        .collect::<Vec<_>>()
        .join("\n");
    let mut pieces = Vec::new();
    let mut current = String::new();
    let flush = |current: &mut String, pieces: &mut Vec<String>| {
        if !current.trim().is_empty() {
            pieces.push(std::mem::take(current));
        }
        current.clear();
    };
    for line in without_fences.lines() {
        if line.trim().is_empty() {
            flush(&mut current, &mut pieces);
            continue;
        }
        if !current.is_empty() {
            current.push('\n');
        }
        current.push_str(line);
        if line.trim_end().ends_with(';') {
            flush(&mut current, &mut pieces);
        }
    }
    flush(&mut current, &mut pieces);
    pieces.iter().filter_map(|p| extract_sql(p).ok()).collect()
}
