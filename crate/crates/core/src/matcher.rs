//! Execution-based matching of predicted queries against gold queries.
//!
//! Two queries match when their [`Denotation`]s are equal under the chosen
//! [`ComparisonMode`]. Predictions that failed to execute are kept in the
//! report for accounting but never match anything.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Example;
use crate::pipeline::Interpretation;
use crate::sandbox::{denotation_equal, ComparisonMode, DatabaseHandle, Denotation, ExecOutcome};

#[derive(Debug, Error)]
pub enum MatchError {
    #[error("example `{example_id}`: gold query {index} failed ({kind}): {message}")]
    GoldFailed { example_id: String, index: usize, kind: String, message: String },
}

/// One executed prediction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictedItem {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interpretation: Option<Interpretation>,
    pub sql: String,
    pub outcome: ExecOutcome,
}

impl PredictedItem {
    /// Execute `sql` on `handle`. An empty query is recorded as a syntax error.
    pub fn execute(interpretation: Option<Interpretation>, sql: impl Into<String>, handle: &DatabaseHandle) -> Self {
        let sql = sql.into();
        let outcome = handle.execute(&sql);
        PredictedItem { interpretation, sql, outcome }
    }
}

/// A prediction that has not been executed yet.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PredictionInput {
    pub interpretation: Option<Interpretation>,
    pub sql: String,
}

impl PredictionInput {
    pub fn sql(sql: impl Into<String>) -> Self {
        PredictionInput { interpretation: None, sql: sql.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailedPrediction {
    pub index: usize,
    pub kind: String,
    pub message: String,
}

/// Per-example gold coverage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchReport {
    pub example_id: String,
    #[serde(default)]
    pub tags: Vec<String>,
    #[serde(default)]
    pub comparison: ComparisonMode,
    /// Index-aligned with the example's `gold_sql`.
    pub gold_denotations: Vec<Denotation>,
    pub predictions: Vec<PredictedItem>,
    /// `match_matrix[p][g]`: prediction `p` has the denotation of gold `g`.
    pub match_matrix: Vec<Vec<bool>>,
    pub covered_gold_indices: BTreeSet<usize>,
    pub missing_gold_indices: BTreeSet<usize>,
    /// Successful predictions partitioned by denotation, in first-seen order.
    pub duplicate_groups: Vec<Vec<usize>>,
    pub failed_predictions: Vec<FailedPrediction>,
}

/// Execute every gold query of `example`. Any failure is a dataset defect.
pub fn execute_golds(example: &Example, handle: &DatabaseHandle) -> Result<Vec<Denotation>, MatchError> {
    example
        .gold_sql
        .iter()
        .enumerate()
        .map(|(index, sql)| match handle.execute(sql) {
            ExecOutcome::Ok(d) => Ok(d),
            other => Err(MatchError::GoldFailed {
                example_id: example.example_id.clone(),
                index,
                kind: other.kind().to_string(),
                message: other.error_message().unwrap_or_default(),
            }),
        })
        .collect()
}

/// Execute gold and predicted queries on `handle` and build the report.
pub fn match_predictions(
    example: &Example,
    predictions: Vec<PredictionInput>,
    handle: &DatabaseHandle,
    mode: ComparisonMode,
) -> Result<MatchReport, MatchError> {
    let golds = execute_golds(example, handle)?;
    let executed = predictions
        .into_iter()
        .map(|p| PredictedItem::execute(p.interpretation, p.sql, handle))
        .collect();
    Ok(build_report(&example.example_id, &example.tags, golds, executed, mode))
}

/// Build a report from already-executed golds and predictions.
pub fn build_report(
    example_id: &str,
    tags: &[String],
    gold_denotations: Vec<Denotation>,
    predictions: Vec<PredictedItem>,
    mode: ComparisonMode,
) -> MatchReport {
    let mut match_matrix = Vec::with_capacity(predictions.len());
    let mut failed_predictions = Vec::new();
    let mut covered = BTreeSet::new();
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut group_of: HashMap<String, usize> = HashMap::new();

    for (p, item) in predictions.iter().enumerate() {
        let row: Vec<bool> = match (&item.outcome, item.sql.trim().is_empty()) {
            (ExecOutcome::Ok(d), false) => {
                let slot = *group_of.entry(d.key(mode)).or_insert_with(|| {
                    groups.push(Vec::new());
                    groups.len() - 1
                });
                groups[slot].push(p);
                gold_denotations.iter().map(|g| denotation_equal(d, g, mode)).collect()
            }
            (outcome, empty) => {
                failed_predictions.push(FailedPrediction {
                    index: p,
                    kind: if empty { "syntax_error".to_string() } else { outcome.kind().to_string() },
                    message: if empty {
                        "empty query".to_string()
                    } else {
                        outcome.error_message().unwrap_or_default()
                    },
                });
                vec![false; gold_denotations.len()]
            }
        };
        covered.extend(row.iter().enumerate().filter(|(_, m)| **m).map(|(g, _)| g));
        match_matrix.push(row);
    }
    let missing = (0..gold_denotations.len()).filter(|g| !covered.contains(g)).collect();

    MatchReport {
        example_id: example_id.to_string(),
        tags: tags.to_vec(),
        comparison: mode,
        gold_denotations,
        predictions,
        match_matrix,
        covered_gold_indices: covered,
        missing_gold_indices: missing,
        duplicate_groups: groups,
        failed_predictions,
    }
}

/// A prediction kept by [`dedup_by_denotation`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Representative {
    /// Position in the input list.
    pub index: usize,
    pub item: PredictedItem,
    /// The prediction failed to execute, so it could not be compared.
    pub unverifiable: bool,
}

/// Keep the first successful prediction per denotation, plus every failed
/// prediction (tagged unverifiable), in input order.
pub fn dedup_by_denotation(predictions: &[PredictedItem], mode: ComparisonMode) -> Vec<Representative> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (index, item) in predictions.iter().enumerate() {
        match &item.outcome {
            ExecOutcome::Ok(d) => {
                if seen.insert(d.key(mode)) {
                    out.push(Representative { index, item: item.clone(), unverifiable: false });
                }
            }
            _ => out.push(Representative { index, item: item.clone(), unverifiable: true }),
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoverageSets {
    pub covered: BTreeSet<usize>,
    pub missing: BTreeSet<usize>,
    /// Successful predictions that match at least one gold.
    pub matched_prediction_count: usize,
    pub distinct_prediction_denotations: usize,
}

pub fn coverage_sets(report: &MatchReport) -> CoverageSets {
    CoverageSets {
        covered: report.covered_gold_indices.clone(),
        missing: report.missing_gold_indices.clone(),
        matched_prediction_count: report.match_matrix.iter().filter(|row| row.iter().any(|m| *m)).count(),
        distinct_prediction_denotations: report.duplicate_groups.len(),
    }
}
