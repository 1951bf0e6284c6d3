//! Interpretation coverage metrics.
//!
//! Per example, with golds `G` and the distinct denotations `P` of the
//! successful predictions:
//!
//! * **single** = 1 when at least one gold is covered;
//! * **full** = 1 when every gold is covered;
//! * **recall** = covered golds / |G|;
//! * **precision** = |{p in P : p equals some gold}| / |P|, absent when `P` is
//!   empty.
//!
//! Counting distinct denotations keeps precision from moving when a system
//! emits several paraphrases of the same query. The raw per-prediction ratio
//! is reported next to it as `raw_precision`. Corpus numbers are
//! macro-averages in percent; precision is averaged only over examples where
//! it is defined.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matcher::MatchReport;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("cannot aggregate an empty list of scores")]
    Empty,
    #[error("example `{example_id}` has {golds} gold queries; the unambiguous score needs exactly one")]
    NotUnambiguous { example_id: String, golds: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleScore {
    pub example_id: String,
    pub single: u8,
    pub full: u8,
    pub recall: f64,
    pub precision: Option<f64>,
    pub raw_precision: Option<f64>,
    pub failed_predictions: usize,
    pub tags: Vec<String>,
}

pub fn score_example(report: &MatchReport) -> ExampleScore {
    let golds = report.gold_denotations.len();
    let covered = report.covered_gold_indices.len();
    let row_matches = |p: usize| report.match_matrix[p].iter().any(|m| *m);

    let distinct = report.duplicate_groups.len();
    let distinct_matching = report.duplicate_groups.iter().filter(|g| row_matches(g[0])).count();
    let successful: usize = report.duplicate_groups.iter().map(Vec::len).sum();
    let successful_matching: usize = report
        .duplicate_groups
        .iter()
        .flatten()
        .filter(|&&p| row_matches(p))
        .count();

    ExampleScore {
        example_id: report.example_id.clone(),
        single: u8::from(covered > 0),
        full: u8::from(golds > 0 && report.missing_gold_indices.is_empty()),
        recall: if golds == 0 { 0.0 } else { covered as f64 / golds as f64 },
        precision: (distinct > 0).then(|| distinct_matching as f64 / distinct as f64),
        raw_precision: (successful > 0).then(|| successful_matching as f64 / successful as f64),
        failed_predictions: report.failed_predictions.len(),
        tags: report.tags.clone(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnambiguousScore {
    pub found: u8,
}

/// Whether the single gold was found; extra predictions are not penalized.
pub fn score_unambiguous(report: &MatchReport) -> Result<UnambiguousScore, MetricsError> {
    if report.gold_denotations.len() != 1 {
        return Err(MetricsError::NotUnambiguous {
            example_id: report.example_id.clone(),
            golds: report.gold_denotations.len(),
        });
    }
    Ok(UnambiguousScore { found: u8::from(report.covered_gold_indices.contains(&0)) })
}

/// Percentages over a group of examples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupScores {
    pub n_examples: usize,
    pub single_cov: f64,
    pub full_cov: f64,
    pub recall: f64,
    pub precision: Option<f64>,
    pub raw_precision: Option<f64>,
    pub precision_undefined: usize,
}

impl GroupScores {
    fn from_scores<'a>(scores: impl Iterator<Item = &'a ExampleScore> + Clone) -> GroupScores {
        let n = scores.clone().count();
        let pct = |sum: f64| sum * 100.0 / n as f64;
        let mean_opt = |vals: Vec<f64>| {
            (!vals.is_empty()).then(|| vals.iter().sum::<f64>() * 100.0 / vals.len() as f64)
        };
        let precisions: Vec<f64> = scores.clone().filter_map(|s| s.precision).collect();
        let raw: Vec<f64> = scores.clone().filter_map(|s| s.raw_precision).collect();
        GroupScores {
            n_examples: n,
            single_cov: pct(scores.clone().map(|s| f64::from(s.single)).sum()),
            full_cov: pct(scores.clone().map(|s| f64::from(s.full)).sum()),
            recall: pct(scores.clone().map(|s| s.recall).sum()),
            precision_undefined: n - precisions.len(),
            precision: mean_opt(precisions),
            raw_precision: mean_opt(raw),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnambiguousSummary {
    pub n_examples: usize,
    pub found: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub n_examples: usize,
    pub single_cov: f64,
    pub full_cov: f64,
    pub recall: f64,
    pub precision: Option<f64>,
    pub raw_precision: Option<f64>,
    /// Examples with no successful prediction, left out of the precision mean.
    pub precision_undefined: usize,
    pub failed_predictions: usize,
    pub breakdown: BTreeMap<String, GroupScores>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unambiguous: Option<UnambiguousSummary>,
}

/// Macro-average example scores, with a breakdown per tag value.
pub fn aggregate(scores: &[ExampleScore]) -> Result<MetricsSummary, MetricsError> {
    if scores.is_empty() {
        return Err(MetricsError::Empty);
    }
    let all = GroupScores::from_scores(scores.iter());
    let mut tags: Vec<&str> = scores.iter().flat_map(|s| s.tags.iter().map(String::as_str)).collect();
    tags.sort_unstable();
    tags.dedup();
    let breakdown = tags
        .into_iter()
        .map(|t| {
            let members = scores.iter().filter(move |s| s.tags.iter().any(|x| x == t));
            (t.to_string(), GroupScores::from_scores(members))
        })
        .collect();
    Ok(MetricsSummary {
        n_examples: all.n_examples,
        single_cov: all.single_cov,
        full_cov: all.full_cov,
        recall: all.recall,
        precision: all.precision,
        raw_precision: all.raw_precision,
        precision_undefined: all.precision_undefined,
        failed_predictions: scores.iter().map(|s| s.failed_predictions).sum(),
        breakdown,
        unambiguous: None,
    })
}

pub fn aggregate_unambiguous(found: &[UnambiguousScore]) -> Option<UnambiguousSummary> {
    (!found.is_empty()).then(|| UnambiguousSummary {
        n_examples: found.len(),
        found: found.iter().map(|s| f64::from(s.found)).sum::<f64>() * 100.0 / found.len() as f64,
    })
}

/// Score and aggregate a set of reports. Single-gold examples also feed the
/// unambiguous summary.
pub fn summarize_reports(reports: &[MatchReport]) -> Result<MetricsSummary, MetricsError> {
    let scores: Vec<ExampleScore> = reports.iter().map(score_example).collect();
    let mut summary = aggregate(&scores)?;
    let found: Vec<UnambiguousScore> = reports.iter().filter_map(|r| score_unambiguous(r).ok()).collect();
    summary.unambiguous = aggregate_unambiguous(&found);
    Ok(summary)
}

fn fmt_pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.1}"))
}

impl MetricsSummary {
    /// Plain-text table: Single, Full, Recall, Precision.
    pub fn render_table(&self) -> String {
        let mut rows: Vec<(String, usize, f64, f64, f64, Option<f64>)> = vec![(
            "all".to_string(),
            self.n_examples,
            self.single_cov,
            self.full_cov,
            self.recall,
            self.precision,
        )];
        for (tag, g) in &self.breakdown {
            rows.push((format!("tag:{tag}"), g.n_examples, g.single_cov, g.full_cov, g.recall, g.precision));
        }
        let width = rows.iter().map(|r| r.0.len()).max().unwrap_or(3).max(5);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<width$}  {:>6}  {:>6}  {:>6}  {:>6}  {:>9}",
            "group", "n", "Single", "Full", "Recall", "Precision"
        );
        for (name, n, single, full, recall, precision) in rows {
            let _ = writeln!(
                out,
                "{name:<width$}  {n:>6}  {single:>6.1}  {full:>6.1}  {recall:>6.1}  {:>9}",
                fmt_pct(precision)
            );
        }
        if let Some(u) = &self.unambiguous {
            let _ = writeln!(out, "unambiguous subset: {} examples, found {:.1}", u.n_examples, u.found);
        }
        let _ = writeln!(
            out,
            "precision undefined for {} example(s); {} failed prediction(s)",
            self.precision_undefined, self.failed_predictions
        );
        out
    }
}
