//! Training data construction.
//!
//! Infilling records pair the default interpretations of a question with the
//! reference interpretations they miss. "Missing" is decided by execution:
//! each default interpretation is translated to SQL and run, and a gold query
//! counts as covered when some default query returns the same result.
//!
//! Synthesis rewrites a question once per synonym and keeps the pair only if
//! a text-to-SQL model, given each rewrite, produces the paired gold result
//! within a bounded number of attempts.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Example;
use crate::gateway::{
    extract_sql, join_lines, render_prompt, synonym_slot, PromptKind, Slots, TemplateError, DB_DUMP,
    INTERPRETATIONS, QUESTION, SENTINEL, SYNONYM,
};
use crate::io::write_jsonl;
use crate::matcher::{build_report, execute_golds, MatchError, MatchReport};
use crate::pipeline::{
    deduplicated_texts, default_interps_traced, parse_all_traced, Interpretation, ParsedQuery, PipelineConfig,
    PipelineError, Provenance, StageClient,
};
use crate::sandbox::{build_database, denotation_equal, ComparisonMode, DatabaseHandle, ExecLimits, ExecOutcome};

#[derive(Debug, Error)]
pub enum AnnotateError {
    #[error("example `{0}` has no gold interpretations")]
    NoReferences(String),
    #[error("example `{example_id}`: {golds} gold queries but {refs} reference interpretations")]
    Misaligned { example_id: String, golds: usize, refs: usize },
    #[error("example `{example_id}` needs exactly two synonyms and two gold queries")]
    NotAPair { example_id: String },
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> AnnotateError + '_ {
    move |source| AnnotateError::Io { path: path.display().to_string(), source }
}

/// One infilling training example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InfillTrainingRecord {
    pub db_dump: String,
    pub question: String,
    pub default_interpretations: Vec<String>,
    /// Missing reference interpretations, one per line in gold order, or
    /// [`SENTINEL`] when none are missing.
    pub target: String,
}

/// A record plus what it was derived from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfillAnnotation {
    pub example_id: String,
    pub record: InfillTrainingRecord,
    /// Every default interpretation with its query and execution outcome.
    pub default_queries: Vec<ParsedQuery>,
    pub report: MatchReport,
}

/// Where default interpretations come from.
#[derive(Debug, Clone, Copy)]
pub enum Defaults<'a> {
    /// Generate with the interpretation and text-to-SQL stages.
    Generate,
    /// Use these readings and translate each with the text-to-SQL stage.
    Texts(&'a [String]),
    /// Use these readings with their queries already executed.
    Parsed(&'a [ParsedQuery]),
}

/// The target implied by a report: references of uncovered golds in gold
/// order, or the sentinel.
pub fn target_from_report(report: &MatchReport, references: &[String]) -> String {
    if report.missing_gold_indices.is_empty() {
        SENTINEL.to_string()
    } else {
        let lines: Vec<&str> = report.missing_gold_indices.iter().map(|&g| references[g].as_str()).collect();
        join_lines(&lines)
    }
}

fn references(example: &Example) -> Result<&[String], AnnotateError> {
    let refs = example
        .gold_interpretations
        .as_deref()
        .ok_or_else(|| AnnotateError::NoReferences(example.example_id.clone()))?;
    if refs.len() != example.gold_sql.len() {
        return Err(AnnotateError::Misaligned {
            example_id: example.example_id.clone(),
            golds: example.gold_sql.len(),
            refs: refs.len(),
        });
    }
    Ok(refs)
}

/// Build the infilling record for one example.
///
/// The record's default list is what the infiller sees at inference time:
/// defaults whose query repeats an earlier result are dropped. Dropping them
/// does not change which golds are covered.
pub fn build_infill_record(
    example: &Example,
    defaults: Defaults<'_>,
    handle: &DatabaseHandle,
    cfg: &PipelineConfig,
) -> Result<InfillAnnotation, AnnotateError> {
    let refs = references(example)?;
    let golds = execute_golds(example, handle)?;
    let default_queries = match defaults {
        Defaults::Parsed(parsed) => parsed.to_vec(),
        Defaults::Texts(texts) => {
            let interps: Vec<Interpretation> = texts
                .iter()
                .enumerate()
                .map(|(ordinal, text)| Interpretation { text: text.clone(), provenance: Provenance::Default, ordinal })
                .collect();
            parse_all_traced(example, &interps, handle, cfg, &mut Vec::new())?
        }
        Defaults::Generate => {
            let interps = default_interps_traced(example, cfg, &mut Vec::new())?;
            parse_all_traced(example, &interps, handle, cfg, &mut Vec::new())?
        }
    };
    let predictions = default_queries.iter().map(ParsedQuery::to_predicted).collect();
    let report = build_report(&example.example_id, &example.tags, golds, predictions, cfg.comparison);
    let record = InfillTrainingRecord {
        db_dump: example.db.dump_text.clone(),
        question: example.question.clone(),
        default_interpretations: deduplicated_texts(&default_queries, cfg.comparison)
            .into_iter()
            .map(|i| i.text)
            .collect(),
        target: target_from_report(&report, refs),
    };
    Ok(InfillAnnotation { example_id: example.example_id.clone(), record, default_queries, report })
}

/// The record as an instruction/response pair, using the infilling prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionRecord {
    pub instruction: String,
    pub output: String,
}

pub fn to_instruction(record: &InfillTrainingRecord) -> Result<InstructionRecord, TemplateError> {
    let slots: Slots = [
        (DB_DUMP, record.db_dump.clone()),
        (QUESTION, record.question.clone()),
        (INTERPRETATIONS, join_lines(&record.default_interpretations)),
    ]
    .into_iter()
    .collect();
    Ok(InstructionRecord { instruction: render_prompt(PromptKind::Infill, &slots)?, output: record.target.clone() })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InfillStats {
    /// Examples considered.
    pub total: usize,
    /// Records whose target is the sentinel.
    pub sentinel_count: usize,
    /// Examples without a record (bad references, failing golds, backend errors).
    pub skipped: usize,
}

impl std::fmt::Display for InfillStats {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "total={} sentinel={} skipped={}", self.total, self.sentinel_count, self.skipped)
    }
}

/// Output paths for [`build_infill_dataset`].
#[derive(Debug, Clone, Copy)]
pub struct InfillOutputs<'a> {
    /// Training records.
    pub records: &'a Path,
    /// Instruction/response pairs, if wanted.
    pub instructions: Option<&'a Path>,
    /// Full annotations (defaults, queries, match report), if wanted.
    pub audit: Option<&'a Path>,
}

/// Annotate every example concurrently and write the records atomically in
/// input order.
pub fn build_infill_dataset(
    examples: &[Example],
    cfg: &PipelineConfig,
    limits: ExecLimits,
    out: InfillOutputs<'_>,
) -> Result<InfillStats, AnnotateError> {
    let results: Vec<Option<InfillAnnotation>> = examples
        .par_iter()
        .map(|ex| {
            let attempt = build_database(&ex.db, limits)
                .map_err(|e| AnnotateError::Pipeline(e.into()))
                .and_then(|h| build_infill_record(ex, Defaults::Generate, &h, cfg));
            match attempt {
                Ok(a) => Some(a),
                Err(e) => {
                    log::warn!("skipping example `{}`: {e}", ex.example_id);
                    None
                }
            }
        })
        .collect();

    let annotations: Vec<InfillAnnotation> = results.into_iter().flatten().collect();
    let stats = InfillStats {
        total: examples.len(),
        sentinel_count: annotations.iter().filter(|a| a.record.target == SENTINEL).count(),
        skipped: examples.len() - annotations.len(),
    };
    let records: Vec<&InfillTrainingRecord> = annotations.iter().map(|a| &a.record).collect();
    write_jsonl(out.records, &records).map_err(io_err(out.records))?;
    if let Some(path) = out.instructions {
        let pairs = records.iter().map(|r| to_instruction(r)).collect::<Result<Vec<_>, _>>()?;
        write_jsonl(path, &pairs).map_err(io_err(path))?;
    }
    if let Some(path) = out.audit {
        write_jsonl(path, &annotations).map_err(io_err(path))?;
    }
    Ok(stats)
}

pub const MAX_VALIDATION_ATTEMPTS: u32 = 5;

/// Stage clients for synthesis.
#[derive(Debug, Clone)]
pub struct SynthesisConfig {
    pub rewrite: StageClient,
    pub validator: StageClient,
    pub max_attempts: u32,
    pub comparison: ComparisonMode,
}

impl SynthesisConfig {
    pub fn new(rewrite: StageClient, validator: StageClient) -> Self {
        SynthesisConfig { rewrite, validator, max_attempts: MAX_VALIDATION_ATTEMPTS, comparison: ComparisonMode::default() }
    }
}

/// One synonym rewrite and its validation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthesisRecord {
    pub source_question: String,
    pub synonym: String,
    pub rewritten_question: String,
    /// Validation generations spent, counting failed calls.
    pub attempts_used: u32,
    /// This rewrite reproduced its gold result.
    pub validated: bool,
    /// Both rewrites of the example validated.
    pub accepted: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validating_sql: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthesisOutcome {
    pub example_id: String,
    pub accepted: bool,
    /// Index-aligned with the example's synonyms and gold queries.
    pub records: Vec<SynthesisRecord>,
}

/// First non-empty line of the reply, without surrounding quotes.
fn clean_rewrite(reply: &str) -> String {
    reply
        .lines()
        .map(str::trim)
        .find(|l| !l.is_empty())
        .unwrap_or("")
        .trim_matches(|c| c == '"' || c == '\'')
        .trim()
        .to_string()
}

fn synthesize_one(
    example: &Example,
    synonym: &str,
    gold: &crate::sandbox::Denotation,
    handle: &DatabaseHandle,
    cfg: &SynthesisConfig,
) -> SynthesisRecord {
    let mut rec = SynthesisRecord {
        source_question: example.question.clone(),
        synonym: synonym.to_string(),
        rewritten_question: String::new(),
        attempts_used: 0,
        validated: false,
        accepted: false,
        validating_sql: None,
        failure: None,
    };
    let slots: Slots = [(QUESTION, example.question.clone()), (SYNONYM, synonym_slot(synonym))].into_iter().collect();
    let rewritten = render_prompt(PromptKind::SynonymRewrite, &slots)
        .map_err(|e| e.to_string())
        .and_then(|p| cfg.rewrite.generate(p).map_err(|e| e.to_string()))
        .map(|r| clean_rewrite(&r));
    match rewritten {
        Ok(q) if !q.is_empty() => rec.rewritten_question = q,
        Ok(_) => {
            rec.failure = Some("empty rewrite".into());
            return rec;
        }
        Err(e) => {
            rec.failure = Some(format!("rewrite failed: {e}"));
            return rec;
        }
    }

    let slots: Slots =
        [(DB_DUMP, example.db.dump_text.clone()), (QUESTION, rec.rewritten_question.clone())].into_iter().collect();
    let prompt = match render_prompt(PromptKind::Text2Sql, &slots) {
        Ok(p) => p,
        Err(e) => {
            rec.failure = Some(e.to_string());
            return rec;
        }
    };
    for attempt in 1..=cfg.max_attempts {
        rec.attempts_used = attempt;
        // The seed differs per attempt so that each is a distinct request.
        let request = cfg.validator.request(prompt.clone(), Some(u64::from(attempt)));
        let reply = match cfg.validator.gateway.generate(&request) {
            Ok(r) => r,
            Err(e) => {
                rec.failure = Some(format!("attempt {attempt}: {e}"));
                continue;
            }
        };
        let sql = match extract_sql(&reply) {
            Ok(s) => s,
            Err(e) => {
                rec.failure = Some(format!("attempt {attempt}: {e}"));
                continue;
            }
        };
        match handle.execute(&sql) {
            ExecOutcome::Ok(d) if denotation_equal(&d, gold, cfg.comparison) => {
                rec.validated = true;
                rec.validating_sql = Some(sql);
                rec.failure = None;
                return rec;
            }
            ExecOutcome::Ok(_) => rec.failure = Some(format!("attempt {attempt}: result differs from gold")),
            other => {
                rec.failure = Some(format!("attempt {attempt}: {}", other.error_message().unwrap_or_default()))
            }
        }
    }
    rec
}

/// Rewrite the question once per synonym and validate each rewrite against
/// its paired gold query. The example is accepted only if both validate.
pub fn synthesize_interpretations(
    example: &Example,
    handle: &DatabaseHandle,
    cfg: &SynthesisConfig,
) -> Result<SynthesisOutcome, AnnotateError> {
    if example.synonyms.len() != 2 || example.gold_sql.len() != 2 {
        return Err(AnnotateError::NotAPair { example_id: example.example_id.clone() });
    }
    let golds = execute_golds(example, handle)?;
    let mut records: Vec<SynthesisRecord> = example
        .synonyms
        .iter()
        .zip(&golds)
        .map(|(syn, gold)| synthesize_one(example, syn, gold, handle, cfg))
        .collect();
    let accepted = records.iter().all(|r| r.validated);
    for r in &mut records {
        r.accepted = accepted;
    }
    Ok(SynthesisOutcome { example_id: example.example_id.clone(), accepted, records })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthesisStats {
    pub total: usize,
    pub accepted: usize,
    pub rejected: usize,
    /// Examples that are not synonym pairs or whose golds fail.
    pub skipped: usize,
}

impl std::fmt::Display for SynthesisStats {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "total={} accepted={} rejected={} skipped={}", self.total, self.accepted, self.rejected, self.skipped)
    }
}

/// Synthesize every example and write all outcomes, accepted or not, to
/// `out_path`. When `accepted_path` is given, accepted examples are also
/// written in canonical form with the rewrites as their gold
/// interpretations.
pub fn synthesize_dataset(
    examples: &[Example],
    cfg: &SynthesisConfig,
    limits: ExecLimits,
    out_path: &Path,
    accepted_path: Option<&Path>,
) -> Result<SynthesisStats, AnnotateError> {
    let outcomes: Vec<Option<SynthesisOutcome>> = examples
        .par_iter()
        .map(|ex| {
            let attempt = build_database(&ex.db, limits)
                .map_err(|e| AnnotateError::Pipeline(e.into()))
                .and_then(|h| synthesize_interpretations(ex, &h, cfg));
            match attempt {
                Ok(o) => Some(o),
                Err(e) => {
                    log::warn!("skipping example `{}`: {e}", ex.example_id);
                    None
                }
            }
        })
        .collect();

    let mut stats = SynthesisStats { total: examples.len(), ..Default::default() };
    let mut accepted_examples = Vec::new();
    for (ex, outcome) in examples.iter().zip(&outcomes) {
        match outcome {
            None => stats.skipped += 1,
            Some(o) if o.accepted => {
                stats.accepted += 1;
                let mut ex = ex.clone();
                ex.gold_interpretations = Some(o.records.iter().map(|r| r.rewritten_question.clone()).collect());
                accepted_examples.push(ex);
            }
            Some(_) => stats.rejected += 1,
        }
    }
    let written: Vec<&SynthesisOutcome> = outcomes.iter().flatten().collect();
    write_jsonl(out_path, &written).map_err(io_err(out_path))?;
    if let Some(path) = accepted_path {
        crate::dataset::write_canonical(&accepted_examples, path).map_err(|e| AnnotateError::Io {
            path: path.display().to_string(),
            source: std::io::Error::other(e.to_string()),
        })?;
    }
    Ok(stats)
}
