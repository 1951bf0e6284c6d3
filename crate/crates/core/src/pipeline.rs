//! Disambiguate first, parse later: generate natural-language readings of a
//! question, fill in missing ones, translate each reading to SQL, and keep one
//! query per distinct result. The end-to-end, interpretation-prompt,
//! self-correction and gold-interpretation baselines run through the same
//! stage functions.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::Example;
use crate::gateway::{
    extract_sql, join_lines, parse_interpretations, render_prompt, split_sql_statements, Gateway, GatewayError,
    GenerationRequest, PromptKind, Slots, TemplateError, DB_DUMP, DEMONSTRATIONS, INTERPRETATIONS, QUESTION,
};
use crate::matcher::{build_report, dedup_by_denotation, execute_golds, MatchError, MatchReport, PredictedItem};
use crate::sandbox::{build_database, ComparisonMode, DatabaseHandle, ExecLimits, ExecOutcome, SandboxError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Sandbox(#[from] SandboxError),
    #[error("{0}")]
    Precondition(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Default,
    Infilled,
    GoldReference,
    SelfCorrected,
}

/// One unambiguous reading of a question.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Interpretation {
    pub text: String,
    pub provenance: Provenance,
    /// Position within the example's interpretation set, unique per example.
    pub ordinal: usize,
}

/// A reading (if any) translated to SQL and executed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedQuery {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interpretation: Option<Interpretation>,
    /// The extracted query, or the raw reply when no SQL could be found.
    pub sql: String,
    pub outcome: ExecOutcome,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extraction_error: Option<String>,
}

impl ParsedQuery {
    pub fn to_predicted(&self) -> PredictedItem {
        PredictedItem { interpretation: self.interpretation.clone(), sql: self.sql.clone(), outcome: self.outcome.clone() }
    }
}

/// A query kept after deduplication by result.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinalQuery {
    /// Index into [`PipelineResult::parsed`].
    pub parsed_index: usize,
    pub sql: String,
}

/// One generation (or bookkeeping step) of a run, in execution order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub stage: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

pub type Trace = Vec<TraceEvent>;

fn note(trace: &mut Trace, stage: &str, note: impl Into<String>) {
    trace.push(TraceEvent { stage: stage.to_string(), prompt: None, response: None, note: Some(note.into()) });
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineResult {
    pub example_id: String,
    pub method: Method,
    pub interpretations: Vec<Interpretation>,
    pub parsed: Vec<ParsedQuery>,
    pub final_queries: Vec<FinalQuery>,
    pub infiller_said_covered: bool,
    pub trace: Trace,
    /// Set when a stage failed hard; the fields above hold what was done before.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl PipelineResult {
    fn empty(example: &Example, method: Method) -> Self {
        PipelineResult {
            example_id: example.example_id.clone(),
            method,
            interpretations: Vec::new(),
            parsed: Vec::new(),
            final_queries: Vec::new(),
            infiller_said_covered: false,
            trace: Vec::new(),
            error: None,
        }
    }

    /// A result for an example that could not be run at all.
    pub fn failed(example: &Example, method: Method, error: impl Into<String>) -> Self {
        PipelineResult { error: Some(error.into()), ..PipelineResult::empty(example, method) }
    }

    pub fn predictions(&self) -> Vec<PredictedItem> {
        self.parsed.iter().map(ParsedQuery::to_predicted).collect()
    }
}

/// A gateway plus the model and decoding settings used for one stage.
#[derive(Clone)]
pub struct StageClient {
    pub gateway: Arc<Gateway>,
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl fmt::Debug for StageClient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("StageClient")
            .field("backend", &self.gateway.backend_id())
            .field("model", &self.model)
            .field("temperature", &self.temperature)
            .field("max_tokens", &self.max_tokens)
            .finish()
    }
}

impl StageClient {
    pub fn new(gateway: Arc<Gateway>, model: impl Into<String>) -> Self {
        StageClient {
            gateway,
            model: model.into(),
            temperature: 0.0,
            max_tokens: crate::gateway::DEFAULT_MAX_TOKENS,
        }
    }

    pub fn request(&self, prompt: String, seed: Option<u64>) -> GenerationRequest {
        GenerationRequest {
            backend_id: self.gateway.backend_id().to_string(),
            model: self.model.clone(),
            prompt,
            temperature: self.temperature,
            max_tokens: self.max_tokens,
            seed,
        }
    }

    pub fn generate(&self, prompt: String) -> Result<String, GatewayError> {
        self.gateway.generate(&self.request(prompt, None))
    }

    fn traced(&self, stage: &str, prompt: String, trace: &mut Trace) -> Result<String, GatewayError> {
        let result = self.generate(prompt.clone());
        trace.push(TraceEvent {
            stage: stage.to_string(),
            prompt: Some(prompt),
            response: result.as_ref().ok().cloned(),
            note: result.as_ref().err().map(|e| e.to_string()),
        });
        result
    }
}

pub const DEFAULT_MAX_INTERPRETATIONS: usize = 10;

/// Stage backends and run settings.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    /// Default interpretations and self-correction.
    pub interp: StageClient,
    pub infill: StageClient,
    /// Interpretation-to-SQL and the end-to-end baselines.
    pub text2sql: StageClient,
    pub comparison: ComparisonMode,
    /// Upper bound on interpretations per example.
    pub max_interpretations: usize,
    /// Seed for few-shot demonstration sampling.
    pub seed: u64,
}

impl PipelineConfig {
    /// Use one stage client for every stage.
    pub fn uniform(client: StageClient) -> Self {
        PipelineConfig {
            interp: client.clone(),
            infill: client.clone(),
            text2sql: client,
            comparison: ComparisonMode::default(),
            max_interpretations: DEFAULT_MAX_INTERPRETATIONS,
            seed: 0,
        }
    }
}

fn slots(pairs: [(&'static str, &str); 3]) -> Slots {
    pairs.into_iter().map(|(k, v)| (k, v.to_string())).collect()
}

fn interpretations_from(texts: Vec<String>, provenance: Provenance, first_ordinal: usize, room: usize) -> Vec<Interpretation> {
    texts
        .into_iter()
        .take(room)
        .enumerate()
        .map(|(i, text)| Interpretation { text, provenance, ordinal: first_ordinal + i })
        .collect()
}

pub(crate) fn default_interps_traced(
    example: &Example,
    cfg: &PipelineConfig,
    trace: &mut Trace,
) -> Result<Vec<Interpretation>, PipelineError> {
    let prompt = render_prompt(PromptKind::DefaultInterp, &slots([
        (DB_DUMP, &example.db.dump_text),
        (QUESTION, &example.question),
        (INTERPRETATIONS, ""),
    ]))?;
    let reply = cfg.interp.traced("default_interps", prompt, trace)?;
    let parsed = parse_interpretations(&reply);
    if parsed.all_covered {
        note(trace, "default_interps", "reply contained the all-covered sentence");
    }
    if parsed.interps.is_empty() {
        log::warn!("example `{}`: no default interpretations parsed", example.example_id);
    }
    if parsed.interps.len() > cfg.max_interpretations {
        note(trace, "default_interps", format!("capped {} interpretations at {}", parsed.interps.len(), cfg.max_interpretations));
    }
    Ok(interpretations_from(parsed.interps, Provenance::Default, 0, cfg.max_interpretations))
}

/// Ask the interpretation model for every reading of the question.
pub fn run_default_interps(example: &Example, cfg: &PipelineConfig) -> Result<Vec<Interpretation>, PipelineError> {
    default_interps_traced(example, cfg, &mut Vec::new())
}

/// Interpretations added by the infilling model, or `covered` when it
/// reports that nothing is missing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InfillOutput {
    pub added: Vec<Interpretation>,
    pub covered: bool,
}

fn infill_traced(
    example: &Example,
    defaults: &[Interpretation],
    first_ordinal: usize,
    room: usize,
    cfg: &PipelineConfig,
    trace: &mut Trace,
) -> Result<InfillOutput, PipelineError> {
    let existing: Vec<&str> = defaults.iter().map(|i| i.text.as_str()).collect();
    let prompt = render_prompt(PromptKind::Infill, &slots([
        (DB_DUMP, &example.db.dump_text),
        (QUESTION, &example.question),
        (INTERPRETATIONS, &join_lines(&existing)),
    ]))?;
    let reply = cfg.infill.traced("infill", prompt, trace)?;
    let parsed = parse_interpretations(&reply);
    if parsed.interps.len() > room {
        note(trace, "infill", format!("capped {} added interpretations at {room}", parsed.interps.len()));
    }
    Ok(InfillOutput {
        added: interpretations_from(parsed.interps, Provenance::Infilled, first_ordinal, room),
        covered: parsed.all_covered,
    })
}

/// Ask the infilling model for readings missing from `defaults`. Never
/// removes or edits the given interpretations.
pub fn run_infill(example: &Example, defaults: &[Interpretation], cfg: &PipelineConfig) -> Result<InfillOutput, PipelineError> {
    let first = defaults.iter().map(|i| i.ordinal + 1).max().unwrap_or(0);
    let room = cfg.max_interpretations.saturating_sub(defaults.len());
    infill_traced(example, defaults, first, room, cfg, &mut Vec::new())
}

pub(crate) fn execute_reply(interpretation: Option<Interpretation>, reply: &str, handle: &DatabaseHandle) -> ParsedQuery {
    match extract_sql(reply) {
        Ok(sql) => ParsedQuery { interpretation, outcome: handle.execute(&sql), sql, extraction_error: None },
        Err(e) => ParsedQuery {
            interpretation,
            sql: reply.to_string(),
            outcome: ExecOutcome::SyntaxError(e.to_string()),
            extraction_error: Some(e.to_string()),
        },
    }
}

pub(crate) fn parse_all_traced(
    example: &Example,
    interps: &[Interpretation],
    handle: &DatabaseHandle,
    cfg: &PipelineConfig,
    trace: &mut Trace,
) -> Result<Vec<ParsedQuery>, PipelineError> {
    interps
        .iter()
        .map(|interp| {
            let prompt = render_prompt(PromptKind::Text2Sql, &slots([
                (DB_DUMP, &example.db.dump_text),
                (QUESTION, &interp.text),
                (INTERPRETATIONS, ""),
            ]))?;
            let reply = cfg.text2sql.traced("text2sql", prompt, trace)?;
            Ok(execute_reply(Some(interp.clone()), &reply, handle))
        })
        .collect()
}

/// Translate each interpretation to SQL (one generation each) and execute it.
/// Extraction and execution failures are recorded per item.
pub fn parse_all_to_sql(
    example: &Example,
    interps: &[Interpretation],
    handle: &DatabaseHandle,
    cfg: &PipelineConfig,
) -> Result<Vec<ParsedQuery>, PipelineError> {
    parse_all_traced(example, interps, handle, cfg, &mut Vec::new())
}

fn self_correct_traced(
    example: &Example,
    interps: &[Interpretation],
    cfg: &PipelineConfig,
    trace: &mut Trace,
) -> Result<Vec<Interpretation>, PipelineError> {
    if interps.is_empty() {
        return Err(PipelineError::Precondition("self-correction needs at least one candidate interpretation".into()));
    }
    let candidates: Vec<&str> = interps.iter().map(|i| i.text.as_str()).collect();
    let prompt = render_prompt(PromptKind::SelfCorrect, &slots([
        (DB_DUMP, &example.db.dump_text),
        (QUESTION, &example.question),
        (INTERPRETATIONS, &join_lines(&candidates)),
    ]))?;
    let reply = cfg.interp.traced("self_correct", prompt, trace)?;
    let parsed = parse_interpretations(&reply);
    if parsed.interps.is_empty() {
        log::warn!("example `{}`: self-correction removed every interpretation", example.example_id);
        note(trace, "self_correct", "all candidates removed");
    }
    Ok(interpretations_from(parsed.interps, Provenance::SelfCorrected, 0, cfg.max_interpretations))
}

/// Ask the model to keep the valid candidates and add missing ones. The
/// returned set replaces the candidates.
pub fn self_correct(example: &Example, interps: &[Interpretation], cfg: &PipelineConfig) -> Result<Vec<Interpretation>, PipelineError> {
    self_correct_traced(example, interps, cfg, &mut Vec::new())
}

/// First successful query per distinct result, in order.
fn final_queries(parsed: &[ParsedQuery], mode: ComparisonMode) -> Vec<FinalQuery> {
    let items: Vec<PredictedItem> = parsed.iter().map(ParsedQuery::to_predicted).collect();
    dedup_by_denotation(&items, mode)
        .into_iter()
        .filter(|r| !r.unverifiable)
        .map(|r| FinalQuery { parsed_index: r.index, sql: r.item.sql })
        .collect()
}

/// Texts of the default interpretations left after dropping those whose
/// query repeats an earlier result, and exact repeats.
pub(crate) fn deduplicated_texts(parsed: &[ParsedQuery], mode: ComparisonMode) -> Vec<Interpretation> {
    let items: Vec<PredictedItem> = parsed.iter().map(ParsedQuery::to_predicted).collect();
    let mut seen = BTreeSet::new();
    dedup_by_denotation(&items, mode)
        .into_iter()
        .filter_map(|r| r.item.interpretation)
        .filter(|i| seen.insert(i.text.clone()))
        .collect()
}

fn ours_steps(
    example: &Example,
    handle: &DatabaseHandle,
    cfg: &PipelineConfig,
    infill: bool,
    out: &mut PipelineResult,
) -> Result<(), PipelineError> {
    let defaults = default_interps_traced(example, cfg, &mut out.trace)?;
    out.interpretations = defaults.clone();
    out.parsed = parse_all_traced(example, &defaults, handle, cfg, &mut out.trace)?;
    if !infill {
        return Ok(());
    }
    let kept = deduplicated_texts(&out.parsed, cfg.comparison);
    if kept.len() < defaults.len() {
        note(&mut out.trace, "dedup", format!("{} of {} default interpretations kept", kept.len(), defaults.len()));
    }
    // Added readings are numbered after all defaults, including dropped ones.
    let room = cfg.max_interpretations.saturating_sub(defaults.len());
    let InfillOutput { added, covered } = infill_traced(example, &kept, defaults.len(), room, cfg, &mut out.trace)?;
    out.infiller_said_covered = covered;
    let parsed_added = parse_all_traced(example, &added, handle, cfg, &mut out.trace)?;
    out.interpretations.extend(added);
    out.parsed.extend(parsed_added);
    Ok(())
}

/// Default interpretations, deduplication, infilling, then SQL for every
/// reading. A hard stage failure is recorded in `error`.
pub fn disambiguate_then_parse(example: &Example, handle: &DatabaseHandle, cfg: &PipelineConfig) -> PipelineResult {
    run_ours(example, handle, cfg, true)
}

fn run_ours(example: &Example, handle: &DatabaseHandle, cfg: &PipelineConfig, infill: bool) -> PipelineResult {
    let method = if infill { Method::Ours } else { Method::InterpPrompt };
    let mut out = PipelineResult::empty(example, method);
    if let Err(e) = ours_steps(example, handle, cfg, infill, &mut out) {
        out.error = Some(e.to_string());
    }
    out.final_queries = final_queries(&out.parsed, cfg.comparison);
    out
}

/// Pool of examples to draw few-shot demonstrations from.
#[derive(Debug, Default)]
pub struct DemonstrationPool {
    entries: Vec<Demonstration>,
}

#[derive(Debug, Clone)]
struct Demonstration {
    example_id: String,
    schema: String,
    question: String,
    gold_sql: Vec<String>,
}

impl DemonstrationPool {
    /// Build from a dataset. Each database is built once to read its schema.
    pub fn from_examples(examples: &[Example]) -> Result<Self, SandboxError> {
        let mut schemas: HashMap<String, String> = HashMap::new();
        let mut entries = Vec::with_capacity(examples.len());
        for ex in examples {
            let schema = match schemas.get(&ex.db.db_id) {
                Some(s) => s.clone(),
                None => {
                    let s = build_database(&ex.db, ExecLimits::default())?.schema_sql()?;
                    schemas.insert(ex.db.db_id.clone(), s.clone());
                    s
                }
            };
            entries.push(Demonstration {
                example_id: ex.example_id.clone(),
                schema,
                question: ex.question.clone(),
                gold_sql: ex.gold_sql.clone(),
            });
        }
        Ok(DemonstrationPool { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// `shots` demonstrations for `example_id`, never including it. The draw
    /// depends only on `seed` and `example_id`.
    pub fn render(&self, example_id: &str, shots: usize, seed: u64) -> Result<String, PipelineError> {
        if shots == 0 {
            return Ok(String::new());
        }
        let candidates: Vec<&Demonstration> = self.entries.iter().filter(|d| d.example_id != example_id).collect();
        if candidates.len() < shots {
            return Err(PipelineError::Precondition(format!(
                "{shots}-shot prompting needs {shots} other examples, the pool has {}",
                candidates.len()
            )));
        }
        let digest = Sha256::digest(example_id.as_bytes());
        let salt = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt);
        let mut picked = sample(&mut rng, candidates.len(), shots).into_vec();
        picked.sort_unstable();
        let mut out = String::new();
        for (n, i) in picked.into_iter().enumerate() {
            let d = candidates[i];
            out.push_str(&format!(
                "Example {}:\nGiven the following SQLite database schema: {}\n\nAnswer the following: {}\n{}\n\n",
                n + 1,
                d.schema,
                d.question,
                d.gold_sql.join("\n\n")
            ));
        }
        Ok(out)
    }
}

fn end_to_end_traced(
    example: &Example,
    shots: usize,
    pool: Option<&DemonstrationPool>,
    handle: &DatabaseHandle,
    cfg: &PipelineConfig,
    trace: &mut Trace,
) -> Result<Vec<ParsedQuery>, PipelineError> {
    let demonstrations = match (shots, pool) {
        (0, _) => String::new(),
        (_, Some(pool)) => pool.render(&example.example_id, shots, cfg.seed)?,
        (_, None) => return Err(PipelineError::Precondition("few-shot prompting needs a demonstration pool".into())),
    };
    let prompt = render_prompt(PromptKind::EndToEnd, &slots([
        (DEMONSTRATIONS, &demonstrations),
        (DB_DUMP, &example.db.dump_text),
        (QUESTION, &example.question),
    ]))?;
    let reply = cfg.text2sql.traced("end_to_end", prompt, trace)?;
    let statements = split_sql_statements(&reply);
    if statements.is_empty() {
        return Ok(vec![execute_reply(None, &reply, handle)]);
    }
    Ok(statements
        .into_iter()
        .map(|sql| ParsedQuery { interpretation: None, outcome: handle.execute(&sql), sql, extraction_error: None })
        .collect())
}

/// One generation asking directly for a query per reading of the question.
pub fn end_to_end_baseline(
    example: &Example,
    shots: usize,
    pool: Option<&DemonstrationPool>,
    handle: &DatabaseHandle,
    cfg: &PipelineConfig,
) -> Result<Vec<ParsedQuery>, PipelineError> {
    end_to_end_traced(example, shots, pool, handle, cfg, &mut Vec::new())
}

/// Systems that can be evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Default interpretations, infilling, text-to-SQL.
    Ours,
    /// `Ours` without infilling.
    InterpPrompt,
    /// Default interpretations reviewed by the model, then text-to-SQL.
    SelfCorrect,
    #[serde(rename = "e2e_0shot")]
    E2eZeroShot,
    #[serde(rename = "e2e_3shot")]
    E2eThreeShot,
    /// The dataset's reference interpretations, then text-to-SQL.
    GoldInterps,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Ours,
        Method::InterpPrompt,
        Method::SelfCorrect,
        Method::E2eZeroShot,
        Method::E2eThreeShot,
        Method::GoldInterps,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Ours => "ours",
            Method::InterpPrompt => "interp_prompt",
            Method::SelfCorrect => "self_correct",
            Method::E2eZeroShot => "e2e_0shot",
            Method::E2eThreeShot => "e2e_3shot",
            Method::GoldInterps => "gold_interps",
        }
    }

    /// Whether the method calls the infilling stage.
    pub fn uses_infill(self) -> bool {
        self == Method::Ours
    }

    /// Whether the method calls the interpretation stage.
    pub fn uses_interp(self) -> bool {
        matches!(self, Method::Ours | Method::InterpPrompt | Method::SelfCorrect)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Method::ALL.iter().map(|m| m.name()).collect();
            format!("unknown method `{s}` (expected one of: {})", names.join(", "))
        })
    }
}

/// Run `method` on one example. Stage failures are recorded in the result.
pub fn run_method(
    method: Method,
    example: &Example,
    handle: &DatabaseHandle,
    cfg: &PipelineConfig,
    pool: Option<&DemonstrationPool>,
) -> PipelineResult {
    match method {
        Method::Ours => run_ours(example, handle, cfg, true),
        Method::InterpPrompt => run_ours(example, handle, cfg, false),
        _ => {
            let mut out = PipelineResult::empty(example, method);
            if let Err(e) = baseline_steps(method, example, handle, cfg, pool, &mut out) {
                out.error = Some(e.to_string());
            }
            out.final_queries = final_queries(&out.parsed, cfg.comparison);
            out
        }
    }
}

fn baseline_steps(
    method: Method,
    example: &Example,
    handle: &DatabaseHandle,
    cfg: &PipelineConfig,
    pool: Option<&DemonstrationPool>,
    out: &mut PipelineResult,
) -> Result<(), PipelineError> {
    let interps = match method {
        Method::E2eZeroShot | Method::E2eThreeShot => {
            let shots = if method == Method::E2eThreeShot { 3 } else { 0 };
            out.parsed = end_to_end_traced(example, shots, pool, handle, cfg, &mut out.trace)?;
            return Ok(());
        }
        Method::SelfCorrect => {
            let defaults = default_interps_traced(example, cfg, &mut out.trace)?;
            out.interpretations = defaults.clone();
            if defaults.is_empty() {
                note(&mut out.trace, "self_correct", "skipped: no default interpretations");
                return Ok(());
            }
            self_correct_traced(example, &defaults, cfg, &mut out.trace)?
        }
        Method::GoldInterps => {
            let refs = example.gold_interpretations.as_ref().ok_or_else(|| {
                PipelineError::Precondition(format!("example `{}` has no gold interpretations", example.example_id))
            })?;
            refs.iter()
                .enumerate()
                .map(|(ordinal, text)| Interpretation { text: text.clone(), provenance: Provenance::GoldReference, ordinal })
                .collect()
        }
        Method::Ours | Method::InterpPrompt => unreachable!("handled by run_ours"),
    };
    out.interpretations = interps.clone();
    out.parsed = parse_all_traced(example, &interps, handle, cfg, &mut out.trace)?;
    Ok(())
}

/// Match a result's queries against the example's golds.
pub fn match_result(
    example: &Example,
    result: &PipelineResult,
    handle: &DatabaseHandle,
    mode: ComparisonMode,
) -> Result<MatchReport, MatchError> {
    let golds = execute_golds(example, handle)?;
    Ok(build_report(&example.example_id, &example.tags, golds, result.predictions(), mode))
}
