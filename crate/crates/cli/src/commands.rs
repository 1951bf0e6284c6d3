//! Command implementations. Each returns its results so tests can call it
//! without a process boundary; `main` handles printing and exit codes.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ambisql::annotator::{
    build_infill_dataset, synthesize_dataset, InfillOutputs, InfillStats, SynthesisConfig, SynthesisStats,
};
use ambisql::dataset::{DatabaseSpec, Example};
use ambisql::io::{read_jsonl, write_atomic, write_json_pretty, write_jsonl};
use ambisql::matcher::{build_report, MatchReport};
use ambisql::metrics::{summarize_reports, MetricsSummary};
use ambisql::pipeline::{match_result, run_method, DemonstrationPool, Method, PipelineResult};
use ambisql::sandbox::{build_database, dump_sqlite_file, ComparisonMode, ExecOutcome};
use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, Runtime, Stage};

pub const PIPELINE_RESULTS: &str = "pipeline_results.jsonl";
pub const MATCH_REPORTS: &str = "match_reports.jsonl";
pub const METRICS_JSON: &str = "metrics.json";
pub const METRICS_TXT: &str = "metrics.txt";
pub const INFILL_RECORDS: &str = "infill_train.jsonl";
pub const INFILL_INSTRUCTIONS: &str = "infill_instruct.jsonl";
pub const INFILL_AUDIT: &str = "infill_audit.jsonl";
pub const SYNTHESIS_RECORDS: &str = "synthesis.jsonl";
pub const SYNTHESIZED_EXAMPLES: &str = "synthesized_examples.jsonl";

/// Stages `method` calls.
pub fn stages_for(method: Method) -> Vec<Stage> {
    let mut stages = vec![Stage::Text2Sql];
    if method.uses_interp() {
        stages.push(Stage::Interp);
    }
    if method.uses_infill() {
        stages.push(Stage::Infill);
    }
    stages
}

/// `--no-infill` turns the full method into the interpretation-prompt baseline.
pub fn effective_method(method: Method, no_infill: bool) -> Method {
    if no_infill && method == Method::Ours {
        Method::InterpPrompt
    } else {
        method
    }
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub method: Method,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub no_infill: bool,
    pub comparison: Option<ComparisonMode>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { method: Method::Ours, out: None, seed: None, no_infill: false, comparison: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    pub out_dir: PathBuf,
    pub method: Method,
    pub n_examples: usize,
    /// Examples whose run or gold execution failed; they have no report.
    pub n_failed: usize,
    pub summary: Option<MetricsSummary>,
}

fn thread_pool(width: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new().num_threads(width).build().context("starting worker threads")
}

fn run_one(
    example: &Example,
    method: Method,
    cfg: &ambisql::pipeline::PipelineConfig,
    limits: ambisql::sandbox::ExecLimits,
    pool: Option<&DemonstrationPool>,
) -> (PipelineResult, Option<MatchReport>) {
    let handle = match build_database(&example.db, limits) {
        Ok(h) => h,
        Err(e) => return (PipelineResult::failed(example, method, e.to_string()), None),
    };
    let mut result = run_method(method, example, &handle, cfg, pool);
    if result.error.is_some() {
        return (result, None);
    }
    match match_result(example, &result, &handle, cfg.comparison) {
        Ok(report) => (result, Some(report)),
        Err(e) => {
            result.error = Some(e.to_string());
            (result, None)
        }
    }
}

/// Run `method` over the configured dataset and write results, reports and
/// metrics to the output directory.
pub fn eval(cfg: &RunConfig, opts: &EvalOptions) -> Result<EvalOutput> {
    let method = effective_method(opts.method, opts.no_infill);
    cfg.require(&stages_for(method))?;
    let examples = cfg.load_examples()?;
    let comparison = opts.comparison.unwrap_or(cfg.comparison);
    let runtime = Runtime::new(cfg)?;
    let pipeline = runtime.pipeline_config(comparison, opts.seed.unwrap_or(cfg.seed))?;
    let pool = if method == Method::E2eThreeShot {
        Some(DemonstrationPool::from_examples(&examples).context("reading demonstration schemas")?)
    } else {
        None
    };

    let outcomes: Vec<(PipelineResult, Option<MatchReport>)> = thread_pool(cfg.concurrency)?.install(|| {
        examples.par_iter().map(|ex| run_one(ex, method, &pipeline, cfg.sandbox, pool.as_ref())).collect()
    });
    for (r, _) in &outcomes {
        if let Some(e) = &r.error {
            log::warn!("example `{}` failed: {e}", r.example_id);
        }
    }

    let out_dir = opts.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let results: Vec<&PipelineResult> = outcomes.iter().map(|(r, _)| r).collect();
    let reports: Vec<MatchReport> = outcomes.iter().filter_map(|(_, m)| m.clone()).collect();
    write_jsonl(&out_dir.join(PIPELINE_RESULTS), &results)?;
    write_jsonl(&out_dir.join(MATCH_REPORTS), &reports)?;
    let summary = write_metrics(&out_dir, &reports)?;

    Ok(EvalOutput {
        out_dir,
        method,
        n_examples: examples.len(),
        n_failed: outcomes.len() - reports.len(),
        summary,
    })
}

/// Write `metrics.json` and `metrics.txt`. With no reports the JSON is `null`.
fn write_metrics(dir: &Path, reports: &[MatchReport]) -> Result<Option<MetricsSummary>> {
    let summary = if reports.is_empty() { None } else { Some(summarize_reports(reports)?) };
    write_json_pretty(&dir.join(METRICS_JSON), &summary)?;
    let table = summary.as_ref().map_or_else(|| "no scored examples\n".to_string(), |s| s.render_table());
    write_atomic(&dir.join(METRICS_TXT), |w| w.write_all(table.as_bytes()))?;
    Ok(summary)
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub question: String,
    pub db: PathBuf,
    pub method: Method,
    pub no_infill: bool,
    pub comparison: Option<ComparisonMode>,
    pub seed: Option<u64>,
}

/// Read a database file: SQLite files are dumped, anything else is taken as
/// SQL text.
pub fn read_database(path: &Path) -> Result<DatabaseSpec> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let dump = if bytes.starts_with(b"SQLite format 3\0") {
        dump_sqlite_file(path)?
    } else {
        String::from_utf8(bytes).with_context(|| format!("{} is neither SQLite nor UTF-8 SQL", path.display()))?
    };
    let db_id = path.file_stem().map_or_else(|| "db".to_string(), |s| s.to_string_lossy().into_owned());
    Ok(DatabaseSpec::new(db_id, dump))
}

/// Answer one ad-hoc question. A failed stage is an error.
pub fn run_question(cfg: &RunConfig, opts: &RunOptions) -> Result<PipelineResult> {
    let method = effective_method(opts.method, opts.no_infill);
    match method {
        Method::GoldInterps => bail!("`gold_interps` needs a dataset; use `eval`"),
        Method::E2eThreeShot => bail!("`e2e_3shot` needs a demonstration dataset; use `eval`"),
        _ => {}
    }
    cfg.require(&stages_for(method))?;
    let spec = Arc::new(read_database(&opts.db)?);
    let handle = build_database(&spec, cfg.sandbox).with_context(|| format!("building {}", opts.db.display()))?;
    let runtime = Runtime::new(cfg)?;
    let pipeline = runtime.pipeline_config(opts.comparison.unwrap_or(cfg.comparison), opts.seed.unwrap_or(cfg.seed))?;
    let example = Example::new("adhoc", spec, opts.question.clone(), Vec::new());
    let result = run_method(method, &example, &handle, &pipeline, None);
    if let Some(e) = &result.error {
        bail!("{e}");
    }
    Ok(result)
}

const PREVIEW_ROWS: usize = 3;

/// Human-readable rendering of a run: each reading with its query and the
/// first rows of its result.
pub fn render_run(result: &PipelineResult) -> String {
    let mut out = String::new();
    let kept: std::collections::BTreeSet<usize> = result.final_queries.iter().map(|f| f.parsed_index).collect();
    for (i, p) in result.parsed.iter().enumerate() {
        let label = p.interpretation.as_ref().map_or("(direct)", |i| i.text.as_str());
        let _ = writeln!(out, "[{}] {label}", i + 1);
        let _ = writeln!(out, "    SQL: {}", p.sql.replace('\n', "\n         "));
        match &p.outcome {
            ExecOutcome::Ok(d) => {
                let status = if kept.contains(&i) { "" } else { " (same result as an earlier query)" };
                let _ = writeln!(out, "    {} row(s){status}", d.row_count());
                for row in d.rows.iter().take(PREVIEW_ROWS) {
                    let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
                    let _ = writeln!(out, "      {}", cells.join(" | "));
                }
                if d.row_count() > PREVIEW_ROWS {
                    let _ = writeln!(out, "      ...");
                }
            }
            other => {
                let _ = writeln!(out, "    {}: {}", other.kind(), other.error_message().unwrap_or_default());
            }
        }
    }
    if result.parsed.is_empty() {
        out.push_str("no queries produced\n");
    }
    out
}

pub fn annotate_infill(cfg: &RunConfig, out: Option<PathBuf>) -> Result<InfillStats> {
    cfg.require(&[Stage::Interp, Stage::Text2Sql])?;
    let examples = cfg.load_examples()?;
    let runtime = Runtime::new(cfg)?;
    let pipeline = runtime.pipeline_config(cfg.comparison, cfg.seed)?;
    let out_dir = out.unwrap_or_else(|| cfg.output_dir.clone());
    fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let records = out_dir.join(INFILL_RECORDS);
    let instructions = out_dir.join(INFILL_INSTRUCTIONS);
    let audit = out_dir.join(INFILL_AUDIT);
    let stats = thread_pool(cfg.concurrency)?.install(|| {
        build_infill_dataset(
            &examples,
            &pipeline,
            cfg.sandbox,
            InfillOutputs { records: &records, instructions: Some(&instructions), audit: Some(&audit) },
        )
    })?;
    Ok(stats)
}

pub fn synthesize(cfg: &RunConfig, out: Option<PathBuf>) -> Result<SynthesisStats> {
    cfg.require(&[Stage::Rewrite, Stage::Validator])?;
    let examples = cfg.load_examples()?;
    let runtime = Runtime::new(cfg)?;
    let mut synth = SynthesisConfig::new(runtime.client(Stage::Rewrite)?, runtime.client(Stage::Validator)?);
    synth.comparison = cfg.comparison;
    let out_dir = out.unwrap_or_else(|| cfg.output_dir.clone());
    fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let records = out_dir.join(SYNTHESIS_RECORDS);
    let accepted = out_dir.join(SYNTHESIZED_EXAMPLES);
    let stats = thread_pool(cfg.concurrency)?
        .install(|| synthesize_dataset(&examples, &synth, cfg.sandbox, &records, Some(&accepted)))?;
    Ok(stats)
}

/// Re-score stored match reports. A different comparison mode rebuilds each
/// report from its stored gold and predicted results.
pub fn report(path: &Path, comparison: Option<ComparisonMode>, out: Option<&Path>) -> Result<MetricsSummary> {
    let file = if path.is_dir() { path.join(MATCH_REPORTS) } else { path.to_path_buf() };
    let mut reports: Vec<MatchReport> = read_jsonl(&file).with_context(|| format!("reading {}", file.display()))?;
    if let Some(mode) = comparison {
        reports = reports
            .into_iter()
            .map(|r| {
                if r.comparison == mode {
                    r
                } else {
                    build_report(&r.example_id, &r.tags, r.gold_denotations, r.predictions, mode)
                }
            })
            .collect();
    }
    if reports.is_empty() {
        bail!("{} contains no match reports", file.display());
    }
    let summary = summarize_reports(&reports)?;
    if let Some(dir) = out {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        write_metrics(dir, &reports)?;
    }
    Ok(summary)
}
