use std::path::PathBuf;
use std::process::ExitCode;

use ambisql::pipeline::Method;
use ambisql::sandbox::ComparisonMode;
use ambisql_cli::commands::{self, EvalOptions, RunOptions};
use ambisql_cli::config::RunConfig;
use anyhow::{Context, Result};
use clap::builder::{PossibleValuesParser, TypedValueParser};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "ambisql", version, about = "Evaluate and build training data for ambiguous text-to-SQL")]
struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Comparison {
    /// Rows compared as a multiset; ORDER BY is ignored.
    Multiset,
    /// Rows compared in order.
    Ordered,
}

impl From<Comparison> for ComparisonMode {
    fn from(c: Comparison) -> Self {
        match c {
            Comparison::Multiset => ComparisonMode::Multiset,
            Comparison::Ordered => ComparisonMode::Ordered,
        }
    }
}

fn method_parser() -> impl TypedValueParser<Value = Method> {
    PossibleValuesParser::new(Method::ALL.map(Method::name)).map(|s| s.parse::<Method>().expect("listed name"))
}

#[derive(Args)]
struct MethodArgs {
    /// System to run.
    #[arg(long, default_value = "ours", value_parser = method_parser())]
    method: Method,
    /// Skip infilling (turns `ours` into `interp_prompt`).
    #[arg(long)]
    no_infill: bool,
    /// How query results are compared (defaults to the config's setting).
    #[arg(long, value_enum)]
    comparison: Option<Comparison>,
    /// Seed for few-shot demonstration sampling (defaults to the config's seed).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Run a method over the configured dataset and score it.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        method: MethodArgs,
        /// Output directory (defaults to the config's output_dir).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Print the metrics summary as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Interpret and answer one question against a database file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// SQL dump or SQLite database file.
        #[arg(long)]
        db: PathBuf,
        #[command(flatten)]
        method: MethodArgs,
        /// Print the full result as one JSON object.
        #[arg(long)]
        json: bool,
        question: String,
    },
    /// Build infilling training records from a dataset with reference interpretations.
    AnnotateInfill {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Rewrite questions with synonyms and keep execution-validated pairs.
    Synthesize {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Re-render metrics from stored match reports.
    Report {
        /// Match reports file, or an eval output directory.
        reports: Option<PathBuf>,
        /// Config whose output_dir holds the reports, when no path is given.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        comparison: Option<Comparison>,
        /// Also write metrics.json and metrics.txt here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Eval { config, method, out, json } => {
            let cfg = RunConfig::load(&config)?;
            let opts = EvalOptions {
                method: method.method,
                out,
                seed: method.seed,
                no_infill: method.no_infill,
                comparison: method.comparison.map(Into::into),
            };
            let output = commands::eval(&cfg, &opts)?;
            if json {
                print_json(&output.summary)?;
            } else {
                println!(
                    "method={} examples={} failed={} outputs={}",
                    output.method,
                    output.n_examples,
                    output.n_failed,
                    output.out_dir.display()
                );
                match &output.summary {
                    Some(s) => print!("{}", s.render_table()),
                    None => println!("no scored examples"),
                }
            }
        }
        Command::Run { config, db, method, json, question } => {
            let cfg = RunConfig::load(&config)?;
            let opts = RunOptions {
                question,
                db,
                method: method.method,
                no_infill: method.no_infill,
                comparison: method.comparison.map(Into::into),
                seed: method.seed,
            };
            let result = commands::run_question(&cfg, &opts)?;
            if json {
                println!("{}", serde_json::to_string(&result)?);
            } else {
                print!("{}", commands::render_run(&result));
            }
        }
        Command::AnnotateInfill { config, out, json } => {
            let stats = commands::annotate_infill(&RunConfig::load(&config)?, out)?;
            if json {
                print_json(&stats)?;
            } else {
                println!("{stats}");
            }
        }
        Command::Synthesize { config, out, json } => {
            let stats = commands::synthesize(&RunConfig::load(&config)?, out)?;
            if json {
                print_json(&stats)?;
            } else {
                println!("{stats}");
            }
        }
        Command::Report { reports, config, comparison, out, json } => {
            let path = match (reports, config) {
                (Some(p), _) => p,
                (None, Some(c)) => RunConfig::load(&c)?.output_dir,
                (None, None) => anyhow::bail!("give a reports path or --config"),
            };
            let summary = commands::report(&path, comparison.map(Into::into), out.as_deref())
                .with_context(|| format!("scoring {}", path.display()))?;
            if json {
                print_json(&summary)?;
            } else {
                print!("{}", summary.render_table());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
