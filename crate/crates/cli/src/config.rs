//! Run configuration: a JSON file naming the dataset, the backends, which
//! backend serves each stage, and run settings.
//!
//! ```json
//! {
//!   "dataset": {"path": "data/dev.jsonl", "format": "canonical"},
//!   "backends": {
//!     "local": {"kind": "http_chat", "endpoint": "http://localhost:8000", "api_key_env": "API_KEY"},
//!     "replay": {"kind": "replay_only"}
//!   },
//!   "stages": {
//!     "interp": {"backend": "local", "model": "llama-3.1-8b-instruct"},
//!     "infill": {"backend": "local", "model": "infiller"},
//!     "text2sql": {"backend": "local", "model": "qwen2.5-coder-7b-instruct"}
//!   },
//!   "cache_path": "cache/responses.jsonl",
//!   "output_dir": "out"
//! }
//! ```
//!
//! Relative paths are resolved against the directory holding the config.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ambisql::dataset::{load_dataset_with, AdapterOptions, DatasetFormat, Example};
use ambisql::gateway::{BackendConfig, Gateway, ResponseCache, RetryPolicy, DEFAULT_MAX_TOKENS};
use ambisql::pipeline::{PipelineConfig, StageClient, DEFAULT_MAX_INTERPRETATIONS};
use ambisql::sandbox::{ComparisonMode, ExecLimits};
use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub path: PathBuf,
    #[serde(default = "default_format")]
    pub format: DatasetFormat,
    /// Directory of databases referenced by AmbiQT or Ambrosia records.
    #[serde(default)]
    pub db_root: Option<PathBuf>,
    /// Drop examples whose gold queries fail or return no rows.
    #[serde(default)]
    pub filter_nonempty: bool,
}

fn default_format() -> DatasetFormat {
    DatasetFormat::Canonical
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub backend: String,
    pub model: String,
    #[serde(default)]
    pub temperature: Option<f64>,
    #[serde(default)]
    pub max_tokens: Option<u32>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StagesConfig {
    #[serde(default)]
    pub interp: Option<StageConfig>,
    #[serde(default)]
    pub infill: Option<StageConfig>,
    #[serde(default)]
    pub text2sql: Option<StageConfig>,
    #[serde(default)]
    pub rewrite: Option<StageConfig>,
    #[serde(default)]
    pub validator: Option<StageConfig>,
}

/// Decoding defaults for stages that set none.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationConfig {
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig { temperature: 0.0, max_tokens: DEFAULT_MAX_TOKENS }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub dataset: Option<DatasetConfig>,
    #[serde(default)]
    pub backends: BTreeMap<String, BackendConfig>,
    #[serde(default)]
    pub stages: StagesConfig,
    #[serde(default)]
    pub generation: GenerationConfig,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default)]
    pub sandbox: ExecLimits,
    #[serde(default)]
    pub comparison: ComparisonMode,
    /// Examples processed at once, and backend calls in flight per backend.
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
    #[serde(default)]
    pub cache_path: Option<PathBuf>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Seed for few-shot demonstration sampling.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_max_interpretations")]
    pub max_interpretations: usize,
    /// Directory of the config file; relative paths were resolved against it.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_concurrency() -> usize {
    4
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_max_interpretations() -> usize {
    DEFAULT_MAX_INTERPRETATIONS
}

/// The stages a command needs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Interp,
    Infill,
    Text2Sql,
    Rewrite,
    Validator,
}

impl Stage {
    fn name(self) -> &'static str {
        match self {
            Stage::Interp => "interp",
            Stage::Infill => "infill",
            Stage::Text2Sql => "text2sql",
            Stage::Rewrite => "rewrite",
            Stage::Validator => "validator",
        }
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl RunConfig {
    pub fn from_json(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: RunConfig = serde_json::from_str(text)?;
        cfg.base_dir = base_dir.to_path_buf();
        if let Some(ds) = &mut cfg.dataset {
            ds.path = resolve(base_dir, &ds.path);
            ds.db_root = ds.db_root.as_deref().map(|p| resolve(base_dir, p));
        }
        cfg.cache_path = cfg.cache_path.as_deref().map(|p| resolve(base_dir, p));
        cfg.output_dir = resolve(base_dir, &cfg.output_dir);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let base = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        RunConfig::from_json(&text, base).with_context(|| format!("invalid config {}", path.display()))
    }

    fn validate(&self) -> Result<()> {
        for (name, backend) in &self.backends {
            backend.validate().with_context(|| format!("backend `{name}`"))?;
        }
        for stage in [Stage::Interp, Stage::Infill, Stage::Text2Sql, Stage::Rewrite, Stage::Validator] {
            if let Some(s) = self.stage_config(stage) {
                if !self.backends.contains_key(&s.backend) {
                    bail!("stage `{}` refers to unknown backend `{}`", stage.name(), s.backend);
                }
            }
        }
        if self.generation.temperature < 0.0 || !self.generation.temperature.is_finite() {
            bail!("generation.temperature must be a finite number >= 0");
        }
        if self.concurrency == 0 {
            bail!("concurrency must be at least 1");
        }
        Ok(())
    }

    fn stage_config(&self, stage: Stage) -> Option<&StageConfig> {
        match stage {
            Stage::Interp => self.stages.interp.as_ref(),
            Stage::Infill => self.stages.infill.as_ref(),
            Stage::Text2Sql => self.stages.text2sql.as_ref(),
            Stage::Rewrite => self.stages.rewrite.as_ref(),
            Stage::Validator => self.stages.validator.as_ref(),
        }
    }

    /// Check that every stage in `needed` has a backend.
    pub fn require(&self, needed: &[Stage]) -> Result<()> {
        let missing: Vec<&str> = needed.iter().filter(|s| self.stage_config(**s).is_none()).map(|s| s.name()).collect();
        if !missing.is_empty() {
            bail!("config has no backend for stage(s): {}", missing.join(", "));
        }
        Ok(())
    }

    pub fn dataset(&self) -> Result<&DatasetConfig> {
        self.dataset.as_ref().ok_or_else(|| anyhow!("config has no `dataset` section"))
    }

    pub fn load_examples(&self) -> Result<Vec<Example>> {
        let ds = self.dataset()?;
        let options = AdapterOptions { db_root: ds.db_root.clone() };
        let examples = load_dataset_with(&ds.path, ds.format, &options)
            .with_context(|| format!("loading dataset {}", ds.path.display()))?;
        if ds.filter_nonempty {
            let before = examples.len();
            let kept = ambisql::dataset::filter_nonempty(examples, self.sandbox)?;
            log::info!("kept {} of {before} examples with non-empty gold results", kept.len());
            return Ok(kept);
        }
        Ok(examples)
    }
}

/// Gateways built from a config, one per named backend, sharing one cache.
pub struct Runtime {
    gateways: BTreeMap<String, Arc<Gateway>>,
    config: RunConfig,
}

impl Runtime {
    pub fn new(config: &RunConfig) -> Result<Self> {
        let cache = match &config.cache_path {
            Some(p) => Some(Arc::new(
                ResponseCache::open(p).with_context(|| format!("opening cache {}", p.display()))?,
            )),
            None => None,
        };
        let mut gateways = BTreeMap::new();
        for (name, backend) in &config.backends {
            let backend = backend.build(name, &config.base_dir).with_context(|| format!("backend `{name}`"))?;
            let mut gw = Gateway::new(backend).with_retry(config.retry).with_concurrency(config.concurrency);
            if let Some(c) = &cache {
                gw = gw.with_cache(c.clone());
            }
            gateways.insert(name.clone(), Arc::new(gw));
        }
        Ok(Runtime { gateways, config: config.clone() })
    }

    /// Client for `stage`. Callers check [`RunConfig::require`] first; an
    /// unconfigured stage gets a client that fails on use.
    pub fn client(&self, stage: Stage) -> Result<StageClient> {
        let sc = self
            .config
            .stage_config(stage)
            .ok_or_else(|| anyhow!("config has no backend for stage `{}`", stage.name()))?;
        let gw = self.gateways[&sc.backend].clone();
        let mut client = StageClient::new(gw, sc.model.clone());
        client.temperature = sc.temperature.unwrap_or(self.config.generation.temperature);
        client.max_tokens = sc.max_tokens.unwrap_or(self.config.generation.max_tokens);
        Ok(client)
    }

    /// Pipeline settings. Stages absent from the config fall back to the
    /// text-to-SQL client (or the first configured one); [`RunConfig::require`]
    /// decides which stages a command may actually use.
    pub fn pipeline_config(&self, comparison: ComparisonMode, seed: u64) -> Result<PipelineConfig> {
        let any = [Stage::Text2Sql, Stage::Interp, Stage::Infill, Stage::Rewrite, Stage::Validator]
            .into_iter()
            .find_map(|s| self.client(s).ok())
            .ok_or_else(|| anyhow!("config defines no stages"))?;
        let get = |s: Stage| self.client(s).unwrap_or_else(|_| any.clone());
        Ok(PipelineConfig {
            interp: get(Stage::Interp),
            infill: get(Stage::Infill),
            text2sql: get(Stage::Text2Sql),
            comparison,
            max_interpretations: self.config.max_interpretations,
            seed,
        })
    }
}
