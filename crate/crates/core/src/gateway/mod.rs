//! Access to text-generation models: prompt templates, output parsers,
//! backends, a persistent response cache, and retrying with bounded
//! concurrency.

mod backend;
mod cache;
mod parse;
mod prompts;

use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use backend::{
    prompt_sha256, Backend, BackendConfig, BackendError, HttpChatBackend, MissPolicy, MockScript, ReplayOnly,
    ScriptMatch, ScriptRule, ScriptedMock, ScriptedReply,
};
pub use cache::{CacheEntry, ResponseCache};
pub use parse::{extract_sql, parse_interpretations, split_sql_statements, ExtractError, ParsedInterpretations};
pub use prompts::{
    join_lines, render_prompt, synonym_slot, PromptKind, Slots, TemplateError, DB_DUMP, DEMONSTRATIONS,
    INTERPRETATIONS, QUESTION, SENTINEL, SYNONYM,
};

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("backend `{backend}` failed after {attempts} attempts: {message}")]
    Transport { backend: String, attempts: u32, message: String },
    #[error("backend `{backend}`: {message}")]
    Backend { backend: String, message: String },
    #[error("{0}")]
    Miss(String),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("backend configuration: {0}")]
    Config(String),
    #[error("cache write failed: {0}")]
    Cache(#[from] std::io::Error),
}

/// One generation call. Every field takes part in the cache key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub backend_id: String,
    pub model: String,
    pub prompt: String,
    pub temperature: f64,
    pub max_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

pub const DEFAULT_MAX_TOKENS: u32 = 1024;

impl GenerationRequest {
    /// Greedy decoding with the default token budget.
    pub fn new(backend_id: &str, model: &str, prompt: impl Into<String>) -> Self {
        GenerationRequest {
            backend_id: backend_id.to_string(),
            model: model.to_string(),
            prompt: prompt.into(),
            temperature: 0.0,
            max_tokens: DEFAULT_MAX_TOKENS,
            seed: None,
        }
    }

    /// Hex SHA-256 over a canonical JSON encoding of every request field.
    pub fn cache_key(&self) -> String {
        // Array form fixes field order independently of struct layout.
        let canonical = serde_json::json!([
            self.backend_id,
            self.model,
            self.prompt,
            self.temperature,
            self.max_tokens,
            self.seed,
        ]);
        hex::encode(Sha256::digest(canonical.to_string().as_bytes()))
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.prompt.trim().is_empty() {
            return Err(GatewayError::InvalidRequest("empty prompt".into()));
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(GatewayError::InvalidRequest(format!("temperature {} is not >= 0", self.temperature)));
        }
        if self.max_tokens == 0 {
            return Err(GatewayError::InvalidRequest("max_tokens must be positive".into()));
        }
        Ok(())
    }
}

/// Exponential backoff for transient backend failures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { max_retries: 4, base_delay_ms: 500, max_delay_ms: 30_000 }
    }
}

impl RetryPolicy {
    pub fn none() -> Self {
        RetryPolicy { max_retries: 0, base_delay_ms: 0, max_delay_ms: 0 }
    }

    fn delay(&self, retry: u32) -> Duration {
        let factor = 1u64.checked_shl(retry).unwrap_or(u64::MAX);
        Duration::from_millis(self.base_delay_ms.saturating_mul(factor).min(self.max_delay_ms))
    }
}

struct Semaphore {
    available: Mutex<usize>,
    freed: Condvar,
}

impl Semaphore {
    fn acquire(&self) -> SemaphoreGuard<'_> {
        let mut n = self.available.lock().expect("semaphore lock");
        while *n == 0 {
            n = self.freed.wait(n).expect("semaphore lock");
        }
        *n -= 1;
        SemaphoreGuard(self)
    }
}

struct SemaphoreGuard<'a>(&'a Semaphore);

impl Drop for SemaphoreGuard<'_> {
    fn drop(&mut self) {
        *self.0.available.lock().expect("semaphore lock") += 1;
        self.0.freed.notify_one();
    }
}

/// A backend behind the cache, with retries and an in-flight limit.
pub struct Gateway {
    backend: Arc<dyn Backend>,
    cache: Option<Arc<ResponseCache>>,
    retry: RetryPolicy,
    in_flight: Semaphore,
}

impl Gateway {
    pub fn new(backend: Arc<dyn Backend>) -> Self {
        Gateway {
            backend,
            cache: None,
            retry: RetryPolicy::default(),
            in_flight: Semaphore { available: Mutex::new(8), freed: Condvar::new() },
        }
    }

    pub fn with_cache(mut self, cache: Arc<ResponseCache>) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    /// Maximum simultaneous backend calls (at least 1).
    pub fn with_concurrency(mut self, limit: usize) -> Self {
        self.in_flight = Semaphore { available: Mutex::new(limit.max(1)), freed: Condvar::new() };
        self
    }

    pub fn backend_id(&self) -> &str {
        self.backend.id()
    }

    /// A greedy request addressed to this gateway's backend.
    pub fn request(&self, model: &str, prompt: impl Into<String>) -> GenerationRequest {
        GenerationRequest::new(self.backend.id(), model, prompt)
    }

    /// Return the cached response or call the backend and cache its answer.
    pub fn generate(&self, request: &GenerationRequest) -> Result<String, GatewayError> {
        request.validate()?;
        let key = request.cache_key();
        if let Some(hit) = self.cache.as_ref().and_then(|c| c.get(&key)) {
            return Ok(hit);
        }

        let _permit = self.in_flight.acquire();
        let mut attempt = 0u32;
        let response = loop {
            attempt += 1;
            match self.backend.complete(request) {
                Ok(text) => break text,
                Err(BackendError::Transient(message)) => {
                    if attempt > self.retry.max_retries {
                        return Err(GatewayError::Transport {
                            backend: self.backend.id().to_string(),
                            attempts: attempt,
                            message,
                        });
                    }
                    let wait = self.retry.delay(attempt - 1);
                    log::warn!("backend `{}`: {message}; retrying in {wait:?}", self.backend.id());
                    std::thread::sleep(wait);
                }
                Err(BackendError::Fatal(message)) => {
                    return Err(GatewayError::Backend { backend: self.backend.id().to_string(), message })
                }
                Err(BackendError::Miss(message)) => return Err(GatewayError::Miss(message)),
            }
        };
        if let Some(cache) = &self.cache {
            cache.put(&key, request, &response)?;
        }
        Ok(response)
    }
}
