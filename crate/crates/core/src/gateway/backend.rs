//! Text-generation backends.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{GatewayError, GenerationRequest};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BackendError {
    /// Worth retrying: connection failures, timeouts, 429 and 5xx.
    #[error("transient: {0}")]
    Transient(String),
    #[error("{0}")]
    Fatal(String),
    /// The backend has no answer for this request (replay or strict mock).
    #[error("no response recorded: {0}")]
    Miss(String),
}

pub trait Backend: Send + Sync {
    fn id(&self) -> &str;
    fn complete(&self, request: &GenerationRequest) -> Result<String, BackendError>;
}

/// How a backend is configured in a run config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendConfig {
    HttpChat {
        endpoint: String,
        #[serde(default = "default_chat_path")]
        path: String,
        /// Environment variable holding the bearer token.
        #[serde(default)]
        api_key_env: Option<String>,
        #[serde(default = "default_http_timeout_ms")]
        timeout_ms: u64,
    },
    ScriptedMock {
        #[serde(default)]
        script: Option<MockScript>,
        /// JSON file holding a [`MockScript`], relative to the config file.
        #[serde(default)]
        script_path: Option<PathBuf>,
    },
    ReplayOnly,
}

fn default_chat_path() -> String {
    "/v1/chat/completions".to_string()
}

fn default_http_timeout_ms() -> u64 {
    120_000
}

impl BackendConfig {
    /// Check the per-kind requirements without building anything.
    pub fn validate(&self) -> Result<(), GatewayError> {
        match self {
            BackendConfig::HttpChat { endpoint, .. } if endpoint.trim().is_empty() => {
                Err(GatewayError::Config("http_chat backend requires an endpoint".into()))
            }
            BackendConfig::ScriptedMock { script: None, script_path: None } => {
                Err(GatewayError::Config("scripted_mock backend requires `script` or `script_path`".into()))
            }
            BackendConfig::ScriptedMock { script: Some(_), script_path: Some(_) } => {
                Err(GatewayError::Config("scripted_mock backend takes either `script` or `script_path`, not both".into()))
            }
            _ => Ok(()),
        }
    }

    /// Instantiate the backend. `base_dir` resolves relative script paths.
    pub fn build(&self, id: &str, base_dir: &Path) -> Result<Arc<dyn Backend>, GatewayError> {
        self.validate()?;
        Ok(match self {
            BackendConfig::HttpChat { endpoint, path, api_key_env, timeout_ms } => {
                let api_key = match api_key_env {
                    Some(var) => Some(std::env::var(var).map_err(|_| {
                        GatewayError::Config(format!("environment variable `{var}` is not set"))
                    })?),
                    None => None,
                };
                Arc::new(HttpChatBackend::new(id, endpoint, path, api_key, Duration::from_millis(*timeout_ms))?)
            }
            BackendConfig::ScriptedMock { script, script_path } => {
                let script = match (script, script_path) {
                    (Some(s), _) => s.clone(),
                    (None, Some(p)) => {
                        let full = base_dir.join(p);
                        let text = std::fs::read_to_string(&full)
                            .map_err(|e| GatewayError::Config(format!("{}: {e}", full.display())))?;
                        serde_json::from_str(&text)
                            .map_err(|e| GatewayError::Config(format!("{}: {e}", full.display())))?
                    }
                    (None, None) => unreachable!("validated"),
                };
                Arc::new(ScriptedMock::new(id, script)?)
            }
            BackendConfig::ReplayOnly => Arc::new(ReplayOnly { id: id.to_string() }),
        })
    }
}

/// OpenAI-style chat-completions endpoint.
pub struct HttpChatBackend {
    id: String,
    url: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: Vec<ChatMessage<'a>>,
    temperature: f64,
    max_tokens: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatReply,
}

#[derive(Deserialize)]
struct ChatReply {
    #[serde(default)]
    content: Option<String>,
}

impl HttpChatBackend {
    pub fn new(
        id: &str,
        endpoint: &str,
        path: &str,
        api_key: Option<String>,
        timeout: Duration,
    ) -> Result<Self, GatewayError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| GatewayError::Config(format!("http client: {e}")))?;
        Ok(HttpChatBackend {
            id: id.to_string(),
            url: format!("{}/{}", endpoint.trim_end_matches('/'), path.trim_start_matches('/')),
            api_key: api_key.filter(|k| !k.is_empty()),
            client,
        })
    }
}

impl Backend for HttpChatBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, request: &GenerationRequest) -> Result<String, BackendError> {
        let body = ChatRequest {
            model: &request.model,
            messages: vec![ChatMessage { role: "user", content: &request.prompt }],
            temperature: request.temperature,
            max_tokens: request.max_tokens,
            seed: request.seed,
        };
        let mut req = self.client.post(&self.url).json(&body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| {
            if e.is_timeout() || e.is_connect() || e.is_request() {
                BackendError::Transient(e.to_string())
            } else {
                BackendError::Fatal(e.to_string())
            }
        })?;
        let status = resp.status();
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(BackendError::Transient(format!("HTTP {status}")));
        }
        if !status.is_success() {
            let text = resp.text().unwrap_or_default();
            return Err(BackendError::Fatal(format!("HTTP {status}: {text}")));
        }
        let parsed: ChatResponse = resp.json().map_err(|e| BackendError::Fatal(format!("bad response body: {e}")))?;
        parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| BackendError::Fatal("response has no message content".into()))
    }
}

/// A canned reply in a mock script.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScriptedReply {
    Text(String),
    Failure {
        error: String,
        #[serde(default)]
        transient: bool,
    },
}

/// Conditions a prompt must meet for a rule to fire. All given conditions
/// must hold.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScriptMatch {
    /// Substrings the prompt must contain.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub contains: Vec<String>,
    /// Substrings the prompt must not contain.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub excludes: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regex: Option<String>,
    /// Hex SHA-256 of the full prompt.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_sha256: Option<String>,
}

/// One rule: the n-th matching call gets `replies[n]`, and the last reply
/// repeats once the list is exhausted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptRule {
    #[serde(rename = "match")]
    pub matcher: ScriptMatch,
    pub replies: Vec<ScriptedReply>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissPolicy {
    /// Answer every unmatched prompt with this text.
    Default(String),
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockScript {
    pub rules: Vec<ScriptRule>,
    pub on_miss: MissPolicy,
}

impl MockScript {
    pub fn new(on_miss: MissPolicy) -> Self {
        MockScript { rules: Vec::new(), on_miss }
    }

    /// Add a rule replying `reply` to prompts containing every string in `contains`.
    pub fn when(mut self, contains: &[&str], reply: impl Into<String>) -> Self {
        self.rules.push(ScriptRule {
            matcher: ScriptMatch { contains: contains.iter().map(|s| s.to_string()).collect(), ..Default::default() },
            replies: vec![ScriptedReply::Text(reply.into())],
        });
        self
    }

    pub fn when_seq(mut self, contains: &[&str], replies: Vec<ScriptedReply>) -> Self {
        self.rules.push(ScriptRule {
            matcher: ScriptMatch { contains: contains.iter().map(|s| s.to_string()).collect(), ..Default::default() },
            replies,
        });
        self
    }
}

struct CompiledRule {
    rule: ScriptRule,
    regex: Option<Regex>,
    calls: AtomicUsize,
}

/// Deterministic table-lookup backend for tests and scripted corpora.
pub struct ScriptedMock {
    id: String,
    rules: Vec<CompiledRule>,
    on_miss: MissPolicy,
    calls: AtomicUsize,
    prompts: Mutex<Vec<String>>,
}

pub fn prompt_sha256(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}

impl ScriptedMock {
    pub fn new(id: &str, script: MockScript) -> Result<Self, GatewayError> {
        let rules = script
            .rules
            .into_iter()
            .enumerate()
            .map(|(i, rule)| {
                if rule.replies.is_empty() {
                    return Err(GatewayError::Config(format!("mock rule {i} has no replies")));
                }
                let regex = match &rule.matcher.regex {
                    Some(r) => Some(
                        Regex::new(r).map_err(|e| GatewayError::Config(format!("mock rule {i}: {e}")))?,
                    ),
                    None => None,
                };
                Ok(CompiledRule { rule, regex, calls: AtomicUsize::new(0) })
            })
            .collect::<Result<_, _>>()?;
        Ok(ScriptedMock {
            id: id.to_string(),
            rules,
            on_miss: script.on_miss,
            calls: AtomicUsize::new(0),
            prompts: Mutex::new(Vec::new()),
        })
    }

    /// Number of `complete` calls so far.
    pub fn call_count(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    /// Every prompt received, in call order.
    pub fn prompts(&self) -> Vec<String> {
        self.prompts.lock().expect("prompt log").clone()
    }

    fn matches(rule: &CompiledRule, prompt: &str) -> bool {
        let m = &rule.rule.matcher;
        m.contains.iter().all(|s| prompt.contains(s.as_str()))
            && !m.excludes.iter().any(|s| prompt.contains(s.as_str()))
            && rule.regex.as_ref().is_none_or(|r| r.is_match(prompt))
            && m.prompt_sha256.as_ref().is_none_or(|h| h.eq_ignore_ascii_case(&prompt_sha256(prompt)))
    }
}

impl Backend for ScriptedMock {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, request: &GenerationRequest) -> Result<String, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.prompts.lock().expect("prompt log").push(request.prompt.clone());
        let Some(rule) = self.rules.iter().find(|r| Self::matches(r, &request.prompt)) else {
            return match &self.on_miss {
                MissPolicy::Default(text) => Ok(text.clone()),
                MissPolicy::Error => Err(BackendError::Miss(format!(
                    "mock `{}` has no rule for prompt {}",
                    self.id,
                    prompt_sha256(&request.prompt)
                ))),
            };
        };
        let n = rule.calls.fetch_add(1, Ordering::SeqCst);
        let replies = &rule.rule.replies;
        match &replies[n.min(replies.len() - 1)] {
            ScriptedReply::Text(t) => Ok(t.clone()),
            ScriptedReply::Failure { error, transient: true } => Err(BackendError::Transient(error.clone())),
            ScriptedReply::Failure { error, transient: false } => Err(BackendError::Fatal(error.clone())),
        }
    }
}

/// Serves nothing; every answer must come from the cache.
pub struct ReplayOnly {
    pub id: String,
}

impl Backend for ReplayOnly {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, request: &GenerationRequest) -> Result<String, BackendError> {
        Err(BackendError::Miss(format!(
            "replay-only backend `{}` has no cached response for key {}",
            self.id,
            request.cache_key()
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req(prompt: &str) -> GenerationRequest {
        GenerationRequest::new("mock", "m", prompt)
    }

    #[test]
    fn rules_match_in_order() {
        let mock = ScriptedMock::new(
            "mock",
            MockScript::new(MissPolicy::Error).when(&["hotel", "rating"], "A").when(&["hotel"], "B"),
        )
        .unwrap();
        assert_eq!(mock.complete(&req("hotel rating")).unwrap(), "A");
        assert_eq!(mock.complete(&req("hotel")).unwrap(), "B");
        assert!(matches!(mock.complete(&req("other")), Err(BackendError::Miss(_))));
        assert_eq!(mock.call_count(), 3);
    }

    #[test]
    fn prompt_hash_lookup() {
        let prompt = "exact prompt text";
        let script = MockScript {
            rules: vec![ScriptRule {
                matcher: ScriptMatch { prompt_sha256: Some(prompt_sha256(prompt)), ..Default::default() },
                replies: vec![ScriptedReply::Text("1. x\n2. y".into())],
            }],
            on_miss: MissPolicy::Default("fallback".into()),
        };
        let mock = ScriptedMock::new("mock", script).unwrap();
        assert_eq!(mock.complete(&req(prompt)).unwrap(), "1. x\n2. y");
        assert_eq!(mock.complete(&req("exact prompt text!")).unwrap(), "fallback");
    }

    #[test]
    fn sequences_advance_and_stick() {
        let mock = ScriptedMock::new(
            "mock",
            MockScript::new(MissPolicy::Error).when_seq(
                &["q"],
                vec![
                    ScriptedReply::Failure { error: "down".into(), transient: true },
                    ScriptedReply::Text("ok".into()),
                ],
            ),
        )
        .unwrap();
        assert!(matches!(mock.complete(&req("q")), Err(BackendError::Transient(_))));
        assert_eq!(mock.complete(&req("q")).unwrap(), "ok");
        assert_eq!(mock.complete(&req("q")).unwrap(), "ok");
    }

    #[test]
    fn script_json_shape() {
        let json = r#"{
            "rules": [
                {"match": {"contains": ["stars"]}, "replies": ["SELECT 1", {"error": "boom"}]},
                {"match": {"regex": "^Your task"}, "replies": ["x"]}
            ],
            "on_miss": "error"
        }"#;
        let script: MockScript = serde_json::from_str(json).unwrap();
        assert_eq!(script.rules.len(), 2);
        assert_eq!(script.rules[0].replies[1], ScriptedReply::Failure { error: "boom".into(), transient: false });
        let with_default: MockScript = serde_json::from_str(r#"{"rules":[],"on_miss":{"default":"d"}}"#).unwrap();
        assert_eq!(with_default.on_miss, MissPolicy::Default("d".into()));
    }

    #[test]
    fn config_requirements() {
        let http: BackendConfig = serde_json::from_str(r#"{"kind":"http_chat","endpoint":""}"#).unwrap();
        assert!(http.validate().is_err());
        let mock: BackendConfig = serde_json::from_str(r#"{"kind":"scripted_mock"}"#).unwrap();
        assert!(mock.validate().is_err());
        // A script without on_miss is rejected at parse time.
        assert!(serde_json::from_str::<BackendConfig>(r#"{"kind":"scripted_mock","script":{"rules":[]}}"#).is_err());
        let replay: BackendConfig = serde_json::from_str(r#"{"kind":"replay_only"}"#).unwrap();
        assert!(replay.validate().is_ok());
    }
}
