//! Chat-completion clients.
//!
//! Live calls speak the OpenAI-compatible `POST {endpoint}/chat/completions`
//! protocol. Mock and replay backends never build an HTTP transport, so an
//! offline evaluation cannot leak requests. Replay entries are keyed by
//! model name and the SHA-256 of the prompt text.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clustering::HeatLevel;
use crate::fsio;
use crate::prompting::PromptText;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LlmError {
    #[error("request failed after {attempts} attempt(s): {message}")]
    Transport { attempts: usize, message: String },
    #[error("replay cache miss for model {model:?}, prompt sha256 {prompt_sha256}")]
    CacheMiss { model: String, prompt_sha256: String },
    #[error("missing environment variable {0} for the api key")]
    MissingKey(String),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("mock backend: {0}")]
    Mock(String),
    #[error("malformed response: {0}")]
    InvalidResponse(String),
    #[error("replay cache {path}: {message}")]
    Cache { path: String, message: String },
}

pub type Result<T, E = LlmError> = std::result::Result<T, E>;

/// One failed attempt; permanent failures stop the retry loop early.
#[derive(Debug, Clone)]
pub struct AttemptError {
    pub message: String,
    pub retryable: bool,
}

impl From<String> for AttemptError {
    fn from(message: String) -> Self {
        Self {
            message,
            retryable: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_attempts: usize,
    pub initial_backoff_ms: u64,
    pub multiplier: f64,
    pub max_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            initial_backoff_ms: 500,
            multiplier: 2.0,
            max_backoff_ms: 8_000,
        }
    }
}

impl RetryPolicy {
    pub fn no_backoff(max_attempts: usize) -> Self {
        Self {
            max_attempts,
            initial_backoff_ms: 0,
            ..Self::default()
        }
    }

    /// Delay before retry number `retry` (0-based).
    pub fn backoff(&self, retry: usize) -> Duration {
        let ms = self.initial_backoff_ms as f64 * self.multiplier.powi(retry as i32);
        Duration::from_millis(ms.min(self.max_backoff_ms as f64) as u64)
    }

    /// Run `op` until it succeeds, fails permanently, or `max_attempts` is
    /// spent. The error carries the number of attempts made.
    pub fn run<T>(&self, mut op: impl FnMut() -> Result<T, AttemptError>) -> Result<T, (usize, String)> {
        let max = self.max_attempts.max(1);
        let mut attempt = 0;
        loop {
            attempt += 1;
            match op() {
                Ok(v) => return Ok(v),
                Err(e) if !e.retryable || attempt >= max => return Err((attempt, e.message)),
                Err(e) => {
                    log::debug!("attempt {attempt} failed: {}", e.message);
                    thread::sleep(self.backoff(attempt - 1));
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Live,
    Mock,
    Replay,
    /// Live calls whose completions are appended to the replay cache.
    Record,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Display name, also the replay cache key.
    pub name: String,
    /// Model id sent on the wire; defaults to `name`.
    pub model: Option<String>,
    pub endpoint: String,
    /// Environment variable holding the bearer token.
    pub api_key_env: Option<String>,
    pub temperature: f64,
    pub max_tokens: Option<u32>,
    pub timeout_secs: u64,
    pub retry: RetryPolicy,
    pub backend: BackendKind,
    /// Mock rule: `always-A` .. `always-D`, `true-level`, `fail`, or
    /// `text:<completion>`.
    pub mock: Option<String>,
    pub cache: Option<PathBuf>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            name: String::new(),
            model: None,
            endpoint: String::new(),
            api_key_env: None,
            temperature: 0.0,
            max_tokens: Some(64),
            timeout_secs: 60,
            retry: RetryPolicy::default(),
            backend: BackendKind::Live,
            mock: None,
            cache: None,
        }
    }
}

impl ModelConfig {
    pub fn mock(name: &str, rule: &str) -> Self {
        Self {
            name: name.to_string(),
            backend: BackendKind::Mock,
            mock: Some(rule.to_string()),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(LlmError::Config("model name is empty".into()));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(LlmError::Config(format!("{}: temperature must be >= 0", self.name)));
        }
        if self.retry.max_attempts < 1 {
            return Err(LlmError::Config(format!(
                "{}: retry.max_attempts must be >= 1",
                self.name
            )));
        }
        match self.backend {
            BackendKind::Live | BackendKind::Record if self.endpoint.is_empty() => Err(LlmError::Config(format!(
                "{}: live backend needs an endpoint",
                self.name
            ))),
            BackendKind::Replay | BackendKind::Record if self.cache.is_none() => Err(LlmError::Config(format!(
                "{}: replay/record backend needs a cache path",
                self.name
            ))),
            BackendKind::Mock if self.mock.is_none() => Err(LlmError::Config(format!(
                "{}: mock backend needs a mock rule",
                self.name
            ))),
            _ => Ok(()),
        }
    }

    /// Hash of the configuration for run manifests. Holds no secrets: keys
    /// are only referenced by variable name.
    pub fn content_hash(&self) -> String {
        fsio::sha256_hex(serde_json::to_string(self).unwrap_or_default().as_bytes())
    }

    fn wire_model(&self) -> &str {
        self.model.as_deref().unwrap_or(&self.name)
    }
}

/// A list of models, as read from a `models.toml` file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelRoster {
    #[serde(default)]
    pub models: Vec<ModelConfig>,
}

impl ModelRoster {
    pub fn from_toml(text: &str) -> Result<Self> {
        let roster: Self = toml::from_str(text).map_err(|e| LlmError::Config(e.to_string()))?;
        for m in &roster.models {
            m.validate()?;
        }
        Ok(roster)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| LlmError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn get(&self, name: &str) -> Option<&ModelConfig> {
        self.models.iter().find(|m| m.name == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub total_tokens: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub text: String,
    pub model: String,
    pub latency: Duration,
    pub usage: Option<Usage>,
    pub backend: BackendKind,
}

pub trait ChatClient: Send + Sync {
    fn complete(&self, prompt: &PromptText) -> Result<Completion>;

    fn model_name(&self) -> &str;

    fn backend(&self) -> BackendKind;
}

#[derive(Debug, Clone, PartialEq)]
pub enum MockRule {
    /// Always answer `Option: <letter>`.
    FixedLetter(char),
    /// Answer the true level's letter, looked up by event id.
    TrueLevel(HashMap<String, HeatLevel>),
    FixedText(String),
    Fail,
}

impl MockRule {
    pub fn parse(spec: &str, truth: Option<&HashMap<String, HeatLevel>>) -> Result<Self> {
        let spec = spec.trim();
        if let Some(text) = spec.strip_prefix("text:") {
            return Ok(Self::FixedText(text.to_string()));
        }
        match spec.to_ascii_lowercase().as_str() {
            "fail" => Ok(Self::Fail),
            "true-level" => truth
                .map(|t| Self::TrueLevel(t.clone()))
                .ok_or_else(|| LlmError::Config("true-level mock needs the evaluation labels".into())),
            s => match s.strip_prefix("always-") {
                Some(l) if l.len() == 1 && ('a'..='d').contains(&l.chars().next().unwrap()) => {
                    Ok(Self::FixedLetter(l.chars().next().unwrap().to_ascii_uppercase()))
                }
                _ => Err(LlmError::Config(format!("unknown mock rule {spec:?}"))),
            },
        }
    }
}

pub struct MockClient {
    name: String,
    rule: MockRule,
}

impl MockClient {
    pub fn new(name: &str, rule: MockRule) -> Self {
        Self {
            name: name.to_string(),
            rule,
        }
    }
}

impl ChatClient for MockClient {
    fn complete(&self, prompt: &PromptText) -> Result<Completion> {
        let text = match &self.rule {
            MockRule::FixedLetter(l) => format!("Option: {l}"),
            MockRule::FixedText(t) => t.clone(),
            MockRule::Fail => return Err(LlmError::Mock("configured to fail".into())),
            MockRule::TrueLevel(truth) => {
                let level = truth
                    .get(&prompt.event_id)
                    .ok_or_else(|| LlmError::Mock(format!("no label for event {:?}", prompt.event_id)))?;
                let letter = (b'A' + level.index() as u8) as char;
                format!("Option: {letter}")
            }
        };
        Ok(Completion {
            text,
            model: self.name.clone(),
            latency: Duration::ZERO,
            usage: None,
            backend: BackendKind::Mock,
        })
    }

    fn model_name(&self) -> &str {
        &self.name
    }

    fn backend(&self) -> BackendKind {
        BackendKind::Mock
    }
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: [ChatMessage<'a>; 1],
    temperature: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    max_tokens: Option<u32>,
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatResponseMessage,
}

#[derive(Deserialize)]
struct ChatResponseMessage {
    #[serde(default)]
    content: Option<String>,
}

pub struct LiveClient {
    config: ModelConfig,
    url: String,
    api_key: Option<String>,
    http: reqwest::blocking::Client,
}

impl LiveClient {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        let api_key = match &config.api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| LlmError::MissingKey(var.clone()))?),
            None => None,
        };
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs.max(1)))
            .build()
            .map_err(|e| LlmError::Config(e.to_string()))?;
        Ok(Self {
            url: format!("{}/chat/completions", config.endpoint.trim_end_matches('/')),
            config: config.clone(),
            api_key,
            http,
        })
    }

    fn attempt(&self, body: &ChatRequest<'_>) -> Result<(String, Option<Usage>), AttemptError> {
        let mut req = self.http.post(&self.url).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| e.to_string())?;
        let status = resp.status();
        if !status.is_success() {
            let body = resp.text().unwrap_or_default();
            return Err(AttemptError {
                message: format!("http status {status}: {}", body.chars().take(200).collect::<String>()),
                retryable: status.is_server_error() || status.as_u16() == 429,
            });
        }
        let parsed: ChatResponse = resp.json().map_err(|e| AttemptError {
            message: format!("malformed response: {e}"),
            retryable: false,
        })?;
        let text = parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| AttemptError {
                message: "response has no message content".into(),
                retryable: false,
            })?;
        Ok((text, parsed.usage))
    }
}

impl ChatClient for LiveClient {
    fn complete(&self, prompt: &PromptText) -> Result<Completion> {
        let body = ChatRequest {
            model: self.config.wire_model(),
            messages: [ChatMessage {
                role: "user",
                content: &prompt.text,
            }],
            temperature: self.config.temperature,
            max_tokens: self.config.max_tokens,
        };
        let started = Instant::now();
        let (text, usage) = self
            .config
            .retry
            .run(|| self.attempt(&body))
            .map_err(|(attempts, message)| LlmError::Transport { attempts, message })?;
        Ok(Completion {
            text,
            model: self.config.name.clone(),
            latency: started.elapsed(),
            usage,
            backend: BackendKind::Live,
        })
    }

    fn model_name(&self) -> &str {
        &self.config.name
    }

    fn backend(&self) -> BackendKind {
        BackendKind::Live
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CacheLine {
    model: String,
    prompt_sha256: String,
    text: String,
}

/// Recorded completions, shared by recording and replaying clients.
pub struct ReplayCache {
    path: PathBuf,
    entries: Mutex<HashMap<(String, String), String>>,
    writer: Mutex<Option<File>>,
}

impl ReplayCache {
    /// Open a cache file; a missing file is an empty cache.
    pub fn open(path: &Path) -> Result<Self> {
        let mut entries = HashMap::new();
        if path.exists() {
            let text = fs::read_to_string(path).map_err(|e| LlmError::Cache {
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
            for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
                let entry: CacheLine = serde_json::from_str(line).map_err(|e| LlmError::Cache {
                    path: path.display().to_string(),
                    message: format!("line {}: {e}", i + 1),
                })?;
                entries.insert((entry.model, entry.prompt_sha256), entry.text);
            }
        }
        Ok(Self {
            path: path.to_path_buf(),
            entries: Mutex::new(entries),
            writer: Mutex::new(None),
        })
    }

    pub fn key(model: &str, prompt: &str) -> (String, String) {
        (model.to_string(), fsio::sha256_hex(prompt.as_bytes()))
    }

    pub fn get(&self, model: &str, prompt: &str) -> Option<String> {
        self.entries.lock().unwrap().get(&Self::key(model, prompt)).cloned()
    }

    pub fn len(&self) -> usize {
        self.entries.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn record(&self, model: &str, prompt: &str, text: &str) -> Result<()> {
        let (model, prompt_sha256) = Self::key(model, prompt);
        let line = serde_json::to_string(&CacheLine {
            model: model.clone(),
            prompt_sha256: prompt_sha256.clone(),
            text: text.to_string(),
        })
        .map_err(|e| LlmError::Cache {
            path: self.path.display().to_string(),
            message: e.to_string(),
        })?;
        let io_err = |e: std::io::Error| LlmError::Cache {
            path: self.path.display().to_string(),
            message: e.to_string(),
        };
        let mut writer = self.writer.lock().unwrap();
        if writer.is_none() {
            if let Some(parent) = self.path.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent).map_err(io_err)?;
            }
            *writer = Some(
                OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&self.path)
                    .map_err(io_err)?,
            );
        }
        let file = writer.as_mut().unwrap();
        writeln!(file, "{line}").and_then(|_| file.flush()).map_err(io_err)?;
        self.entries
            .lock()
            .unwrap()
            .insert((model, prompt_sha256), text.to_string());
        Ok(())
    }
}

pub struct ReplayClient {
    name: String,
    cache: Arc<ReplayCache>,
}

impl ReplayClient {
    pub fn new(name: &str, cache: Arc<ReplayCache>) -> Self {
        Self {
            name: name.to_string(),
            cache,
        }
    }
}

impl ChatClient for ReplayClient {
    fn complete(&self, prompt: &PromptText) -> Result<Completion> {
        let text = self
            .cache
            .get(&self.name, &prompt.text)
            .ok_or_else(|| LlmError::CacheMiss {
                model: self.name.clone(),
                prompt_sha256: fsio::sha256_hex(prompt.text.as_bytes()),
            })?;
        Ok(Completion {
            text,
            model: self.name.clone(),
            latency: Duration::ZERO,
            usage: None,
            backend: BackendKind::Replay,
        })
    }

    fn model_name(&self) -> &str {
        &self.name
    }

    fn backend(&self) -> BackendKind {
        BackendKind::Replay
    }
}

/// Live client that appends every successful completion to a cache.
pub struct RecordingClient {
    inner: LiveClient,
    cache: Arc<ReplayCache>,
}

impl ChatClient for RecordingClient {
    fn complete(&self, prompt: &PromptText) -> Result<Completion> {
        let mut completion = self.inner.complete(prompt)?;
        self.cache
            .record(self.inner.model_name(), &prompt.text, &completion.text)?;
        completion.backend = BackendKind::Record;
        Ok(completion)
    }

    fn model_name(&self) -> &str {
        self.inner.model_name()
    }

    fn backend(&self) -> BackendKind {
        BackendKind::Record
    }
}

/// Build the client a config asks for. `truth` feeds the `true-level` mock.
pub fn build_client(config: &ModelConfig, truth: Option<&HashMap<String, HeatLevel>>) -> Result<Box<dyn ChatClient>> {
    config.validate()?;
    let cache = || -> Result<Arc<ReplayCache>> { Ok(Arc::new(ReplayCache::open(config.cache.as_deref().unwrap())?)) };
    Ok(match config.backend {
        BackendKind::Mock => Box::new(MockClient::new(
            &config.name,
            MockRule::parse(config.mock.as_deref().unwrap_or_default(), truth)?,
        )),
        BackendKind::Replay => Box::new(ReplayClient::new(&config.name, cache()?)),
        BackendKind::Live => Box::new(LiveClient::new(config)?),
        BackendKind::Record => Box::new(RecordingClient {
            inner: LiveClient::new(config)?,
            cache: cache()?,
        }),
    })
}

/// Complete every prompt with at most `parallelism` requests in flight.
/// Results come back in input order; one failure does not stop the rest.
pub fn complete_batch(prompts: &[PromptText], client: &dyn ChatClient, parallelism: usize) -> Vec<Result<Completion>> {
    let workers = parallelism.max(1).min(prompts.len().max(1));
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<Completion>>>> = prompts.iter().map(|_| Mutex::new(None)).collect();
    thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(prompt) = prompts.get(i) else { break };
                let result = client.complete(prompt);
                *slots[i].lock().unwrap() = Some(result);
            });
        }
    });
    slots
        .into_iter()
        .map(|s| s.into_inner().unwrap().expect("every slot is filled"))
        .collect()
}
