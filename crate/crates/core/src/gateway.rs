//! Chat-completion gateway over an OpenAI-compatible endpoint or a scripted mock.
//!
//! The [`Gateway`] owns retries, the concurrency bound, an optional request
//! rate limit, an opt-in response cache and the audit log. Backends only
//! perform a single attempt.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::prompt::ChatMessage;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("no messages to send")]
    EmptyMessages,
    #[error("invalid backend configuration: {0}")]
    InvalidConfig(String),
    #[error("transport failed after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("request rejected with HTTP {status}: {message}")]
    Request { status: u16, message: String },
    #[error("malformed completion response: {0}")]
    Malformed(String),
    #[error("no scripted response for request digest {0}")]
    Unscripted(String),
    #[error("gateway log i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Outcome of a single backend attempt.
#[derive(Debug, Clone, Error)]
pub enum AttemptError {
    /// 429, 5xx, timeouts and connection failures.
    #[error("transient: {0}")]
    Transient(String),
    #[error("HTTP {status}: {message}")]
    Rejected { status: u16, message: String },
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("no scripted response for digest {0}")]
    Unscripted(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub endpoint: String,
    pub model_name: String,
    /// Passed as the `api-version` query parameter when set.
    pub api_version: Option<String>,
    pub temperature: f64,
    pub top_p: f64,
    pub frequency_penalty: f64,
    pub presence_penalty: f64,
    pub max_new_tokens: u32,
    pub request_timeout_secs: u64,
    pub max_retries: u32,
    pub max_parallel: usize,
    pub requests_per_second: Option<f64>,
    pub backoff_base_ms: u64,
    pub api_key_env: String,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self::inference()
    }
}

impl BackendConfig {
    /// Sampling used to write reasons for in-context examples.
    pub fn reason_generation() -> Self {
        Self {
            model_name: "gpt-3.5-turbo-0613".into(),
            api_version: Some("2023-03-15-preview".into()),
            max_new_tokens: 256,
            ..Self::inference()
        }
    }

    /// Deterministic correction inference with room for longer reasons.
    pub fn inference() -> Self {
        Self {
            endpoint: "https://api.openai.com/v1/chat/completions".into(),
            model_name: "gpt-4-turbo".into(),
            api_version: None,
            temperature: 0.0,
            top_p: 0.0,
            frequency_penalty: 0.0,
            presence_penalty: 0.0,
            max_new_tokens: 512,
            request_timeout_secs: 120,
            max_retries: 5,
            max_parallel: 4,
            requests_per_second: None,
            backoff_base_ms: 1000,
            api_key_env: "OPENAI_API_KEY".into(),
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if !(self.temperature >= 0.0) {
            return Err(GatewayError::InvalidConfig(format!("temperature must be >= 0, got {}", self.temperature)));
        }
        if self.max_new_tokens == 0 {
            return Err(GatewayError::InvalidConfig("max_new_tokens must be > 0".into()));
        }
        if self.max_parallel == 0 {
            return Err(GatewayError::InvalidConfig("max_parallel must be >= 1".into()));
        }
        if let Some(rps) = self.requests_per_second {
            if !(rps > 0.0) {
                return Err(GatewayError::InvalidConfig("requests_per_second must be > 0".into()));
            }
        }
        Ok(())
    }

    /// Fields that change what the model returns.
    pub fn sampling_key(&self) -> String {
        format!(
            "{}|{:?}|t={}|p={}|f={}|pr={}|max={}",
            self.model_name,
            self.api_version,
            self.temperature,
            self.top_p,
            self.frequency_penalty,
            self.presence_penalty,
            self.max_new_tokens
        )
    }
}

/// Stable, order- and content-sensitive key for a message list (hex SHA-256).
pub fn digest(messages: &[ChatMessage]) -> String {
    let mut h = Sha256::new();
    for m in messages {
        let role = serde_json::to_string(&m.role).expect("role serializes");
        h.update(role.as_bytes());
        h.update([0u8]);
        h.update((m.content.len() as u64).to_le_bytes());
        h.update(m.content.as_bytes());
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Serialize)]
struct WireMessage<'a> {
    role: &'a crate::prompt::Role,
    content: &'a str,
}

#[derive(Debug, Serialize)]
pub struct ChatRequestBody<'a> {
    model: &'a str,
    messages: Vec<WireMessage<'a>>,
    temperature: f64,
    top_p: f64,
    frequency_penalty: f64,
    presence_penalty: f64,
    max_tokens: u32,
}

/// The JSON body sent for `messages` under `cfg`.
pub fn request_body<'a>(messages: &'a [ChatMessage], cfg: &'a BackendConfig) -> ChatRequestBody<'a> {
    ChatRequestBody {
        model: &cfg.model_name,
        messages: messages.iter().map(|m| WireMessage { role: &m.role, content: &m.content }).collect(),
        temperature: cfg.temperature,
        top_p: cfg.top_p,
        frequency_penalty: cfg.frequency_penalty,
        presence_penalty: cfg.presence_penalty,
        max_tokens: cfg.max_new_tokens,
    }
}

/// Text of the first choice's message.
pub fn parse_completion(body: &str) -> Result<String, AttemptError> {
    let v: serde_json::Value = serde_json::from_str(body).map_err(|e| AttemptError::Malformed(e.to_string()))?;
    v.pointer("/choices/0/message/content")
        .and_then(|c| c.as_str())
        .map(str::to_string)
        .ok_or_else(|| AttemptError::Malformed("missing choices[0].message.content".into()))
}

pub trait ChatBackend: Send + Sync {
    fn attempt(&self, messages: &[ChatMessage], cfg: &BackendConfig) -> Result<String, AttemptError>;

    /// Whether calls leave the process (and belong in the audit log).
    fn is_remote(&self) -> bool {
        false
    }
}

pub struct OpenAiBackend {
    agent: ureq::Agent,
    api_key: Option<String>,
}

impl OpenAiBackend {
    /// Reads the API key from `cfg.api_key_env`; a missing key sends no auth header.
    pub fn from_env(cfg: &BackendConfig) -> Self {
        Self::with_key(cfg, std::env::var(&cfg.api_key_env).ok())
    }

    pub fn with_key(cfg: &BackendConfig, api_key: Option<String>) -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(cfg.request_timeout_secs.max(1))))
            .build()
            .into();
        Self { agent, api_key }
    }
}

impl std::fmt::Debug for OpenAiBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OpenAiBackend").field("api_key", &self.api_key.as_ref().map(|_| "<redacted>")).finish()
    }
}

impl ChatBackend for OpenAiBackend {
    fn attempt(&self, messages: &[ChatMessage], cfg: &BackendConfig) -> Result<String, AttemptError> {
        let url = match &cfg.api_version {
            Some(v) if cfg.endpoint.contains('?') => format!("{}&api-version={v}", cfg.endpoint),
            Some(v) => format!("{}?api-version={v}", cfg.endpoint),
            None => cfg.endpoint.clone(),
        };
        let mut req = self.agent.post(&url).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let body = serde_json::to_string(&request_body(messages, cfg)).expect("request serializes");
        let mut resp = match req.send(body.as_bytes()) {
            Ok(r) => r,
            Err(e) => return Err(AttemptError::Transient(e.to_string())),
        };
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(|e| AttemptError::Transient(e.to_string()))?;
        match status {
            200..=299 => parse_completion(&text),
            429 | 500..=599 => Err(AttemptError::Transient(format!("HTTP {status}: {}", truncate(&text, 200)))),
            _ => Err(AttemptError::Rejected { status, message: truncate(&text, 500) }),
        }
    }

    fn is_remote(&self) -> bool {
        true
    }
}

fn truncate(s: &str, max: usize) -> String {
    match s.char_indices().nth(max) {
        Some((i, _)) => format!("{}...", &s[..i]),
        None => s.to_string(),
    }
}

/// Canned responses keyed by request [`digest`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MockScript {
    #[serde(default)]
    pub responses: HashMap<String, String>,
    #[serde(default)]
    pub default_response: Option<String>,
}

impl MockScript {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_default(response: impl Into<String>) -> Self {
        Self { responses: HashMap::new(), default_response: Some(response.into()) }
    }

    pub fn insert(&mut self, messages: &[ChatMessage], response: impl Into<String>) -> &mut Self {
        self.responses.insert(digest(messages), response.into());
        self
    }

    pub fn lookup(&self, messages: &[ChatMessage]) -> Result<String, AttemptError> {
        let key = digest(messages);
        self.responses
            .get(&key)
            .or(self.default_response.as_ref())
            .cloned()
            .ok_or(AttemptError::Unscripted(key))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, GatewayError> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| GatewayError::InvalidConfig(format!("mock script: {e}")))
    }
}

#[derive(Debug, Clone, Default)]
pub struct MockBackend {
    script: MockScript,
}

impl MockBackend {
    pub fn new(script: MockScript) -> Self {
        Self { script }
    }
}

impl ChatBackend for MockBackend {
    fn attempt(&self, messages: &[ChatMessage], _cfg: &BackendConfig) -> Result<String, AttemptError> {
        self.script.lookup(messages)
    }
}

/// Backend computed by a closure over the messages.
pub struct FnBackend<F>(pub F);

impl<F> ChatBackend for FnBackend<F>
where
    F: Fn(&[ChatMessage]) -> Result<String, AttemptError> + Send + Sync,
{
    fn attempt(&self, messages: &[ChatMessage], _cfg: &BackendConfig) -> Result<String, AttemptError> {
        (self.0)(messages)
    }
}

struct Semaphore {
    permits: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a Semaphore);

impl Semaphore {
    fn new(n: usize) -> Self {
        Self { permits: Mutex::new(n), freed: Condvar::new() }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut p = self.permits.lock();
        while *p == 0 {
            self.freed.wait(&mut p);
        }
        *p -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.permits.lock() += 1;
        self.0.freed.notify_one();
    }
}

struct TokenBucket {
    rate: f64,
    capacity: f64,
    state: Mutex<(f64, Instant)>,
}

impl TokenBucket {
    fn new(rate: f64) -> Self {
        let capacity = rate.max(1.0);
        Self { rate, capacity, state: Mutex::new((capacity, Instant::now())) }
    }

    fn take(&self) {
        loop {
            let wait = {
                let mut s = self.state.lock();
                let now = Instant::now();
                let refill = now.duration_since(s.1).as_secs_f64() * self.rate;
                s.0 = (s.0 + refill).min(self.capacity);
                s.1 = now;
                if s.0 >= 1.0 {
                    s.0 -= 1.0;
                    return;
                }
                (1.0 - s.0) / self.rate
            };
            std::thread::sleep(Duration::from_secs_f64(wait));
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheLine {
    key: String,
    response: String,
}

struct ResponseCache {
    entries: Mutex<HashMap<String, String>>,
    file: Mutex<File>,
}

impl ResponseCache {
    fn open(path: &Path) -> Result<Self, GatewayError> {
        let mut entries = HashMap::new();
        if path.exists() {
            for line in BufReader::new(File::open(path)?).lines() {
                let line = line?;
                if let Ok(c) = serde_json::from_str::<CacheLine>(&line) {
                    entries.insert(c.key, c.response);
                }
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self { entries: Mutex::new(entries), file: Mutex::new(file) })
    }

    fn get(&self, key: &str) -> Option<String> {
        self.entries.lock().get(key).cloned()
    }

    fn put(&self, key: String, response: &str) -> Result<(), GatewayError> {
        let line = serde_json::to_string(&CacheLine { key: key.clone(), response: response.to_string() })
            .expect("cache line serializes");
        writeln!(self.file.lock(), "{line}")?;
        self.entries.lock().insert(key, response.to_string());
        Ok(())
    }
}

#[derive(Serialize)]
struct AuditLine<'a> {
    timestamp: String,
    digest: &'a str,
    model: &'a str,
    attempt: u32,
    messages: &'a [ChatMessage],
    #[serde(skip_serializing_if = "Option::is_none")]
    response: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

/// Shareable front door to a [`ChatBackend`].
pub struct Gateway {
    backend: Arc<dyn ChatBackend>,
    cfg: BackendConfig,
    permits: Semaphore,
    bucket: Option<TokenBucket>,
    cache: Option<ResponseCache>,
    audit: Option<Mutex<File>>,
}

impl Gateway {
    pub fn new(backend: Arc<dyn ChatBackend>, cfg: BackendConfig) -> Result<Self, GatewayError> {
        cfg.validate()?;
        Ok(Self {
            backend,
            permits: Semaphore::new(cfg.max_parallel),
            bucket: cfg.requests_per_second.map(TokenBucket::new),
            cfg,
            cache: None,
            audit: None,
        })
    }

    pub fn mock(script: MockScript, cfg: BackendConfig) -> Result<Self, GatewayError> {
        Self::new(Arc::new(MockBackend::new(script)), cfg)
    }

    /// Persist responses keyed by (digest, sampling parameters) in a JSONL file.
    pub fn with_cache(mut self, path: impl AsRef<Path>) -> Result<Self, GatewayError> {
        self.cache = Some(ResponseCache::open(path.as_ref())?);
        Ok(self)
    }

    /// Append every remote request/response pair to a JSONL audit log.
    pub fn with_audit_log(mut self, path: impl AsRef<Path>) -> Result<Self, GatewayError> {
        self.audit = Some(Mutex::new(OpenOptions::new().create(true).append(true).open(path)?));
        Ok(self)
    }

    pub fn config(&self) -> &BackendConfig {
        &self.cfg
    }

    fn cache_key(&self, digest: &str) -> String {
        let mut h = Sha256::new();
        h.update(digest.as_bytes());
        h.update([0u8]);
        h.update(self.cfg.sampling_key().as_bytes());
        hex::encode(h.finalize())
    }

    fn audit(&self, digest: &str, attempt: u32, messages: &[ChatMessage], outcome: &Result<String, AttemptError>) -> Result<(), GatewayError> {
        let Some(log) = &self.audit else { return Ok(()) };
        if !self.backend.is_remote() {
            return Ok(());
        }
        let (response, error) = match outcome {
            Ok(r) => (Some(r.as_str()), None),
            Err(e) => (None, Some(e.to_string())),
        };
        let line = AuditLine {
            timestamp: chrono::Utc::now().to_rfc3339(),
            digest,
            model: &self.cfg.model_name,
            attempt,
            messages,
            response,
            error,
        };
        let mut f = log.lock();
        writeln!(f, "{}", serde_json::to_string(&line).expect("audit line serializes"))?;
        f.flush()?;
        Ok(())
    }

    fn backoff(&self, attempt: u32) -> Duration {
        let cap = self.cfg.backoff_base_ms.saturating_mul(1u64 << attempt.min(20));
        if cap == 0 {
            return Duration::ZERO;
        }
        Duration::from_millis(rand::rng().random_range(0..=cap))
    }

    pub fn complete(&self, messages: &[ChatMessage]) -> Result<String, GatewayError> {
        if messages.is_empty() {
            return Err(GatewayError::EmptyMessages);
        }
        let digest = digest(messages);
        let key = self.cache.as_ref().map(|_| self.cache_key(&digest));
        if let (Some(cache), Some(key)) = (&self.cache, &key) {
            if let Some(hit) = cache.get(key) {
                return Ok(hit);
            }
        }
        let mut attempt = 0u32;
        loop {
            let outcome = {
                let _permit = self.permits.acquire();
                if let Some(bucket) = &self.bucket {
                    bucket.take();
                }
                self.backend.attempt(messages, &self.cfg)
            };
            self.audit(&digest, attempt, messages, &outcome)?;
            match outcome {
                Ok(text) => {
                    if let (Some(cache), Some(key)) = (&self.cache, key) {
                        cache.put(key, &text)?;
                    }
                    return Ok(text);
                }
                Err(AttemptError::Transient(message)) => {
                    if attempt >= self.cfg.max_retries {
                        return Err(GatewayError::Transport { attempts: attempt + 1, message });
                    }
                    let delay = self.backoff(attempt);
                    log::warn!("transient failure ({message}); retry {} in {delay:?}", attempt + 1);
                    std::thread::sleep(delay);
                    attempt += 1;
                }
                Err(AttemptError::Rejected { status, message }) => {
                    return Err(GatewayError::Request { status, message })
                }
                Err(AttemptError::Malformed(m)) => return Err(GatewayError::Malformed(m)),
                Err(AttemptError::Unscripted(d)) => return Err(GatewayError::Unscripted(d)),
            }
        }
    }
}
