//! Chat-completion client for vision LLM endpoints.
//!
//! Requests use the widely implemented `/chat/completions` JSON protocol with
//! the image inlined as a base64 PNG data URL. Transport failures (connection
//! errors, 429, 5xx) are retried with capped exponential backoff; replies that
//! fail to parse are retried on a separate budget. Successful replies are
//! cached by a hash of the full request.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};
use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const DEFAULT_TOKEN_ENV: &str = "QGROUND_LLM_TOKEN";

fn default_token_env() -> String {
    DEFAULT_TOKEN_ENV.to_string()
}
fn default_timeout() -> u64 {
    60
}
fn default_retries() -> u32 {
    2
}
fn default_transport_retries() -> u32 {
    3
}
fn default_concurrency() -> usize {
    4
}
fn default_initial_backoff() -> u64 {
    1000
}
fn default_max_backoff() -> u64 {
    30_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LlmEndpointConfig {
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token.
    #[serde(default = "default_token_env")]
    pub token_env: String,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    /// Extra attempts after a reply fails to parse.
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    /// Extra attempts after a retryable transport failure.
    #[serde(default = "default_transport_retries")]
    pub max_transport_retries: u32,
    #[serde(default = "default_concurrency")]
    pub max_concurrency: usize,
    #[serde(default = "default_initial_backoff")]
    pub initial_backoff_ms: u64,
    #[serde(default = "default_max_backoff")]
    pub max_backoff_ms: u64,
    #[serde(default)]
    pub temperature: Option<f64>,
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    /// JSONL file receiving one record per request/response exchange.
    #[serde(default)]
    pub transcript: Option<PathBuf>,
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("parsing endpoint config: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("invalid endpoint config: {0}")]
    Invalid(String),
}

impl LlmEndpointConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model: model.into(),
            token_env: default_token_env(),
            timeout_secs: default_timeout(),
            max_retries: default_retries(),
            max_transport_retries: default_transport_retries(),
            max_concurrency: default_concurrency(),
            initial_backoff_ms: default_initial_backoff(),
            max_backoff_ms: default_max_backoff(),
            temperature: None,
            cache_dir: None,
            transcript: None,
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self, ConfigError> {
        let c: Self = toml::from_str(s)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let s = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&s)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.max_concurrency == 0 {
            return Err(ConfigError::Invalid("max_concurrency must be at least 1".into()));
        }
        if self.base_url.trim().is_empty() {
            return Err(ConfigError::Invalid("base_url is empty".into()));
        }
        if self.model.trim().is_empty() {
            return Err(ConfigError::Invalid("model is empty".into()));
        }
        if self.max_backoff_ms < self.initial_backoff_ms {
            return Err(ConfigError::Invalid("max_backoff_ms is below initial_backoff_ms".into()));
        }
        Ok(())
    }

    /// Delay before retry number `attempt` (0-based).
    pub fn backoff(&self, attempt: u32) -> Duration {
        let factor = 1u64.checked_shl(attempt.min(32)).unwrap_or(u64::MAX);
        Duration::from_millis(self.initial_backoff_ms.saturating_mul(factor).min(self.max_backoff_ms))
    }
}

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("auth token variable {0} is not set")]
    AuthConfig(String),
    #[error("endpoint rejected credentials (HTTP {0})")]
    Auth(u16),
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("request rejected (HTTP {status}): {body}")]
    Rejected { status: u16, body: String },
    #[error("gave up after {attempts} attempts; last error: {last}")]
    ExhaustedRetries { attempts: u32, last: String },
    #[error("endpoint returned an empty reply")]
    EmptyReply,
    #[error("transcript: {0}")]
    Transcript(std::io::Error),
}

impl LlmError {
    fn is_retryable(&self) -> bool {
        matches!(self, LlmError::Transport(_))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChatRequest {
    pub system: Option<String>,
    pub user: String,
    pub image_png: Option<Vec<u8>>,
}

impl ChatRequest {
    fn cache_key(&self, model: &str) -> String {
        let mut h = Sha256::new();
        for part in [model.as_bytes(), self.system.as_deref().unwrap_or("").as_bytes(), self.user.as_bytes()] {
            h.update((part.len() as u64).to_le_bytes());
            h.update(part);
        }
        if let Some(img) = &self.image_png {
            h.update(img);
        }
        format!("{:x}", h.finalize())
    }
}

/// One round trip to a model. Implementations classify failures into
/// [`LlmError`] variants; only `Transport` is retried.
pub trait ChatBackend: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<String, LlmError>;
}

pub struct HttpChatBackend {
    agent: ureq::Agent,
    url: String,
    model: String,
    token: String,
    temperature: Option<f64>,
}

impl HttpChatBackend {
    /// Reads the token from the configured environment variable; fails
    /// before any network activity when it is unset.
    pub fn new(config: &LlmEndpointConfig) -> Result<Self, LlmError> {
        let token = std::env::var(&config.token_env)
            .ok()
            .filter(|t| !t.is_empty())
            .ok_or_else(|| LlmError::AuthConfig(config.token_env.clone()))?;
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self {
            agent,
            url: format!("{}/chat/completions", config.base_url.trim_end_matches('/')),
            model: config.model.clone(),
            token,
            temperature: config.temperature,
        })
    }

    fn body(&self, request: &ChatRequest) -> Value {
        let mut messages = Vec::new();
        if let Some(sys) = &request.system {
            messages.push(json!({"role": "system", "content": sys}));
        }
        let mut content = vec![json!({"type": "text", "text": request.user})];
        if let Some(png) = &request.image_png {
            let b64 = base64::engine::general_purpose::STANDARD.encode(png);
            content.push(json!({"type": "image_url", "image_url": {"url": format!("data:image/png;base64,{b64}")}}));
        }
        messages.push(json!({"role": "user", "content": content}));
        let mut body = json!({"model": self.model, "messages": messages});
        if let Some(t) = self.temperature {
            body["temperature"] = json!(t);
        }
        body
    }
}

impl ChatBackend for HttpChatBackend {
    fn complete(&self, request: &ChatRequest) -> Result<String, LlmError> {
        let mut resp = self
            .agent
            .post(&self.url)
            .header("Authorization", &format!("Bearer {}", self.token))
            .send_json(self.body(request))
            .map_err(|e| LlmError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| LlmError::Transport(e.to_string()))?;
        match status {
            200..=299 => {}
            401 | 403 => return Err(LlmError::Auth(status)),
            429 | 500..=599 => return Err(LlmError::Transport(format!("HTTP {status}"))),
            _ => return Err(LlmError::Rejected { status, body: text }),
        }
        let v: Value = serde_json::from_str(&text).map_err(|e| LlmError::Transport(format!("malformed body: {e}")))?;
        v.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| LlmError::Transport("reply has no choices[0].message.content".into()))
    }
}

/// Content-addressed reply cache, in memory and optionally on disk.
#[derive(Default)]
pub struct ResponseCache {
    dir: Option<PathBuf>,
    mem: RwLock<HashMap<String, String>>,
}

impl ResponseCache {
    pub fn new(dir: Option<PathBuf>) -> Self {
        Self {
            dir,
            mem: RwLock::default(),
        }
    }

    pub fn get(&self, key: &str) -> Option<String> {
        if let Some(v) = self.mem.read().expect("cache lock").get(key) {
            return Some(v.clone());
        }
        let v = fs::read_to_string(self.dir.as_ref()?.join(key)).ok()?;
        self.mem.write().expect("cache lock").insert(key.to_string(), v.clone());
        Some(v)
    }

    pub fn put(&self, key: &str, value: &str) {
        let mut mem = self.mem.write().expect("cache lock");
        if let Some(dir) = &self.dir {
            // Write-then-rename so concurrent readers never see a partial entry.
            let res = fs::create_dir_all(dir).and_then(|_| {
                let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
                tmp.write_all(value.as_bytes())?;
                tmp.persist(dir.join(key)).map_err(|e| e.error)?;
                Ok(())
            });
            if let Err(e) = res {
                tracing::warn!("cache write failed: {e}");
            }
        }
        mem.insert(key.to_string(), value.to_string());
    }
}

#[derive(Serialize)]
struct TranscriptRecord<'a> {
    timestamp: String,
    model: &'a str,
    cache_key: &'a str,
    attempt: u32,
    system: Option<&'a str>,
    user: &'a str,
    image_bytes: usize,
    reply: Option<&'a str>,
    error: Option<String>,
}

/// Result of a parsed request: the value and how many model calls it took
/// (0 when served from cache).
#[derive(Debug, Clone)]
pub struct Parsed<T> {
    pub value: T,
    pub reply: String,
    pub calls: u32,
}

pub struct LlmClient {
    config: LlmEndpointConfig,
    backend: Box<dyn ChatBackend>,
    cache: ResponseCache,
    transcript: Option<Mutex<File>>,
}

impl LlmClient {
    pub fn from_config(config: LlmEndpointConfig) -> Result<Self, LlmError> {
        let backend = HttpChatBackend::new(&config)?;
        Self::with_backend(config, Box::new(backend))
    }

    pub fn with_backend(config: LlmEndpointConfig, backend: Box<dyn ChatBackend>) -> Result<Self, LlmError> {
        let transcript = match &config.transcript {
            Some(p) => Some(Mutex::new(
                OpenOptions::new().create(true).append(true).open(p).map_err(LlmError::Transcript)?,
            )),
            None => None,
        };
        Ok(Self {
            cache: ResponseCache::new(config.cache_dir.clone()),
            config,
            backend,
            transcript,
        })
    }

    pub fn config(&self) -> &LlmEndpointConfig {
        &self.config
    }

    fn log(&self, key: &str, attempt: u32, req: &ChatRequest, result: &Result<String, LlmError>) {
        let Some(t) = &self.transcript else { return };
        let rec = TranscriptRecord {
            timestamp: chrono::Utc::now().to_rfc3339(),
            model: &self.config.model,
            cache_key: key,
            attempt,
            system: req.system.as_deref(),
            user: &req.user,
            image_bytes: req.image_png.as_ref().map_or(0, Vec::len),
            reply: result.as_ref().ok().map(String::as_str),
            error: result.as_ref().err().map(ToString::to_string),
        };
        let line = serde_json::to_string(&rec).expect("plain record");
        let mut f = t.lock().expect("transcript lock");
        if let Err(e) = writeln!(f, "{line}") {
            tracing::warn!("transcript write failed: {e}");
        }
    }

    /// One logical call with transport retries; no caching. Returns the
    /// reply and the number of backend calls made.
    fn call(&self, key: &str, req: &ChatRequest) -> Result<(String, u32), LlmError> {
        let mut attempt = 0;
        loop {
            let result = self.backend.complete(req);
            self.log(key, attempt, req, &result);
            attempt += 1;
            match result {
                Ok(r) => return Ok((r, attempt)),
                Err(e) if e.is_retryable() && attempt <= self.config.max_transport_retries => {
                    let wait = self.config.backoff(attempt - 1);
                    tracing::debug!("transport error ({e}); retrying in {wait:?}");
                    std::thread::sleep(wait);
                }
                Err(e) if e.is_retryable() => {
                    return Err(LlmError::ExhaustedRetries {
                        attempts: attempt,
                        last: e.to_string(),
                    })
                }
                Err(e) => return Err(e),
            }
        }
    }

    /// Send `req` and return the reply verbatim; a blank reply is an error.
    pub fn request_text(&self, req: &ChatRequest) -> Result<Parsed<String>, LlmError> {
        let key = req.cache_key(&self.config.model);
        if let Some(reply) = self.cache.get(&key) {
            return Ok(Parsed { value: reply.clone(), reply, calls: 0 });
        }
        let (reply, calls) = self.call(&key, req)?;
        if reply.trim().is_empty() {
            return Err(LlmError::EmptyReply);
        }
        self.cache.put(&key, &reply);
        Ok(Parsed { value: reply.clone(), reply, calls })
    }

    /// Send `req` and parse the reply, re-asking up to `max_retries` times
    /// when parsing fails. Only replies that parse are cached.
    pub fn request_parsed<T, E: std::fmt::Display>(
        &self,
        req: &ChatRequest,
        parse: impl Fn(&str) -> Result<T, E>,
    ) -> Result<Parsed<T>, LlmError> {
        let key = req.cache_key(&self.config.model);
        if let Some(reply) = self.cache.get(&key) {
            if let Ok(value) = parse(&reply) {
                return Ok(Parsed { value, reply, calls: 0 });
            }
        }
        let mut calls = 0;
        let mut parse_attempt = 0;
        loop {
            let (reply, n) = self.call(&key, req)?;
            calls += n;
            match parse(&reply) {
                Ok(value) => {
                    self.cache.put(&key, &reply);
                    return Ok(Parsed { value, reply, calls });
                }
                Err(e) if parse_attempt < self.config.max_retries => {
                    tracing::debug!("unusable reply ({e}); asking again");
                    std::thread::sleep(self.config.backoff(parse_attempt));
                    parse_attempt += 1;
                }
                Err(e) => {
                    return Err(LlmError::ExhaustedRetries {
                        attempts: parse_attempt + 1,
                        last: e.to_string(),
                    })
                }
            }
        }
    }
}
