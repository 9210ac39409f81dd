//! Chat-completion clients.
//!
//! [`HttpLlm`] speaks the common `{model, messages, temperature}` wire
//! format. The stubs make runs reproducible without a model:
//!
//! * `stub:echo` replies with the last line of the prompt.
//! * `stub:oracle-demo` picks the candidate carried by the best-ranked
//!   demonstration (or the first candidate).
//! * `script:<file>` replays recorded replies in order.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use log::{debug, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_TEMPERATURE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self { role: "system".into(), content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self { role: "user".into(), content: content.into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    Level,
    Flat,
    Select,
    Describe,
}

/// Structured view of what a prompt asks; only stubs read it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptContext {
    pub kind: PromptKind,
    pub candidates: Vec<String>,
    /// Answers of the demonstrations, best-ranked first.
    pub demo_answers: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LlmRequest {
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub context: PromptContext,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LlmError {
    #[error("request timed out")]
    Timeout,
    #[error("HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("malformed response body: {0}")]
    Malformed(String),
    #[error("empty reply")]
    EmptyReply,
    #[error("script exhausted after {0} replies")]
    ScriptExhausted(usize),
    #[error("LLM configuration: {0}")]
    Config(String),
    #[error("gave up after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: usize, last: Box<LlmError> },
}

impl LlmError {
    /// Whether another attempt may succeed.
    pub fn is_retryable(&self) -> bool {
        match self {
            LlmError::Timeout | LlmError::Transport(_) => true,
            LlmError::Status { status, .. } => *status == 408 || *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

pub trait LlmClient: Send + Sync {
    fn complete(&self, request: &LlmRequest) -> Result<String, LlmError>;

    /// Short name recorded in manifests.
    fn name(&self) -> String;
}

impl<T: LlmClient + ?Sized> LlmClient for Box<T> {
    fn complete(&self, request: &LlmRequest) -> Result<String, LlmError> {
        (**self).complete(request)
    }

    fn name(&self) -> String {
        (**self).name()
    }
}

impl<T: LlmClient + ?Sized> LlmClient for std::sync::Arc<T> {
    fn complete(&self, request: &LlmRequest) -> Result<String, LlmError> {
        (**self).complete(request)
    }

    fn name(&self) -> String {
        (**self).name()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    /// Attempts after the first one.
    pub max_retries: usize,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_retries: 3, base_delay: Duration::from_millis(500), max_delay: Duration::from_secs(8) }
    }
}

impl RetryPolicy {
    /// Delay before retry number `attempt` (0-based): base * 2^attempt, capped.
    pub fn delay(&self, attempt: usize) -> Duration {
        let factor = 1u32.checked_shl(attempt.min(20) as u32).unwrap_or(u32::MAX);
        self.base_delay.saturating_mul(factor).min(self.max_delay)
    }

    /// Run `op` until it succeeds, fails permanently, or retries run out.
    pub fn run<T>(&self, mut op: impl FnMut() -> Result<T, LlmError>) -> Result<T, LlmError> {
        let mut attempt = 0;
        loop {
            match op() {
                Ok(v) => return Ok(v),
                Err(e) if e.is_retryable() && attempt < self.max_retries => {
                    let wait = self.delay(attempt);
                    warn!("LLM call failed ({e}); retry {} of {} in {:?}", attempt + 1, self.max_retries, wait);
                    std::thread::sleep(wait);
                    attempt += 1;
                }
                Err(e) if attempt > 0 => {
                    return Err(LlmError::RetriesExhausted { attempts: attempt + 1, last: Box::new(e) })
                }
                Err(e) => return Err(e),
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HttpLlmConfig {
    pub url: String,
    pub model: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
    pub retry: RetryPolicy,
}

impl HttpLlmConfig {
    pub const URL_VAR: &'static str = "HTICL_LLM_URL";
    pub const MODEL_VAR: &'static str = "HTICL_LLM_MODEL";
    pub const KEY_VAR: &'static str = "HTICL_LLM_API_KEY";
    pub const TIMEOUT_VAR: &'static str = "HTICL_LLM_TIMEOUT_SECS";
    pub const RETRIES_VAR: &'static str = "HTICL_LLM_MAX_RETRIES";

    pub fn from_env() -> Result<Self, LlmError> {
        let url = std::env::var(Self::URL_VAR)
            .map_err(|_| LlmError::Config(format!("{} is not set", Self::URL_VAR)))?;
        let parse = |var: &str, default: u64| -> Result<u64, LlmError> {
            match std::env::var(var) {
                Ok(v) => v.parse().map_err(|_| LlmError::Config(format!("{var}={v} is not a number"))),
                Err(_) => Ok(default),
            }
        };
        Ok(Self {
            url,
            model: std::env::var(Self::MODEL_VAR).unwrap_or_else(|_| "gpt-3.5-turbo".into()),
            api_key: std::env::var(Self::KEY_VAR).ok(),
            timeout: Duration::from_secs(parse(Self::TIMEOUT_VAR, 60)?),
            retry: RetryPolicy { max_retries: parse(Self::RETRIES_VAR, 3)? as usize, ..Default::default() },
        })
    }
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    temperature: f64,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
}

#[derive(Deserialize)]
struct WireMessage {
    content: Option<String>,
}

pub struct HttpLlm {
    cfg: HttpLlmConfig,
    client: reqwest::blocking::Client,
}

impl HttpLlm {
    pub fn new(cfg: HttpLlmConfig) -> Result<Self, LlmError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(cfg.timeout)
            .build()
            .map_err(|e| LlmError::Config(e.to_string()))?;
        Ok(Self { cfg, client })
    }

    fn attempt(&self, request: &LlmRequest) -> Result<String, LlmError> {
        let body = WireRequest { model: &self.cfg.model, messages: &request.messages, temperature: request.temperature };
        let mut req = self.client.post(&self.cfg.url).json(&body);
        if let Some(key) = &self.cfg.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(classify_transport)?;
        let status = resp.status();
        let text = resp.text().map_err(classify_transport)?;
        if !status.is_success() {
            return Err(LlmError::Status { status: status.as_u16(), body: text.chars().take(500).collect() });
        }
        let parsed: WireResponse = serde_json::from_str(&text).map_err(|e| LlmError::Malformed(e.to_string()))?;
        parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| LlmError::Malformed("no choices[0].message.content".into()))
    }
}

fn classify_transport(e: reqwest::Error) -> LlmError {
    if e.is_timeout() {
        LlmError::Timeout
    } else {
        LlmError::Transport(e.to_string())
    }
}

impl LlmClient for HttpLlm {
    fn complete(&self, request: &LlmRequest) -> Result<String, LlmError> {
        self.cfg.retry.run(|| self.attempt(request))
    }

    fn name(&self) -> String {
        format!("http:{}", self.cfg.model)
    }
}

/// Replies with the last line of the user message.
#[derive(Debug, Default, Clone)]
pub struct EchoLlm;

impl LlmClient for EchoLlm {
    fn complete(&self, request: &LlmRequest) -> Result<String, LlmError> {
        let last = request.messages.last().map(|m| m.content.as_str()).unwrap_or_default();
        Ok(last.rsplit('\n').next().unwrap_or_default().to_string())
    }

    fn name(&self) -> String {
        "stub:echo".into()
    }
}

/// Answers like the best-ranked demonstration whose answer is a candidate.
#[derive(Debug, Default, Clone)]
pub struct OracleDemoLlm;

impl LlmClient for OracleDemoLlm {
    fn complete(&self, request: &LlmRequest) -> Result<String, LlmError> {
        let ctx = &request.context;
        match ctx.kind {
            PromptKind::Describe => EchoLlm.complete(request),
            _ => ctx
                .demo_answers
                .iter()
                .find(|a| ctx.candidates.contains(a))
                .or_else(|| ctx.candidates.first())
                .cloned()
                .ok_or(LlmError::EmptyReply),
        }
    }

    fn name(&self) -> String {
        "stub:oracle-demo".into()
    }
}

/// Replays a fixed list of replies.
#[derive(Debug)]
pub struct ScriptedLlm {
    replies: Vec<String>,
    next: Mutex<usize>,
    source: String,
}

impl ScriptedLlm {
    pub fn new(replies: Vec<String>) -> Self {
        Self { replies, next: Mutex::new(0), source: "inline".into() }
    }

    /// Each non-empty line is either an audit record with a `response` field
    /// or a JSON string.
    pub fn parse(source: &str) -> Result<Vec<String>, LlmError> {
        source
            .lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .filter_map(|(i, line)| {
                let value: serde_json::Value = match serde_json::from_str(line) {
                    Ok(v) => v,
                    Err(e) => return Some(Err(LlmError::Config(format!("script line {}: {e}", i + 1)))),
                };
                match value {
                    serde_json::Value::String(s) => Some(Ok(s)),
                    serde_json::Value::Object(o) => match o.get("response") {
                        Some(serde_json::Value::String(s)) => Some(Ok(s.clone())),
                        // failed calls in an audit log carry no reply
                        Some(serde_json::Value::Null) | None if o.contains_key("error") => None,
                        _ => Some(Err(LlmError::Config(format!("script line {}: no `response`", i + 1)))),
                    },
                    _ => Some(Err(LlmError::Config(format!("script line {}: expected string or object", i + 1)))),
                }
            })
            .collect()
    }

    pub fn from_file(path: &Path) -> Result<Self, LlmError> {
        let text = std::fs::read_to_string(path).map_err(|e| LlmError::Config(format!("{}: {e}", path.display())))?;
        Ok(Self { replies: Self::parse(&text)?, next: Mutex::new(0), source: path.display().to_string() })
    }
}

impl LlmClient for ScriptedLlm {
    fn complete(&self, _request: &LlmRequest) -> Result<String, LlmError> {
        let mut next = self.next.lock().expect("script lock");
        let reply = self.replies.get(*next).cloned().ok_or(LlmError::ScriptExhausted(self.replies.len()))?;
        *next += 1;
        Ok(reply)
    }

    fn name(&self) -> String {
        format!("script:{}", self.source)
    }
}

/// One line of the audit log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub seq: u64,
    pub unix_ms: u128,
    pub client: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub response: Option<String>,
    pub error: Option<String>,
    pub elapsed_ms: u128,
}

/// Appends every request and response to a line-delimited log.
pub struct AuditedLlm<C> {
    inner: C,
    log: Mutex<(File, u64)>,
    path: PathBuf,
}

impl<C: LlmClient> AuditedLlm<C> {
    pub fn new(inner: C, path: impl Into<PathBuf>) -> std::io::Result<Self> {
        let path = path.into();
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(Self { inner, log: Mutex::new((file, 0)), path })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

impl<C: LlmClient> LlmClient for AuditedLlm<C> {
    fn complete(&self, request: &LlmRequest) -> Result<String, LlmError> {
        let started = Instant::now();
        let result = self.inner.complete(request);
        let record = AuditRecord {
            seq: 0,
            unix_ms: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0),
            client: self.inner.name(),
            messages: request.messages.clone(),
            temperature: request.temperature,
            response: result.as_ref().ok().cloned(),
            error: result.as_ref().err().map(ToString::to_string),
            elapsed_ms: started.elapsed().as_millis(),
        };
        let mut guard = self.log.lock().expect("audit lock");
        let record = AuditRecord { seq: guard.1, ..record };
        guard.1 += 1;
        let line = serde_json::to_string(&record).expect("audit records serialize");
        if let Err(e) = writeln!(guard.0, "{line}") {
            warn!("audit log {}: {e}", self.path.display());
        }
        debug!("LLM call {} -> {:?}", record.seq, record.response);
        result
    }

    fn name(&self) -> String {
        self.inner.name()
    }
}

/// Caps the number of concurrent requests to the inner client.
pub struct BoundedLlm<C> {
    inner: C,
    limit: usize,
    in_flight: Mutex<usize>,
    freed: Condvar,
}

impl<C: LlmClient> BoundedLlm<C> {
    pub fn new(inner: C, limit: usize) -> Self {
        Self { inner, limit: limit.max(1), in_flight: Mutex::new(0), freed: Condvar::new() }
    }
}

impl<C: LlmClient> LlmClient for BoundedLlm<C> {
    fn complete(&self, request: &LlmRequest) -> Result<String, LlmError> {
        {
            let mut n = self.in_flight.lock().expect("limiter lock");
            while *n >= self.limit {
                n = self.freed.wait(n).expect("limiter lock");
            }
            *n += 1;
        }
        let result = self.inner.complete(request);
        *self.in_flight.lock().expect("limiter lock") -= 1;
        self.freed.notify_one();
        result
    }

    fn name(&self) -> String {
        self.inner.name()
    }
}

/// Build a client from a selector: `stub:echo`, `stub:oracle-demo`,
/// `script:<path>` or `http` (configured from the environment).
pub fn client_from_selector(selector: &str) -> Result<Box<dyn LlmClient>, LlmError> {
    match selector {
        "stub:echo" => Ok(Box::new(EchoLlm)),
        "stub:oracle-demo" => Ok(Box::new(OracleDemoLlm)),
        "http" => Ok(Box::new(HttpLlm::new(HttpLlmConfig::from_env()?)?)),
        s => match s.strip_prefix("script:") {
            Some(path) => Ok(Box::new(ScriptedLlm::from_file(Path::new(path))?)),
            None => Err(LlmError::Config(format!("unknown LLM selector `{s}`"))),
        },
    }
}
