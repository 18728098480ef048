//! Chat-completion gateway: one request/response exchange per call, with a
//! fingerprint-keyed response cache, bounded concurrency, pacing, retries and
//! a record/replay provider for offline runs.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::http::{
    is_transient, HttpRequest, HttpTransport, InFlightLimit, Pacer, RetryPolicy, TransportError,
};
use crate::util::write_atomic;

pub const DEFAULT_MAX_OUTPUT_TOKENS: u32 = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model_id: String,
    pub system_text: String,
    pub user_text: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
}

impl ChatRequest {
    /// Greedy decoding (temperature 0) with the default output budget.
    pub fn new(model_id: impl Into<String>, system_text: impl Into<String>, user_text: impl Into<String>) -> Self {
        ChatRequest {
            model_id: model_id.into(),
            system_text: system_text.into(),
            user_text: user_text.into(),
            temperature: 0.0,
            max_output_tokens: DEFAULT_MAX_OUTPUT_TOKENS,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatResponse {
    pub text: String,
    pub model_id: String,
    pub usage: Usage,
    pub latency: Duration,
    pub from_cache: bool,
}

/// SHA-256 over a length-prefixed encoding of model id, temperature bits,
/// system text and user text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RequestFingerprint([u8; 32]);

impl RequestFingerprint {
    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }
}

impl fmt::Display for RequestFingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

pub fn fingerprint(req: &ChatRequest) -> RequestFingerprint {
    let mut h = Sha256::new();
    h.update(b"cotox-chat-v1");
    let mut field = |bytes: &[u8]| {
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(bytes);
    };
    field(req.model_id.as_bytes());
    // -0.0 and 0.0 are the same setting.
    let temperature = if req.temperature == 0.0 { 0.0f64 } else { req.temperature };
    field(&temperature.to_bits().to_le_bytes());
    field(req.system_text.as_bytes());
    field(req.user_text.as_bytes());
    RequestFingerprint(h.finalize().into())
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GatewayError {
    #[error("provider rejected credentials (HTTP {status}): {message}")]
    Auth { status: u16, message: String },
    #[error("provider error{}: {message}", status.map(|s| format!(" (HTTP {s})")).unwrap_or_default())]
    Provider { status: Option<u16>, message: String },
    #[error("request timed out after {attempts} attempts")]
    Timeout { attempts: u32 },
    #[error("no replay fixture for request {0}")]
    ReplayMiss(String),
    #[error("provider returned no text (finish reason {finish_reason:?})")]
    EmptyCompletion { finish_reason: String },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl GatewayError {
    pub fn is_auth(&self) -> bool {
        matches!(self, GatewayError::Auth { .. })
    }
}

/// What a provider hands back before caching and bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct ProviderReply {
    pub text: String,
    pub usage: Usage,
    pub finish_reason: Option<String>,
}

pub trait ChatProvider: Send + Sync {
    fn complete(&self, req: &ChatRequest) -> Result<ProviderReply, GatewayError>;

    /// Live providers are paced; replay is not.
    fn is_live(&self) -> bool;
}

/// On-disk fixture / cache entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fixture {
    pub model_id: String,
    pub temperature: f64,
    pub system_text: String,
    pub user_text: String,
    pub response_text: String,
}

fn fixture_path(dir: &Path, fp: &RequestFingerprint) -> PathBuf {
    dir.join(format!("{}.json", fp.to_hex()))
}

/// Writes `<fingerprint>.json` for the exchange, replacing any earlier file.
pub fn record_fixture(req: &ChatRequest, response_text: &str, dir: &Path) -> Result<PathBuf, GatewayError> {
    let fixture = Fixture {
        model_id: req.model_id.clone(),
        temperature: req.temperature,
        system_text: req.system_text.clone(),
        user_text: req.user_text.clone(),
        response_text: response_text.to_string(),
    };
    let path = fixture_path(dir, &fingerprint(req));
    let body = serde_json::to_vec_pretty(&fixture).map_err(|e| GatewayError::Io(e.to_string()))?;
    fs::create_dir_all(dir).map_err(|e| GatewayError::Io(format!("{}: {e}", dir.display())))?;
    write_atomic(&path, &body).map_err(|e| GatewayError::Io(format!("{}: {e}", path.display())))?;
    Ok(path)
}

fn read_fixture(path: &Path) -> Result<Option<Fixture>, GatewayError> {
    match fs::read_to_string(path) {
        Ok(text) => serde_json::from_str(&text)
            .map(Some)
            .map_err(|e| GatewayError::Io(format!("{}: {e}", path.display()))),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(GatewayError::Io(format!("{}: {e}", path.display()))),
    }
}

/// Serves recorded fixtures. A missing fixture is always a [`GatewayError::ReplayMiss`].
pub struct ReplayProvider {
    dir: PathBuf,
}

impl ReplayProvider {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        ReplayProvider { dir: dir.into() }
    }
}

impl ChatProvider for ReplayProvider {
    fn complete(&self, req: &ChatRequest) -> Result<ProviderReply, GatewayError> {
        let fp = fingerprint(req);
        match read_fixture(&fixture_path(&self.dir, &fp))? {
            Some(f) => Ok(ProviderReply {
                text: f.response_text,
                usage: Usage::default(),
                finish_reason: Some("replay".into()),
            }),
            None => Err(GatewayError::ReplayMiss(fp.to_hex())),
        }
    }

    fn is_live(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone)]
pub struct EndpointConfig {
    /// e.g. `https://api.openai.com/v1`; `/chat/completions` is appended.
    pub base_url: String,
    pub api_key: Option<String>,
    pub auth_header: String,
    pub auth_prefix: String,
    pub extra_headers: BTreeMap<String, String>,
    pub retry: RetryPolicy,
}

impl EndpointConfig {
    pub fn new(base_url: impl Into<String>) -> Self {
        EndpointConfig {
            base_url: base_url.into(),
            api_key: None,
            auth_header: "Authorization".into(),
            auth_prefix: "Bearer ".into(),
            extra_headers: BTreeMap::new(),
            retry: RetryPolicy::default(),
        }
    }
}

/// Speaks the common chat-completions JSON dialect.
pub struct ChatCompletionsProvider {
    config: EndpointConfig,
    transport: Arc<dyn HttpTransport>,
}

impl ChatCompletionsProvider {
    pub fn new(config: EndpointConfig, transport: Arc<dyn HttpTransport>) -> Self {
        ChatCompletionsProvider { config, transport }
    }

    fn build_request(&self, req: &ChatRequest) -> HttpRequest {
        let body = json!({
            "model": req.model_id,
            "messages": [
                {"role": "system", "content": req.system_text},
                {"role": "user", "content": req.user_text},
            ],
            "temperature": req.temperature,
            "max_tokens": req.max_output_tokens,
        });
        let url = format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'));
        let mut http = HttpRequest::post_json(url, body.to_string());
        if let Some(key) = &self.config.api_key {
            http = http.header(self.config.auth_header.clone(), format!("{}{}", self.config.auth_prefix, key));
        }
        for (k, v) in &self.config.extra_headers {
            http = http.header(k.clone(), v.clone());
        }
        http
    }
}

fn error_message(body: &str) -> String {
    serde_json::from_str::<Value>(body)
        .ok()
        .and_then(|v| v.pointer("/error/message").and_then(Value::as_str).map(String::from))
        .unwrap_or_else(|| body.chars().take(300).collect())
}

fn parse_completion(body: &str) -> Result<ProviderReply, GatewayError> {
    let v: Value = serde_json::from_str(body).map_err(|e| GatewayError::Provider {
        status: None,
        message: format!("unparseable completion body: {e}"),
    })?;
    let choice = v.pointer("/choices/0").ok_or_else(|| GatewayError::Provider {
        status: None,
        message: "completion has no choices".into(),
    })?;
    let text = choice
        .pointer("/message/content")
        .and_then(Value::as_str)
        .unwrap_or_default()
        .to_string();
    let finish_reason = choice.get("finish_reason").and_then(Value::as_str).map(String::from);
    let count = |p: &str| v.pointer(p).and_then(Value::as_u64).unwrap_or(0);
    Ok(ProviderReply {
        text,
        usage: Usage {
            prompt_tokens: count("/usage/prompt_tokens"),
            completion_tokens: count("/usage/completion_tokens"),
        },
        finish_reason,
    })
}

impl ChatProvider for ChatCompletionsProvider {
    fn complete(&self, req: &ChatRequest) -> Result<ProviderReply, GatewayError> {
        let http = self.build_request(req);
        let attempts = self.config.retry.max_attempts.max(1);
        let mut last = GatewayError::Provider {
            status: None,
            message: "no attempt made".into(),
        };
        for attempt in 1..=attempts {
            let hint = match self.transport.send(&http) {
                Ok(resp) if resp.is_success() => return parse_completion(&resp.body),
                Ok(resp) if matches!(resp.status, 401 | 403) => {
                    return Err(GatewayError::Auth {
                        status: resp.status,
                        message: error_message(&resp.body),
                    })
                }
                Ok(resp) if is_transient(resp.status) => {
                    last = GatewayError::Provider {
                        status: Some(resp.status),
                        message: error_message(&resp.body),
                    };
                    resp.retry_after()
                }
                Ok(resp) => {
                    return Err(GatewayError::Provider {
                        status: Some(resp.status),
                        message: error_message(&resp.body),
                    })
                }
                Err(TransportError::Timeout) => {
                    last = GatewayError::Timeout { attempts: attempt };
                    None
                }
                Err(e) => {
                    last = GatewayError::Provider {
                        status: None,
                        message: e.to_string(),
                    };
                    None
                }
            };
            if attempt < attempts {
                std::thread::sleep(self.config.retry.delay(attempt, hint));
            }
        }
        Err(last)
    }

    fn is_live(&self) -> bool {
        true
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GatewayStats {
    pub requests: usize,
    pub cache_hits: usize,
    pub provider_calls: usize,
}

pub struct Gateway {
    provider: Arc<dyn ChatProvider>,
    cache_dir: Option<PathBuf>,
    record_dir: Option<PathBuf>,
    limit: InFlightLimit,
    pacer: Pacer,
    requests: AtomicUsize,
    cache_hits: AtomicUsize,
    provider_calls: AtomicUsize,
}

impl Gateway {
    pub fn new(provider: Arc<dyn ChatProvider>) -> Self {
        Gateway {
            provider,
            cache_dir: None,
            record_dir: None,
            limit: InFlightLimit::new(4),
            pacer: Pacer::new(Duration::ZERO),
            requests: AtomicUsize::new(0),
            cache_hits: AtomicUsize::new(0),
            provider_calls: AtomicUsize::new(0),
        }
    }

    pub fn with_cache_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.cache_dir = Some(dir.into());
        self
    }

    /// Also write every live response as a replay fixture.
    pub fn with_record_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.record_dir = Some(dir.into());
        self
    }

    pub fn with_max_in_flight(mut self, n: usize) -> Self {
        self.limit = InFlightLimit::new(n);
        self
    }

    pub fn with_requests_per_minute(mut self, rpm: u32) -> Self {
        self.pacer = Pacer::per_minute(rpm);
        self
    }

    pub fn max_in_flight(&self) -> usize {
        self.limit.max()
    }

    pub fn stats(&self) -> GatewayStats {
        GatewayStats {
            requests: self.requests.load(Ordering::SeqCst),
            cache_hits: self.cache_hits.load(Ordering::SeqCst),
            provider_calls: self.provider_calls.load(Ordering::SeqCst),
        }
    }

    pub fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        if !(0.0..=1.0).contains(&req.temperature) {
            return Err(GatewayError::InvalidRequest(format!(
                "temperature {} outside [0, 1]",
                req.temperature
            )));
        }
        self.requests.fetch_add(1, Ordering::SeqCst);
        let fp = fingerprint(req);
        if let Some(dir) = &self.cache_dir {
            if let Some(hit) = read_fixture(&fixture_path(dir, &fp))? {
                self.cache_hits.fetch_add(1, Ordering::SeqCst);
                return Ok(ChatResponse {
                    text: hit.response_text,
                    model_id: req.model_id.clone(),
                    usage: Usage::default(),
                    latency: Duration::ZERO,
                    from_cache: true,
                });
            }
        }

        let started = Instant::now();
        let reply = {
            let _permit = self.limit.acquire();
            if self.provider.is_live() {
                self.pacer.wait();
            }
            self.provider_calls.fetch_add(1, Ordering::SeqCst);
            self.provider.complete(req)?
        };
        let latency = started.elapsed();

        if reply.text.trim().is_empty() {
            return Err(GatewayError::EmptyCompletion {
                finish_reason: reply.finish_reason.unwrap_or_else(|| "unknown".into()),
            });
        }
        if let Some(dir) = &self.cache_dir {
            record_fixture(req, &reply.text, dir)?;
        }
        if let (Some(dir), true) = (&self.record_dir, self.provider.is_live()) {
            record_fixture(req, &reply.text, dir)?;
        }
        Ok(ChatResponse {
            text: reply.text,
            model_id: req.model_id.clone(),
            usage: reply.usage,
            latency,
            from_cache: false,
        })
    }
}
