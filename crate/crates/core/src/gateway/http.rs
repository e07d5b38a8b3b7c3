//! HTTPS JSON provider speaking the OpenAI-compatible chat completions shape.
//!
//! Credentials are read from the environment variable named in the config at
//! request time and never stored in the config itself.

use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{CompletionRequest, LanguageModel};
use crate::error::GatewayError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProviderConfig {
    pub endpoint_url: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    /// Model used when a request does not name one.
    #[serde(default)]
    pub model: String,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    /// 0 disables rate limiting.
    #[serde(default)]
    pub requests_per_minute: u32,
    #[serde(default = "default_backoff_ms")]
    pub initial_backoff_ms: u64,
}

fn default_timeout_secs() -> u64 {
    60
}
fn default_max_retries() -> u32 {
    3
}
fn default_backoff_ms() -> u64 {
    500
}

impl ProviderConfig {
    pub fn new(endpoint_url: impl Into<String>, api_key_env: impl Into<String>) -> Self {
        Self {
            endpoint_url: endpoint_url.into(),
            api_key_env: api_key_env.into(),
            model: String::new(),
            timeout_secs: default_timeout_secs(),
            max_retries: default_max_retries(),
            requests_per_minute: 0,
            initial_backoff_ms: default_backoff_ms(),
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.endpoint_url.is_empty() {
            return Err(GatewayError::Config("endpoint_url is empty".into()));
        }
        if self.api_key_env.is_empty() {
            return Err(GatewayError::Config("api_key_env is empty".into()));
        }
        Ok(())
    }

    fn api_key(&self) -> Result<String, GatewayError> {
        std::env::var(&self.api_key_env).map_err(|_| {
            GatewayError::Config(format!(
                "environment variable {} is not set",
                self.api_key_env
            ))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransportFailure {
    /// Timeouts, connection resets, 429 and 5xx responses.
    Transient(String),
    /// 401/403: retrying will not help.
    Auth(String),
    /// Any other non-success response or an unreadable body.
    Fatal(String),
}

pub trait Transport: Send + Sync {
    fn post_json(
        &self,
        url: &str,
        bearer: &str,
        body: &Value,
        timeout: Duration,
    ) -> Result<Value, TransportFailure>;
}

pub struct ReqwestTransport {
    client: reqwest::blocking::Client,
}

impl ReqwestTransport {
    pub fn new() -> Result<Self, GatewayError> {
        let client = reqwest::blocking::Client::builder()
            .build()
            .map_err(|e| GatewayError::Config(format!("http client: {e}")))?;
        Ok(Self { client })
    }
}

impl Transport for ReqwestTransport {
    fn post_json(
        &self,
        url: &str,
        bearer: &str,
        body: &Value,
        timeout: Duration,
    ) -> Result<Value, TransportFailure> {
        let resp = self
            .client
            .post(url)
            .timeout(timeout)
            .bearer_auth(bearer)
            .header(reqwest::header::CONTENT_TYPE, "application/json")
            .body(body.to_string())
            .send()
            .map_err(|e| TransportFailure::Transient(e.without_url().to_string()))?;
        let status = resp.status();
        let text = resp
            .text()
            .map_err(|e| TransportFailure::Transient(e.without_url().to_string()))?;
        if status == reqwest::StatusCode::UNAUTHORIZED || status == reqwest::StatusCode::FORBIDDEN {
            return Err(TransportFailure::Auth(format!("HTTP {status}")));
        }
        if status == reqwest::StatusCode::TOO_MANY_REQUESTS || status.is_server_error() {
            return Err(TransportFailure::Transient(format!("HTTP {status}")));
        }
        if !status.is_success() {
            return Err(TransportFailure::Fatal(format!("HTTP {status}")));
        }
        serde_json::from_str(&text).map_err(|e| TransportFailure::Fatal(format!("bad JSON body: {e}")))
    }
}

/// Token bucket allowing `per_minute` requests per minute with bursts up to
/// the same amount.
pub struct RateLimiter {
    per_minute: u32,
    state: Mutex<(f64, Instant)>,
}

impl RateLimiter {
    pub fn new(per_minute: u32) -> Self {
        Self {
            per_minute,
            state: Mutex::new((per_minute as f64, Instant::now())),
        }
    }

    /// Blocks until a request may be sent.
    pub fn acquire(&self) {
        if self.per_minute == 0 {
            return;
        }
        let rate = self.per_minute as f64 / 60.0;
        loop {
            let wait = {
                let mut guard = self.state.lock().unwrap_or_else(|e| e.into_inner());
                let (tokens, last) = &mut *guard;
                let now = Instant::now();
                *tokens = (*tokens + now.duration_since(*last).as_secs_f64() * rate)
                    .min(self.per_minute as f64);
                *last = now;
                if *tokens >= 1.0 {
                    *tokens -= 1.0;
                    return;
                }
                (1.0 - *tokens) / rate
            };
            std::thread::sleep(Duration::from_secs_f64(wait));
        }
    }

    pub fn try_acquire(&self) -> bool {
        if self.per_minute == 0 {
            return true;
        }
        let rate = self.per_minute as f64 / 60.0;
        let mut guard = self.state.lock().unwrap_or_else(|e| e.into_inner());
        let (tokens, last) = &mut *guard;
        let now = Instant::now();
        *tokens = (*tokens + now.duration_since(*last).as_secs_f64() * rate).min(self.per_minute as f64);
        *last = now;
        if *tokens >= 1.0 {
            *tokens -= 1.0;
            true
        } else {
            false
        }
    }
}

pub struct HttpProvider<T: Transport = ReqwestTransport> {
    config: ProviderConfig,
    transport: T,
    limiter: RateLimiter,
}

impl HttpProvider<ReqwestTransport> {
    pub fn new(config: ProviderConfig) -> Result<Self, GatewayError> {
        Self::with_transport(config, ReqwestTransport::new()?)
    }
}

impl<T: Transport> HttpProvider<T> {
    pub fn with_transport(config: ProviderConfig, transport: T) -> Result<Self, GatewayError> {
        config.validate()?;
        let limiter = RateLimiter::new(config.requests_per_minute);
        Ok(Self {
            config,
            transport,
            limiter,
        })
    }

    pub fn config(&self) -> &ProviderConfig {
        &self.config
    }

    /// Posts `body` with bounded exponential backoff on transient failures.
    pub fn post_with_retries(&self, body: &Value) -> Result<Value, GatewayError> {
        let key = self.config.api_key()?;
        let timeout = Duration::from_secs(self.config.timeout_secs);
        let mut attempts = 0;
        loop {
            attempts += 1;
            self.limiter.acquire();
            match self
                .transport
                .post_json(&self.config.endpoint_url, &key, body, timeout)
            {
                Ok(v) => return Ok(v),
                Err(TransportFailure::Auth(msg)) => {
                    return Err(GatewayError::Config(format!("authentication rejected: {msg}")))
                }
                Err(TransportFailure::Fatal(message)) => {
                    return Err(GatewayError::Transport { attempts, message })
                }
                Err(TransportFailure::Transient(message)) => {
                    if attempts > self.config.max_retries {
                        return Err(GatewayError::Transport { attempts, message });
                    }
                    let backoff = self.config.initial_backoff_ms.saturating_mul(1 << (attempts - 1).min(16));
                    log::warn!("transient provider failure ({message}); retry {attempts} in {backoff} ms");
                    std::thread::sleep(Duration::from_millis(backoff));
                }
            }
        }
    }

    fn model_for<'a>(&'a self, req: &'a CompletionRequest) -> &'a str {
        if req.model_id.is_empty() {
            &self.config.model
        } else {
            &req.model_id
        }
    }
}

impl<T: Transport> LanguageModel for HttpProvider<T> {
    fn complete(&self, req: &CompletionRequest) -> Result<String, GatewayError> {
        req.validate()?;
        let body = json!({
            "model": self.model_for(req),
            "messages": [{"role": "user", "content": req.prompt}],
            "temperature": req.temperature,
            "max_tokens": req.max_output_tokens,
        });
        let resp = self.post_with_retries(&body)?;
        resp.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| GatewayError::Transport {
                attempts: 1,
                message: "response has no choices[0].message.content".into(),
            })
    }
}
