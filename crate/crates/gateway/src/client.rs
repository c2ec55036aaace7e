//! Chat-completions HTTP client with bounded retry.

use std::time::Duration;

use serde_json::{json, Value};

use crate::config::RoleConfig;
use crate::prompt::ChatMessage;
use crate::{GatewayError, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpResponse {
    pub status: u16,
    pub body: String,
}

/// Minimal POST capability, so tests can script responses without a socket.
pub trait Transport: Send + Sync {
    /// `Err` means no HTTP response arrived at all (connect failure, timeout).
    fn post(&self, url: &str, headers: &[(String, String)], body: &str) -> std::result::Result<HttpResponse, String>;
}

pub struct HttpTransport {
    client: reqwest::blocking::Client,
}

impl HttpTransport {
    pub fn new(timeout: Duration) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| GatewayError::Config(format!("http client: {e}")))?;
        Ok(Self { client })
    }
}

impl Transport for HttpTransport {
    fn post(&self, url: &str, headers: &[(String, String)], body: &str) -> std::result::Result<HttpResponse, String> {
        let mut req = self
            .client
            .post(url)
            .header("content-type", "application/json")
            .body(body.to_owned());
        for (k, v) in headers {
            req = req.header(k.as_str(), v.as_str());
        }
        let resp = req.send().map_err(|e| e.to_string())?;
        let status = resp.status().as_u16();
        let body = resp.text().map_err(|e| e.to_string())?;
        Ok(HttpResponse { status, body })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl RetryPolicy {
    pub fn new(max_retries: u32, base_delay: Duration) -> Self {
        Self { max_retries, base_delay, max_delay: Duration::from_secs(30) }
    }

    /// Wait before retry number `retry` (0-based): base · 2^retry, capped.
    pub fn delay(&self, retry: u32) -> Duration {
        let factor = 1u32.checked_shl(retry.min(16)).unwrap_or(u32::MAX);
        self.base_delay.saturating_mul(factor).min(self.max_delay)
    }
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self::new(4, Duration::from_millis(500))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completion {
    pub text: String,
    /// Attempts beyond the first that were needed.
    pub retries: u32,
}

pub struct ChatClient<T: Transport> {
    transport: T,
    retry: RetryPolicy,
}

const EXCERPT_CHARS: usize = 200;

fn excerpt(body: &str) -> String {
    let mut s: String = body.chars().take(EXCERPT_CHARS).collect();
    if body.chars().count() > EXCERPT_CHARS {
        s.push('…');
    }
    s
}

fn is_transient(status: u16) -> bool {
    status == 429 || (500..600).contains(&status)
}

/// JSON body for one request.
pub fn request_body(config: &RoleConfig, messages: &[ChatMessage]) -> Value {
    json!({
        "model": config.model,
        "messages": messages,
        "temperature": config.temperature,
        "max_tokens": config.max_tokens,
    })
}

/// Text of the first choice.
pub fn parse_completion(body: &str) -> Result<String> {
    let v: Value = serde_json::from_str(body)
        .map_err(|e| GatewayError::Protocol(format!("{e}: {}", excerpt(body))))?;
    v.get("choices")
        .and_then(|c| c.get(0))
        .and_then(|c| c.get("message"))
        .and_then(|m| m.get("content"))
        .and_then(Value::as_str)
        .map(str::to_owned)
        .ok_or_else(|| GatewayError::Protocol(format!("no choices[0].message.content in {}", excerpt(body))))
}

impl<T: Transport> ChatClient<T> {
    pub fn new(transport: T, retry: RetryPolicy) -> Self {
        Self { transport, retry }
    }

    pub fn complete(&self, config: &RoleConfig, messages: &[ChatMessage]) -> Result<Completion> {
        let mut headers = Vec::new();
        if let Some(var) = &config.api_key_env {
            let key = std::env::var(var).map_err(|_| GatewayError::MissingCredential(var.clone()))?;
            headers.push(("authorization".to_owned(), format!("Bearer {key}")));
        }
        let body = request_body(config, messages).to_string();
        let mut retries = 0;
        loop {
            let outcome = self.transport.post(&config.endpoint, &headers, &body);
            let retry_left = retries < self.retry.max_retries;
            match outcome {
                Ok(resp) if (200..300).contains(&resp.status) => {
                    return Ok(Completion { text: parse_completion(&resp.body)?, retries });
                }
                Ok(resp) if is_transient(resp.status) && retry_left => {}
                Ok(resp) => {
                    return Err(GatewayError::Status {
                        status: resp.status,
                        body: excerpt(&resp.body),
                        retries,
                    })
                }
                Err(_) if retry_left => {}
                Err(reason) => return Err(GatewayError::Transport { retries, reason }),
            }
            std::thread::sleep(self.retry.delay(retries));
            retries += 1;
        }
    }
}
