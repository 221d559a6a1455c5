//! Transport for chat-completion requests.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::wire::{ChatRequest, ChatResponse};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum TransportError {
    /// Worth retrying: connection failures, timeouts, 429 and 5xx.
    #[error("transient transport failure: {0}")]
    Retriable(String),
    #[error("request rejected: {0}")]
    Fatal(String),
}

impl TransportError {
    pub fn is_retriable(&self) -> bool {
        matches!(self, TransportError::Retriable(_))
    }
}

/// Anything that answers chat-completion requests.
pub trait ChatBackend: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, TransportError>;
}

impl<T: ChatBackend + ?Sized> ChatBackend for &T {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, TransportError> {
        (**self).complete(request)
    }
}

impl<T: ChatBackend + ?Sized> ChatBackend for Box<T> {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, TransportError> {
        (**self).complete(request)
    }
}

impl<T: ChatBackend + ?Sized> ChatBackend for std::sync::Arc<T> {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, TransportError> {
        (**self).complete(request)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub initial_backoff_ms: u64,
    pub max_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 4,
            initial_backoff_ms: 250,
            max_backoff_ms: 8_000,
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `attempt` (0-based), doubling up to the cap.
    pub fn backoff(&self, attempt: u32) -> Duration {
        let factor = 1u64.checked_shl(attempt).unwrap_or(u64::MAX);
        Duration::from_millis(
            self.initial_backoff_ms
                .saturating_mul(factor)
                .min(self.max_backoff_ms),
        )
    }

    /// Runs `call` until it succeeds, fails fatally, or retries run out.
    pub fn run<T>(
        &self,
        mut call: impl FnMut() -> Result<T, TransportError>,
    ) -> Result<T, TransportError> {
        let mut attempt = 0;
        loop {
            match call() {
                Err(e) if e.is_retriable() && attempt < self.max_retries => {
                    let wait = self.backoff(attempt);
                    tracing::warn!(attempt, ?wait, error = %e, "retrying chat request");
                    std::thread::sleep(wait);
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}

/// Blocking HTTP client for an OpenAI-compatible `/chat/completions` URL.
pub struct HttpChatClient {
    url: String,
    api_key: Option<String>,
    http: reqwest::blocking::Client,
    retry: RetryPolicy,
}

impl HttpChatClient {
    pub fn new(url: impl Into<String>, api_key: Option<String>, retry: RetryPolicy) -> Self {
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(120))
            .build()
            .expect("static client configuration is valid");
        Self {
            url: url.into(),
            api_key,
            http,
            retry,
        }
    }

    pub fn url(&self) -> &str {
        &self.url
    }

    fn send_once(&self, request: &ChatRequest) -> Result<ChatResponse, TransportError> {
        let mut builder = self.http.post(&self.url).json(request);
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let resp = builder
            .send()
            .map_err(|e| TransportError::Retriable(e.to_string()))?;
        let status = resp.status();
        let body = resp
            .text()
            .map_err(|e| TransportError::Retriable(e.to_string()))?;
        if status.is_success() {
            serde_json::from_str(&body)
                .map_err(|e| TransportError::Fatal(format!("malformed response body: {e}")))
        } else if status.as_u16() == 429 || status.is_server_error() {
            Err(TransportError::Retriable(format!("HTTP {status}: {body}")))
        } else {
            Err(TransportError::Fatal(format!("HTTP {status}: {body}")))
        }
    }
}

impl ChatBackend for HttpChatClient {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, TransportError> {
        self.retry.run(|| self.send_once(request))
    }
}
