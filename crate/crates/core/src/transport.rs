//! JSON-over-HTTP transport with retry, plus cassette record/replay for tests
//! and offline runs.

use std::fs;
use std::path::Path;
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransportError {
    #[error("HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("network error: {0}")]
    Network(String),
    #[error("invalid response body: {0}")]
    Decode(String),
    #[error("no recorded interaction for POST {0}")]
    NotRecorded(String),
}

impl TransportError {
    /// Failures worth retrying: network errors, 429 and 5xx.
    pub fn is_retryable(&self) -> bool {
        match self {
            TransportError::Network(_) => true,
            TransportError::Status { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

pub trait Transport: Send + Sync {
    fn post_json(&self, url: &str, body: &Value) -> Result<Value, TransportError>;
}

/// Exponential backoff with jitter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 3,
            base_delay: Duration::from_millis(250),
            max_delay: Duration::from_secs(8),
        }
    }
}

impl RetryPolicy {
    pub fn no_delay(max_attempts: u32) -> Self {
        RetryPolicy {
            max_attempts,
            base_delay: Duration::ZERO,
            max_delay: Duration::ZERO,
        }
    }

    /// Delay before attempt `attempt + 1`, with full jitter in `[d/2, d]`.
    pub fn delay(&self, attempt: u32) -> Duration {
        let exp = self
            .base_delay
            .saturating_mul(1u32 << attempt.min(16))
            .min(self.max_delay);
        let jitter: f64 = rand::thread_rng().gen_range(0.5..=1.0);
        exp.mul_f64(jitter)
    }

    /// Runs `op`, retrying retryable failures.
    pub fn run<T>(&self, mut op: impl FnMut() -> Result<T, TransportError>) -> Result<T, TransportError> {
        let mut attempt = 0;
        loop {
            match op() {
                Ok(v) => return Ok(v),
                Err(e) if e.is_retryable() && attempt + 1 < self.max_attempts => {
                    log::debug!("attempt {} failed ({e}); retrying", attempt + 1);
                    thread::sleep(self.delay(attempt));
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }
}

/// Blocking HTTP client.
pub struct HttpTransport {
    client: reqwest::blocking::Client,
    api_key: Option<String>,
}

impl HttpTransport {
    pub fn new(api_key: Option<String>, timeout: Duration) -> Result<Self, TransportError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| TransportError::Network(e.to_string()))?;
        Ok(HttpTransport { client, api_key })
    }
}

impl Transport for HttpTransport {
    fn post_json(&self, url: &str, body: &Value) -> Result<Value, TransportError> {
        let mut req = self.client.post(url).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| TransportError::Network(e.to_string()))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| TransportError::Network(e.to_string()))?;
        if !status.is_success() {
            return Err(TransportError::Status {
                status: status.as_u16(),
                body: text,
            });
        }
        serde_json::from_str(&text).map_err(|e| TransportError::Decode(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interaction {
    pub url: String,
    pub request: Value,
    pub response: Value,
}

/// Replays recorded interactions, matched on URL and request body.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Cassette {
    pub interactions: Vec<Interaction>,
}

impl Cassette {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, TransportError> {
        let text = fs::read_to_string(path.as_ref())
            .map_err(|e| TransportError::Decode(format!("{}: {e}", path.as_ref().display())))?;
        serde_json::from_str(&text).map_err(|e| TransportError::Decode(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")
    }
}

impl Transport for Cassette {
    fn post_json(&self, url: &str, body: &Value) -> Result<Value, TransportError> {
        self.interactions
            .iter()
            .find(|i| i.url == url && &i.request == body)
            .map(|i| i.response.clone())
            .ok_or_else(|| TransportError::NotRecorded(url.to_string()))
    }
}

/// Forwards to an inner transport and records every successful exchange.
pub struct Recorder<T> {
    inner: T,
    recorded: Mutex<Vec<Interaction>>,
}

impl<T: Transport> Recorder<T> {
    pub fn new(inner: T) -> Self {
        Recorder {
            inner,
            recorded: Mutex::new(Vec::new()),
        }
    }

    pub fn cassette(&self) -> Cassette {
        Cassette {
            interactions: self.recorded.lock().expect("recorder lock").clone(),
        }
    }
}

impl<T: Transport> Transport for Recorder<T> {
    fn post_json(&self, url: &str, body: &Value) -> Result<Value, TransportError> {
        let response = self.inner.post_json(url, body)?;
        self.recorded.lock().expect("recorder lock").push(Interaction {
            url: url.to_string(),
            request: body.clone(),
            response: response.clone(),
        });
        Ok(response)
    }
}
