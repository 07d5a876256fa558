use std::env;
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use super::{Backend, BackendError, Candidate, Capabilities, GenerationResult, SamplingParams, ScoreResult};
use crate::transport::{HttpTransport, RetryPolicy, Transport, TransportError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpenAiConfig {
    /// Server root, e.g. `http://localhost:8000`; `/v1/completions` is appended.
    pub base_url: String,
    pub model: String,
    #[serde(default)]
    pub api_key: Option<String>,
    /// Request field carrying the epsilon-sampling threshold
    /// (e.g. `epsilon_cutoff`). Without it, epsilon > 0 is a capability error.
    #[serde(default)]
    pub epsilon_field: Option<String>,
    #[serde(default = "default_stop")]
    pub stop: Vec<String>,
    /// Whether the server honours `echo` with `logprobs` for forced scoring.
    #[serde(default = "yes")]
    pub echo_logprobs: bool,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

fn default_stop() -> Vec<String> {
    vec!["\n".to_string()]
}

fn yes() -> bool {
    true
}

fn default_timeout() -> u64 {
    120
}

impl OpenAiConfig {
    pub fn new(base_url: &str, model: &str) -> Self {
        OpenAiConfig {
            base_url: base_url.trim_end_matches('/').to_string(),
            model: model.to_string(),
            api_key: None,
            epsilon_field: None,
            stop: default_stop(),
            echo_logprobs: true,
            timeout_secs: default_timeout(),
        }
    }

    /// Reads `CTXMT_BASE_URL` (or `OPENAI_BASE_URL`), `CTXMT_MODEL`,
    /// `OPENAI_API_KEY` and `CTXMT_EPSILON_FIELD`.
    pub fn from_env() -> Result<Self, BackendError> {
        let base = env::var("CTXMT_BASE_URL")
            .or_else(|_| env::var("OPENAI_BASE_URL"))
            .map_err(|_| BackendError::InvalidRequest("set CTXMT_BASE_URL or OPENAI_BASE_URL".into()))?;
        let model = env::var("CTXMT_MODEL").unwrap_or_else(|_| "default".into());
        let mut cfg = OpenAiConfig::new(&base, &model);
        cfg.api_key = env::var("OPENAI_API_KEY").ok();
        cfg.epsilon_field = env::var("CTXMT_EPSILON_FIELD").ok();
        Ok(cfg)
    }

    pub fn completions_url(&self) -> String {
        let base = self.base_url.trim_end_matches('/');
        if base.ends_with("/v1") {
            format!("{base}/completions")
        } else {
            format!("{base}/v1/completions")
        }
    }
}

/// Client for OpenAI-compatible `POST /v1/completions` servers.
pub struct OpenAiClient {
    config: OpenAiConfig,
    transport: Arc<dyn Transport>,
    retry: RetryPolicy,
    id: String,
}

impl OpenAiClient {
    pub fn new(config: OpenAiConfig) -> Result<Self, BackendError> {
        let transport = HttpTransport::new(config.api_key.clone(), Duration::from_secs(config.timeout_secs))?;
        Ok(Self::with_transport(config, Arc::new(transport)))
    }

    pub fn with_transport(config: OpenAiConfig, transport: Arc<dyn Transport>) -> Self {
        OpenAiClient {
            id: format!("openai:{}", config.model),
            config,
            transport,
            retry: RetryPolicy::default(),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn generation_request(&self, prompt: &str, params: &SamplingParams) -> Result<(Value, Vec<String>), BackendError> {
        let mut body = Map::new();
        body.insert("model".into(), json!(self.config.model));
        body.insert("prompt".into(), json!(prompt));
        body.insert("n".into(), json!(params.n_samples));
        body.insert("max_tokens".into(), json!(params.max_new_tokens));
        body.insert("temperature".into(), json!(params.temperature));
        if !self.config.stop.is_empty() {
            body.insert("stop".into(), json!(self.config.stop));
        }
        let mut sent = vec!["n".to_string(), "max_tokens".to_string(), "temperature".to_string()];
        if let Some(seed) = params.seed {
            body.insert("seed".into(), json!(seed));
            sent.push("seed".into());
        }
        if params.epsilon > 0.0 {
            let field = self.config.epsilon_field.as_ref().ok_or_else(|| BackendError::Capability {
                backend: self.id.clone(),
                capability: "epsilon sampling (configure epsilon_field)".into(),
            })?;
            body.insert(field.clone(), json!(params.epsilon));
            sent.push("epsilon".into());
        }
        Ok((Value::Object(body), sent))
    }

    fn post(&self, body: &Value) -> Result<Value, BackendError> {
        let url = self.config.completions_url();
        self.retry
            .run(|| self.transport.post_json(&url, body))
            .map_err(|e| match (&e, &self.config.epsilon_field) {
                (TransportError::Status { status: 400 | 422, body }, Some(field)) if body.contains(field.as_str()) => {
                    BackendError::Capability {
                        backend: self.id.clone(),
                        capability: format!("epsilon sampling (server rejected {field})"),
                    }
                }
                _ => BackendError::Transport(e),
            })
    }

    fn strip_stop(&self, text: &str) -> String {
        for stop in &self.config.stop {
            if let Some(stripped) = text.strip_suffix(stop.as_str()) {
                return stripped.to_string();
            }
        }
        text.to_string()
    }
}

#[derive(Debug, Deserialize)]
struct CompletionResponse {
    choices: Vec<Choice>,
}

#[derive(Debug, Deserialize)]
struct Choice {
    #[serde(default)]
    index: usize,
    text: String,
    #[serde(default)]
    logprobs: Option<Logprobs>,
}

#[derive(Debug, Deserialize)]
struct Logprobs {
    tokens: Vec<String>,
    token_logprobs: Vec<Option<f64>>,
    text_offset: Vec<usize>,
}

impl Backend for OpenAiClient {
    fn id(&self) -> &str {
        &self.id
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            scoring: self.config.echo_logprobs,
            epsilon_sampling: self.config.epsilon_field.is_some(),
        }
    }

    fn generate(&self, prompt: &str, params: &SamplingParams) -> Result<GenerationResult, BackendError> {
        params.validate()?;
        if prompt.is_empty() {
            return Err(BackendError::InvalidRequest("empty prompt".into()));
        }
        let (body, acknowledged) = self.generation_request(prompt, params)?;
        let started = Instant::now();
        let raw = self.post(&body)?;
        let latency_ms = started.elapsed().as_secs_f64() * 1e3;
        let mut resp: CompletionResponse =
            serde_json::from_value(raw).map_err(|e| BackendError::InvalidResponse(e.to_string()))?;
        resp.choices.sort_by_key(|c| c.index);
        resp.choices.truncate(params.n_samples);
        Ok(GenerationResult {
            candidates: resp
                .choices
                .into_iter()
                .map(|c| Candidate {
                    seq_logprob: c
                        .logprobs
                        .as_ref()
                        .map(|l| l.token_logprobs.iter().flatten().sum()),
                    text: self.strip_stop(&c.text),
                })
                .collect(),
            backend_id: self.id.clone(),
            latency_ms,
            acknowledged,
        })
    }

    /// Forced decoding via `echo`: the prompt and target are sent as one text
    /// and the log-probabilities of the tokens covering the target are summed.
    fn score_sequence(&self, prompt: &str, target: &str) -> Result<ScoreResult, BackendError> {
        if !self.config.echo_logprobs {
            return Err(BackendError::Capability {
                backend: self.id.clone(),
                capability: "sequence scoring (use a backend that returns echoed logprobs)".into(),
            });
        }
        let full = format!("{prompt}{target}");
        let body = json!({
            "model": self.config.model,
            "prompt": full,
            "max_tokens": 1,
            "temperature": 0.0,
            "echo": true,
            "logprobs": 0,
        });
        let raw = self.post(&body)?;
        let resp: CompletionResponse =
            serde_json::from_value(raw).map_err(|e| BackendError::InvalidResponse(e.to_string()))?;
        let lp = resp
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.logprobs)
            .ok_or_else(|| BackendError::InvalidResponse("response carries no logprobs".into()))?;
        sum_target_logprobs(&lp, prompt.chars().count(), full.chars().count(), target)
    }
}

fn sum_target_logprobs(lp: &Logprobs, boundary: usize, end: usize, target: &str) -> Result<ScoreResult, BackendError> {
    if lp.tokens.len() != lp.token_logprobs.len() || lp.tokens.len() != lp.text_offset.len() {
        return Err(BackendError::InvalidResponse("logprob arrays differ in length".into()));
    }
    let mut total = 0.0;
    let mut count = 0;
    let mut rebuilt = String::new();
    let mut aligned = target.is_empty();
    for ((token, logprob), &offset) in lp.tokens.iter().zip(&lp.token_logprobs).zip(&lp.text_offset) {
        let token_end = offset + token.chars().count();
        if offset < boundary && token_end > boundary {
            return Err(BackendError::TokenizationMismatch {
                offset,
                reason: "a token spans the prompt/target boundary".into(),
            });
        }
        if offset == boundary {
            aligned = true;
        }
        if offset >= boundary && offset < end {
            let logprob = logprob.ok_or_else(|| BackendError::TokenizationMismatch {
                offset,
                reason: "target token without logprob".into(),
            })?;
            total += logprob;
            count += 1;
            rebuilt.push_str(token);
        }
    }
    if !aligned || rebuilt != target {
        return Err(BackendError::TokenizationMismatch {
            offset: boundary,
            reason: format!("forced decode reproduced {rebuilt:?} instead of the target"),
        });
    }
    Ok(ScoreResult {
        total_logprob: total,
        token_count: count,
    })
}
