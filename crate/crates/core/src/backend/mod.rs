//! Generation and scoring backends.
//!
//! [`Backend`] covers candidate sampling and forced-decoding sequence
//! log-likelihoods. Two implementations ship: [`OpenAiClient`] for
//! OpenAI-compatible `/v1/completions` servers and [`StubBackend`], a
//! deterministic programmable backend for tests and desk-scale runs.

mod openai;
mod stub;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::thread;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::transport::TransportError;

pub use openai::{OpenAiClient, OpenAiConfig};
pub use stub::{ContextBonus, ScoreTable, StubBackend, StubProgram, StubRule, StubScoring, TableEntry, WeightedText};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("backend {backend} lacks capability: {capability}")]
    Capability { backend: String, capability: String },
    #[error("transport: {0}")]
    Transport(#[from] TransportError),
    #[error("tokenization mismatch at character offset {offset}: {reason}")]
    TokenizationMismatch { offset: usize, reason: String },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("invalid response: {0}")]
    InvalidResponse(String),
    #[error("stub has no programmed completion for prompt ending {0:?}")]
    Unprogrammed(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub n_samples: usize,
    pub epsilon: f64,
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub seed: Option<u64>,
}

impl Default for SamplingParams {
    fn default() -> Self {
        SamplingParams {
            n_samples: 100,
            epsilon: 0.02,
            temperature: 1.0,
            max_new_tokens: 256,
            seed: None,
        }
    }
}

impl SamplingParams {
    /// A single deterministic completion.
    pub fn greedy() -> Self {
        SamplingParams {
            n_samples: 1,
            epsilon: 0.0,
            temperature: 0.0,
            ..Default::default()
        }
    }

    pub fn is_greedy(&self) -> bool {
        self.temperature == 0.0
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        let bad = |m: &str| Err(BackendError::InvalidRequest(m.to_string()));
        if self.n_samples == 0 {
            return bad("n_samples must be positive");
        }
        if !(0.0..1.0).contains(&self.epsilon) {
            return bad("epsilon must lie in [0, 1)");
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return bad("temperature must be non-negative");
        }
        if self.max_new_tokens == 0 {
            return bad("max_new_tokens must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub text: String,
    pub seq_logprob: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub candidates: Vec<Candidate>,
    pub backend_id: String,
    pub latency_ms: f64,
    /// Sampling parameters the backend was sent and accepted.
    pub acknowledged: Vec<String>,
}

impl GenerationResult {
    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.candidates.iter().map(|c| c.text.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreResult {
    /// Sum of target token log-probabilities, in nats.
    pub total_logprob: f64,
    pub token_count: usize,
}

impl ScoreResult {
    pub fn per_token(&self) -> f64 {
        if self.token_count == 0 {
            0.0
        } else {
            self.total_logprob / self.token_count as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capabilities {
    pub scoring: bool,
    pub epsilon_sampling: bool,
}

pub trait Backend: Send + Sync {
    fn id(&self) -> &str;

    fn capabilities(&self) -> Capabilities;

    fn generate(&self, prompt: &str, params: &SamplingParams) -> Result<GenerationResult, BackendError>;

    /// Log-likelihood of `target` as a continuation of `prompt`.
    fn score_sequence(&self, prompt: &str, target: &str) -> Result<ScoreResult, BackendError>;
}

/// Greedy decoding: one completion at temperature 0.
pub fn greedy(backend: &dyn Backend, prompt: &str) -> Result<String, BackendError> {
    let result = backend.generate(prompt, &SamplingParams::greedy())?;
    result
        .candidates
        .into_iter()
        .next()
        .map(|c| c.text)
        .ok_or_else(|| BackendError::InvalidResponse("greedy decoding returned no completion".into()))
}

/// Runs generation jobs with at most `limit` requests in flight. Results are
/// returned in job order.
pub fn generate_batch(
    backend: &dyn Backend,
    jobs: &[(String, SamplingParams)],
    limit: usize,
) -> Vec<Result<GenerationResult, BackendError>> {
    let next = AtomicUsize::new(0);
    let workers = limit.max(1).min(jobs.len());
    let mut slots: Vec<Option<Result<GenerationResult, BackendError>>> = vec![None; jobs.len()];
    thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|_| {
                scope.spawn(|| {
                    let mut done = Vec::new();
                    loop {
                        let i = next.fetch_add(1, Ordering::SeqCst);
                        let Some((prompt, params)) = jobs.get(i) else { break };
                        done.push((i, backend.generate(prompt, params)));
                    }
                    done
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("generation worker panicked") {
                slots[i] = Some(r);
            }
        }
    });
    slots.into_iter().map(|s| s.expect("every job ran")).collect()
}
