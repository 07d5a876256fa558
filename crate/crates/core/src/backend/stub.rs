use std::sync::atomic::{AtomicUsize, Ordering};

use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Backend, BackendError, Candidate, Capabilities, GenerationResult, SamplingParams, ScoreResult};
use crate::promptkit::parse_prompt;

/// Fixed completions for an exact `(prompt, seed)` pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableEntry {
    pub prompt: String,
    #[serde(default)]
    pub seed: Option<u64>,
    pub completions: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedText {
    pub text: String,
    pub weight: u32,
}

/// Behaviour for prompts whose source segment contains `needle`.
///
/// Greedy decoding returns `ladder[min(context lines, ladder.len() - 1)]`, so
/// a ladder ordered from worst to best translation rewards longer context.
/// Sampling draws from `samples` by weight (uniformly from the ladder when
/// `samples` is empty).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StubRule {
    pub needle: String,
    pub ladder: Vec<String>,
    #[serde(default)]
    pub samples: Vec<WeightedText>,
}

/// Exact per-token log-probabilities for a `(prompt, target)` pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub prompt: String,
    pub target: String,
    pub token_logprobs: Vec<f64>,
}

/// Adds `per_line` nats to the score of any target containing
/// `target_contains`, once for every context line of the prompt that contains
/// `context_contains` (every context line when unset).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextBonus {
    pub target_contains: String,
    #[serde(default)]
    pub context_contains: Option<String>,
    pub per_line: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StubScoring {
    #[serde(default)]
    pub disabled: bool,
    #[serde(default)]
    pub tables: Vec<ScoreTable>,
    #[serde(default)]
    pub bonuses: Vec<ContextBonus>,
    /// Amplitude of deterministic pseudo-noise added per `(prompt, target)`.
    #[serde(default)]
    pub noise: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StubProgram {
    #[serde(default = "default_id")]
    pub id: String,
    #[serde(default)]
    pub table: Vec<TableEntry>,
    #[serde(default)]
    pub rules: Vec<StubRule>,
    #[serde(default)]
    pub scoring: StubScoring,
    #[serde(default = "yes")]
    pub supports_epsilon: bool,
}

fn default_id() -> String {
    "stub".to_string()
}

fn yes() -> bool {
    true
}

impl Default for StubProgram {
    fn default() -> Self {
        StubProgram {
            id: default_id(),
            table: Vec::new(),
            rules: Vec::new(),
            scoring: StubScoring::default(),
            supports_epsilon: true,
        }
    }
}

/// Deterministic in-process backend driven by a [`StubProgram`].
///
/// The default scoring model is context-blind: each target character is one
/// token with log-probability `-(1 + (codepoint mod 7)) / 8`. These values are
/// exact binary fractions, so sequence scores obey the chain rule
/// `score(p, a + b) == score(p, a) + score(p + a, b)` bit for bit.
#[derive(Debug)]
pub struct StubBackend {
    program: StubProgram,
    generate_calls: AtomicUsize,
    score_calls: AtomicUsize,
}

impl StubBackend {
    pub fn new(program: StubProgram) -> Self {
        StubBackend {
            program,
            generate_calls: AtomicUsize::new(0),
            score_calls: AtomicUsize::new(0),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        Ok(Self::new(serde_json::from_str(text)?))
    }

    pub fn program(&self) -> &StubProgram {
        &self.program
    }

    pub fn generate_calls(&self) -> usize {
        self.generate_calls.load(Ordering::SeqCst)
    }

    pub fn score_calls(&self) -> usize {
        self.score_calls.load(Ordering::SeqCst)
    }

    /// Log-probability of a single character token in the base model.
    pub fn base_token_logprob(c: char) -> f64 {
        -((1 + (c as u32 % 7)) as f64) / 8.0
    }

    fn sample(&self, rule: &StubRule, prompt: &str, params: &SamplingParams) -> Vec<String> {
        let (texts, weights): (Vec<&str>, Vec<u32>) = if rule.samples.is_empty() {
            rule.ladder.iter().map(|t| (t.as_str(), 1)).unzip()
        } else {
            rule.samples.iter().map(|w| (w.text.as_str(), w.weight)).unzip()
        };
        let dist = WeightedIndex::new(&weights).expect("stub sample weights are positive");
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(prompt.as_bytes()) ^ params.seed.unwrap_or(0));
        (0..params.n_samples)
            .map(|_| texts[dist.sample(&mut rng)].to_string())
            .collect()
    }
}

impl Backend for StubBackend {
    fn id(&self) -> &str {
        &self.program.id
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            scoring: !self.program.scoring.disabled,
            epsilon_sampling: self.program.supports_epsilon,
        }
    }

    fn generate(&self, prompt: &str, params: &SamplingParams) -> Result<GenerationResult, BackendError> {
        self.generate_calls.fetch_add(1, Ordering::SeqCst);
        params.validate()?;
        if prompt.is_empty() {
            return Err(BackendError::InvalidRequest("empty prompt".into()));
        }
        if params.epsilon > 0.0 && !self.program.supports_epsilon {
            return Err(BackendError::Capability {
                backend: self.program.id.clone(),
                capability: "epsilon sampling".into(),
            });
        }

        let texts = if let Some(entry) = self
            .program
            .table
            .iter()
            .find(|e| e.prompt == prompt && e.seed == params.seed)
        {
            entry.completions.iter().take(params.n_samples).cloned().collect()
        } else {
            let view = parse_prompt(prompt);
            let source = view.as_ref().map_or(prompt, |v| v.source);
            let rule = self
                .program
                .rules
                .iter()
                .find(|r| source.contains(&r.needle) && !r.ladder.is_empty())
                .ok_or_else(|| {
                    let tail: String = prompt.chars().rev().take(40).collect::<Vec<_>>().into_iter().rev().collect();
                    BackendError::Unprogrammed(tail)
                })?;
            if params.is_greedy() {
                let lines = view.map_or(0, |v| v.context_lines.len());
                vec![rule.ladder[lines.min(rule.ladder.len() - 1)].clone()]
            } else {
                self.sample(rule, prompt, params)
            }
        };

        let mut acknowledged = vec!["n".to_string(), "temperature".to_string(), "seed".to_string()];
        if params.epsilon > 0.0 {
            acknowledged.push("epsilon".to_string());
        }
        Ok(GenerationResult {
            candidates: texts
                .into_iter()
                .map(|text| Candidate { text, seq_logprob: None })
                .collect(),
            backend_id: self.program.id.clone(),
            latency_ms: 0.0,
            acknowledged,
        })
    }

    fn score_sequence(&self, prompt: &str, target: &str) -> Result<ScoreResult, BackendError> {
        self.score_calls.fetch_add(1, Ordering::SeqCst);
        let scoring = &self.program.scoring;
        if scoring.disabled {
            return Err(BackendError::Capability {
                backend: self.program.id.clone(),
                capability: "sequence scoring (use a backend that returns echoed logprobs)".into(),
            });
        }
        if let Some(t) = scoring
            .tables
            .iter()
            .find(|t| t.prompt == prompt && t.target == target)
        {
            return Ok(ScoreResult {
                total_logprob: t.token_logprobs.iter().sum(),
                token_count: t.token_logprobs.len(),
            });
        }

        let mut total: f64 = target.chars().map(Self::base_token_logprob).sum();
        if !scoring.bonuses.is_empty() {
            let lines = parse_prompt(prompt).map(|v| v.context_lines).unwrap_or_default();
            for bonus in scoring.bonuses.iter().filter(|b| target.contains(&b.target_contains)) {
                let hits = lines
                    .iter()
                    .filter(|l| bonus.context_contains.as_ref().is_none_or(|c| l.contains(c.as_str())))
                    .count();
                total += bonus.per_line * hits as f64;
            }
        }
        if scoring.noise > 0.0 {
            let mut key = prompt.as_bytes().to_vec();
            key.push(0);
            key.extend_from_slice(target.as_bytes());
            let unit = (fnv1a(&key) % 1024) as f64 / 1024.0 - 0.5;
            total += scoring.noise * unit;
        }
        Ok(ScoreResult {
            total_logprob: total.min(0.0),
            token_count: target.chars().count(),
        })
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}
