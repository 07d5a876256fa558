//! Declarative experiment runs: decode every system over a corpus, score,
//! tag, compare, and write `report.json`, `tables.md` and `figures/*.csv`.
//!
//! Generations and metric values are cached under `<out>/cache`, so a re-run
//! with the same config makes no backend or metric calls.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{cluster_and_rank, ClusterOptions, ClusterTable, EvalError, PermutationOptions, ResamplingOptions, SegmentScores, SignificanceTest, SystemRun};
use crate::analysis::{context_sweep, quality_bins, Binning, GreedyChrfPipeline};
use crate::backend::{self, Backend, BackendError, Capabilities, GenerationResult, OpenAiClient, OpenAiConfig, SamplingParams, ScoreResult, StubBackend};
use crate::corpus::{parse_corpus, Conversation, CorpusFormat};
use crate::decoder::{build_pool, write_pools, MbrOptions, PoolRecord, QualityDecoder};
use crate::metrics::{chrf_corpus, context_prefix, ChrfParams, Metric, MetricDescriptor, MetricError, MetricInput, MetricRegistry, MetricSpec};
use crate::muda::{muda_f1, tag_with, MudaF1Report, RuleBook, TaggedToken};
use crate::promptkit::{build_context, prompt_for_turn, ContextPolicy, LanguageMode, LanguageTable, Window};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub corpus: CorpusConfig,
    #[serde(default)]
    pub backends: BTreeMap<String, BackendConfig>,
    #[serde(default)]
    pub metrics: MetricRegistry,
    pub systems: Vec<SystemConfig>,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
    /// Extra prompt display names by language code.
    #[serde(default)]
    pub language_names: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub path: PathBuf,
    #[serde(default = "default_format")]
    pub format: String,
}

fn default_format() -> String {
    "canonical_jsonl".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackendConfig {
    /// Programmable stub read from a JSON program file.
    Stub { program: PathBuf },
    /// OpenAI-compatible completions endpoint; the key is read from
    /// `api_key_env` when set.
    Openai {
        base_url: String,
        model: String,
        #[serde(default)]
        api_key_env: Option<String>,
        #[serde(default)]
        epsilon_field: Option<String>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Greedy,
    Mbr,
    Qe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    pub id: String,
    pub backend: String,
    pub strategy: Strategy,
    /// Prompt context window.
    #[serde(default = "full_window")]
    pub context: Window,
    #[serde(default)]
    pub language_mode: LanguageMode,
    /// Utility metric for MBR, quality estimator for QE.
    #[serde(default)]
    pub metric: Option<String>,
    /// Source turns prepended to the metric inputs during decoding.
    #[serde(default = "no_window")]
    pub utility_context: Window,
    #[serde(default = "default_candidates")]
    pub n_candidates: usize,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default)]
    pub exclude_self: bool,
}

fn full_window() -> Window {
    Window::Full
}
fn no_window() -> Window {
    Window::None
}
fn default_candidates() -> usize {
    100
}
fn default_epsilon() -> f64 {
    0.02
}
fn default_temperature() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationConfig {
    #[serde(default = "default_metrics")]
    pub metrics: Vec<String>,
    /// Source turns prepended to the metric inputs during evaluation.
    #[serde(default = "no_window")]
    pub metric_context: Window,
    #[serde(default = "default_level")]
    pub level: f64,
    #[serde(default = "default_iterations")]
    pub permutation_iterations: usize,
    #[serde(default = "default_resamples")]
    pub resamples: usize,
    #[serde(default = "default_fraction")]
    pub resample_fraction: f64,
    #[serde(default = "yes")]
    pub muda: bool,
    #[serde(default)]
    pub rules_dir: Option<PathBuf>,
    /// External JSONL of `{"system", "key", "score"}` judgements.
    #[serde(default)]
    pub mqm: Option<PathBuf>,
    #[serde(default)]
    pub bins: Option<BinsConfig>,
    #[serde(default)]
    pub sweep: Option<SweepConfig>,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        toml::from_str("").expect("defaults deserialize")
    }
}

fn default_metrics() -> Vec<String> {
    vec!["chrf".into()]
}
fn default_level() -> f64 {
    0.95
}
fn default_iterations() -> usize {
    10_000
}
fn default_resamples() -> usize {
    100
}
fn default_fraction() -> f64 {
    0.5
}
fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BinsConfig {
    pub baseline: String,
    pub contextual: String,
    #[serde(default = "chrf_id")]
    pub metric: String,
    #[serde(default = "default_bins")]
    pub n_bins: usize,
    #[serde(default)]
    pub binning: Binning,
}

fn chrf_id() -> String {
    "chrf".into()
}
fn default_bins() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub backend: String,
    pub k: Vec<usize>,
    #[serde(default)]
    pub language_mode: LanguageMode,
}

/// Reads a TOML config. Relative paths inside it resolve against the
/// returned base directory.
pub fn load_config(path: impl AsRef<Path>) -> Result<(ExperimentConfig, PathBuf), EvalError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| io_err(path, source))?;
    let config = toml::from_str(&text).map_err(|e| EvalError::Config(e.to_string()))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((config, base))
}

fn io_err(path: &Path, source: std::io::Error) -> EvalError {
    EvalError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Backends and metrics supplied by the caller instead of built from the
/// config, keyed by the config's names.
#[derive(Default, Clone)]
pub struct Injected {
    pub backends: HashMap<String, Arc<dyn Backend>>,
    pub metrics: HashMap<String, Arc<dyn Metric<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentRecord {
    pub key: String,
    pub conversation_id: String,
    pub t: usize,
    pub language: String,
    pub source: String,
    pub reference: String,
    pub hypothesis: String,
    pub scores: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub expected_utility: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pool_size: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemReport {
    pub id: String,
    pub config: SystemConfig,
    pub failed: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Metrics that could not be computed for this system.
    pub metric_errors: BTreeMap<String, String>,
    /// Language → metric → system-level score.
    pub scores: BTreeMap<String, BTreeMap<String, f64>>,
    pub muda: BTreeMap<String, MudaF1Report>,
    pub segments: Vec<SegmentRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub seed: u64,
    pub metrics: Vec<MetricDescriptor>,
    pub systems: Vec<SystemReport>,
    /// Absent with fewer than two successful systems.
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub clusters: BTreeMap<String, ClusterTable>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub cluster_errors: BTreeMap<String, String>,
    pub muda_skipped: Vec<String>,
    pub figures: Vec<String>,
    pub figure_errors: Vec<String>,
}

#[derive(Debug)]
pub struct ExperimentOutcome {
    pub report: Report,
    /// Failed systems, metric cells and figures.
    pub failed_legs: usize,
    pub output_dir: PathBuf,
}

/// Persistent key → value store written as sorted JSON lines.
struct DiskCache<V> {
    path: PathBuf,
    map: Mutex<BTreeMap<String, V>>,
}

impl<V: Serialize + serde::de::DeserializeOwned + Clone> DiskCache<V> {
    fn open(path: PathBuf) -> Result<Self, EvalError> {
        let mut map = BTreeMap::new();
        if path.exists() {
            let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
            for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
                let (k, v): (String, V) = serde_json::from_str(line)
                    .map_err(|e| EvalError::Config(format!("{} line {}: {e}", path.display(), i + 1)))?;
                map.insert(k, v);
            }
        }
        Ok(DiskCache { path, map: Mutex::new(map) })
    }

    fn get(&self, key: &str) -> Option<V> {
        self.map.lock().expect("cache lock").get(key).cloned()
    }

    fn put(&self, key: String, value: V) {
        self.map.lock().expect("cache lock").insert(key, value);
    }

    fn save(&self) -> Result<(), EvalError> {
        let map = self.map.lock().expect("cache lock");
        let mut out = String::new();
        for (k, v) in map.iter() {
            out.push_str(&serde_json::to_string(&(k, v)).expect("cache entry serializes"));
            out.push('\n');
        }
        fs::write(&self.path, out).map_err(|e| io_err(&self.path, e))
    }
}

struct CachedBackend {
    inner: Arc<dyn Backend>,
    cache: Arc<DiskCache<GenerationResult>>,
}

impl Backend for CachedBackend {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn capabilities(&self) -> Capabilities {
        self.inner.capabilities()
    }

    fn generate(&self, prompt: &str, params: &SamplingParams) -> Result<GenerationResult, BackendError> {
        let key = json!([self.inner.id(), prompt, params]).to_string();
        if let Some(hit) = self.cache.get(&key) {
            return Ok(hit);
        }
        let mut result = self.inner.generate(prompt, params)?;
        result.latency_ms = 0.0;
        self.cache.put(key, result.clone());
        Ok(result)
    }

    fn score_sequence(&self, prompt: &str, target: &str) -> Result<ScoreResult, BackendError> {
        self.inner.score_sequence(prompt, target)
    }
}

struct CachedMetric {
    inner: Arc<dyn Metric<f64>>,
    cache: Arc<DiskCache<f64>>,
}

impl Metric<f64> for CachedMetric {
    fn descriptor(&self) -> &MetricDescriptor {
        self.inner.descriptor()
    }

    fn score_batch(&self, items: &[MetricInput]) -> Result<Vec<f64>, MetricError> {
        let id = &self.descriptor().id;
        let keys: Vec<String> = items.iter().map(|i| json!([id, i]).to_string()).collect();
        let mut out: Vec<Option<f64>> = keys.iter().map(|k| self.cache.get(k)).collect();
        let missing: Vec<usize> = (0..items.len()).filter(|&i| out[i].is_none()).collect();
        if !missing.is_empty() {
            let batch: Vec<MetricInput> = missing.iter().map(|&i| items[i].clone()).collect();
            let values = self.inner.score_batch(&batch)?;
            if values.len() != batch.len() {
                return Err(MetricError::Protocol(format!("{} items in, {} scores out", batch.len(), values.len())));
            }
            for (&i, v) in missing.iter().zip(values) {
                self.cache.put(keys[i].clone(), v);
                out[i] = Some(v);
            }
        }
        Ok(out.into_iter().map(|v| v.expect("filled")).collect())
    }
}

struct Resources {
    conversations: Vec<Conversation>,
    backends: BTreeMap<String, Arc<dyn Backend>>,
    metrics: BTreeMap<String, Arc<dyn Metric<f64>>>,
    languages: LanguageTable,
    rules: RuleBook,
    mqm: Vec<MqmRecord>,
    generations: Arc<DiskCache<GenerationResult>>,
    scores: Arc<DiskCache<f64>>,
}

#[derive(Debug, Clone, Deserialize)]
struct MqmRecord {
    system: String,
    key: String,
    score: f64,
}

const MQM_ID: &str = "context_mqm";

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Checks the config and builds everything it references, before any
/// decoding starts.
fn prepare(config: &ExperimentConfig, base: &Path, out: &Path, injected: &Injected) -> Result<Resources, EvalError> {
    let cfg_err = |m: String| EvalError::Config(m);
    if config.systems.is_empty() {
        return Err(cfg_err("no systems configured".into()));
    }
    let mut seen = std::collections::HashSet::new();
    for s in &config.systems {
        if !seen.insert(&s.id) {
            return Err(cfg_err(format!("duplicate system id {}", s.id)));
        }
    }

    let mut metric_ids: Vec<&String> = config.evaluation.metrics.iter().collect();
    metric_ids.extend(config.systems.iter().filter_map(|s| s.metric.as_ref()));
    if let Some(b) = &config.evaluation.bins {
        metric_ids.push(&b.metric);
    }
    let known = || {
        let mut k = config.metrics.ids();
        k.extend(injected.metrics.keys().cloned());
        k.sort();
        k.dedup();
        k
    };
    for id in &metric_ids {
        if !(config.metrics.contains(id) || injected.metrics.contains_key(*id) || (config.evaluation.mqm.is_some() && *id == MQM_ID)) {
            return Err(cfg_err(format!("unknown metric id {id:?}; known: {}", known().join(", "))));
        }
    }

    let mut backend_names: Vec<&String> = config.systems.iter().map(|s| &s.backend).collect();
    if let Some(sw) = &config.evaluation.sweep {
        backend_names.push(&sw.backend);
    }
    for name in &backend_names {
        if !config.backends.contains_key(*name) && !injected.backends.contains_key(*name) {
            return Err(cfg_err(format!("unknown backend {name:?}")));
        }
    }
    let system_ids: Vec<&str> = config.systems.iter().map(|s| s.id.as_str()).collect();
    if let Some(b) = &config.evaluation.bins {
        for s in [&b.baseline, &b.contextual] {
            if !system_ids.contains(&s.as_str()) {
                return Err(cfg_err(format!("bins refer to unknown system {s:?}")));
            }
        }
    }

    let cache_dir = out.join("cache");
    fs::create_dir_all(&cache_dir).map_err(|e| io_err(&cache_dir, e))?;
    let gen_cache = Arc::new(DiskCache::open(cache_dir.join("generations.jsonl"))?);
    let score_cache = Arc::new(DiskCache::open(cache_dir.join("scores.jsonl"))?);

    let mut metrics: BTreeMap<String, Arc<dyn Metric<f64>>> = BTreeMap::new();
    for id in metric_ids {
        if metrics.contains_key(id) || id == MQM_ID {
            continue;
        }
        let inner = match injected.metrics.get(id) {
            Some(m) => m.clone(),
            None => config.metrics.build::<f64>(id).map_err(|e| cfg_err(e.to_string()))?,
        };
        metrics.insert(id.clone(), Arc::new(CachedMetric { inner, cache: score_cache.clone() }));
    }
    for s in &config.systems {
        let Some(m) = &s.metric else {
            if s.strategy != Strategy::Greedy {
                return Err(cfg_err(format!("system {} needs a metric for {:?}", s.id, s.strategy)));
            }
            continue;
        };
        let d = metrics[m].descriptor();
        match s.strategy {
            Strategy::Mbr if !d.needs_reference => {
                return Err(cfg_err(format!("system {}: MBR utility {m} is reference-free", s.id)))
            }
            Strategy::Qe if d.needs_reference => {
                return Err(cfg_err(format!("system {}: QE metric {m} needs a reference", s.id)))
            }
            _ => {}
        }
    }

    let mut backends: BTreeMap<String, Arc<dyn Backend>> = BTreeMap::new();
    for name in backend_names {
        if backends.contains_key(name) {
            continue;
        }
        let inner: Arc<dyn Backend> = match (injected.backends.get(name), config.backends.get(name)) {
            (Some(b), _) => b.clone(),
            (None, Some(BackendConfig::Stub { program })) => {
                let path = resolve(base, program);
                let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
                Arc::new(StubBackend::from_json(&text).map_err(|e| cfg_err(format!("stub program {}: {e}", path.display())))?)
            }
            (None, Some(BackendConfig::Openai { base_url, model, api_key_env, epsilon_field })) => {
                let mut c = OpenAiConfig::new(base_url, model);
                c.api_key = api_key_env.as_ref().and_then(|v| std::env::var(v).ok());
                c.epsilon_field = epsilon_field.clone();
                Arc::new(OpenAiClient::new(c).map_err(|e| cfg_err(e.to_string()))?)
            }
            (None, None) => unreachable!("checked above"),
        };
        backends.insert(name.clone(), Arc::new(CachedBackend { inner, cache: gen_cache.clone() }));
    }

    let format: CorpusFormat = config.corpus.format.parse().map_err(|e: crate::corpus::CorpusError| cfg_err(e.to_string()))?;
    let corpus_path = resolve(base, &config.corpus.path);
    let parsed = parse_corpus(&corpus_path, format).map_err(|e| cfg_err(format!("corpus {}: {e}", corpus_path.display())))?;
    for r in &parsed.rejected {
        log::warn!("rejected conversation {} (line {}): {}", r.conversation_id, r.line, r.reason);
    }

    let mut languages = LanguageTable::default();
    for (code, name) in &config.language_names {
        languages = languages.with(code, name);
    }
    let rules = match &config.evaluation.rules_dir {
        Some(dir) => RuleBook::load_dir(resolve(base, dir)).map_err(|e| cfg_err(e.to_string()))?,
        None => RuleBook::starter(),
    };
    let mqm = match &config.evaluation.mqm {
        Some(p) => {
            let path = resolve(base, p);
            let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
            text.lines()
                .enumerate()
                .filter(|(_, l)| !l.trim().is_empty())
                .map(|(i, l)| {
                    serde_json::from_str(l).map_err(|e| cfg_err(format!("{} line {}: {e}", path.display(), i + 1)))
                })
                .collect::<Result<_, _>>()?
        }
        None => Vec::new(),
    };

    Ok(Resources {
        conversations: parsed.conversations,
        backends,
        metrics,
        languages,
        rules,
        mqm,
        generations: gen_cache,
        scores: score_cache,
    })
}

/// A decoded segment with the context needed for scoring and tagging.
struct Decoded {
    record: SegmentRecord,
    context: Vec<String>,
    target_language: String,
    pool: Option<PoolRecord>,
}

fn decode_system(sys: &SystemConfig, res: &Resources, seed: u64) -> Result<Vec<Decoded>, String> {
    let backend = res.backends[&sys.backend].as_ref();
    let policy = ContextPolicy::new(sys.context, sys.language_mode);
    let decoder = QualityDecoder::<f64>::new();
    let params = SamplingParams {
        n_samples: sys.n_candidates,
        epsilon: sys.epsilon,
        temperature: sys.temperature,
        seed: Some(seed),
        ..Default::default()
    };
    let per_conv: Vec<Vec<Decoded>> = res
        .conversations
        .par_iter()
        .map(|conv| {
            let mut outputs: HashMap<usize, String> = HashMap::new();
            let mut rows = Vec::new();
            for t in 1..=conv.len() {
                let key = format!("{}#{t}", conv.id);
                let fail = |e: String| format!("{key}: {e}");
                let (_, prompt) = prompt_for_turn(conv, t, policy, Some(&outputs), &res.languages).map_err(|e| fail(e.to_string()))?;
                let full = build_context(conv, t, ContextPolicy::full(), None).map_err(|e| fail(e.to_string()))?;
                let turn = conv.turn(t).expect("in range");
                let (hyp, expected_utility, pool) = match sys.strategy {
                    Strategy::Greedy => (backend::greedy(backend, &prompt.text).map_err(|e| fail(e.to_string()))?, None, None),
                    Strategy::Mbr | Strategy::Qe => {
                        let metric = res.metrics[sys.metric.as_ref().expect("validated")].as_ref();
                        let samples = backend.generate(&prompt.text, &params).map_err(|e| fail(e.to_string()))?;
                        let pool = build_pool(&samples, &params, &turn.source_text, full.clone()).map_err(|e| fail(e.to_string()))?;
                        let sel = if sys.strategy == Strategy::Mbr {
                            let opts = MbrOptions {
                                context: sys.utility_context,
                                exclude_self: sys.exclude_self,
                                ..Default::default()
                            };
                            decoder.mbr_select(&pool, metric, &opts)
                        } else {
                            decoder.qe_rerank(&pool, metric, sys.utility_context)
                        }
                        .map_err(|e| fail(e.to_string()))?;
                        let hyp = sel.winner(&pool).to_string();
                        let eu = sel.utilities[sel.winner_index];
                        (hyp, Some(eu), Some(PoolRecord { key: key.clone(), pool }))
                    }
                };
                outputs.insert(turn.index, hyp.clone());
                if let Some(reference) = &turn.reference_translation {
                    let target = conv.target_language(turn).to_string();
                    rows.push(Decoded {
                        record: SegmentRecord {
                            key,
                            conversation_id: conv.id.clone(),
                            t,
                            language: format!("{}-{}", turn.source_language, target),
                            source: turn.source_text.clone(),
                            reference: reference.clone(),
                            hypothesis: hyp,
                            scores: BTreeMap::new(),
                            pool_size: pool.as_ref().map(|p| p.pool.len()),
                            expected_utility,
                        },
                        context: full.lines.iter().map(|l| l.text.clone()).collect(),
                        target_language: target,
                        pool,
                    });
                }
            }
            Ok(rows)
        })
        .collect::<Result<_, String>>()?;
    Ok(per_conv.into_iter().flatten().collect())
}

fn window_lines(context: &[String], window: Window) -> &[String] {
    match window {
        Window::None => &context[..0],
        Window::LastK(k) => &context[context.len().saturating_sub(k)..],
        Window::Full => context,
    }
}

fn score_segments(decoded: &mut [Decoded], metric: &dyn Metric<f64>, window: Window) -> Result<(), MetricError> {
    let d = metric.descriptor();
    let items: Vec<MetricInput> = decoded
        .iter()
        .map(|s| {
            let prefix = context_prefix(window_lines(&s.context, window).iter().map(String::as_str));
            MetricInput {
                src: format!("{prefix}{}", s.record.source),
                mt: format!("{prefix}{}", s.record.hypothesis),
                reference: d.needs_reference.then(|| format!("{prefix}{}", s.record.reference)),
            }
        })
        .collect();
    let values = metric.score_batch(&items)?;
    for (s, v) in decoded.iter_mut().zip(values) {
        s.record.scores.insert(d.id.clone(), v);
    }
    Ok(())
}

fn chrf_params(registry: &MetricRegistry, id: &str) -> Option<ChrfParams> {
    match registry.spec(id).ok()? {
        MetricSpec::Chrf { char_order, word_order, beta } => Some(ChrfParams { char_order, word_order, beta, whitespace: false }),
        MetricSpec::Remote { .. } => None,
    }
}

/// System-level score per language: corpus chrF for chrF metrics, the mean
/// segment score otherwise.
fn system_scores(segments: &[SegmentRecord], metric: &str, chrf: Option<ChrfParams>, metric_context: Window) -> BTreeMap<String, f64> {
    let mut by_lang: BTreeMap<&str, Vec<&SegmentRecord>> = BTreeMap::new();
    for s in segments {
        by_lang.entry(&s.language).or_default().push(s);
    }
    by_lang
        .into_iter()
        .filter_map(|(lang, segs)| {
            let v = match chrf {
                Some(p) if metric_context == Window::None => {
                    let pairs: Vec<(&str, &str)> = segs.iter().map(|s| (s.hypothesis.as_str(), s.reference.as_str())).collect();
                    chrf_corpus(&pairs, &p)?
                }
                _ => {
                    let v: Vec<f64> = segs.iter().filter_map(|s| s.scores.get(metric).copied()).collect();
                    crate::scalar::mean(&v)?
                }
            };
            Some((lang.to_string(), v))
        })
        .collect()
}

type Antecedents<'a> = (Vec<&'a str>, Vec<&'a str>);
type TagPairs = (Vec<Vec<TaggedToken>>, Vec<Vec<TaggedToken>>);

fn muda_reports(decoded: &[Decoded], rules: &RuleBook) -> (BTreeMap<String, MudaF1Report>, Vec<String>) {
    let mut tags: BTreeMap<String, TagPairs> = BTreeMap::new();
    let mut skipped = Vec::new();
    // antecedents: earlier segments of the same conversation in the same target language
    let mut prior: HashMap<(&str, &str), Antecedents> = HashMap::new();
    for s in decoded {
        let Some(rule) = rules.get(&s.target_language) else {
            skipped.push(s.target_language.clone());
            continue;
        };
        let entry = prior.entry((&s.record.conversation_id, &s.target_language)).or_default();
        let cell = tags.entry(s.record.language.clone()).or_default();
        cell.0.push(tag_with(&s.record.reference, &entry.0, rule));
        cell.1.push(tag_with(&s.record.hypothesis, &entry.1, rule));
        entry.0.push(&s.record.reference);
        entry.1.push(&s.record.hypothesis);
    }
    skipped.sort();
    skipped.dedup();
    let reports = tags
        .into_iter()
        .map(|(lang, (r, h))| (lang, muda_f1(&r, &h).expect("parallel tag lists")))
        .collect();
    (reports, skipped)
}

/// Runs the experiment and writes its outputs to `out`.
pub fn run_experiment(config: &ExperimentConfig, base: &Path, out: &Path, injected: &Injected) -> Result<ExperimentOutcome, EvalError> {
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let res = prepare(config, base, out, injected)?;
    let eval = &config.evaluation;

    let decoded: Vec<Result<Vec<Decoded>, String>> = config
        .systems
        .par_iter()
        .map(|sys| decode_system(sys, &res, config.seed))
        .collect();

    let mut failed_legs = 0;
    let mut pools = Vec::new();
    let mut muda_skipped = Vec::new();
    let mut systems = Vec::new();
    for (sys, outcome) in config.systems.iter().zip(decoded) {
        let mut report = SystemReport {
            id: sys.id.clone(),
            config: sys.clone(),
            failed: false,
            error: None,
            metric_errors: BTreeMap::new(),
            scores: BTreeMap::new(),
            muda: BTreeMap::new(),
            segments: Vec::new(),
        };
        let mut segs = match outcome {
            Ok(s) => s,
            Err(e) => {
                log::error!("system {} failed: {e}", sys.id);
                failed_legs += 1;
                report.failed = true;
                report.error = Some(e);
                systems.push(report);
                continue;
            }
        };
        for id in &eval.metrics {
            if id == MQM_ID {
                continue;
            }
            if let Err(e) = score_segments(&mut segs, res.metrics[id].as_ref(), eval.metric_context) {
                failed_legs += 1;
                report.metric_errors.insert(id.clone(), e.to_string());
            }
        }
        for m in res.mqm.iter().filter(|m| m.system == sys.id) {
            if let Some(s) = segs.iter_mut().find(|s| s.record.key == m.key) {
                s.record.scores.insert(MQM_ID.into(), m.score);
            }
        }
        if eval.muda {
            let (muda, skipped) = muda_reports(&segs, &res.rules);
            report.muda = muda;
            muda_skipped.extend(skipped);
        }
        pools.extend(segs.iter_mut().filter_map(|s| s.pool.take()));
        report.segments = segs.into_iter().map(|s| s.record).collect();

        let mut scored_metrics: Vec<String> = eval
            .metrics
            .iter()
            .filter(|m| !report.metric_errors.contains_key(*m))
            .cloned()
            .collect();
        if !res.mqm.is_empty() && !scored_metrics.iter().any(|m| m == MQM_ID) {
            scored_metrics.push(MQM_ID.to_string());
        }
        for id in &scored_metrics {
            let chrf = if id == MQM_ID { None } else { chrf_params(&config.metrics, id) };
            for (lang, v) in system_scores(&report.segments, id, chrf, eval.metric_context) {
                report.scores.entry(lang).or_default().insert(id.clone(), v);
            }
        }
        systems.push(report);
    }
    muda_skipped.sort();
    muda_skipped.dedup();

    let (clusters, cluster_errors) = cluster_all(config, &res, &systems);
    failed_legs += cluster_errors.len();

    let figures_dir = out.join("figures");
    fs::create_dir_all(&figures_dir).map_err(|e| io_err(&figures_dir, e))?;
    let mut figures = Vec::new();
    let mut figure_errors = Vec::new();
    if let Some(b) = &eval.bins {
        match bins_csv(b, &systems) {
            Ok(csv) => {
                write(&figures_dir.join("quality_bins.csv"), &csv)?;
                figures.push("figures/quality_bins.csv".to_string());
            }
            Err(e) => figure_errors.push(format!("quality bins: {e}")),
        }
    }
    if let Some(sw) = &eval.sweep {
        let pipeline = GreedyChrfPipeline {
            backend: res.backends[&sw.backend].as_ref(),
            conversations: &res.conversations,
            languages: &res.languages,
            language_mode: sw.language_mode,
            chrf: ChrfParams::default(),
        };
        let table = context_sweep(&pipeline, &sw.k);
        for r in table.rows.iter().filter(|r| r.error.is_some()) {
            figure_errors.push(format!("context sweep at {}: {}", r.window, r.error.as_deref().unwrap_or_default()));
        }
        write(&figures_dir.join("context_sweep.csv"), &table.to_csv())?;
        figures.push("figures/context_sweep.csv".to_string());
    }
    failed_legs += figure_errors.len();

    let report = Report {
        seed: config.seed,
        metrics: res.metrics.values().map(|m| m.descriptor().clone()).collect(),
        systems,
        clusters,
        cluster_errors,
        muda_skipped,
        figures,
        figure_errors,
    };
    write(&out.join("report.json"), &(serde_json::to_string_pretty(&report).expect("report serializes") + "\n"))?;
    write(&out.join("tables.md"), &render_tables(&report, &eval.metrics))?;
    write_pools(out.join("pools.jsonl"), &pools).map_err(|e| EvalError::Config(e.to_string()))?;
    res.generations.save()?;
    res.scores.save()?;

    Ok(ExperimentOutcome {
        report,
        failed_legs,
        output_dir: out.to_path_buf(),
    })
}

fn write(path: &Path, text: &str) -> Result<(), EvalError> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn cluster_all(config: &ExperimentConfig, res: &Resources, systems: &[SystemReport]) -> (BTreeMap<String, ClusterTable>, BTreeMap<String, String>) {
    let ok: Vec<&SystemReport> = systems.iter().filter(|s| !s.failed).collect();
    let mut clusters = BTreeMap::new();
    let mut errors = BTreeMap::new();
    if ok.len() < 2 {
        return (clusters, errors);
    }
    let eval = &config.evaluation;
    for id in &eval.metrics {
        if ok.iter().any(|s| s.metric_errors.contains_key(id)) {
            errors.insert(id.clone(), "metric failed for at least one system".into());
            continue;
        }
        let orientation = res.metrics.get(id).map(|m| m.descriptor().orientation).unwrap_or_default();
        let test = match chrf_params(&config.metrics, id) {
            Some(chrf) if eval.metric_context == Window::None => SignificanceTest::ChrfResampling(ResamplingOptions {
                samples: eval.resamples,
                fraction: eval.resample_fraction,
                level: eval.level,
                seed: config.seed,
                chrf,
            }),
            _ => SignificanceTest::Permutation(PermutationOptions {
                level: eval.level,
                iterations: eval.permutation_iterations,
                seed: config.seed,
            }),
        };
        let runs: Vec<SystemRun> = ok
            .iter()
            .flat_map(|s| {
                let mut by_lang: BTreeMap<&str, Vec<SegmentScores>> = BTreeMap::new();
                for seg in &s.segments {
                    by_lang.entry(&seg.language).or_default().push(SegmentScores {
                        key: seg.key.clone(),
                        hypothesis: seg.hypothesis.clone(),
                        reference: Some(seg.reference.clone()),
                        scores: seg.scores.clone(),
                    });
                }
                by_lang.into_iter().map(move |(lang, segments)| SystemRun {
                    system_id: s.id.clone(),
                    language: lang.to_string(),
                    segments,
                    config: serde_json::to_value(&s.config).expect("config serializes"),
                })
            })
            .collect();
        let options = ClusterOptions {
            metric: id.clone(),
            orientation,
            test,
        };
        match cluster_and_rank(&runs, &options) {
            Ok(t) => {
                clusters.insert(id.clone(), t);
            }
            Err(e) => {
                errors.insert(id.clone(), e.to_string());
            }
        }
    }
    (clusters, errors)
}

fn bins_csv(b: &BinsConfig, systems: &[SystemReport]) -> Result<String, String> {
    let find = |id: &str| {
        systems
            .iter()
            .find(|s| s.id == id && !s.failed)
            .ok_or_else(|| format!("system {id} unavailable"))
    };
    let (base, ctx) = (find(&b.baseline)?, find(&b.contextual)?);
    let ctx_scores: HashMap<&str, f64> = ctx
        .segments
        .iter()
        .filter_map(|s| Some((s.key.as_str(), *s.scores.get(&b.metric)?)))
        .collect();
    let (mut no, mut with) = (Vec::new(), Vec::new());
    for s in &base.segments {
        if let (Some(&x), Some(&y)) = (s.scores.get(&b.metric), ctx_scores.get(s.key.as_str())) {
            no.push(x);
            with.push(y);
        }
    }
    quality_bins(&no, &with, b.n_bins, b.binning)
        .map(|t| t.to_csv())
        .map_err(|e| e.to_string())
}

/// Markdown tables: one per metric (systems × languages, cluster labels as
/// superscripts) and one for MuDA F1.
pub fn render_tables(report: &Report, metrics: &[String]) -> String {
    let mut out = String::new();
    let languages: Vec<String> = {
        let mut l: Vec<String> = report.systems.iter().flat_map(|s| s.scores.keys().cloned()).collect();
        l.sort();
        l.dedup();
        l
    };
    let mut all_metrics: Vec<&String> = metrics.iter().filter(|m| *m != MQM_ID).collect();
    let mqm = MQM_ID.to_string();
    if report.systems.iter().any(|s| s.scores.values().any(|m| m.contains_key(MQM_ID))) {
        all_metrics.push(&mqm);
    }
    for metric in all_metrics {
        let clusters = report.clusters.get(metric);
        let _ = writeln!(out, "## {metric}\n");
        let mut header = String::from("| System |");
        let mut rule = String::from("|---|");
        for l in &languages {
            let _ = write!(header, " {l} |");
            rule.push_str("---:|");
        }
        if clusters.is_some() {
            header.push_str(" Avg. cluster | Rank |");
            rule.push_str("---:|---:|");
        }
        let _ = writeln!(out, "{header}\n{rule}");
        for s in &report.systems {
            let _ = write!(out, "| {} |", s.id);
            for l in &languages {
                let cell = if s.failed || s.metric_errors.contains_key(metric) {
                    "failed".to_string()
                } else {
                    match s.scores.get(l).and_then(|m| m.get(metric)) {
                        Some(v) => {
                            let sup = clusters
                                .and_then(|c| c.cluster_of(l, &s.id))
                                .map(|c| format!("<sup>{c}</sup>"))
                                .unwrap_or_default();
                            format!("{v:.2}{sup}")
                        }
                        None => "-".to_string(),
                    }
                };
                let _ = write!(out, " {cell} |");
            }
            if let Some(c) = clusters {
                match c.ranking.iter().find(|r| r.system == s.id) {
                    Some(r) => {
                        let _ = write!(out, " {:.2} | {} |", r.average_cluster, r.rank);
                    }
                    None => out.push_str(" - | - |"),
                }
            }
            out.push('\n');
        }
        out.push('\n');
    }

    if report.systems.iter().any(|s| !s.muda.is_empty()) {
        out.push_str("## MuDA F1\n\n| System | Language | Lexical cohesion | Verb form | Pronouns | Formality |\n|---|---|---:|---:|---:|---:|\n");
        for s in &report.systems {
            for (lang, r) in &s.muda {
                let _ = write!(out, "| {} | {lang} |", s.id);
                for score in r.phenomena.values() {
                    if score.support == 0 {
                        out.push_str(" - |");
                    } else {
                        let _ = write!(out, " {:.2} |", 100.0 * score.f1);
                    }
                }
                out.push('\n');
            }
        }
        out.push('\n');
    }
    out
}
