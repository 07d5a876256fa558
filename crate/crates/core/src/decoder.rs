//! Candidate pools and quality-aware decoding.
//!
//! MBR scores every candidate against the pool used as pseudo-references:
//! `u(h_i) = Σ_j w_j · M(h_i, h_j) / Σ_j w_j`, with `w_j` the sample
//! multiplicities, and selects the argmax. QE reranking scores each
//! candidate once with a reference-free metric. Ties go to the candidate
//! sampled first.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{GenerationResult, SamplingParams};
use crate::metrics::{context_prefix, Metric, MetricError, MetricInput};
use crate::promptkit::{ContextBlock, Window};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("no usable candidates")]
    NoCandidates,
    #[error("metric failed on hypothesis {hyp} vs pseudo-reference {reference}: {source}")]
    PairFailed {
        hyp: usize,
        reference: usize,
        #[source]
        source: MetricError,
    },
    #[error("metric failed on candidate {index}: {source}")]
    CandidateFailed {
        index: usize,
        #[source]
        source: MetricError,
    },
    #[error("metric {0} is not reference-free; QE reranking needs a reference-free metric")]
    NeedsReferenceFree(String),
    #[error("metric {0} cannot serve as an MBR utility: it does not take a reference")]
    NeedsReference(String),
    #[error("metric {0} returned a non-finite value")]
    NonFinite(String),
    #[error("pool file line {line}: {reason}")]
    PoolFile { line: usize, reason: String },
    #[error("pool file io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolEntry {
    pub text: String,
    pub multiplicity: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub backend_id: String,
    pub params: SamplingParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidatePool {
    pub source: String,
    pub context: ContextBlock,
    pub entries: Vec<PoolEntry>,
    pub provenance: Provenance,
}

impl CandidatePool {
    /// Number of raw samples the pool represents.
    pub fn total_weight(&self) -> usize {
        self.entries.iter().map(|e| e.multiplicity).sum()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.text.as_str())
    }

    pub fn position(&self, text: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.text == text)
    }

    /// Adds samples, merging byte-identical texts and keeping first-occurrence
    /// order.
    pub fn extend<'a>(&mut self, texts: impl IntoIterator<Item = &'a str>) {
        for text in texts {
            if text.trim().is_empty() {
                continue;
            }
            match self.position(text) {
                Some(i) => self.entries[i].multiplicity += 1,
                None => self.entries.push(PoolEntry {
                    text: text.to_string(),
                    multiplicity: 1,
                }),
            }
        }
    }

    /// Union with another pool over the same segment.
    pub fn merge(&mut self, other: &CandidatePool) {
        for e in &other.entries {
            match self.position(&e.text) {
                Some(i) => self.entries[i].multiplicity += e.multiplicity,
                None => self.entries.push(e.clone()),
            }
        }
    }
}

/// Deduplicates samples into a pool. Blank samples are discarded.
pub fn build_pool(
    samples: &GenerationResult,
    params: &SamplingParams,
    source: &str,
    context: ContextBlock,
) -> Result<CandidatePool, DecodeError> {
    let mut pool = CandidatePool {
        source: source.to_string(),
        context,
        entries: Vec::new(),
        provenance: Provenance {
            backend_id: samples.backend_id.clone(),
            params: params.clone(),
        },
    };
    pool.extend(samples.texts());
    if pool.is_empty() {
        return Err(DecodeError::NoCandidates);
    }
    Ok(pool)
}

/// `values[i * n + j]` is the utility of hypothesis `i` against
/// pseudo-reference `j`, already oriented so that higher is better.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilityMatrix<S = f64> {
    pub n: usize,
    pub values: Vec<S>,
    pub metric_id: String,
    pub context: Window,
}

impl<S: Scalar> UtilityMatrix<S> {
    pub fn from_fn(n: usize, metric_id: &str, context: Window, mut f: impl FnMut(usize, usize) -> S) -> Self {
        let mut values = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                values.push(f(i, j));
            }
        }
        UtilityMatrix {
            n,
            values,
            metric_id: metric_id.to_string(),
            context,
        }
    }

    pub fn get(&self, hyp: usize, reference: usize) -> S {
        self.values[hyp * self.n + reference]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MbrSelection<S = f64> {
    pub winner_index: usize,
    pub utilities: Vec<S>,
    /// Candidate indices by descending utility, ties by index.
    pub ranking: Vec<usize>,
}

impl<S: Scalar> MbrSelection<S> {
    pub fn from_utilities(utilities: Vec<S>) -> Self {
        let mut ranking: Vec<usize> = (0..utilities.len()).collect();
        ranking.sort_by(|&a, &b| {
            utilities[b]
                .partial_cmp(&utilities[a])
                .expect("finite utilities")
                .then(a.cmp(&b))
        });
        MbrSelection {
            winner_index: ranking[0],
            utilities,
            ranking,
        }
    }

    pub fn winner<'p>(&self, pool: &'p CandidatePool) -> &'p str {
        &pool.entries[self.winner_index].text
    }
}

/// Expected utilities from a complete matrix and sample multiplicities.
///
/// With `exclude_self`, one copy of each hypothesis is removed from its own
/// pseudo-reference set.
pub fn select_from_matrix<S: Scalar>(matrix: &UtilityMatrix<S>, weights: &[usize], exclude_self: bool) -> MbrSelection<S> {
    let total: usize = weights.iter().sum();
    let utilities = (0..matrix.n)
        .map(|i| {
            let mut sum = S::zero();
            let mut denom = total;
            for (j, &w) in weights.iter().enumerate() {
                let w = if exclude_self && j == i { w - 1 } else { w };
                sum = sum + S::from_count(w) * matrix.get(i, j);
            }
            if exclude_self {
                denom -= 1;
            }
            if denom == 0 {
                S::zero()
            } else {
                sum / S::from_count(denom)
            }
        })
        .collect();
    MbrSelection::from_utilities(utilities)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MbrOptions {
    /// Source context prepended to every metric field.
    pub context: Window,
    pub exclude_self: bool,
    /// Items per metric call; chunks are scored in parallel.
    pub batch_size: usize,
}

impl Default for MbrOptions {
    fn default() -> Self {
        MbrOptions {
            context: Window::None,
            exclude_self: false,
            batch_size: 512,
        }
    }
}

impl MbrOptions {
    pub fn with_context(context: Window) -> Self {
        MbrOptions { context, ..Default::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct CacheKey {
    metric: String,
    item: MetricInput,
}

/// MBR and QE decoder with a metric-value cache shared across calls.
///
/// The cache is keyed by metric id and the (context-augmented) metric input,
/// so identical text pairs are scored once per decoder.
#[derive(Debug, Default)]
pub struct QualityDecoder<S = f64> {
    cache: Mutex<HashMap<CacheKey, S>>,
}

impl<S: Scalar> QualityDecoder<S> {
    pub fn new() -> Self {
        QualityDecoder {
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn cached_values(&self) -> usize {
        self.cache.lock().expect("cache lock").len()
    }

    fn prefix(pool: &CandidatePool, window: Window) -> String {
        let lines = match window {
            Window::None => &pool.context.lines[..0],
            Window::LastK(k) => pool.context.tail(k),
            Window::Full => &pool.context.lines[..],
        };
        context_prefix(lines.iter().map(|l| l.text.as_str()))
    }

    /// Scores `items` through the cache. `on_error` maps a failing item index
    /// to a decode error.
    fn score_cached(
        &self,
        metric: &dyn Metric<S>,
        items: &[MetricInput],
        batch_size: usize,
        on_error: impl Fn(usize, MetricError) -> DecodeError + Sync,
    ) -> Result<Vec<S>, DecodeError> {
        let id = &metric.descriptor().id;
        let keys: Vec<CacheKey> = items
            .iter()
            .map(|item| CacheKey {
                metric: id.clone(),
                item: item.clone(),
            })
            .collect();
        let missing: Vec<usize> = {
            let cache = self.cache.lock().expect("cache lock");
            let mut seen = std::collections::HashSet::new();
            (0..keys.len())
                .filter(|&i| !cache.contains_key(&keys[i]) && seen.insert(&keys[i]))
                .collect()
        };

        let chunks: Vec<&[usize]> = missing.chunks(batch_size.max(1)).collect();
        let scored: Vec<Vec<(usize, S)>> = chunks
            .par_iter()
            .map(|chunk| {
                let batch: Vec<MetricInput> = chunk.iter().map(|&i| items[i].clone()).collect();
                let values = metric.score_batch(&batch).map_err(|e| {
                    // pinpoint the failing item
                    for &i in chunk.iter() {
                        if let Err(e) = metric.score_batch(std::slice::from_ref(&items[i])) {
                            return on_error(i, e);
                        }
                    }
                    on_error(chunk[0], e)
                })?;
                if values.len() != chunk.len() {
                    return Err(on_error(
                        chunk[0],
                        MetricError::Protocol(format!("{} items in, {} scores out", chunk.len(), values.len())),
                    ));
                }
                if let Some(k) = values.iter().position(|v| !v.is_finite()) {
                    return Err(on_error(chunk[k], MetricError::NonFinite(chunk[k])));
                }
                Ok(chunk.iter().copied().zip(values).collect())
            })
            .collect::<Result<_, DecodeError>>()?;

        let mut cache = self.cache.lock().expect("cache lock");
        for (i, v) in scored.into_iter().flatten() {
            cache.insert(keys[i].clone(), v);
        }
        Ok(keys.iter().map(|k| cache[k]).collect())
    }

    /// Builds the oriented utility matrix. Symmetric metrics are evaluated on
    /// the upper triangle only.
    pub fn utility_matrix(
        &self,
        pool: &CandidatePool,
        metric: &dyn Metric<S>,
        options: &MbrOptions,
    ) -> Result<UtilityMatrix<S>, DecodeError> {
        let desc = metric.descriptor();
        if !desc.needs_reference {
            return Err(DecodeError::NeedsReference(desc.id.clone()));
        }
        if pool.is_empty() {
            return Err(DecodeError::NoCandidates);
        }
        let n = pool.len();
        let prefix = Self::prefix(pool, options.context);
        let src = format!("{prefix}{}", pool.source);
        let aug: Vec<String> = pool.texts().map(|t| format!("{prefix}{t}")).collect();

        let pairs: Vec<(usize, usize)> = (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .filter(|&(i, j)| !desc.declares_symmetry || i <= j)
            .collect();
        let items: Vec<MetricInput> = pairs
            .iter()
            .map(|&(i, j)| MetricInput {
                src: src.clone(),
                mt: aug[i].clone(),
                reference: Some(aug[j].clone()),
            })
            .collect();
        let values = self.score_cached(metric, &items, options.batch_size, |k, source| {
            DecodeError::PairFailed {
                hyp: pairs[k].0,
                reference: pairs[k].1,
                source,
            }
        })?;

        let mut matrix = vec![S::zero(); n * n];
        for (&(i, j), v) in pairs.iter().zip(values) {
            let u = desc.orientation.utility(v);
            matrix[i * n + j] = u;
            if desc.declares_symmetry {
                matrix[j * n + i] = u;
            }
        }
        Ok(UtilityMatrix {
            n,
            values: matrix,
            metric_id: desc.id.clone(),
            context: options.context,
        })
    }

    pub fn mbr_select(
        &self,
        pool: &CandidatePool,
        metric: &dyn Metric<S>,
        options: &MbrOptions,
    ) -> Result<MbrSelection<S>, DecodeError> {
        let matrix = self.utility_matrix(pool, metric, options)?;
        let weights: Vec<usize> = pool.entries.iter().map(|e| e.multiplicity).collect();
        Ok(select_from_matrix(&matrix, &weights, options.exclude_self))
    }

    /// Expected utility of an arbitrary hypothesis against the pool.
    pub fn expected_utility(
        &self,
        pool: &CandidatePool,
        hypothesis: &str,
        metric: &dyn Metric<S>,
        options: &MbrOptions,
    ) -> Result<S, DecodeError> {
        let desc = metric.descriptor();
        let prefix = Self::prefix(pool, options.context);
        let items: Vec<MetricInput> = pool
            .texts()
            .map(|r| MetricInput {
                src: format!("{prefix}{}", pool.source),
                mt: format!("{prefix}{hypothesis}"),
                reference: Some(format!("{prefix}{r}")),
            })
            .collect();
        let values = self.score_cached(metric, &items, options.batch_size, |k, source| {
            DecodeError::PairFailed {
                hyp: usize::MAX,
                reference: k,
                source,
            }
        })?;
        let total = pool.total_weight();
        let sum: S = pool
            .entries
            .iter()
            .zip(values)
            .map(|(e, v)| S::from_count(e.multiplicity) * desc.orientation.utility(v))
            .sum();
        Ok(sum / S::from_count(total))
    }

    /// Reference-free reranking: one metric call per candidate.
    pub fn qe_rerank(
        &self,
        pool: &CandidatePool,
        qe_metric: &dyn Metric<S>,
        context: Window,
    ) -> Result<MbrSelection<S>, DecodeError> {
        let desc = qe_metric.descriptor();
        if desc.needs_reference {
            return Err(DecodeError::NeedsReferenceFree(desc.id.clone()));
        }
        if pool.is_empty() {
            return Err(DecodeError::NoCandidates);
        }
        let prefix = Self::prefix(pool, context);
        let items: Vec<MetricInput> = pool
            .texts()
            .map(|t| MetricInput {
                src: format!("{prefix}{}", pool.source),
                mt: format!("{prefix}{t}"),
                reference: None,
            })
            .collect();
        let values = self.score_cached(qe_metric, &items, usize::MAX, |index, source| {
            DecodeError::CandidateFailed { index, source }
        })?;
        Ok(MbrSelection::from_utilities(
            values.into_iter().map(|v| desc.orientation.utility(v)).collect(),
        ))
    }
}

/// One-shot MBR selection without a persistent cache.
pub fn mbr_select<S: Scalar>(
    pool: &CandidatePool,
    metric: &dyn Metric<S>,
    options: &MbrOptions,
) -> Result<MbrSelection<S>, DecodeError> {
    QualityDecoder::new().mbr_select(pool, metric, options)
}

/// One-shot QE reranking without a persistent cache.
pub fn qe_rerank<S: Scalar>(
    pool: &CandidatePool,
    qe_metric: &dyn Metric<S>,
    context: Window,
) -> Result<MbrSelection<S>, DecodeError> {
    QualityDecoder::new().qe_rerank(pool, qe_metric, context)
}

/// A pool with the segment it belongs to, as stored in pool dumps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolRecord {
    pub key: String,
    pub pool: CandidatePool,
}

pub fn write_pools(path: impl AsRef<Path>, records: &[PoolRecord]) -> Result<(), DecodeError> {
    let mut out = fs::File::create(path)?;
    for r in records {
        writeln!(out, "{}", serde_json::to_string(r).expect("pool serializes"))?;
    }
    Ok(())
}

pub fn read_pools(path: impl AsRef<Path>) -> Result<Vec<PoolRecord>, DecodeError> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line).map_err(|e| DecodeError::PoolFile {
            line: i + 1,
            reason: e.to_string(),
        })?);
    }
    Ok(records)
}
