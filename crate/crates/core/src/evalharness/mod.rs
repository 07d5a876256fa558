//! System comparison: segment-level significance, per-language performance
//! clusters, rankings, and experiment runs.

mod experiment;

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{chrf_stats, ChrfParams, ChrfStats, Orientation};
use crate::scalar::Scalar;

pub use experiment::{
    load_config, render_tables, run_experiment, BackendConfig, BinsConfig, CorpusConfig, EvaluationConfig,
    ExperimentConfig, ExperimentOutcome, Injected, Report, SegmentRecord, Strategy, SweepConfig, SystemConfig,
    SystemReport,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("score lists differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least {needed} segments, got {got}")]
    TooFewSegments { needed: usize, got: usize },
    #[error("missing system/language cells: {}", format_gaps(.0))]
    MissingCells(Vec<(String, String)>),
    #[error("system {system} lacks segment {key} in {language}")]
    MissingSegment { system: String, language: String, key: String },
    #[error("system {system} has no {metric} score for segment {key}")]
    MissingScore { system: String, metric: String, key: String },
    #[error("duplicate segment key {key} in system {system}")]
    DuplicateSegment { system: String, key: String },
    #[error("invalid experiment config: {0}")]
    Config(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn format_gaps(gaps: &[(String, String)]) -> String {
    gaps.iter()
        .map(|(s, l)| format!("{s}@{l}"))
        .collect::<Vec<_>>()
        .join(", ")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PermutationOptions {
    pub level: f64,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for PermutationOptions {
    fn default() -> Self {
        PermutationOptions {
            level: 0.95,
            iterations: 10_000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignificanceResult {
    pub p_value: f64,
    pub significant: bool,
    /// True when every sign assignment was enumerated.
    pub exact: bool,
}

/// Two-sided paired permutation test on the mean difference.
///
/// Differences are randomly sign-flipped. When `2^n` does not exceed the
/// iteration budget all assignments are enumerated and the p-value is exact;
/// otherwise it is the Monte Carlo estimate `(hits + 1) / (iterations + 1)`.
pub fn paired_permutation<S: Scalar>(a: &[S], b: &[S], options: &PermutationOptions) -> Result<SignificanceResult, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::LengthMismatch(a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(EvalError::TooFewSegments { needed: 2, got: a.len() });
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x.as_f64() - y.as_f64()).collect();
    let observed: f64 = diffs.iter().sum::<f64>().abs();
    // tolerance so that permutations reproducing the observed statistic count
    let tol = 1e-9 * diffs.iter().map(|d| d.abs()).sum::<f64>().max(1.0);
    let n = diffs.len();

    let exact = n < usize::BITS as usize && (1usize << n) <= options.iterations;
    let p_value = if exact {
        let total = 1usize << n;
        let hits = (0..total)
            .filter(|mask| {
                let s: f64 = diffs
                    .iter()
                    .enumerate()
                    .map(|(i, d)| if mask >> i & 1 == 1 { -d } else { *d })
                    .sum();
                s.abs() >= observed - tol
            })
            .count();
        hits as f64 / total as f64
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
        let hits = (0..options.iterations)
            .filter(|_| {
                let s: f64 = diffs.iter().map(|d| if rng.gen::<bool>() { -d } else { *d }).sum();
                s.abs() >= observed - tol
            })
            .count();
        (hits + 1) as f64 / (options.iterations + 1) as f64
    };
    Ok(SignificanceResult {
        p_value,
        significant: p_value < 1.0 - options.level,
        exact,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResamplingOptions {
    pub samples: usize,
    pub fraction: f64,
    pub level: f64,
    pub seed: u64,
    pub chrf: ChrfParams,
}

impl Default for ResamplingOptions {
    fn default() -> Self {
        ResamplingOptions {
            samples: 100,
            fraction: 0.5,
            level: 0.95,
            seed: 0,
            chrf: ChrfParams::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResamplingResult {
    /// Subsets where A scored strictly higher.
    pub wins: usize,
    pub ties: usize,
    pub samples: usize,
    /// `(wins + ties / 2) / samples`.
    pub win_rate: f64,
    /// A beats B in at least `ceil(level * samples)` subsets.
    pub significant: bool,
}

/// Per-segment chrF statistics, so resampled corpus scores are sums.
pub fn segment_chrf_stats<H: AsRef<str>, R: AsRef<str>>(pairs: &[(H, R)], params: &ChrfParams) -> Vec<ChrfStats> {
    pairs.iter().map(|(h, r)| chrf_stats(h.as_ref(), r.as_ref(), params)).collect()
}

/// Compares corpus chrF of two systems on random half-size subsets.
///
/// Each subset draws `round(fraction * n)` distinct segment indices with
/// `rand::seq::index::sample` from a ChaCha8 generator seeded with `seed`;
/// both systems are scored on the same subset.
pub fn chrf_resampled_significance<H: AsRef<str>, R: AsRef<str>>(
    a: &[(H, R)],
    b: &[(H, R)],
    options: &ResamplingOptions,
) -> Result<ResamplingResult, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::LengthMismatch(a.len(), b.len()));
    }
    let stats_a = segment_chrf_stats(a, &options.chrf);
    let stats_b = segment_chrf_stats(b, &options.chrf);
    resampled_from_stats(&stats_a, &stats_b, options)
}

pub fn resampled_from_stats(a: &[ChrfStats], b: &[ChrfStats], options: &ResamplingOptions) -> Result<ResamplingResult, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::LengthMismatch(a.len(), b.len()));
    }
    let n = a.len();
    if n < 2 {
        return Err(EvalError::TooFewSegments { needed: 2, got: n });
    }
    let size = ((n as f64 * options.fraction).round() as usize).clamp(1, n);
    let orders = options.chrf.char_order + options.chrf.word_order;
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let (mut wins, mut ties) = (0, 0);
    for _ in 0..options.samples {
        let idx = sample(&mut rng, n, size);
        let (mut sa, mut sb) = (ChrfStats::zeros(orders), ChrfStats::zeros(orders));
        for i in idx.iter() {
            sa.accumulate(&a[i]);
            sb.accumulate(&b[i]);
        }
        let (fa, fb): (f64, f64) = (sa.score(options.chrf.beta), sb.score(options.chrf.beta));
        if fa > fb {
            wins += 1;
        } else if fa == fb {
            ties += 1;
        }
    }
    let needed = (options.level * options.samples as f64).ceil() as usize;
    Ok(ResamplingResult {
        wins,
        ties,
        samples: options.samples,
        win_rate: (wins as f64 + ties as f64 / 2.0) / options.samples as f64,
        significant: options.samples > 0 && wins >= needed,
    })
}

/// One system's output on one language direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemRun {
    pub system_id: String,
    pub language: String,
    pub segments: Vec<SegmentScores>,
    #[serde(default)]
    pub config: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentScores {
    pub key: String,
    pub hypothesis: String,
    #[serde(default)]
    pub reference: Option<String>,
    /// Raw metric values by metric id.
    pub scores: BTreeMap<String, f64>,
}

/// How systems are compared within a language.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "kebab-case")]
pub enum SignificanceTest {
    /// Corpus chrF on resampled subsets; needs references.
    ChrfResampling(ResamplingOptions),
    /// Paired permutation on segment scores of `metric`.
    Permutation(PermutationOptions),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterOptions {
    pub metric: String,
    pub orientation: Orientation,
    pub test: SignificanceTest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanguageClusters {
    /// System score used for ordering, oriented as reported by the metric.
    pub scores: BTreeMap<String, f64>,
    /// Clusters best first; each lists systems best first.
    pub clusters: Vec<Vec<String>>,
    /// Emitted cluster label per system.
    pub index: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankEntry {
    pub system: String,
    pub rank: usize,
    pub average_cluster: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterTable {
    pub metric: String,
    pub languages: BTreeMap<String, LanguageClusters>,
    /// False when no system is in the top cluster for a majority of
    /// languages; all labels are then shifted to start at 2.
    pub first_cluster_emitted: bool,
    pub ranking: Vec<RankEntry>,
}

impl ClusterTable {
    pub fn cluster_of(&self, language: &str, system: &str) -> Option<usize> {
        self.languages.get(language)?.index.get(system).copied()
    }
}

/// Groups systems ordered best first. `better(i, j)` says whether system `i`
/// is significantly better than system `j`. A system joins the cluster above
/// it unless that cluster's best member is significantly better.
pub fn chain_clusters(order: &[usize], mut better: impl FnMut(usize, usize) -> bool) -> Vec<Vec<usize>> {
    let mut clusters: Vec<Vec<usize>> = Vec::new();
    for &s in order {
        match clusters.last_mut() {
            Some(c) if !better(c[0], s) => c.push(s),
            _ => clusters.push(vec![s]),
        }
    }
    clusters
}

/// Per-language clusters and the cross-language ranking by mean cluster label.
pub fn cluster_and_rank(runs: &[SystemRun], options: &ClusterOptions) -> Result<ClusterTable, EvalError> {
    let systems: BTreeSet<&str> = runs.iter().map(|r| r.system_id.as_str()).collect();
    let languages: BTreeSet<&str> = runs.iter().map(|r| r.language.as_str()).collect();
    let mut cells: BTreeMap<(&str, &str), &SystemRun> = BTreeMap::new();
    for r in runs {
        cells.insert((r.language.as_str(), r.system_id.as_str()), r);
    }
    let gaps: Vec<(String, String)> = languages
        .iter()
        .flat_map(|&l| systems.iter().map(move |&s| (s, l)))
        .filter(|&(s, l)| !cells.contains_key(&(l, s)))
        .map(|(s, l)| (s.to_string(), l.to_string()))
        .collect();
    if !gaps.is_empty() {
        return Err(EvalError::MissingCells(gaps));
    }

    let mut raw: BTreeMap<String, Clustered> = BTreeMap::new();
    for &lang in &languages {
        let lang_runs: Vec<&SystemRun> = systems.iter().map(|&s| cells[&(lang, s)]).collect();
        let (scores, clusters) = cluster_language(&lang_runs, options)?;
        raw.insert(lang.to_string(), (scores, clusters));
    }

    let top_counts = |s: &str| raw.values().filter(|(_, c)| c[0].iter().any(|x| x == s)).count();
    let first_cluster_emitted = systems.iter().any(|s| 2 * top_counts(s) > languages.len());
    let shift = usize::from(!first_cluster_emitted);

    let mut label_sums: BTreeMap<String, usize> = BTreeMap::new();
    let languages_out = raw
        .into_iter()
        .map(|(lang, (scores, clusters))| {
            let mut index = BTreeMap::new();
            for (ci, members) in clusters.iter().enumerate() {
                for m in members {
                    index.insert(m.clone(), ci + 1 + shift);
                    *label_sums.entry(m.clone()).or_default() += ci + 1 + shift;
                }
            }
            (lang, LanguageClusters { scores, clusters, index })
        })
        .collect();

    let mut order: Vec<(String, usize)> = label_sums.into_iter().collect();
    order.sort_by(|a, b| a.1.cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
    let n_lang = languages.len() as f64;
    let mut ranking: Vec<RankEntry> = Vec::with_capacity(order.len());
    for (pos, (system, sum)) in order.iter().enumerate() {
        let rank = match ranking.last() {
            Some(prev) if order[pos - 1].1 == *sum => prev.rank,
            _ => pos + 1,
        };
        ranking.push(RankEntry {
            system: system.clone(),
            rank,
            average_cluster: *sum as f64 / n_lang,
        });
    }

    Ok(ClusterTable {
        metric: options.metric.clone(),
        languages: languages_out,
        first_cluster_emitted,
        ranking,
    })
}

fn aligned<'r>(runs: &[&'r SystemRun]) -> Result<Vec<Vec<&'r SegmentScores>>, EvalError> {
    let mut out = Vec::with_capacity(runs.len());
    for run in runs {
        let mut by_key: BTreeMap<&str, &SegmentScores> = BTreeMap::new();
        for s in &run.segments {
            if by_key.insert(&s.key, s).is_some() {
                return Err(EvalError::DuplicateSegment {
                    system: run.system_id.clone(),
                    key: s.key.clone(),
                });
            }
        }
        let row = runs[0]
            .segments
            .iter()
            .map(|s| {
                by_key.get(s.key.as_str()).copied().ok_or_else(|| EvalError::MissingSegment {
                    system: run.system_id.clone(),
                    language: run.language.clone(),
                    key: s.key.clone(),
                })
            })
            .collect::<Result<_, _>>()?;
        out.push(row);
    }
    Ok(out)
}

type Clustered = (BTreeMap<String, f64>, Vec<Vec<String>>);
type BetterFn<'a> = Box<dyn FnMut(usize, usize) -> Result<bool, EvalError> + 'a>;

fn cluster_language(runs: &[&SystemRun], options: &ClusterOptions) -> Result<Clustered, EvalError> {
    let segs = aligned(runs)?;
    let ids: Vec<&str> = runs.iter().map(|r| r.system_id.as_str()).collect();

    let (scores, mut better): (Vec<f64>, BetterFn) = match options.test {
        SignificanceTest::ChrfResampling(opts) => {
            let stats: Vec<Vec<ChrfStats>> = segs
                .iter()
                .zip(&ids)
                .map(|(row, id)| {
                    row.iter()
                        .map(|s| {
                            let r = s.reference.as_deref().ok_or_else(|| EvalError::MissingScore {
                                system: id.to_string(),
                                metric: "reference".into(),
                                key: s.key.clone(),
                            })?;
                            Ok(chrf_stats(&s.hypothesis, r, &opts.chrf))
                        })
                        .collect::<Result<Vec<_>, EvalError>>()
                })
                .collect::<Result<_, _>>()?;
            let scores = stats
                .iter()
                .map(|st| {
                    let mut total = ChrfStats::zeros(opts.chrf.char_order + opts.chrf.word_order);
                    st.iter().for_each(|s| total.accumulate(s));
                    total.score::<f64>(opts.chrf.beta)
                })
                .collect();
            (
                scores,
                Box::new(move |i, j| Ok(resampled_from_stats(&stats[i], &stats[j], &opts)?.significant)),
            )
        }
        SignificanceTest::Permutation(opts) => {
            let orient = options.orientation;
            let values: Vec<Vec<f64>> = segs
                .iter()
                .zip(&ids)
                .map(|(row, id)| {
                    row.iter()
                        .map(|s| {
                            s.scores.get(&options.metric).map(|&v| orient.utility(v)).ok_or_else(|| {
                                EvalError::MissingScore {
                                    system: id.to_string(),
                                    metric: options.metric.clone(),
                                    key: s.key.clone(),
                                }
                            })
                        })
                        .collect::<Result<Vec<_>, EvalError>>()
                })
                .collect::<Result<_, _>>()?;
            let means: Vec<f64> = values.iter().map(|v| crate::scalar::mean(v).unwrap_or(0.0)).collect();
            (
                means.clone(),
                Box::new(move |i, j| Ok(means[i] > means[j] && paired_permutation(&values[i], &values[j], &opts)?.significant)),
            )
        }
    };

    // best first; ties keep system-id order
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(std::cmp::Ordering::Equal));
    let mut failure = None;
    let clusters = chain_clusters(&order, |i, j| match better(i, j) {
        Ok(v) => v,
        Err(e) => {
            failure.get_or_insert(e);
            false
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    let reported = match options.test {
        SignificanceTest::ChrfResampling(_) => scores.clone(),
        SignificanceTest::Permutation(_) => {
            scores.iter().map(|&s| options.orientation.utility(s)).collect()
        }
    };
    Ok((
        ids.iter().map(|s| s.to_string()).zip(reported).collect(),
        clusters
            .into_iter()
            .map(|c| c.into_iter().map(|i| ids[i].to_string()).collect())
            .collect(),
    ))
}
