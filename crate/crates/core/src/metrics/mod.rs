//! Metric endpoints: native chrF, context augmentation of metric inputs and
//! the remote scoring protocol for neural metrics.

mod chrf;
mod remote;

use std::collections::BTreeMap;
use std::marker::PhantomData;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Conversation;
use crate::scalar::Scalar;
use crate::transport::TransportError;

pub use chrf::{chrf_corpus, chrf_segment, chrf_stats, ChrfParams, ChrfStats, NgramProfile};
pub use remote::{RemoteMetric, ScoreItem, ScoreRequest, ScoreResponse};

/// Joins context turns and the base text.
pub const CONTEXT_SEPARATOR: &str = "\n";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("item {index}: metric {metric} needs a reference")]
    MissingReference { metric: String, index: usize },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("transport: {0}")]
    Transport(#[from] TransportError),
    #[error("unknown metric {id:?}; configured: {}", known.join(", "))]
    Unknown { id: String, known: Vec<String> },
    #[error("metric config: {0}")]
    Config(String),
    #[error("metric returned a non-finite score for item {0}")]
    NonFinite(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    LexicalChrf,
    RemoteReferenceBased,
    RemoteReferenceFree,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Orientation {
    #[default]
    #[serde(alias = "higher_is_better")]
    Higher,
    #[serde(alias = "lower_is_better")]
    Lower,
}

impl Orientation {
    /// Maps a raw score onto a higher-is-better scale.
    pub fn utility<S: Scalar>(self, raw: S) -> S {
        match self {
            Orientation::Higher => raw,
            Orientation::Lower => -raw,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricDescriptor {
    pub id: String,
    pub kind: MetricKind,
    pub needs_reference: bool,
    pub declares_symmetry: bool,
    pub context_capable: bool,
    pub orientation: Orientation,
}

/// One metric input. `reference` is omitted for reference-free metrics.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MetricInput {
    pub src: String,
    pub mt: String,
    #[serde(rename = "ref", default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<String>,
}

impl MetricInput {
    pub fn new(src: &str, mt: &str, reference: Option<&str>) -> Self {
        MetricInput {
            src: src.to_string(),
            mt: mt.to_string(),
            reference: reference.map(str::to_string),
        }
    }
}

/// A segment-level quality or utility metric.
pub trait Metric<S: Scalar>: Send + Sync {
    fn descriptor(&self) -> &MetricDescriptor;

    /// Raw scores, positionally aligned with `items`.
    fn score_batch(&self, items: &[MetricInput]) -> Result<Vec<S>, MetricError>;
}

impl<S: Scalar, M: Metric<S> + ?Sized> Metric<S> for Arc<M> {
    fn descriptor(&self) -> &MetricDescriptor {
        (**self).descriptor()
    }

    fn score_batch(&self, items: &[MetricInput]) -> Result<Vec<S>, MetricError> {
        (**self).score_batch(items)
    }
}

/// Native chrF as a reference-based metric. The source field is ignored.
#[derive(Debug, Clone)]
pub struct ChrfMetric {
    descriptor: MetricDescriptor,
    params: ChrfParams,
}

impl ChrfMetric {
    pub fn new(params: ChrfParams) -> Self {
        ChrfMetric {
            descriptor: MetricDescriptor {
                id: "chrf".into(),
                kind: MetricKind::LexicalChrf,
                needs_reference: true,
                declares_symmetry: false,
                context_capable: true,
                orientation: Orientation::Higher,
            },
            params,
        }
    }

    pub fn with_id(mut self, id: &str) -> Self {
        self.descriptor.id = id.to_string();
        self
    }

    pub fn params(&self) -> &ChrfParams {
        &self.params
    }
}

impl Default for ChrfMetric {
    fn default() -> Self {
        Self::new(ChrfParams::default())
    }
}

impl<S: Scalar> Metric<S> for ChrfMetric {
    fn descriptor(&self) -> &MetricDescriptor {
        &self.descriptor
    }

    fn score_batch(&self, items: &[MetricInput]) -> Result<Vec<S>, MetricError> {
        let mut profiles: std::collections::HashMap<&str, NgramProfile> = Default::default();
        for (index, item) in items.iter().enumerate() {
            let reference = item.reference.as_deref().ok_or_else(|| MetricError::MissingReference {
                metric: self.descriptor.id.clone(),
                index,
            })?;
            for text in [item.mt.as_str(), reference] {
                profiles
                    .entry(text)
                    .or_insert_with(|| NgramProfile::new(text, &self.params));
            }
        }
        Ok(items
            .iter()
            .map(|item| {
                let reference = item.reference.as_deref().expect("checked above");
                profiles[item.mt.as_str()]
                    .stats_against(&profiles[reference])
                    .score(self.params.beta)
            })
            .collect())
    }
}

/// Counts scored items; wraps any metric.
pub struct CountingMetric<S, M> {
    inner: M,
    calls: AtomicUsize,
    _scalar: PhantomData<fn() -> S>,
}

impl<S: Scalar, M: Metric<S>> CountingMetric<S, M> {
    pub fn new(inner: M) -> Self {
        CountingMetric {
            inner,
            calls: AtomicUsize::new(0),
            _scalar: PhantomData,
        }
    }

    /// Number of individual items scored so far.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl<S: Scalar, M: Metric<S>> Metric<S> for CountingMetric<S, M> {
    fn descriptor(&self) -> &MetricDescriptor {
        self.inner.descriptor()
    }

    fn score_batch(&self, items: &[MetricInput]) -> Result<Vec<S>, MetricError> {
        self.calls.fetch_add(items.len(), Ordering::SeqCst);
        self.inner.score_batch(items)
    }
}

/// `lines` joined by the separator and terminated by it; empty for no lines.
pub fn context_prefix<'a>(lines: impl IntoIterator<Item = &'a str>) -> String {
    let mut out = String::new();
    for line in lines {
        out.push_str(line);
        out.push_str(CONTEXT_SEPARATOR);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextAugmentedTuple {
    pub src_aug: String,
    pub ref_aug: String,
    pub hyp_aug: String,
}

/// Prepends the original source texts of the `k` turns before turn `t`
/// (1-based) to the source, reference and hypothesis fields.
pub fn augment_context(
    src: &str,
    reference: &str,
    hyp: &str,
    conversation: &Conversation,
    t: usize,
    k: usize,
) -> ContextAugmentedTuple {
    let end = t.saturating_sub(1).min(conversation.len());
    let start = end.saturating_sub(k);
    let prefix = context_prefix(conversation.turns[start..end].iter().map(|t| t.source_text.as_str()));
    ContextAugmentedTuple {
        src_aug: format!("{prefix}{src}"),
        ref_aug: format!("{prefix}{reference}"),
        hyp_aug: format!("{prefix}{hyp}"),
    }
}

/// Metric definition as it appears in configuration files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MetricSpec {
    Chrf {
        #[serde(default = "six")]
        char_order: usize,
        #[serde(default)]
        word_order: usize,
        #[serde(default = "two")]
        beta: f64,
    },
    Remote {
        url: String,
        #[serde(default)]
        orientation: Orientation,
        #[serde(default = "yes")]
        needs_reference: bool,
        #[serde(default = "yes")]
        context_capable: bool,
        #[serde(default = "batch")]
        batch_size: usize,
    },
}

fn six() -> usize {
    6
}
fn two() -> f64 {
    2.0
}
fn yes() -> bool {
    true
}
fn batch() -> usize {
    32
}

/// Metric ids mapped to their definitions. `chrf` is always available.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricRegistry {
    #[serde(flatten)]
    pub specs: BTreeMap<String, MetricSpec>,
}

impl MetricRegistry {
    pub fn from_toml(text: &str) -> Result<Self, MetricError> {
        toml::from_str(text).map_err(|e| MetricError::Config(e.to_string()))
    }

    pub fn insert(&mut self, id: &str, spec: MetricSpec) {
        self.specs.insert(id.to_string(), spec);
    }

    pub fn ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.specs.keys().cloned().collect();
        if !self.specs.contains_key("chrf") {
            ids.insert(0, "chrf".into());
        }
        ids
    }

    pub fn contains(&self, id: &str) -> bool {
        id == "chrf" || self.specs.contains_key(id)
    }

    pub fn spec(&self, id: &str) -> Result<MetricSpec, MetricError> {
        match self.specs.get(id) {
            Some(spec) => Ok(spec.clone()),
            None if id == "chrf" => Ok(MetricSpec::Chrf { char_order: 6, word_order: 0, beta: 2.0 }),
            None => Err(MetricError::Unknown {
                id: id.to_string(),
                known: self.ids(),
            }),
        }
    }

    /// Instantiates metric `id`; remote metrics use HTTP transport.
    pub fn build<S: Scalar>(&self, id: &str) -> Result<Arc<dyn Metric<S>>, MetricError> {
        Ok(match self.spec(id)? {
            MetricSpec::Chrf { char_order, word_order, beta } => Arc::new(
                ChrfMetric::new(ChrfParams { char_order, word_order, beta, whitespace: false }).with_id(id),
            ),
            MetricSpec::Remote {
                url,
                orientation,
                needs_reference,
                context_capable,
                batch_size,
            } => Arc::new(RemoteMetric::http(
                MetricDescriptor {
                    id: id.to_string(),
                    kind: if needs_reference {
                        MetricKind::RemoteReferenceBased
                    } else {
                        MetricKind::RemoteReferenceFree
                    },
                    needs_reference,
                    declares_symmetry: false,
                    context_capable,
                    orientation,
                },
                &url,
                batch_size,
            )?),
        })
    }
}
