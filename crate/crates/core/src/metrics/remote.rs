//! Client side of the scoring protocol:
//! `POST {"items": [{"src", "mt", "ref"?}]}` → `{"scores": [..]}`, with scores
//! positionally aligned to items.

use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{Metric, MetricDescriptor, MetricError, MetricInput};
use crate::scalar::Scalar;
use crate::transport::{HttpTransport, RetryPolicy, Transport};

pub type ScoreItem = MetricInput;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub items: Vec<ScoreItem>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreResponse {
    pub scores: Vec<f64>,
}

pub struct RemoteMetric {
    descriptor: MetricDescriptor,
    url: String,
    batch_size: usize,
    transport: Arc<dyn Transport>,
    retry: RetryPolicy,
}

impl RemoteMetric {
    pub fn new(descriptor: MetricDescriptor, url: &str, batch_size: usize, transport: Arc<dyn Transport>) -> Self {
        RemoteMetric {
            descriptor,
            url: url.to_string(),
            batch_size: batch_size.max(1),
            transport,
            retry: RetryPolicy::default(),
        }
    }

    pub fn http(descriptor: MetricDescriptor, url: &str, batch_size: usize) -> Result<Self, MetricError> {
        let transport = HttpTransport::new(None, Duration::from_secs(300))?;
        Ok(Self::new(descriptor, url, batch_size, Arc::new(transport)))
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    /// Scores in wire order, as `f64`.
    pub fn remote_score(&self, items: &[MetricInput]) -> Result<Vec<f64>, MetricError> {
        let mut scores = Vec::with_capacity(items.len());
        for (chunk_no, chunk) in items.chunks(self.batch_size).enumerate() {
            let offset = chunk_no * self.batch_size;
            let wire: Vec<ScoreItem> = chunk
                .iter()
                .enumerate()
                .map(|(i, item)| {
                    if self.descriptor.needs_reference {
                        if item.reference.is_none() {
                            return Err(MetricError::MissingReference {
                                metric: self.descriptor.id.clone(),
                                index: offset + i,
                            });
                        }
                        Ok(item.clone())
                    } else {
                        Ok(ScoreItem { reference: None, ..item.clone() })
                    }
                })
                .collect::<Result<_, _>>()?;
            let body = serde_json::to_value(ScoreRequest { items: wire }).expect("request serializes");
            let raw = self.retry.run(|| self.transport.post_json(&self.url, &body))?;
            let resp: ScoreResponse = serde_json::from_value(raw)
                .map_err(|e| MetricError::Protocol(format!("bad response body: {e}")))?;
            if resp.scores.len() != chunk.len() {
                return Err(MetricError::Protocol(format!(
                    "sent {} items, received {} scores",
                    chunk.len(),
                    resp.scores.len()
                )));
            }
            if let Some(i) = resp.scores.iter().position(|s| !s.is_finite()) {
                return Err(MetricError::NonFinite(offset + i));
            }
            scores.extend(resp.scores);
        }
        Ok(scores)
    }
}

impl<S: Scalar> Metric<S> for RemoteMetric {
    fn descriptor(&self) -> &MetricDescriptor {
        &self.descriptor
    }

    fn score_batch(&self, items: &[MetricInput]) -> Result<Vec<S>, MetricError> {
        Ok(self.remote_score(items)?.into_iter().map(S::lit).collect())
    }
}
