//! Character n-gram F-score (chrF), compatible with the sacreBLEU
//! definition: whitespace is removed before extracting character n-grams,
//! precision and recall are averaged over the orders for which both sides
//! have n-grams, and the averages are combined into an F-beta score.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

/// Characters split off word edges before word n-gram extraction.
const PUNCTUATION: &str = "!\"#$%&'()*+,-./:;<=>?@[\\]^_`{|}~";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChrfParams {
    pub char_order: usize,
    pub word_order: usize,
    pub beta: f64,
    pub whitespace: bool,
}

impl Default for ChrfParams {
    /// chrF2: character order 6, no word n-grams, beta 2, whitespace excluded.
    fn default() -> Self {
        ChrfParams {
            char_order: 6,
            word_order: 0,
            beta: 2.0,
            whitespace: false,
        }
    }
}

/// Per-order `(hypothesis, reference, matched)` n-gram counts; character
/// orders first, then word orders.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ChrfStats {
    pub orders: Vec<[usize; 3]>,
}

impl ChrfStats {
    pub fn zeros(n_orders: usize) -> Self {
        ChrfStats {
            orders: vec![[0; 3]; n_orders],
        }
    }

    pub fn accumulate(&mut self, other: &ChrfStats) {
        if self.orders.len() < other.orders.len() {
            self.orders.resize(other.orders.len(), [0; 3]);
        }
        for (acc, o) in self.orders.iter_mut().zip(&other.orders) {
            for k in 0..3 {
                acc[k] += o[k];
            }
        }
    }

    /// F-beta score in `[0, 100]`.
    pub fn score<S: Scalar>(&self, beta: f64) -> S {
        let factor = S::lit(beta * beta);
        let one = S::one();
        let mut avg_prec = S::zero();
        let mut avg_rec = S::zero();
        let mut effective = 0usize;
        for &[hyp, reference, matched] in &self.orders {
            if hyp > 0 && reference > 0 {
                avg_prec = avg_prec + S::from_count(matched) / S::from_count(hyp);
                avg_rec = avg_rec + S::from_count(matched) / S::from_count(reference);
                effective += 1;
            }
        }
        if effective == 0 {
            return S::zero();
        }
        avg_prec = avg_prec / S::from_count(effective);
        avg_rec = avg_rec / S::from_count(effective);
        if avg_prec + avg_rec == S::zero() {
            return S::zero();
        }
        S::lit(100.0) * (one + factor) * avg_prec * avg_rec / (factor * avg_prec + avg_rec)
    }
}

/// Pre-extracted n-gram counts of one string.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NgramProfile {
    orders: Vec<HashMap<String, usize>>,
}

impl NgramProfile {
    pub fn new(text: &str, params: &ChrfParams) -> Self {
        let chars: Vec<char> = if params.whitespace {
            text.chars().collect()
        } else {
            text.chars().filter(|c| !c.is_whitespace()).collect()
        };
        let mut orders = Vec::with_capacity(params.char_order + params.word_order);
        for n in 1..=params.char_order {
            let mut counts = HashMap::new();
            for w in chars.windows(n) {
                *counts.entry(w.iter().collect::<String>()).or_insert(0) += 1;
            }
            orders.push(counts);
        }
        if params.word_order > 0 {
            let words = split_words(text);
            for n in 1..=params.word_order {
                let mut counts = HashMap::new();
                for w in words.windows(n) {
                    *counts.entry(w.join(" ")).or_insert(0) += 1;
                }
                orders.push(counts);
            }
        }
        NgramProfile { orders }
    }

    /// Match statistics of `self` as hypothesis against `reference`.
    pub fn stats_against(&self, reference: &NgramProfile) -> ChrfStats {
        ChrfStats {
            orders: self
                .orders
                .iter()
                .zip(&reference.orders)
                .map(|(h, r)| {
                    let matched = h
                        .iter()
                        .map(|(g, &hc)| r.get(g).map_or(0, |&rc| hc.min(rc)))
                        .sum();
                    [h.values().sum(), r.values().sum(), matched]
                })
                .collect(),
        }
    }
}

fn split_words(text: &str) -> Vec<&str> {
    let is_punct = |c: char| PUNCTUATION.contains(c);
    let mut out = Vec::new();
    for w in text.split_whitespace() {
        let mut chars = w.chars();
        let first = chars.next().expect("non-empty word");
        let last = w.chars().next_back().expect("non-empty word");
        if w.chars().count() == 1 {
            out.push(w);
        } else if is_punct(last) {
            let cut = w.len() - last.len_utf8();
            out.push(&w[..cut]);
            out.push(&w[cut..]);
        } else if is_punct(first) {
            let cut = first.len_utf8();
            out.push(&w[..cut]);
            out.push(&w[cut..]);
        } else {
            out.push(w);
        }
    }
    out
}

pub fn chrf_stats(hypothesis: &str, reference: &str, params: &ChrfParams) -> ChrfStats {
    NgramProfile::new(hypothesis, params).stats_against(&NgramProfile::new(reference, params))
}

/// Sentence-level chrF in `[0, 100]`.
pub fn chrf_segment<S: Scalar>(hypothesis: &str, reference: &str, params: &ChrfParams) -> S {
    chrf_stats(hypothesis, reference, params).score(params.beta)
}

/// Corpus-level chrF: n-gram statistics are summed over all pairs before the
/// F-score is computed. `None` for an empty corpus.
pub fn chrf_corpus<S, H, R>(pairs: &[(H, R)], params: &ChrfParams) -> Option<S>
where
    S: Scalar,
    H: AsRef<str>,
    R: AsRef<str>,
{
    if pairs.is_empty() {
        return None;
    }
    let mut total = ChrfStats::zeros(params.char_order + params.word_order);
    for (h, r) in pairs {
        total.accumulate(&chrf_stats(h.as_ref(), r.as_ref(), params));
    }
    Some(total.score(params.beta))
}
