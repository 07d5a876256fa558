//! Context-usage diagnostics.
//!
//! * P-CXMI: `log P(y | x, C) - log P(y | x)` for a reference `y`.
//! * Likelihood difference: `log P(h_ctx | x, C) - log P(h_noctx | x)`, each
//!   hypothesis scored under its own prompt.
//! * Occlusion saliency: the contrastive target
//!   `f(C) = log P(h_ctx | x, C) - log P(h_noctx | x, C)` is recomputed with
//!   each context turn left out; the drop is that turn's saliency.
//! * Quality bins and context-window sweeps.
//!
//! All log-probabilities come from forced decoding through
//! [`Backend::score_sequence`], with the completion separator prepended to
//! the target exactly as it appears after the prompt.

use std::collections::HashMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{self, Backend, BackendError};
use crate::corpus::{Conversation, LangCode};
use crate::metrics::{chrf_corpus, ChrfParams};
use crate::promptkit::{
    build_context, render_prompt, ContextBlock, ContextPolicy, LanguageMode, LanguageTable, PromptError, Window,
    COMPLETION_SEPARATOR,
};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("scoring under the {prompt} prompt failed: {source}")]
    Scoring {
        prompt: &'static str,
        #[source]
        source: BackendError,
    },
    #[error("generation failed: {0}")]
    Generation(#[source] BackendError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("saliency needs at least one context turn")]
    EmptyContext,
    #[error("no scores to bin")]
    EmptyInput,
    #[error("need at least 2 bins, got {0}")]
    TooFewBins(usize),
    #[error("score lists differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("non-finite score at position {0}")]
    NonFinite(usize),
}

/// How a sequence log-probability is reduced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    #[default]
    Sum,
    PerToken,
}

/// The pieces needed to render both prompts for one segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentInput {
    pub source: String,
    pub src_lang: LangCode,
    pub tgt_lang: LangCode,
    pub context: ContextBlock,
}

impl SegmentInput {
    pub fn from_turn(
        conversation: &Conversation,
        t: usize,
        policy: ContextPolicy,
        translations: Option<&HashMap<usize, String>>,
    ) -> Result<Self, AnalysisError> {
        let context = build_context(conversation, t, policy, translations)?;
        let turn = conversation.turn(t).expect("checked by build_context");
        Ok(SegmentInput {
            source: turn.source_text.clone(),
            src_lang: turn.source_language.clone(),
            tgt_lang: conversation.target_language(turn).clone(),
            context,
        })
    }

    fn prompt(&self, context: &ContextBlock, languages: &LanguageTable) -> Result<String, AnalysisError> {
        Ok(render_prompt(&self.source, context, &self.src_lang, &self.tgt_lang, true, languages)?.text)
    }

    fn no_context_prompt(&self, languages: &LanguageTable) -> Result<String, AnalysisError> {
        Ok(render_prompt(&self.source, &self.context, &self.src_lang, &self.tgt_lang, false, languages)?.text)
    }
}

/// Scores the completion `target` after `prompt`.
fn logprob(
    backend: &dyn Backend,
    prompt: &str,
    target: &str,
    normalization: Normalization,
    label: &'static str,
) -> Result<f64, AnalysisError> {
    let scored = backend
        .score_sequence(prompt, &format!("{COMPLETION_SEPARATOR}{target}"))
        .map_err(|source| AnalysisError::Scoring { prompt: label, source })?;
    Ok(match normalization {
        Normalization::Sum => scored.total_logprob,
        Normalization::PerToken => scored.per_token(),
    })
}

/// Pointwise contextual cross-mutual information of `reference`, in nats.
pub fn p_cxmi(
    backend: &dyn Backend,
    segment: &SegmentInput,
    reference: &str,
    languages: &LanguageTable,
    normalization: Normalization,
) -> Result<f64, AnalysisError> {
    let with = logprob(backend, &segment.prompt(&segment.context, languages)?, reference, normalization, "context")?;
    let without = logprob(backend, &segment.no_context_prompt(languages)?, reference, normalization, "no-context")?;
    Ok(with - without)
}

/// Log-likelihood of the context-aware hypothesis under the context prompt
/// minus that of the context-free hypothesis under the context-free prompt.
/// Not antisymmetric in the two hypotheses.
pub fn likelihood_difference(
    backend: &dyn Backend,
    segment: &SegmentInput,
    hyp_ctx: &str,
    hyp_noctx: &str,
    languages: &LanguageTable,
    normalization: Normalization,
) -> Result<f64, AnalysisError> {
    let with = logprob(backend, &segment.prompt(&segment.context, languages)?, hyp_ctx, normalization, "context")?;
    let without = logprob(backend, &segment.no_context_prompt(languages)?, hyp_noctx, normalization, "no-context")?;
    Ok(with - without)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnSaliency {
    pub turn_index: usize,
    pub saliency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMap {
    /// Target function under the full context.
    pub target_function_value: f64,
    /// Target function with every context turn removed.
    pub empty_context_value: f64,
    pub segments: Vec<TurnSaliency>,
}

impl SaliencyMap {
    /// `f(C) - f(∅) - Σ saliencies`: zero when turn contributions are additive.
    pub fn interaction(&self) -> f64 {
        let total: f64 = self.segments.iter().map(|s| s.saliency).sum();
        self.target_function_value - self.empty_context_value - total
    }

    /// Turn with the largest saliency; earliest on ties.
    pub fn most_salient(&self) -> Option<&TurnSaliency> {
        self.segments
            .iter()
            .fold(None, |best: Option<&TurnSaliency>, s| match best {
                Some(b) if b.saliency >= s.saliency => Some(b),
                _ => Some(s),
            })
    }
}

fn contrastive_target(
    backend: &dyn Backend,
    prompt: &str,
    hyp_ctx: &str,
    hyp_noctx: &str,
    normalization: Normalization,
) -> Result<f64, AnalysisError> {
    Ok(logprob(backend, prompt, hyp_ctx, normalization, "occluded context")?
        - logprob(backend, prompt, hyp_noctx, normalization, "occluded context")?)
}

/// Leave-one-out occlusion saliency of each context turn.
pub fn occlusion_saliency(
    backend: &dyn Backend,
    segment: &SegmentInput,
    hyp_ctx: &str,
    hyp_noctx: &str,
    languages: &LanguageTable,
    normalization: Normalization,
) -> Result<SaliencyMap, AnalysisError> {
    if segment.context.is_empty() {
        return Err(AnalysisError::EmptyContext);
    }
    let f = |block: &ContextBlock| -> Result<f64, AnalysisError> {
        contrastive_target(backend, &segment.prompt(block, languages)?, hyp_ctx, hyp_noctx, normalization)
    };
    let full = f(&segment.context)?;
    let empty = f(&ContextBlock::empty(segment.context.policy))?;
    let segments = segment
        .context
        .lines
        .iter()
        .map(|line| {
            let occluded = f(&segment.context.without_turn(line.turn_index))?;
            Ok(TurnSaliency {
                turn_index: line.turn_index,
                saliency: full - occluded,
            })
        })
        .collect::<Result<_, AnalysisError>>()?;
    Ok(SaliencyMap {
        target_function_value: full,
        empty_context_value: empty,
        segments,
    })
}

/// Per-segment diagnostics over a corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticRow {
    pub conversation_id: String,
    pub t: usize,
    pub hyp_ctx: String,
    pub hyp_noctx: String,
    /// Absent when the turn has no reference.
    pub p_cxmi: Option<f64>,
    pub likelihood_difference: f64,
}

/// Greedy-decodes every turn with and without context and computes P-CXMI
/// (when a reference exists) and the likelihood difference. Bilingual
/// context only; rows are in corpus order.
pub fn corpus_diagnostics(
    backend: &dyn Backend,
    conversations: &[Conversation],
    window: Window,
    languages: &LanguageTable,
    normalization: Normalization,
) -> Result<Vec<DiagnosticRow>, AnalysisError> {
    let jobs: Vec<(&Conversation, usize)> = conversations
        .iter()
        .flat_map(|c| (1..=c.len()).map(move |t| (c, t)))
        .collect();
    jobs.par_iter()
        .map(|&(conv, t)| {
            let seg = SegmentInput::from_turn(conv, t, ContextPolicy::bilingual(window), None)?;
            let hyp_ctx = backend::greedy(backend, &seg.prompt(&seg.context, languages)?).map_err(AnalysisError::Generation)?;
            let hyp_noctx = backend::greedy(backend, &seg.no_context_prompt(languages)?).map_err(AnalysisError::Generation)?;
            let reference = conv.turn(t).and_then(|turn| turn.reference_translation.as_deref());
            let p_cxmi = reference
                .map(|r| p_cxmi(backend, &seg, r, languages, normalization))
                .transpose()?;
            let likelihood_difference = likelihood_difference(backend, &seg, &hyp_ctx, &hyp_noctx, languages, normalization)?;
            Ok(DiagnosticRow {
                conversation_id: conv.id.clone(),
                t,
                hyp_ctx,
                hyp_noctx,
                p_cxmi,
                likelihood_difference,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Binning {
    #[default]
    EqualWidth,
    Quantile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityBin<S = f64> {
    pub lower: S,
    pub upper: S,
    pub count: usize,
    pub mean_noctx: Option<S>,
    pub mean_ctx: Option<S>,
}

impl<S: Scalar> QualityBin<S> {
    /// Mean gain from context in this bin.
    pub fn delta(&self) -> Option<S> {
        Some(self.mean_ctx? - self.mean_noctx?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinnedComparison<S = f64> {
    pub binning: Binning,
    pub bins: Vec<QualityBin<S>>,
}

impl<S: Scalar> BinnedComparison<S> {
    pub fn total(&self) -> usize {
        self.bins.iter().map(|b| b.count).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin,lower,upper,count,mean_noctx,mean_ctx,delta\n");
        let opt = |v: Option<S>| v.map(|v| v.to_string()).unwrap_or_default();
        for (i, b) in self.bins.iter().enumerate() {
            let _ = writeln!(
                out,
                "{i},{},{},{},{},{},{}",
                b.lower,
                b.upper,
                b.count,
                opt(b.mean_noctx),
                opt(b.mean_ctx),
                opt(b.delta())
            );
        }
        out
    }
}

/// Groups segments by their no-context score and compares mean quality with
/// and without context per group.
///
/// Equal-width bins span the observed range; the maximum falls in the last
/// bin, and a constant range puts everything in the first bin. Quantile bins
/// split the segments by rank into groups whose sizes differ by at most one.
pub fn quality_bins<S: Scalar>(
    scores_noctx: &[S],
    scores_ctx: &[S],
    n_bins: usize,
    binning: Binning,
) -> Result<BinnedComparison<S>, AnalysisError> {
    if scores_noctx.len() != scores_ctx.len() {
        return Err(AnalysisError::LengthMismatch(scores_noctx.len(), scores_ctx.len()));
    }
    if scores_noctx.is_empty() {
        return Err(AnalysisError::EmptyInput);
    }
    if n_bins < 2 {
        return Err(AnalysisError::TooFewBins(n_bins));
    }
    if let Some(i) = scores_noctx
        .iter()
        .zip(scores_ctx)
        .position(|(a, b)| !a.is_finite() || !b.is_finite())
    {
        return Err(AnalysisError::NonFinite(i));
    }
    let n = scores_noctx.len();
    let min = scores_noctx.iter().copied().fold(S::infinity(), S::min);
    let max = scores_noctx.iter().copied().fold(S::neg_infinity(), S::max);

    let (assignment, bounds): (Vec<usize>, Vec<(S, S)>) = match binning {
        Binning::EqualWidth => {
            let width = (max - min) / S::from_count(n_bins);
            let assign = scores_noctx
                .iter()
                .map(|&x| {
                    if width == S::zero() {
                        0
                    } else {
                        ((x - min) / width).floor().to_usize().unwrap_or(0).min(n_bins - 1)
                    }
                })
                .collect();
            let bounds = (0..n_bins)
                .map(|b| {
                    let lo = min + width * S::from_count(b);
                    let hi = if b + 1 == n_bins { max } else { min + width * S::from_count(b + 1) };
                    (lo, hi)
                })
                .collect();
            (assign, bounds)
        }
        Binning::Quantile => {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| scores_noctx[a].partial_cmp(&scores_noctx[b]).expect("finite"));
            let mut assign = vec![0; n];
            let mut bounds = vec![(S::nan(), S::nan()); n_bins];
            for (rank, &i) in order.iter().enumerate() {
                let b = rank * n_bins / n;
                assign[i] = b;
                let x = scores_noctx[i];
                let (lo, hi) = &mut bounds[b];
                if lo.is_nan() {
                    *lo = x;
                }
                *hi = x;
            }
            (assign, bounds)
        }
    };

    let mut sums = vec![(0usize, S::zero(), S::zero()); n_bins];
    for (i, &b) in assignment.iter().enumerate() {
        sums[b].0 += 1;
        sums[b].1 = sums[b].1 + scores_noctx[i];
        sums[b].2 = sums[b].2 + scores_ctx[i];
    }
    let bins = sums
        .into_iter()
        .zip(bounds)
        .map(|((count, s_no, s_ctx), (lower, upper))| QualityBin {
            lower,
            upper,
            count,
            mean_noctx: (count > 0).then(|| s_no / S::from_count(count)),
            mean_ctx: (count > 0).then(|| s_ctx / S::from_count(count)),
        })
        .collect();
    Ok(BinnedComparison { binning, bins })
}

/// One decode-and-score run of a sweep at a given context window.
pub trait SweepLeg: Sync {
    fn run(&self, window: Window) -> Result<f64, String>;
}

impl<F> SweepLeg for F
where
    F: Fn(Window) -> Result<f64, String> + Sync,
{
    fn run(&self, window: Window) -> Result<f64, String> {
        self(window)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub window: Window,
    pub score: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn row(&self, window: Window) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.window == window)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("context,score,error\n");
        for r in &self.rows {
            let score = r.score.map(|s| s.to_string()).unwrap_or_default();
            let error = r.error.as_deref().unwrap_or("").replace([',', '\n'], " ");
            let _ = writeln!(out, "{},{score},{error}", r.window);
        }
        out
    }
}

/// Runs `leg` for no context, each `k`, and full context. A failing leg is
/// recorded in its row and the sweep continues.
pub fn context_sweep(leg: &dyn SweepLeg, k_values: &[usize]) -> SweepTable {
    let mut windows = vec![Window::None];
    windows.extend(k_values.iter().filter(|&&k| k > 0).map(|&k| Window::LastK(k)));
    windows.push(Window::Full);
    let rows = windows
        .into_par_iter()
        .map(|window| match leg.run(window) {
            Ok(score) => SweepRow { window, score: Some(score), error: None },
            Err(e) => SweepRow { window, score: None, error: Some(e) },
        })
        .collect();
    SweepTable { rows }
}

/// Greedy decoding of every referenced turn, scored with corpus chrF.
///
/// In English-only mode, the context uses the pipeline's own earlier outputs
/// for non-English turns, so turns are decoded in conversation order.
pub struct GreedyChrfPipeline<'a> {
    pub backend: &'a dyn Backend,
    pub conversations: &'a [Conversation],
    pub languages: &'a LanguageTable,
    pub language_mode: LanguageMode,
    pub chrf: ChrfParams,
}

impl GreedyChrfPipeline<'_> {
    /// `(hypothesis, reference)` for every turn with a reference.
    pub fn translate(&self, window: Window) -> Result<Vec<(String, String)>, AnalysisError> {
        let policy = ContextPolicy::new(window, self.language_mode);
        let per_conv: Vec<Vec<(String, String)>> = self
            .conversations
            .par_iter()
            .map(|conv| {
                let mut outputs: HashMap<usize, String> = HashMap::new();
                let mut pairs = Vec::new();
                for t in 1..=conv.len() {
                    let (_, prompt) = crate::promptkit::prompt_for_turn(conv, t, policy, Some(&outputs), self.languages)?;
                    let hyp = backend::greedy(self.backend, &prompt.text).map_err(AnalysisError::Generation)?;
                    let turn = conv.turn(t).expect("in range");
                    if let Some(r) = &turn.reference_translation {
                        pairs.push((hyp.clone(), r.clone()));
                    }
                    outputs.insert(turn.index, hyp);
                }
                Ok(pairs)
            })
            .collect::<Result<_, AnalysisError>>()?;
        Ok(per_conv.into_iter().flatten().collect())
    }
}

impl SweepLeg for GreedyChrfPipeline<'_> {
    fn run(&self, window: Window) -> Result<f64, String> {
        let pairs = self.translate(window).map_err(|e| e.to_string())?;
        chrf_corpus(&pairs, &self.chrf).ok_or_else(|| "no referenced turns".to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{ContextBonus, StubBackend, StubProgram, StubScoring};
    use crate::corpus::Speaker;

    fn conv() -> Conversation {
        let de = LangCode::new("de");
        let en = LangCode::new("en");
        Conversation::new(
            "c",
            (en.clone(), de.clone()),
            vec![
                (Speaker::Customer, de.clone(), "Das Paket ist kaputt.".into(), Some("The parcel is broken.".into())),
                (Speaker::Agent, en.clone(), "I am sorry.".into(), Some("Es tut mir leid.".into())),
                (Speaker::Customer, de.clone(), "Können Sie helfen?".into(), Some("Can you help?".into())),
            ],
        )
        .unwrap()
    }

    fn stub(bonuses: Vec<ContextBonus>) -> StubBackend {
        StubBackend::new(StubProgram {
            scoring: StubScoring { bonuses, ..Default::default() },
            ..Default::default()
        })
    }

    #[test]
    fn context_blind_pcxmi_is_zero() {
        let seg = SegmentInput::from_turn(&conv(), 3, ContextPolicy::full(), None).unwrap();
        let v = p_cxmi(&stub(vec![]), &seg, "Can you help?", &LanguageTable::default(), Normalization::Sum).unwrap();
        assert!(v.abs() < 1e-9);
    }

    #[test]
    fn bonus_per_context_line() {
        let seg = SegmentInput::from_turn(&conv(), 3, ContextPolicy::full(), None).unwrap();
        let b = stub(vec![ContextBonus { target_contains: "help".into(), context_contains: None, per_line: 0.25 }]);
        let v = p_cxmi(&b, &seg, "Can you help the customer today?", &LanguageTable::default(), Normalization::Sum).unwrap();
        assert!((v - 0.5).abs() < 1e-12);
    }

    #[test]
    fn empty_context_saliency_is_error() {
        let seg = SegmentInput::from_turn(&conv(), 1, ContextPolicy::full(), None).unwrap();
        assert!(matches!(
            occlusion_saliency(&stub(vec![]), &seg, "a", "b", &LanguageTable::default(), Normalization::Sum),
            Err(AnalysisError::EmptyContext)
        ));
    }

    #[test]
    fn saliency_of_single_programmed_turn() {
        let seg = SegmentInput::from_turn(&conv(), 3, ContextPolicy::full(), None).unwrap();
        let b = stub(vec![ContextBonus {
            target_contains: "assist".into(),
            context_contains: Some("sorry".into()),
            per_line: 0.75,
        }]);
        let map = occlusion_saliency(&b, &seg, "Could you assist me, please?", "Can you help me, please?", &LanguageTable::default(), Normalization::Sum).unwrap();
        assert_eq!(map.segments[0].saliency, 0.0);
        assert!((map.segments[1].saliency - 0.75).abs() < 1e-12);
        assert!(map.interaction().abs() < 1e-12);
        assert_eq!(map.most_salient().unwrap().turn_index, 2);
    }

    #[test]
    fn bins_conserve_and_shift() {
        let no: Vec<f64> = (0..23).map(|i| i as f64 * 3.7 % 41.0).collect();
        let ctx: Vec<f64> = no.iter().map(|x| x + 1.0).collect();
        for binning in [Binning::EqualWidth, Binning::Quantile] {
            let b = quality_bins(&no, &ctx, 4, binning).unwrap();
            assert_eq!(b.total(), 23);
            for bin in b.bins.iter().filter(|b| b.count > 0) {
                assert!((bin.delta().unwrap() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bins_reject_bad_input() {
        assert!(matches!(quality_bins::<f64>(&[], &[], 3, Binning::EqualWidth), Err(AnalysisError::EmptyInput)));
        assert!(matches!(quality_bins(&[1.0], &[1.0], 1, Binning::EqualWidth), Err(AnalysisError::TooFewBins(1))));
        assert!(matches!(quality_bins(&[1.0], &[], 2, Binning::EqualWidth), Err(AnalysisError::LengthMismatch(1, 0))));
    }

    #[test]
    fn equal_width_edges() {
        let b = quality_bins(&[0.0, 5.0, 10.0], &[0.0, 5.0, 10.0], 2, Binning::EqualWidth).unwrap();
        assert_eq!(b.bins[0].count, 1);
        assert_eq!(b.bins[1].count, 2);
        assert_eq!((b.bins[1].lower, b.bins[1].upper), (5.0, 10.0));
    }

    #[test]
    fn failing_leg_does_not_stop_sweep() {
        let leg = |w: Window| match w {
            Window::LastK(2) => Err("boom".to_string()),
            Window::None => Ok(0.0),
            Window::LastK(k) => Ok(k as f64),
            Window::Full => Ok(9.0),
        };
        let table = context_sweep(&leg, &[1, 2, 3]);
        assert_eq!(table.rows.len(), 5);
        assert_eq!(table.row(Window::LastK(2)).unwrap().error.as_deref(), Some("boom"));
        assert_eq!(table.row(Window::Full).unwrap().score, Some(9.0));
    }
}
