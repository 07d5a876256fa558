//! Rule-based discourse-phenomena tagging and tag-level F1.
//!
//! Rule files are plain `key: value, value, ...` lines:
//!
//! ```text
//! # German starter rules
//! language: de
//! formality: sie, ihnen, ihr
//! formality_informal: du, dich, dir
//! pronouns: er, es, ihm
//! verb_forms: war, hatte
//! verb_suffixes: te, ten
//! stopwords: um, uh, okay, ok, yes, no
//! ```
//!
//! Matching is on lowercased surface forms; there is no lemmatization.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_segmentation::UnicodeSegmentation;

/// Conversational fillers never counted as lexical cohesion.
pub const CONVERSATIONAL_STOPWORDS: [&str; 6] = ["um", "uh", "okay", "ok", "yes", "no"];

/// Minimum number of characters a token must keep in front of a verb suffix.
const MIN_STEM_CHARS: usize = 3;

const STARTER_RULES: &[(&str, &str)] = &[
    ("de", include_str!("../rules/de.rules")),
    ("en", include_str!("../rules/en.rules")),
    ("fr", include_str!("../rules/fr.rules")),
    ("ko", include_str!("../rules/ko.rules")),
    ("nl", include_str!("../rules/nl.rules")),
    ("pt-br", include_str!("../rules/pt-br.rules")),
];

#[derive(Debug, Error)]
pub enum MudaError {
    #[error("no tagging rules for language {language:?}; available: {}", available.join(", "))]
    MissingRules {
        language: String,
        available: Vec<String>,
    },
    #[error("rules line {line}: {reason}")]
    RuleSyntax { line: usize, reason: String },
    #[error("rules for {language}: {reason}")]
    InvalidRules { language: String, reason: String },
    #[error("cannot read rules {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("segment count mismatch: {reference} reference vs {hypothesis} hypothesis segments")]
    LengthMismatch { reference: usize, hypothesis: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phenomenon {
    LexicalCohesion,
    VerbForm,
    Pronouns,
    Formality,
}

impl Phenomenon {
    pub const ALL: [Phenomenon; 4] = [
        Phenomenon::LexicalCohesion,
        Phenomenon::VerbForm,
        Phenomenon::Pronouns,
        Phenomenon::Formality,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Phenomenon::LexicalCohesion => "lexical_cohesion",
            Phenomenon::VerbForm => "verb_form",
            Phenomenon::Pronouns => "pronouns",
            Phenomenon::Formality => "formality",
        }
    }
}

impl fmt::Display for Phenomenon {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TagRuleSet {
    pub language: String,
    pub formality: BTreeSet<String>,
    pub formality_informal: BTreeSet<String>,
    pub pronouns: BTreeSet<String>,
    pub verb_forms: BTreeSet<String>,
    pub verb_suffixes: Vec<String>,
    pub cohesion_stopwords: BTreeSet<String>,
}

impl TagRuleSet {
    pub fn new(language: &str) -> Self {
        TagRuleSet {
            language: language.to_lowercase(),
            cohesion_stopwords: CONVERSATIONAL_STOPWORDS.iter().map(|s| s.to_string()).collect(),
            ..Default::default()
        }
    }

    pub fn parse(text: &str) -> Result<Self, MudaError> {
        let mut language = None;
        let mut rules = TagRuleSet::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, values) = line.split_once(':').ok_or_else(|| MudaError::RuleSyntax {
                line: i + 1,
                reason: format!("expected `key: values`, found {line:?}"),
            })?;
            let items = values
                .split(',')
                .map(|v| v.trim().to_lowercase())
                .filter(|v| !v.is_empty());
            match key.trim() {
                "language" => language = Some(values.trim().to_lowercase()),
                "formality" => rules.formality.extend(items),
                "formality_informal" => rules.formality_informal.extend(items),
                "pronouns" => rules.pronouns.extend(items),
                "verb_forms" => rules.verb_forms.extend(items),
                "verb_suffixes" => rules.verb_suffixes.extend(items),
                "stopwords" => rules.cohesion_stopwords.extend(items),
                other => {
                    return Err(MudaError::RuleSyntax {
                        line: i + 1,
                        reason: format!("unknown key {other:?}"),
                    })
                }
            }
        }
        rules.language = language.ok_or(MudaError::RuleSyntax {
            line: 0,
            reason: "missing `language:` line".into(),
        })?;
        rules
            .cohesion_stopwords
            .extend(CONVERSATIONAL_STOPWORDS.iter().map(|s| s.to_string()));
        rules.verb_suffixes.sort();
        rules.verb_suffixes.dedup();
        rules.validate()?;
        Ok(rules)
    }

    pub fn validate(&self) -> Result<(), MudaError> {
        let invalid = |reason: String| MudaError::InvalidRules {
            language: self.language.clone(),
            reason,
        };
        if let Some(w) = self.formality.intersection(&self.formality_informal).next() {
            return Err(invalid(format!("{w:?} is listed as both formal and informal")));
        }
        let sets = [
            &self.formality,
            &self.formality_informal,
            &self.pronouns,
            &self.verb_forms,
            &self.cohesion_stopwords,
        ];
        for set in sets {
            if let Some(w) = set.iter().find(|w| **w != w.to_lowercase()) {
                return Err(invalid(format!("{w:?} is not lowercase")));
            }
        }
        for w in CONVERSATIONAL_STOPWORDS {
            if !self.cohesion_stopwords.contains(w) {
                return Err(invalid(format!("stopword {w:?} is required")));
            }
        }
        Ok(())
    }

    /// Serializes back to the rules file format.
    pub fn to_rules_string(&self) -> String {
        let join = |it: &mut dyn Iterator<Item = &String>| {
            it.map(String::as_str).collect::<Vec<_>>().join(", ")
        };
        format!(
            "language: {}\nformality: {}\nformality_informal: {}\npronouns: {}\nverb_forms: {}\nverb_suffixes: {}\nstopwords: {}\n",
            self.language,
            join(&mut self.formality.iter()),
            join(&mut self.formality_informal.iter()),
            join(&mut self.pronouns.iter()),
            join(&mut self.verb_forms.iter()),
            join(&mut self.verb_suffixes.iter()),
            join(&mut self.cohesion_stopwords.iter()),
        )
    }

    fn is_verb_form(&self, lower: &str) -> bool {
        if self.verb_forms.contains(lower) {
            return true;
        }
        let len = lower.chars().count();
        self.verb_suffixes
            .iter()
            .any(|s| lower.ends_with(s.as_str()) && len >= s.chars().count() + MIN_STEM_CHARS)
    }
}

impl FromStr for TagRuleSet {
    type Err = MudaError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TagRuleSet::parse(s)
    }
}

/// Rule sets keyed by language code.
#[derive(Debug, Clone, Default)]
pub struct RuleBook {
    sets: BTreeMap<String, TagRuleSet>,
}

impl RuleBook {
    /// The starter rule sets shipped with the crate (de, en, fr, ko, nl, pt-br).
    /// The Korean set is experimental.
    pub fn starter() -> Self {
        let mut book = RuleBook::default();
        for (_, text) in STARTER_RULES {
            book.insert(TagRuleSet::parse(text).expect("shipped rules parse"));
        }
        book
    }

    /// Loads every `*.rules` file in `dir`.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self, MudaError> {
        let dir = dir.as_ref();
        let io = |source| MudaError::Io {
            path: dir.display().to_string(),
            source,
        };
        let mut book = RuleBook::default();
        let mut paths: Vec<_> = fs::read_dir(dir)
            .map_err(io)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "rules"))
            .collect();
        paths.sort();
        for path in paths {
            let text = fs::read_to_string(&path).map_err(|source| MudaError::Io {
                path: path.display().to_string(),
                source,
            })?;
            book.insert(TagRuleSet::parse(&text)?);
        }
        Ok(book)
    }

    pub fn insert(&mut self, rules: TagRuleSet) {
        self.sets.insert(rules.language.clone(), rules);
    }

    pub fn get(&self, language: &str) -> Option<&TagRuleSet> {
        self.sets.get(&language.to_lowercase())
    }

    pub fn require(&self, language: &str) -> Result<&TagRuleSet, MudaError> {
        self.get(language).ok_or_else(|| MudaError::MissingRules {
            language: language.to_string(),
            available: self.languages(),
        })
    }

    pub fn languages(&self) -> Vec<String> {
        self.sets.keys().cloned().collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TaggedToken {
    pub token_index: usize,
    pub surface: String,
    pub phenomenon: Phenomenon,
}

/// Unicode word segmentation.
pub fn tokenize(text: &str) -> Vec<&str> {
    text.unicode_words().collect()
}

/// Tags `text` for the language `language`, looking the rule set up in `book`.
pub fn tag_segment(
    text: &str,
    prior_target_turns: &[&str],
    language: &str,
    book: &RuleBook,
) -> Result<Vec<TaggedToken>, MudaError> {
    Ok(tag_with(text, prior_target_turns, book.require(language)?))
}

/// Tags a segment with an already-resolved rule set.
///
/// Output is sorted by token index, then phenomenon.
pub fn tag_with(text: &str, prior_target_turns: &[&str], rules: &TagRuleSet) -> Vec<TaggedToken> {
    let antecedents: HashSet<String> = prior_target_turns
        .iter()
        .flat_map(|t| tokenize(t))
        .map(str::to_lowercase)
        .collect();

    let mut tags = Vec::new();
    for (token_index, surface) in tokenize(text).into_iter().enumerate() {
        let lower = surface.to_lowercase();
        let mut push = |phenomenon| {
            tags.push(TaggedToken {
                token_index,
                surface: surface.to_string(),
                phenomenon,
            })
        };
        if !rules.cohesion_stopwords.contains(&lower) && antecedents.contains(&lower) {
            push(Phenomenon::LexicalCohesion);
        }
        if rules.is_verb_form(&lower) {
            push(Phenomenon::VerbForm);
        }
        if rules.pronouns.contains(&lower) {
            push(Phenomenon::Pronouns);
        }
        if rules.formality.contains(&lower) || rules.formality_informal.contains(&lower) {
            push(Phenomenon::Formality);
        }
    }
    tags
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhenomenonScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Number of reference tags.
    pub support: usize,
    /// Number of hypothesis tags.
    pub predicted: usize,
    pub matched: usize,
}

impl PhenomenonScore {
    fn from_counts(matched: usize, predicted: usize, support: usize) -> Self {
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        PhenomenonScore {
            precision: ratio(matched, predicted),
            recall: ratio(matched, support),
            // equals the harmonic mean of precision and recall
            f1: ratio(2 * matched, predicted + support),
            support,
            predicted,
            matched,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MudaF1Report {
    pub phenomena: BTreeMap<Phenomenon, PhenomenonScore>,
    /// Fraction of reference segments with at least one tag.
    pub pct_tagged: f64,
}

impl MudaF1Report {
    pub fn get(&self, phenomenon: Phenomenon) -> &PhenomenonScore {
        &self.phenomena[&phenomenon]
    }

    /// Unweighted mean F1 over phenomena that have reference support.
    pub fn mean_f1(&self) -> Option<f64> {
        let supported: Vec<f64> = self
            .phenomena
            .values()
            .filter(|s| s.support > 0)
            .map(|s| s.f1)
            .collect();
        crate::scalar::mean(&supported)
    }
}

/// Tag-level F1 between reference and hypothesis tags, segment by segment.
///
/// Within a segment and phenomenon, tags are matched as multisets of
/// lowercased surface forms.
pub fn muda_f1(
    ref_tags: &[Vec<TaggedToken>],
    hyp_tags: &[Vec<TaggedToken>],
) -> Result<MudaF1Report, MudaError> {
    if ref_tags.len() != hyp_tags.len() {
        return Err(MudaError::LengthMismatch {
            reference: ref_tags.len(),
            hypothesis: hyp_tags.len(),
        });
    }
    let mut counts: BTreeMap<Phenomenon, (usize, usize, usize)> =
        Phenomenon::ALL.iter().map(|&p| (p, (0, 0, 0))).collect();

    for (r, h) in ref_tags.iter().zip(hyp_tags) {
        let bag = |tags: &[TaggedToken]| {
            let mut m: HashMap<(Phenomenon, String), usize> = HashMap::new();
            for t in tags {
                *m.entry((t.phenomenon, t.surface.to_lowercase())).or_default() += 1;
            }
            m
        };
        let (rb, hb) = (bag(r), bag(h));
        for ((phenomenon, surface), &hc) in &hb {
            let entry = counts.get_mut(phenomenon).expect("all phenomena present");
            entry.1 += hc;
            if let Some(&rc) = rb.get(&(*phenomenon, surface.clone())) {
                entry.0 += rc.min(hc);
            }
        }
        for ((phenomenon, _), &rc) in &rb {
            counts.get_mut(phenomenon).expect("all phenomena present").2 += rc;
        }
    }

    let tagged_segments = ref_tags.iter().filter(|t| !t.is_empty()).count();
    Ok(MudaF1Report {
        phenomena: counts
            .into_iter()
            .map(|(p, (m, pred, sup))| (p, PhenomenonScore::from_counts(m, pred, sup)))
            .collect(),
        pct_tagged: if ref_tags.is_empty() {
            0.0
        } else {
            tagged_segments as f64 / ref_tags.len() as f64
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tag(surface: &str, i: usize, p: Phenomenon) -> TaggedToken {
        TaggedToken {
            token_index: i,
            surface: surface.into(),
            phenomenon: p,
        }
    }

    #[test]
    fn formal_sie_is_tagged() {
        let book = RuleBook::starter();
        let tags = tag_segment(
            "Lassen Sie mich Ihnen sagen, wo es verwendet wurde.",
            &[],
            "de",
            &book,
        )
        .unwrap();
        assert!(tags
            .iter()
            .any(|t| t.surface == "Sie" && t.phenomenon == Phenomenon::Formality));
    }

    #[test]
    fn no_prior_turns_means_no_cohesion() {
        let rules = TagRuleSet::new("en");
        let tags = tag_with("cat cat cat dog", &[], &rules);
        assert!(tags.iter().all(|t| t.phenomenon != Phenomenon::LexicalCohesion));
    }

    #[test]
    fn stopwords_never_cohesion() {
        let rules = TagRuleSet::new("en");
        let tags = tag_with("okay okay cat", &["cat okay"], &rules);
        assert_eq!(tags, vec![tag("cat", 2, Phenomenon::LexicalCohesion)]);
    }

    #[test]
    fn missing_rules_lists_languages() {
        let err = tag_segment("x", &[], "xx", &RuleBook::starter()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("de") && msg.contains("pt-br"), "{msg}");
    }

    #[test]
    fn rules_roundtrip() {
        for (_, text) in STARTER_RULES {
            let rules = TagRuleSet::parse(text).unwrap();
            let again = TagRuleSet::parse(&rules.to_rules_string()).unwrap();
            assert_eq!(rules, again);
        }
    }

    #[test]
    fn stopwords_are_always_added() {
        let rules = TagRuleSet::parse("language: xx\nstopwords: hm\n").unwrap();
        assert!(rules.cohesion_stopwords.contains("okay"));
        assert!(rules.cohesion_stopwords.contains("hm"));
    }

    #[test]
    fn overlapping_formality_is_rejected() {
        let err = TagRuleSet::parse("language: de\nformality: sie\nformality_informal: Sie\n");
        assert!(matches!(err, Err(MudaError::InvalidRules { .. })));
    }

    #[test]
    fn verb_suffix_needs_stem() {
        let rules = TagRuleSet::parse("language: de\nverb_suffixes: te\n").unwrap();
        assert!(rules.is_verb_form("machte"));
        assert!(!rules.is_verb_form("ute"));
    }

    #[test]
    fn f1_three_ref_two_hyp_one_match() {
        let refs = vec![vec![
            tag("Sie", 0, Phenomenon::Formality),
            tag("Ihnen", 3, Phenomenon::Formality),
            tag("Ihr", 5, Phenomenon::Formality),
        ]];
        let hyps = vec![vec![
            tag("Sie", 0, Phenomenon::Formality),
            tag("du", 4, Phenomenon::Formality),
        ]];
        let report = muda_f1(&refs, &hyps).unwrap();
        let s = report.get(Phenomenon::Formality);
        assert_eq!(s.precision, 0.5);
        assert!((s.recall - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(s.f1, 0.4);
        let harmonic = 2.0 * s.precision * s.recall / (s.precision + s.recall);
        assert!((s.f1 - harmonic).abs() < 1e-15);
    }

    #[test]
    fn identical_and_disjoint() {
        let refs = vec![vec![tag("es", 1, Phenomenon::Pronouns)], vec![]];
        let same = muda_f1(&refs, &refs).unwrap();
        assert_eq!(same.get(Phenomenon::Pronouns).f1, 1.0);
        assert_eq!(same.pct_tagged, 0.5);

        let other = vec![vec![tag("er", 1, Phenomenon::Pronouns)], vec![]];
        assert_eq!(muda_f1(&refs, &other).unwrap().get(Phenomenon::Pronouns).f1, 0.0);
    }

    #[test]
    fn length_mismatch() {
        assert!(muda_f1(&[vec![]], &[]).is_err());
    }
}
