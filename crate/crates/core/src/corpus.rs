//! Bilingual conversation data model, corpus readers and statistics.
//!
//! Two on-disk formats are supported:
//!
//! * `canonical_jsonl`: one JSON object per line, one conversation per object:
//!   `{"id", "src_lang", "tgt_lang", "meta"?, "turns": [{"t", "speaker", "lang", "source", "reference"?}]}`
//! * `bcontrast_tsv`: one turn per line, tab-separated columns
//!   `conversation_id  turn  speaker  source_lang  target_lang  source  target`.
//!   Lines are grouped by `conversation_id` in order of first appearance; an
//!   empty `target` column means "no reference". Lines starting with `#` are
//!   comments, and a first line whose first column is `conversation_id` is
//!   treated as a header.
//!
//! A turn is a single segment; turns are never split into sentences.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use num_rational::Ratio;
use num_traits::ToPrimitive;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::muda::{self, RuleBook};

pub const ENGLISH: &str = "en";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("conversation {id}: {reason}")]
    Invalid { id: String, reason: String },
    #[error("unknown corpus format {0:?} (expected canonical_jsonl or bcontrast_tsv)")]
    UnknownFormat(String),
}

/// Lowercase BCP-47-style language code such as `en` or `pt-br`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LangCode(String);

impl LangCode {
    pub fn new(code: &str) -> Self {
        LangCode(code.trim().to_lowercase())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn is_english(&self) -> bool {
        self.0 == ENGLISH
    }
}

impl fmt::Display for LangCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for LangCode {
    fn from(s: &str) -> Self {
        LangCode::new(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    Agent,
    Customer,
    Assistant,
    User,
}

impl FromStr for Speaker {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_lowercase().as_str() {
            "agent" => Ok(Speaker::Agent),
            "customer" => Ok(Speaker::Customer),
            "assistant" => Ok(Speaker::Assistant),
            "user" => Ok(Speaker::User),
            other => Err(format!("unknown speaker {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    #[serde(rename = "en-xx")]
    EnToXx,
    #[serde(rename = "xx-en")]
    XxToEn,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::EnToXx => "en-xx",
            Direction::XxToEn => "xx-en",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Turn {
    pub index: usize,
    pub speaker: Speaker,
    pub source_language: LangCode,
    pub source_text: String,
    pub reference_translation: Option<String>,
    pub direction: Direction,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Conversation {
    pub id: String,
    pub language_pair: (LangCode, LangCode),
    pub turns: Vec<Turn>,
    pub metadata: BTreeMap<String, String>,
}

impl Conversation {
    /// Builds and validates a conversation. Turn directions are derived from
    /// each turn's source language.
    pub fn new(
        id: impl Into<String>,
        language_pair: (LangCode, LangCode),
        turns: Vec<(Speaker, LangCode, String, Option<String>)>,
    ) -> Result<Self, CorpusError> {
        let turns = turns
            .into_iter()
            .enumerate()
            .map(|(i, (speaker, lang, source, reference))| Turn {
                index: i + 1,
                speaker,
                direction: direction_of(&lang),
                source_language: lang,
                source_text: source,
                reference_translation: reference,
            })
            .collect();
        let conv = Conversation {
            id: id.into(),
            language_pair,
            turns,
            metadata: BTreeMap::new(),
        };
        conv.validate()?;
        Ok(conv)
    }

    pub fn len(&self) -> usize {
        self.turns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.turns.is_empty()
    }

    /// Turn `t`, 1-based.
    pub fn turn(&self, t: usize) -> Option<&Turn> {
        t.checked_sub(1).and_then(|i| self.turns.get(i))
    }

    /// The language a turn is translated into: the other half of the pair.
    pub fn target_language(&self, turn: &Turn) -> &LangCode {
        let (a, b) = &self.language_pair;
        if &turn.source_language == a {
            b
        } else {
            a
        }
    }

    /// Label for per-language grouping, e.g. `en-de` or `de-en`.
    pub fn direction_label(&self, turn: &Turn) -> String {
        format!("{}-{}", turn.source_language, self.target_language(turn))
    }

    /// Checks every type invariant of the conversation and its turns.
    pub fn validate(&self) -> Result<(), CorpusError> {
        let invalid = |reason: String| CorpusError::Invalid {
            id: self.id.clone(),
            reason,
        };
        let (a, b) = &self.language_pair;
        if a == b {
            return Err(invalid(format!("language pair has identical sides {a}")));
        }
        if !a.is_english() && !b.is_english() {
            return Err(invalid(format!(
                "language pair {a}-{b} does not include {ENGLISH}"
            )));
        }
        for (pos, turn) in self.turns.iter().enumerate() {
            if turn.index != pos + 1 {
                return Err(invalid(format!(
                    "non-contiguous turn index: expected {}, found {}",
                    pos + 1,
                    turn.index
                )));
            }
            if turn.source_text.trim().is_empty() {
                return Err(invalid(format!("turn {} has empty source text", turn.index)));
            }
            if &turn.source_language != a && &turn.source_language != b {
                return Err(invalid(format!(
                    "inconsistent language code: turn {} is {} but the pair is {a}-{b}",
                    turn.index, turn.source_language
                )));
            }
            if turn.direction != direction_of(&turn.source_language) {
                return Err(invalid(format!(
                    "turn {} direction {} contradicts source language {}",
                    turn.index, turn.direction, turn.source_language
                )));
            }
        }
        Ok(())
    }
}

pub fn direction_of(source_language: &LangCode) -> Direction {
    if source_language.is_english() {
        Direction::EnToXx
    } else {
        Direction::XxToEn
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusFormat {
    CanonicalJsonl,
    BcontrastTsv,
}

impl FromStr for CorpusFormat {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "canonical_jsonl" | "jsonl" => Ok(CorpusFormat::CanonicalJsonl),
            "bcontrast_tsv" | "tsv" => Ok(CorpusFormat::BcontrastTsv),
            other => Err(CorpusError::UnknownFormat(other.to_string())),
        }
    }
}

/// A conversation dropped during parsing, with the reason.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rejection {
    pub conversation_id: String,
    pub line: usize,
    pub reason: String,
}

/// Parsed conversations plus conversations rejected for inconsistent
/// language codes.
#[derive(Debug, Clone, Default)]
pub struct ParsedCorpus {
    pub conversations: Vec<Conversation>,
    pub rejected: Vec<Rejection>,
}

pub fn parse_corpus(path: impl AsRef<Path>, format: CorpusFormat) -> Result<ParsedCorpus, CorpusError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_corpus_str(&text, format)
}

pub fn parse_corpus_str(text: &str, format: CorpusFormat) -> Result<ParsedCorpus, CorpusError> {
    match format {
        CorpusFormat::CanonicalJsonl => parse_jsonl(text),
        CorpusFormat::BcontrastTsv => parse_tsv(text),
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct JsonTurn {
    t: usize,
    speaker: Speaker,
    lang: LangCode,
    source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    reference: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct JsonConversation {
    id: String,
    src_lang: LangCode,
    tgt_lang: LangCode,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    meta: BTreeMap<String, String>,
    turns: Vec<JsonTurn>,
}

fn is_language_error(err: &CorpusError) -> bool {
    matches!(err, CorpusError::Invalid { reason, .. }
        if reason.contains("language") || reason.contains("direction"))
}

/// Language inconsistencies reject the conversation; every other invariant
/// violation aborts the parse.
fn accept(
    out: &mut ParsedCorpus,
    conv: Conversation,
    line: usize,
) -> Result<(), CorpusError> {
    match conv.validate() {
        Ok(()) => {
            out.conversations.push(conv);
            Ok(())
        }
        Err(err) if is_language_error(&err) => {
            log::warn!("rejecting conversation {} (line {line}): {err}", conv.id);
            out.rejected.push(Rejection {
                conversation_id: conv.id,
                line,
                reason: err.to_string(),
            });
            Ok(())
        }
        Err(CorpusError::Invalid { reason, .. }) => Err(CorpusError::Malformed { line, reason }),
        Err(other) => Err(other),
    }
}

fn parse_jsonl(text: &str) -> Result<ParsedCorpus, CorpusError> {
    let mut out = ParsedCorpus::default();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let jc: JsonConversation = serde_json::from_str(raw).map_err(|e| CorpusError::Malformed {
            line,
            reason: e.to_string(),
        })?;
        let conv = Conversation {
            id: jc.id,
            language_pair: (jc.src_lang, jc.tgt_lang),
            metadata: jc.meta,
            turns: jc
                .turns
                .into_iter()
                .map(|jt| Turn {
                    index: jt.t,
                    speaker: jt.speaker,
                    direction: direction_of(&jt.lang),
                    source_language: jt.lang,
                    source_text: jt.source,
                    reference_translation: jt.reference,
                })
                .collect(),
        };
        accept(&mut out, conv, line)?;
    }
    Ok(out)
}

fn parse_tsv(text: &str) -> Result<ParsedCorpus, CorpusError> {
    struct Pending {
        conv: Conversation,
        first_line: usize,
        langs_ok: Result<(), String>,
    }
    let mut order: Vec<String> = Vec::new();
    let mut pending: HashMap<String, Pending> = HashMap::new();

    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() || raw.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = raw.split('\t').collect();
        if line == 1 && cols.first() == Some(&"conversation_id") {
            continue;
        }
        if cols.len() != 7 {
            return Err(CorpusError::Malformed {
                line,
                reason: format!("expected 7 tab-separated columns, found {}", cols.len()),
            });
        }
        let malformed = |reason: String| CorpusError::Malformed { line, reason };
        let id = cols[0].to_string();
        let index: usize = cols[1]
            .trim()
            .parse()
            .map_err(|_| malformed(format!("turn index {:?} is not a positive integer", cols[1])))?;
        let speaker: Speaker = cols[2].parse().map_err(malformed)?;
        let src = LangCode::new(cols[3]);
        let tgt = LangCode::new(cols[4]);
        let reference = Some(cols[6]).filter(|s| !s.is_empty()).map(str::to_string);

        let entry = pending.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            Pending {
                conv: Conversation {
                    id: id.clone(),
                    language_pair: (src.clone(), tgt.clone()),
                    turns: Vec::new(),
                    metadata: BTreeMap::new(),
                },
                first_line: line,
                langs_ok: Ok(()),
            }
        });
        let (a, b) = &entry.conv.language_pair;
        if entry.langs_ok.is_ok() && !((&src == a && &tgt == b) || (&src == b && &tgt == a)) {
            entry.langs_ok = Err(format!(
                "inconsistent language codes at line {line}: {src}->{tgt} in a {a}-{b} conversation"
            ));
        }
        entry.conv.turns.push(Turn {
            index,
            speaker,
            direction: direction_of(&src),
            source_language: src,
            source_text: cols[5].to_string(),
            reference_translation: reference,
        });
    }

    let mut out = ParsedCorpus::default();
    for id in order {
        let p = pending.remove(&id).expect("grouped conversation");
        if let Err(reason) = p.langs_ok {
            log::warn!("rejecting conversation {id}: {reason}");
            out.rejected.push(Rejection {
                conversation_id: id,
                line: p.first_line,
                reason,
            });
            continue;
        }
        accept(&mut out, p.conv, p.first_line)?;
    }
    Ok(out)
}

/// Serializes conversations as canonical JSONL (LF line endings).
pub fn to_canonical_jsonl(conversations: &[Conversation]) -> String {
    let mut out = String::new();
    for conv in conversations {
        let jc = JsonConversation {
            id: conv.id.clone(),
            src_lang: conv.language_pair.0.clone(),
            tgt_lang: conv.language_pair.1.clone(),
            meta: conv.metadata.clone(),
            turns: conv
                .turns
                .iter()
                .map(|t| JsonTurn {
                    t: t.index,
                    speaker: t.speaker,
                    lang: t.source_language.clone(),
                    source: t.source_text.clone(),
                    reference: t.reference_translation.clone(),
                })
                .collect(),
        };
        out.push_str(&serde_json::to_string(&jc).expect("conversation serializes"));
        out.push('\n');
    }
    out
}

/// Corpus statistics. Averages are kept as exact ratios; use the `*_f64`
/// accessors or [`CorpusStats::rounded`] for presentation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusStats {
    pub n_instances: u64,
    pub avg_source_length: Option<Ratio<u64>>,
    pub avg_segments_per_conversation: Option<Ratio<u64>>,
    /// Percentage of reference segments with at least one discourse tag, as
    /// an exact ratio in `[0, 100]`.
    pub pct_muda_tagged: Option<Ratio<u64>>,
}

impl CorpusStats {
    pub fn avg_source_length_f64(&self) -> Option<f64> {
        self.avg_source_length.and_then(|r| r.to_f64())
    }

    pub fn avg_segments_per_conversation_f64(&self) -> Option<f64> {
        self.avg_segments_per_conversation.and_then(|r| r.to_f64())
    }

    pub fn pct_muda_tagged_f64(&self) -> Option<f64> {
        self.pct_muda_tagged.and_then(|r| r.to_f64())
    }

    /// Presentation row with averages rounded to `decimals` places.
    pub fn rounded(&self, decimals: usize) -> serde_json::Value {
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.decimals$}"));
        serde_json::json!({
            "n_instances": self.n_instances,
            "avg_source_length": fmt(self.avg_source_length_f64()),
            "avg_segments_per_conversation": fmt(self.avg_segments_per_conversation_f64()),
            "pct_muda_tagged": fmt(self.pct_muda_tagged_f64()),
        })
    }
}

/// Computes instance count, mean source length in Unicode scalar values and
/// mean segments per conversation.
pub fn corpus_stats(conversations: &[Conversation]) -> CorpusStats {
    let mut n_turns: u64 = 0;
    let mut n_chars: u64 = 0;
    let mut n_instances: u64 = 0;
    for conv in conversations {
        for turn in &conv.turns {
            n_turns += 1;
            n_chars += turn.source_text.chars().count() as u64;
            if turn.reference_translation.is_some() {
                n_instances += 1;
            }
        }
    }
    let n_convs = conversations.len() as u64;
    CorpusStats {
        n_instances,
        avg_source_length: (n_turns > 0).then(|| Ratio::new(n_chars, n_turns)),
        avg_segments_per_conversation: (n_convs > 0).then(|| Ratio::new(n_turns, n_convs)),
        pct_muda_tagged: None,
    }
}

/// [`corpus_stats`] plus the share of reference segments the discourse tagger
/// marks. Each reference is tagged with the conversation's earlier
/// references in the same target language as antecedents; segments whose
/// target language has no rule set are counted as untagged.
pub fn corpus_stats_with_tagger(conversations: &[Conversation], rules: &RuleBook) -> CorpusStats {
    let mut stats = corpus_stats(conversations);
    let mut segments: u64 = 0;
    let mut tagged: u64 = 0;
    for conv in conversations {
        let mut history: HashMap<&LangCode, Vec<&str>> = HashMap::new();
        for turn in &conv.turns {
            let Some(reference) = turn.reference_translation.as_deref() else {
                continue;
            };
            let tgt = conv.target_language(turn);
            segments += 1;
            let prior = history.entry(tgt).or_default();
            if let Some(rule_set) = rules.get(tgt.as_str()) {
                if !muda::tag_with(reference, prior, rule_set).is_empty() {
                    tagged += 1;
                }
            }
            prior.push(reference);
        }
    }
    stats.pct_muda_tagged = (segments > 0).then(|| Ratio::new(100 * tagged, segments));
    stats
}

#[cfg(test)]
mod tests {
    use super::*;

    fn turn_line(t: usize, lang: &str, src: &str) -> String {
        format!(r#"{{"t":{t},"speaker":"agent","lang":"{lang}","source":"{src}","reference":"r{t}"}}"#)
    }

    fn conv_line(id: &str, turns: &[String]) -> String {
        format!(
            r#"{{"id":"{id}","src_lang":"en","tgt_lang":"de","turns":[{}]}}"#,
            turns.join(",")
        )
    }

    #[test]
    fn parses_two_conversations() {
        let text = [
            conv_line("a", &[turn_line(1, "en", "x"), turn_line(2, "de", "y"), turn_line(3, "en", "z")]),
            conv_line("b", &[turn_line(1, "de", "x"), turn_line(2, "de", "y"), turn_line(3, "en", "z")]),
        ]
        .join("\n");
        let parsed = parse_corpus_str(&text, CorpusFormat::CanonicalJsonl).unwrap();
        assert_eq!(parsed.conversations.len(), 2);
        assert!(parsed.conversations.iter().all(|c| c.len() == 3));
        assert_eq!(parsed.conversations[1].turns[0].direction, Direction::XxToEn);
    }

    #[test]
    fn empty_file_is_empty_corpus() {
        let parsed = parse_corpus_str("", CorpusFormat::CanonicalJsonl).unwrap();
        assert!(parsed.conversations.is_empty());
        let parsed = parse_corpus_str("", CorpusFormat::BcontrastTsv).unwrap();
        assert!(parsed.conversations.is_empty());
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let text = format!("{}\n{{not json\n", conv_line("a", &[turn_line(1, "en", "x")]));
        match parse_corpus_str(&text, CorpusFormat::CanonicalJsonl) {
            Err(CorpusError::Malformed { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn non_contiguous_tsv_turns_are_rejected() {
        let text = "c1\t1\tagent\ten\tde\tHello\tHallo\n\
                    c1\t3\tcustomer\tde\ten\tJa\tYes\n\
                    c1\t2\tagent\ten\tde\tOk\tOk\n";
        let err = parse_corpus_str(text, CorpusFormat::BcontrastTsv).unwrap_err();
        assert!(err.to_string().contains("non-contiguous turn index"), "{err}");
    }

    #[test]
    fn inconsistent_language_rejects_only_that_conversation() {
        let text = [
            conv_line("good", &[turn_line(1, "en", "x")]),
            conv_line("bad", &[turn_line(1, "en", "x"), turn_line(2, "fr", "y")]),
        ]
        .join("\n");
        let parsed = parse_corpus_str(&text, CorpusFormat::CanonicalJsonl).unwrap();
        assert_eq!(parsed.conversations.len(), 1);
        assert_eq!(parsed.rejected.len(), 1);
        assert_eq!(parsed.rejected[0].conversation_id, "bad");
        assert_eq!(parsed.rejected[0].line, 2);
    }

    #[test]
    fn blank_source_is_malformed() {
        let text = conv_line("a", &[turn_line(1, "en", "   ")]);
        assert!(matches!(
            parse_corpus_str(&text, CorpusFormat::CanonicalJsonl),
            Err(CorpusError::Malformed { line: 1, .. })
        ));
    }

    #[test]
    fn tsv_header_and_missing_reference() {
        let text = "conversation_id\tturn\tspeaker\tsource_lang\ttarget_lang\tsource\ttarget\n\
                    c1\t1\tcustomer\tde\ten\tHallo\t\n\
                    c1\t2\tagent\ten\tde\tHi there\tHallo\n";
        let parsed = parse_corpus_str(text, CorpusFormat::BcontrastTsv).unwrap();
        let conv = &parsed.conversations[0];
        assert_eq!(conv.language_pair, (LangCode::new("de"), LangCode::new("en")));
        assert_eq!(conv.turns[0].reference_translation, None);
        assert_eq!(conv.turns[1].speaker, Speaker::Agent);
    }

    #[test]
    fn stats_single_turn() {
        let conv = Conversation::new(
            "c",
            ("en".into(), "de".into()),
            vec![(Speaker::Agent, "en".into(), "ab".into(), Some("x".into()))],
        )
        .unwrap();
        let stats = corpus_stats(&[conv]);
        assert_eq!(stats.n_instances, 1);
        assert_eq!(stats.avg_source_length_f64(), Some(2.0));
        assert_eq!(stats.avg_segments_per_conversation_f64(), Some(1.0));
    }

    #[test]
    fn stats_two_conversations() {
        let mk = |lens: &[usize]| {
            Conversation::new(
                "c",
                ("en".into(), "de".into()),
                lens.iter()
                    .map(|&n| (Speaker::User, "en".into(), "x".repeat(n), Some("r".into())))
                    .collect(),
            )
            .unwrap()
        };
        let stats = corpus_stats(&[mk(&[2, 4]), mk(&[6, 8, 4, 6])]);
        assert_eq!(stats.n_instances, 6);
        assert_eq!(stats.avg_source_length, Some(Ratio::new(5, 1)));
        assert_eq!(stats.avg_segments_per_conversation, Some(Ratio::new(3, 1)));
    }

    #[test]
    fn stats_of_empty_corpus_have_no_averages() {
        let stats = corpus_stats(&[]);
        assert_eq!(stats.n_instances, 0);
        assert_eq!(stats.avg_source_length, None);
        assert_eq!(stats.avg_segments_per_conversation, None);
    }

    #[test]
    fn source_length_counts_scalar_values() {
        let conv = Conversation::new(
            "k",
            ("en".into(), "ko".into()),
            vec![(Speaker::Customer, "ko".into(), "안녕하세요".into(), None)],
        )
        .unwrap();
        let stats = corpus_stats(&[conv]);
        assert_eq!(stats.avg_source_length_f64(), Some(5.0));
        assert_eq!(stats.n_instances, 0);
    }
}
