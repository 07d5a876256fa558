//! Context assembly and prompt rendering.
//!
//! A rendered prompt has the byte-exact layout
//!
//! ```text
//! Context: <line 1>\n<line 2>\n...<line n>\n\n
//! Translate the <SRC> source text to <TGT>, given the context.\n
//! <SRC>: <source>\n<TGT>:
//! ```
//!
//! The `Context:` block and the `, given the context` clause are present only
//! for prompts with a non-empty context. Training completions are appended
//! after [`COMPLETION_SEPARATOR`].

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Conversation, Direction, LangCode};

pub const CONTEXT_HEADER: &str = "Context: ";
/// Joins a prompt and its completion in the training layout.
pub const COMPLETION_SEPARATOR: &str = " ";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("turn {t} out of range for conversation {id} of length {len}")]
    TurnOutOfRange { id: String, t: usize, len: usize },
    #[error("english-only context needs an English translation of turn {0}")]
    MissingTranslation(usize),
    #[error("unknown language code {code:?}; configured: {}", configured.join(", "))]
    UnknownLanguage { code: String, configured: Vec<String> },
    #[error("invalid context policy {0:?} (expected none, k=<n> or full)")]
    BadWindow(String),
    #[error("context window k must be at least 1")]
    ZeroWindow,
}

/// How many preceding turns to use. Serialized as `none`, `k=<n>` or `full`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Window {
    None,
    LastK(usize),
    Full,
}

impl Window {
    pub fn last_k(k: usize) -> Result<Self, PromptError> {
        if k == 0 {
            Err(PromptError::ZeroWindow)
        } else {
            Ok(Window::LastK(k))
        }
    }
}

impl fmt::Display for Window {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Window::None => f.write_str("none"),
            Window::LastK(k) => write!(f, "k={k}"),
            Window::Full => f.write_str("full"),
        }
    }
}

impl TryFrom<String> for Window {
    type Error = PromptError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<Window> for String {
    fn from(w: Window) -> String {
        w.to_string()
    }
}

impl FromStr for Window {
    type Err = PromptError;

    /// Parses `none`, `full`, `k=<n>` or a bare `<n>`; `k=0` means `none`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        match s {
            "none" => return Ok(Window::None),
            "full" => return Ok(Window::Full),
            _ => {}
        }
        let digits = s.strip_prefix("k=").unwrap_or(s);
        match digits.parse::<usize>() {
            Ok(0) => Ok(Window::None),
            Ok(k) => Ok(Window::LastK(k)),
            Err(_) => Err(PromptError::BadWindow(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LanguageMode {
    #[default]
    Bilingual,
    EnglishOnly,
}

impl FromStr for LanguageMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "bilingual" => Ok(LanguageMode::Bilingual),
            "english-only" | "english_only" => Ok(LanguageMode::EnglishOnly),
            other => Err(format!("unknown language mode {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ContextPolicy {
    pub window: Window,
    pub language_mode: LanguageMode,
}

impl ContextPolicy {
    pub fn new(window: Window, language_mode: LanguageMode) -> Self {
        ContextPolicy { window, language_mode }
    }

    pub fn bilingual(window: Window) -> Self {
        Self::new(window, LanguageMode::Bilingual)
    }

    pub fn none() -> Self {
        Self::bilingual(Window::None)
    }

    pub fn full() -> Self {
        Self::bilingual(Window::Full)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextLine {
    pub turn_index: usize,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextBlock {
    pub lines: Vec<ContextLine>,
    pub policy: ContextPolicy,
}

impl ContextBlock {
    pub fn empty(policy: ContextPolicy) -> Self {
        ContextBlock { lines: Vec::new(), policy }
    }

    pub fn is_empty(&self) -> bool {
        self.lines.is_empty()
    }

    pub fn len(&self) -> usize {
        self.lines.len()
    }

    /// The last `k` lines (all of them when `k` exceeds the length).
    pub fn tail(&self, k: usize) -> &[ContextLine] {
        &self.lines[self.lines.len().saturating_sub(k)..]
    }

    /// Copy of the block without the line for `turn_index`.
    pub fn without_turn(&self, turn_index: usize) -> ContextBlock {
        ContextBlock {
            lines: self
                .lines
                .iter()
                .filter(|l| l.turn_index != turn_index)
                .cloned()
                .collect(),
            policy: self.policy,
        }
    }

    /// Drops the oldest lines until the joined text fits in `max_chars`
    /// characters. Returns the number of dropped lines.
    pub fn truncate_to_chars(&mut self, max_chars: usize) -> usize {
        let mut dropped = 0;
        while !self.lines.is_empty() && self.char_len() > max_chars {
            self.lines.remove(0);
            dropped += 1;
        }
        dropped
    }

    fn char_len(&self) -> usize {
        let text: usize = self.lines.iter().map(|l| l.text.chars().count()).sum();
        text + self.lines.len().saturating_sub(1)
    }
}

/// Assembles the context for turn `t` (1-based).
///
/// In English-only mode, non-English turns are replaced by
/// `translations[turn_index]`: prior system outputs at inference time, or
/// references when exporting training data.
pub fn build_context(
    conversation: &Conversation,
    t: usize,
    policy: ContextPolicy,
    translations: Option<&HashMap<usize, String>>,
) -> Result<ContextBlock, PromptError> {
    if t == 0 || t > conversation.len() {
        return Err(PromptError::TurnOutOfRange {
            id: conversation.id.clone(),
            t,
            len: conversation.len(),
        });
    }
    let prior = &conversation.turns[..t - 1];
    let window = match policy.window {
        Window::None => &prior[..0],
        Window::LastK(k) => &prior[prior.len().saturating_sub(k)..],
        Window::Full => prior,
    };
    let lines = window
        .iter()
        .map(|turn| {
            let text = match policy.language_mode {
                LanguageMode::Bilingual => turn.source_text.clone(),
                LanguageMode::EnglishOnly if turn.source_language.is_english() => {
                    turn.source_text.clone()
                }
                LanguageMode::EnglishOnly => translations
                    .and_then(|m| m.get(&turn.index))
                    .cloned()
                    .ok_or(PromptError::MissingTranslation(turn.index))?,
            };
            Ok(ContextLine {
                turn_index: turn.index,
                text,
            })
        })
        .collect::<Result<_, _>>()?;
    Ok(ContextBlock { lines, policy })
}

/// Display names used inside prompts, keyed by language code.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LanguageTable {
    names: BTreeMap<String, String>,
}

impl Default for LanguageTable {
    fn default() -> Self {
        let names = [
            ("de", "German"),
            ("en", "English"),
            ("fr", "French"),
            ("ko", "Korean"),
            ("nl", "Dutch"),
            ("pt-br", "Brazilian Portuguese"),
        ];
        LanguageTable {
            names: names
                .iter()
                .map(|(c, n)| (c.to_string(), n.to_string()))
                .collect(),
        }
    }
}

impl LanguageTable {
    pub fn with(mut self, code: &str, name: &str) -> Self {
        self.names.insert(code.to_lowercase(), name.to_string());
        self
    }

    pub fn name(&self, code: &LangCode) -> Result<&str, PromptError> {
        self.names
            .get(code.as_str())
            .map(String::as_str)
            .ok_or_else(|| PromptError::UnknownLanguage {
                code: code.to_string(),
                configured: self.names.keys().cloned().collect(),
            })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub text: String,
    pub with_context: bool,
    pub src_lang_name: String,
    pub tgt_lang_name: String,
    pub expected_completion: Option<String>,
}

impl RenderedPrompt {
    /// Prompt followed by the expected completion, as seen in training.
    pub fn training_text(&self) -> Option<String> {
        self.expected_completion
            .as_ref()
            .map(|c| format!("{}{COMPLETION_SEPARATOR}{c}", self.text))
    }
}

/// Renders a translation prompt. With `with_context` set but an empty block,
/// the prompt is identical to the context-free one.
pub fn render_prompt(
    source: &str,
    block: &ContextBlock,
    src: &LangCode,
    tgt: &LangCode,
    with_context: bool,
    languages: &LanguageTable,
) -> Result<RenderedPrompt, PromptError> {
    let src_name = languages.name(src)?;
    let tgt_name = languages.name(tgt)?;
    let with_context = with_context && !block.is_empty();

    let mut text = String::new();
    if with_context {
        text.push_str(CONTEXT_HEADER);
        for (i, line) in block.lines.iter().enumerate() {
            if i > 0 {
                text.push('\n');
            }
            text.push_str(&line.text);
        }
        text.push_str("\n\n");
    }
    text.push_str(&format!("Translate the {src_name} source text to {tgt_name}"));
    if with_context {
        text.push_str(", given the context");
    }
    text.push_str(&format!(".\n{src_name}: {source}\n{tgt_name}:"));

    Ok(RenderedPrompt {
        text,
        with_context,
        src_lang_name: src_name.to_string(),
        tgt_lang_name: tgt_name.to_string(),
        expected_completion: None,
    })
}

/// Pieces of a prompt produced by [`render_prompt`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptView<'a> {
    pub context_lines: Vec<&'a str>,
    pub source: &'a str,
}

/// Inverse of [`render_prompt`]; `None` when `text` does not follow the layout.
pub fn parse_prompt(text: &str) -> Option<PromptView<'_>> {
    let (context_lines, rest) = match text.strip_prefix(CONTEXT_HEADER) {
        Some(after) => {
            let end = after.find("\n\n")?;
            (after[..end].split('\n').collect(), &after[end + 2..])
        }
        None => (Vec::new(), text),
    };
    let rest = rest.strip_prefix("Translate the ")?;
    let (_, body) = rest.split_once(".\n")?;
    let (source_line, _) = body.rsplit_once('\n')?;
    let (_, source) = source_line.split_once(": ")?;
    Some(PromptView { context_lines, source })
}

/// Context and prompt for turn `t` of a conversation in one step.
pub fn prompt_for_turn(
    conversation: &Conversation,
    t: usize,
    policy: ContextPolicy,
    translations: Option<&HashMap<usize, String>>,
    languages: &LanguageTable,
) -> Result<(ContextBlock, RenderedPrompt), PromptError> {
    let block = build_context(conversation, t, policy, translations)?;
    let turn = conversation.turn(t).expect("checked by build_context");
    let prompt = render_prompt(
        &turn.source_text,
        &block,
        &turn.source_language,
        conversation.target_language(turn),
        policy.window != Window::None,
        languages,
    )?;
    Ok((block, prompt))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExportMode {
    Reference,
    MbrDistill,
}

impl FromStr for ExportMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "reference" => Ok(ExportMode::Reference),
            "mbr-distill" | "mbr_distill" => Ok(ExportMode::MbrDistill),
            other => Err(format!("unknown export mode {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftMeta {
    pub conversation_id: String,
    pub t: usize,
    pub direction: Direction,
    pub mode: ExportMode,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftRecord {
    pub prompt: String,
    pub completion: String,
    pub meta: SftMeta,
}

/// MBR outputs keyed by `(conversation id, turn index)`.
pub type MbrOutputs = HashMap<(String, usize), String>;

#[derive(Debug, Clone, Default)]
pub struct SftExport {
    pub records: Vec<SftRecord>,
    pub skipped: usize,
}

impl SftExport {
    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct ExportOptions {
    pub policy: ContextPolicy,
    pub mode: ExportMode,
    /// Maximum context length in characters; oldest turns are dropped first.
    pub max_context_chars: Option<usize>,
}

/// Builds one training record per eligible turn. Turns lacking the required
/// completion (or an English context translation) are skipped with a warning.
pub fn export_sft(
    conversations: &[Conversation],
    options: &ExportOptions,
    mbr_outputs: Option<&MbrOutputs>,
    languages: &LanguageTable,
) -> Result<SftExport, PromptError> {
    let mut export = SftExport::default();
    for conv in conversations {
        // English-only training context uses references for non-English turns.
        let translations: HashMap<usize, String> = conv
            .turns
            .iter()
            .filter(|t| !t.source_language.is_english())
            .filter_map(|t| t.reference_translation.clone().map(|r| (t.index, r)))
            .collect();

        for turn in &conv.turns {
            let completion = match options.mode {
                ExportMode::Reference => turn.reference_translation.clone(),
                ExportMode::MbrDistill => {
                    mbr_outputs.and_then(|m| m.get(&(conv.id.clone(), turn.index)).cloned())
                }
            };
            let Some(completion) = completion else {
                log::warn!(
                    "skipping {}#{}: no {:?} completion",
                    conv.id,
                    turn.index,
                    options.mode
                );
                export.skipped += 1;
                continue;
            };
            let mut block = match build_context(conv, turn.index, options.policy, Some(&translations)) {
                Ok(b) => b,
                Err(PromptError::MissingTranslation(i)) => {
                    log::warn!("skipping {}#{}: no English translation of turn {i}", conv.id, turn.index);
                    export.skipped += 1;
                    continue;
                }
                Err(e) => return Err(e),
            };
            if let Some(max) = options.max_context_chars {
                let dropped = block.truncate_to_chars(max);
                if dropped > 0 {
                    log::info!("{}#{}: dropped {dropped} oldest context turns", conv.id, turn.index);
                }
            }
            let prompt = render_prompt(
                &turn.source_text,
                &block,
                &turn.source_language,
                conv.target_language(turn),
                options.policy.window != Window::None,
                languages,
            )?;
            export.records.push(SftRecord {
                prompt: prompt.text,
                completion,
                meta: SftMeta {
                    conversation_id: conv.id.clone(),
                    t: turn.index,
                    direction: turn.direction,
                    mode: options.mode,
                },
            });
        }
    }
    if export.skipped > 0 {
        log::warn!("skipped {} records with missing coverage", export.skipped);
    }
    Ok(export)
}
