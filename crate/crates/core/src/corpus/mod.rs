//! Conversation data model, QuAC/CANARD-style JSON ingestion and the
//! synthetic corpus generator.

mod synthetic;

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::{tokenize, Token};

pub use synthetic::{default_mix, generate_synthetic, generate_synthetic_with, FeatureMix, SyntheticOptions};

/// QuAC marks unanswerable turns with this literal answer text.
pub const CANNOT_ANSWER: &str = "CANNOTANSWER";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DialogFeature {
    FirstQuestion,
    DrillDown,
    TopicShift,
    TopicReturn,
    Clarification,
}

impl DialogFeature {
    pub const ALL: [DialogFeature; 5] = [
        DialogFeature::FirstQuestion,
        DialogFeature::DrillDown,
        DialogFeature::TopicShift,
        DialogFeature::TopicReturn,
        DialogFeature::Clarification,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DialogFeature::FirstQuestion => "first_question",
            DialogFeature::DrillDown => "drill_down",
            DialogFeature::TopicShift => "topic_shift",
            DialogFeature::TopicReturn => "topic_return",
            DialogFeature::Clarification => "clarification",
        }
    }
}

impl fmt::Display for DialogFeature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DialogFeature {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DialogFeature::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown dialog feature {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Passage {
    pub id: String,
    pub title: String,
    pub text: String,
    pub tokens: Vec<Token>,
}

impl Passage {
    pub fn new(id: impl Into<String>, title: impl Into<String>, text: impl Into<String>) -> Self {
        let text = text.into();
        let tokens = tokenize(&text);
        Passage { id: id.into(), title: title.into(), text, tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Source text covered by tokens `start..=end`.
    pub fn span_text(&self, start: usize, end: usize) -> &str {
        &self.text[self.tokens[start].start..self.tokens[end].end]
    }

    pub fn span(&self, start: usize, end: usize) -> AnswerSpan {
        AnswerSpan { text: self.span_text(start, end).to_string(), start, end }
    }

    /// Inclusive token ranges of sentences. A sentence ends at `.`, `!` or
    /// `?`; trailing tokens without a terminator form a final sentence.
    pub fn sentences(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        let mut begin = 0;
        for (i, t) in self.tokens.iter().enumerate() {
            if t.ends_sentence() {
                out.push((begin, i));
                begin = i + 1;
            }
        }
        if begin < self.tokens.len() {
            out.push((begin, self.tokens.len() - 1));
        }
        out
    }

    /// Lowercased word forms present in the passage.
    pub fn word_set(&self) -> HashSet<String> {
        self.tokens.iter().filter(|t| !t.is_punct()).map(Token::norm).collect()
    }

    /// Lowercased forms of words that appear capitalized somewhere other
    /// than at the start of a sentence.
    pub fn proper_words(&self) -> HashSet<String> {
        let mut out = HashSet::new();
        let mut at_start = true;
        for t in &self.tokens {
            if t.is_punct() {
                at_start = t.ends_sentence();
                continue;
            }
            if !at_start && t.is_capitalized() {
                out.insert(t.norm());
            }
            at_start = false;
        }
        out
    }

    /// Token span covering the byte range of an answer, or `None` when the
    /// range contains no tokens.
    fn span_for_bytes(&self, start: usize, end: usize) -> Option<AnswerSpan> {
        let first = self.tokens.iter().position(|t| t.end > start)?;
        let last = self.tokens.iter().rposition(|t| t.start < end)?;
        (first <= last).then(|| self.span(first, last))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerSpan {
    pub text: String,
    /// First token index.
    pub start: usize,
    /// Last token index, inclusive.
    pub end: usize,
}

/// A turn from another conversation placed into this turn's history.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InjectedTurn {
    /// Number of the conversation's own prior turns that precede it.
    pub position: usize,
    pub source: String,
    pub id: String,
    pub question: String,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub id: String,
    pub question: String,
    pub gold_answers: Vec<AnswerSpan>,
    pub feature: DialogFeature,
    pub planted_required_entities: Option<Vec<String>>,
    pub injected_history: Vec<InjectedTurn>,
}

impl Turn {
    pub fn is_answerable(&self) -> bool {
        !self.gold_answers.is_empty()
    }

    pub fn answer_text(&self) -> &str {
        self.gold_answers.first().map(|a| a.text.as_str()).unwrap_or("")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conversation {
    pub id: String,
    /// Topic tag shared by conversations about the same subject matter.
    pub topic: Option<String>,
    pub passage: Passage,
    pub turns: Vec<Turn>,
}

impl Conversation {
    /// Topic used for negative sampling: the explicit tag, else the title.
    pub fn topic_key(&self) -> &str {
        self.topic.as_deref().unwrap_or(&self.passage.title)
    }

    pub fn history_len(&self, turn: usize) -> usize {
        turn + self.turns[turn].injected_history.len()
    }

    pub fn validate(&self) -> Result<()> {
        let ctx = format!("conversation {}", self.id);
        if self.turns.is_empty() {
            return Err(Error::validation(ctx, "at least one turn required"));
        }
        if self.passage.tokens.is_empty() != self.passage.text.trim().is_empty() {
            return Err(Error::validation(ctx, "passage tokens inconsistent with text"));
        }
        let mut seen = HashSet::new();
        for t in &self.turns {
            if !seen.insert(t.id.as_str()) {
                return Err(Error::validation(ctx, format!("duplicate turn id {}", t.id)));
            }
            for a in &t.gold_answers {
                if a.start > a.end || a.end >= self.passage.len() {
                    return Err(Error::validation(
                        ctx,
                        format!("turn {}: answer tokens {}..={} out of range", t.id, a.start, a.end),
                    ));
                }
                if self.passage.span_text(a.start, a.end) != a.text {
                    return Err(Error::validation(ctx, format!("turn {}: answer text mismatch", t.id)));
                }
            }
        }
        if self.turns[0].feature != DialogFeature::FirstQuestion {
            return Err(Error::validation(ctx, "first turn must be first_question"));
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct QuacFile {
    data: Vec<QuacEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct QuacEntry {
    id: String,
    title: String,
    context: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    topic: Option<String>,
    qas: Vec<QuacQa>,
}

#[derive(Debug, Serialize, Deserialize)]
struct QuacQa {
    id: String,
    question: String,
    answers: Vec<QuacAnswer>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    feature: Option<DialogFeature>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    planted_required_entities: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    injected_history: Vec<InjectedTurn>,
}

#[derive(Debug, Serialize, Deserialize)]
struct QuacAnswer {
    text: String,
    answer_start: usize,
}

fn entry_to_conversation(entry: QuacEntry) -> Result<Conversation> {
    let ctx = format!("conversation {}", entry.id);
    let passage = Passage::new(entry.id.clone(), entry.title, entry.context);
    let mut turns = Vec::with_capacity(entry.qas.len());
    let mut explicit = Vec::with_capacity(entry.qas.len());
    for qa in entry.qas {
        let mut gold = Vec::new();
        for a in qa.answers {
            if a.text.trim() == CANNOT_ANSWER {
                continue;
            }
            let end = a.answer_start + a.text.len();
            if end > passage.text.len() {
                return Err(Error::validation(
                    &ctx,
                    format!("turn {}: answer_start {} past passage end {}", qa.id, a.answer_start, passage.text.len()),
                ));
            }
            if passage.text.get(a.answer_start..end) != Some(a.text.as_str()) {
                return Err(Error::validation(
                    &ctx,
                    format!("turn {}: answer text disagrees with passage at offset {}", qa.id, a.answer_start),
                ));
            }
            let lead = a.text.len() - a.text.trim_start().len();
            let trail = a.text.len() - a.text.trim_end().len();
            let span = passage
                .span_for_bytes(a.answer_start + lead, end - trail)
                .ok_or_else(|| Error::validation(&ctx, format!("turn {}: answer covers no tokens", qa.id)))?;
            gold.push(span);
        }
        explicit.push(qa.feature);
        turns.push(Turn {
            id: qa.id,
            question: qa.question,
            gold_answers: gold,
            feature: qa.feature.unwrap_or(DialogFeature::TopicShift),
            planted_required_entities: qa.planted_required_entities,
            injected_history: qa.injected_history,
        });
    }
    let mut conv = Conversation { id: entry.id, topic: entry.topic, passage, turns };
    if conv.turns.is_empty() {
        return Err(Error::validation(ctx, "at least one turn required"));
    }
    if explicit.iter().any(Option::is_none) {
        let tagged = crate::metrics::tag_features(&conv);
        for ((turn, given), tag) in conv.turns.iter_mut().zip(&explicit).zip(tagged) {
            if given.is_none() {
                turn.feature = tag;
            }
        }
    }
    conv.validate()?;
    Ok(conv)
}

fn conversation_to_entry(conv: &Conversation) -> QuacEntry {
    let qas = conv
        .turns
        .iter()
        .map(|t| QuacQa {
            id: t.id.clone(),
            question: t.question.clone(),
            answers: t
                .gold_answers
                .iter()
                .map(|a| QuacAnswer { text: a.text.clone(), answer_start: conv.passage.tokens[a.start].start })
                .collect(),
            feature: Some(t.feature),
            planted_required_entities: t.planted_required_entities.clone(),
            injected_history: t.injected_history.clone(),
        })
        .collect();
    QuacEntry {
        id: conv.id.clone(),
        title: conv.passage.title.clone(),
        context: conv.passage.text.clone(),
        topic: conv.topic.clone(),
        qas,
    }
}

pub fn parse_quac(json: &str) -> Result<Vec<Conversation>> {
    let file: QuacFile = serde_json::from_str(json)?;
    file.data.into_iter().map(entry_to_conversation).collect()
}

pub fn load_quac(path: impl AsRef<Path>) -> Result<Vec<Conversation>> {
    parse_quac(&read_file(path.as_ref())?)
}

pub fn to_quac_json(convs: &[Conversation]) -> String {
    let file = QuacFile { data: convs.iter().map(conversation_to_entry).collect() };
    serde_json::to_string_pretty(&file).expect("corpus serializes")
}

pub fn write_quac(path: impl AsRef<Path>, convs: &[Conversation]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_quac_json(convs))
        .map_err(|source| Error::Io { path: path.display().to_string(), source })
}

fn read_file(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|source| Error::Io { path: path.display().to_string(), source })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CanardRecord {
    #[serde(rename = "History")]
    pub history: Vec<String>,
    #[serde(rename = "Question")]
    pub question: String,
    #[serde(rename = "Rewrite")]
    pub rewrite: String,
}

pub fn parse_canard(json: &str) -> Result<Vec<CanardRecord>> {
    let raw: Vec<serde_json::Value> = serde_json::from_str(json)?;
    raw.into_iter()
        .enumerate()
        .map(|(i, v)| {
            serde_json::from_value(v).map_err(|e| Error::validation(format!("record {i}"), e.to_string()))
        })
        .collect()
}

pub fn load_canard(path: impl AsRef<Path>) -> Result<Vec<CanardRecord>> {
    parse_canard(&read_file(path.as_ref())?)
}

/// Document frequencies over passages; `idf(t) = ln(1 + N / df(t))`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IdfTable {
    pub n_docs: usize,
    pub df: BTreeMap<String, usize>,
}

impl IdfTable {
    pub fn from_passages<'a>(passages: impl IntoIterator<Item = &'a Passage>) -> Self {
        let mut table = IdfTable::default();
        for p in passages {
            table.n_docs += 1;
            for w in p.word_set() {
                *table.df.entry(w).or_insert(0) += 1;
            }
        }
        table
    }

    pub fn from_conversations(convs: &[Conversation]) -> Self {
        Self::from_passages(convs.iter().map(|c| &c.passage))
    }

    /// Unseen terms are treated as occurring in a single document.
    pub fn idf(&self, term: &str) -> f64 {
        let df = self.df.get(term).copied().unwrap_or(1).max(1);
        (1.0 + self.n_docs as f64 / df as f64).ln()
    }
}
