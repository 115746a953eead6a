//! Lexical span reader, the rewriter interface and the rewrite-then-answer
//! composition.
//!
//! The reader builds a weighted bag of query terms and returns the window,
//! inside a single sentence, with the highest summed weight of distinct
//! query terms. A tiny coverage bonus prefers windows that span more of
//! their sentence's content words, so whole answer sentences beat
//! fragments of them.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::corpus::{AnswerSpan, IdfTable, Passage};
use crate::entities::{propagate, AugmentedQuestion, EntitySet};
use crate::error::{Error, Result};
use crate::termclass::Highlights;
use crate::text::{is_stopword, is_trigger_pronoun, tokenize};

const COVERAGE_EPS: f64 = 1e-6;
const TIE_EPS: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowScoring {
    Sum,
    IdfWeighted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReaderConfig {
    pub max_answer_length: usize,
    pub max_question_length: usize,
    pub highlight_boost: f64,
    pub window_scoring: WindowScoring,
    /// Weight of an unhighlighted history term.
    pub history_weight: f64,
    /// Apply the highlight boost to the current question's own terms too.
    pub boost_question_terms: bool,
}

impl Default for ReaderConfig {
    fn default() -> Self {
        ReaderConfig {
            max_answer_length: 40,
            max_question_length: 64,
            highlight_boost: 2.0,
            window_scoring: WindowScoring::Sum,
            history_weight: 0.5,
            boost_question_terms: false,
        }
    }
}

impl ReaderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_answer_length == 0 || self.max_question_length == 0 {
            return Err(Error::Config("reader lengths must be positive".into()));
        }
        if !(self.highlight_boost >= 1.0) || !self.highlight_boost.is_finite() {
            return Err(Error::Config(format!("highlight_boost {} must be >= 1", self.highlight_boost)));
        }
        if !(self.history_weight >= 0.0) || !self.history_weight.is_finite() {
            return Err(Error::Config(format!("history_weight {} must be >= 0", self.history_weight)));
        }
        Ok(())
    }
}

/// A selected history turn as the reader sees it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub turn_id: String,
    pub question: String,
}

#[derive(Debug, Clone)]
pub struct ReaderInput<'a> {
    pub passage: &'a Passage,
    pub question: &'a AugmentedQuestion,
    /// Weight-descending order.
    pub selected_history: Vec<HistoryEntry>,
    pub highlights: Option<&'a Highlights>,
    pub config: &'a ReaderConfig,
    pub idf: Option<&'a IdfTable>,
}

impl<'a> ReaderInput<'a> {
    /// Question and its entities only: no history, no highlights.
    pub fn bare(passage: &'a Passage, question: &'a AugmentedQuestion, config: &'a ReaderConfig) -> Self {
        ReaderInput { passage, question, selected_history: Vec::new(), highlights: None, config, idf: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermWeight {
    pub term: String,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpanPrediction {
    pub span: AnswerSpan,
    pub score: f64,
    pub trace: Vec<TermWeight>,
}

/// Wire format of a prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpanPredictionJson {
    pub text: String,
    pub start_token: usize,
    pub end_token: usize,
    pub score: f64,
    pub trace: Vec<TermWeight>,
}

impl From<&SpanPrediction> for SpanPredictionJson {
    fn from(p: &SpanPrediction) -> Self {
        SpanPredictionJson {
            text: p.span.text.clone(),
            start_token: p.span.start,
            end_token: p.span.end,
            score: p.score,
            trace: p.trace.clone(),
        }
    }
}

pub trait Reader: Send + Sync {
    fn predict(&self, input: &ReaderInput<'_>) -> Result<SpanPrediction>;
}

/// The deterministic lexical window scorer.
#[derive(Debug, Clone, Copy, Default)]
pub struct LexicalReader;

impl Reader for LexicalReader {
    fn predict(&self, input: &ReaderInput<'_>) -> Result<SpanPrediction> {
        predict_span(input)
    }
}

/// Weighted query terms in order of first addition.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct QueryBag {
    pub terms: Vec<String>,
    pub weights: Vec<f64>,
}

impl QueryBag {
    fn add(&mut self, term: &str, w: f64) {
        match self.terms.iter().position(|t| t == term) {
            Some(i) => self.weights[i] += w,
            None => {
                self.terms.push(term.to_string());
                self.weights.push(w);
            }
        }
    }

    pub fn weight(&self, term: &str) -> f64 {
        self.terms.iter().position(|t| t == term).map_or(0.0, |i| self.weights[i])
    }

    fn is_empty(&self) -> bool {
        !self.weights.iter().any(|&w| w > 0.0)
    }
}

/// Content words among the first `limit` tokens (punctuation counts
/// towards the limit).
fn truncated_content(text: &str, limit: usize) -> (Vec<String>, usize) {
    let toks = tokenize(text);
    let used = toks.len().min(limit);
    let words = toks[..used].iter().filter(|t| !t.is_punct()).map(|t| t.norm()).filter(|w| !is_stopword(w)).collect();
    (words, used)
}

pub fn build_query(input: &ReaderInput<'_>) -> QueryBag {
    let cfg = input.config;
    let boost = cfg.highlight_boost;
    let mut bag = QueryBag::default();
    let (own, used) = truncated_content(&input.question.text, cfg.max_question_length);
    let own_bits: HashMap<&str, bool> = input
        .highlights
        .map(|h| h.question.iter().map(|t| (t.token.as_str(), t.bit == 1)).collect())
        .unwrap_or_default();
    for w in &own {
        let lit = cfg.boost_question_terms && own_bits.get(w.as_str()).copied().unwrap_or(false);
        bag.add(w, if lit { boost } else { 1.0 });
    }
    let inherited_bits: Option<HashMap<&str, bool>> =
        input.highlights.map(|h| h.inherited.iter().map(|t| (t.token.as_str(), t.bit == 1)).collect());
    for w in input.question.inherited_words() {
        let weight = match &inherited_bits {
            None => 1.0,
            Some(bits) if bits.get(w.as_str()).copied().unwrap_or(false) => boost,
            Some(_) => 0.0,
        };
        bag.add(&w, weight);
    }
    let mut budget = cfg.max_question_length - used;
    for entry in &input.selected_history {
        if budget == 0 {
            break;
        }
        let (ws, taken) = truncated_content(&entry.question, budget);
        budget -= taken;
        let bits = input.highlights.and_then(|h| h.history.iter().find(|t| t.turn_id == entry.turn_id));
        for (k, w) in ws.iter().enumerate() {
            let lit = bits.and_then(|b| b.tokens.get(k)).is_some_and(|t| t.bit == 1 && &t.token == w);
            bag.add(w, if lit { boost } else { cfg.history_weight });
        }
    }
    if let (WindowScoring::IdfWeighted, Some(idf)) = (cfg.window_scoring, input.idf) {
        for (t, w) in bag.terms.iter().zip(bag.weights.iter_mut()) {
            *w *= idf.idf(t);
        }
    }
    bag
}

/// Query term index of every passage token, or `None` for tokens that
/// cannot match (punctuation, stopwords, unqueried words).
fn token_terms(passage: &Passage, bag: &QueryBag) -> Vec<Option<usize>> {
    let index: HashMap<&str, usize> = bag.terms.iter().enumerate().map(|(i, t)| (t.as_str(), i)).collect();
    passage.tokens.iter().map(|t| if t.is_punct() { None } else { index.get(t.norm().as_str()).copied() }).collect()
}

fn content_mask(passage: &Passage) -> Vec<bool> {
    passage.tokens.iter().map(|t| !t.is_punct() && !is_stopword(&t.norm())).collect()
}

pub fn predict_span(input: &ReaderInput<'_>) -> Result<SpanPrediction> {
    let passage = input.passage;
    if passage.is_empty() {
        return Err(Error::InvalidInput(format!("passage {} is empty", passage.id)));
    }
    let bag = build_query(input);
    if bag.is_empty() {
        return Err(Error::EmptyQuery);
    }
    let terms = token_terms(passage, &bag);
    let content = content_mask(passage);
    let max_len = input.config.max_answer_length;
    let mut best: Option<(f64, usize, usize)> = None;
    let mut seen = vec![false; bag.terms.len()];
    for (a, b) in passage.sentences() {
        let sentence_content = content[a..=b].iter().filter(|&&c| c).count();
        for start in a..=b {
            seen.iter_mut().for_each(|s| *s = false);
            let mut sum = 0.0;
            let mut covered = 0usize;
            for end in start..=b.min(start + max_len - 1) {
                if let Some(q) = terms[end] {
                    if !seen[q] {
                        seen[q] = true;
                        sum += bag.weights[q];
                    }
                }
                covered += content[end] as usize;
                let coverage = if sentence_content == 0 { 0.0 } else { covered as f64 / sentence_content as f64 };
                let score = sum + COVERAGE_EPS * coverage;
                if best.is_none_or(|(s, _, _)| score > s + TIE_EPS) {
                    best = Some((score, start, end));
                }
            }
        }
    }
    let (score, start, end) = best.expect("non-empty passage has a window");
    let mut present = BTreeSet::new();
    for q in terms[start..=end].iter().flatten() {
        present.insert(*q);
    }
    let trace = present
        .into_iter()
        .filter(|&q| bag.weights[q] != 0.0)
        .map(|q| TermWeight { term: bag.terms[q].clone(), weight: bag.weights[q] })
        .collect();
    Ok(SpanPrediction { span: passage.span(start, end), score, trace })
}

/// Score of an arbitrary window under the reader's formula.
pub fn window_score(passage: &Passage, bag: &QueryBag, start: usize, end: usize) -> f64 {
    let (a, b) = passage
        .sentences()
        .into_iter()
        .find(|&(a, b)| a <= start && end <= b)
        .expect("window inside one sentence");
    let content = content_mask(passage);
    let mut present: BTreeSet<String> = BTreeSet::new();
    for t in &passage.tokens[start..=end] {
        if !t.is_punct() {
            present.insert(t.norm());
        }
    }
    let sum: f64 = present.iter().map(|t| bag.weight(t)).sum();
    let total = content[a..=b].iter().filter(|&&c| c).count();
    let covered = content[start..=end].iter().filter(|&&c| c).count();
    let coverage = if total == 0 { 0.0 } else { covered as f64 / total as f64 };
    sum + COVERAGE_EPS * coverage
}

/// True when the predicted token range overlaps `gold` with IoU >= 0.5.
pub fn gold_hit(pred: &AnswerSpan, gold: &AnswerSpan) -> bool {
    let inter = (pred.end.min(gold.end) + 1).saturating_sub(pred.start.max(gold.start));
    let union = pred.end.max(gold.end) + 1 - pred.start.min(gold.start);
    2 * inter >= union
}

/// A history turn as seen by a rewriter: its question and entities.
#[derive(Debug, Clone, PartialEq)]
pub struct RewriteContext {
    pub question: String,
    pub entities: EntitySet,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rewrite {
    pub text: String,
    /// A pronoun was present but there was nothing to substitute.
    pub warning: bool,
}

pub trait Rewriter: Send + Sync {
    fn rewrite(&self, question: &str, history: &[RewriteContext]) -> Result<Rewrite>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityRewriter;

impl Rewriter for IdentityRewriter {
    fn rewrite(&self, question: &str, _history: &[RewriteContext]) -> Result<Rewrite> {
        Ok(Rewrite { text: question.to_string(), warning: false })
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct TemplateRewriter;

impl Rewriter for TemplateRewriter {
    fn rewrite(&self, question: &str, history: &[RewriteContext]) -> Result<Rewrite> {
        Ok(template_rewrite(question, history))
    }
}

/// Replaces the first trigger pronoun with the most recently mentioned
/// inherited entity and appends the others as "about ..." clauses.
pub fn template_rewrite(question: &str, history: &[RewriteContext]) -> Rewrite {
    let empty = Passage::new("", "", "");
    let last = history.last().map(|h| &h.entities);
    let aq = propagate(question, &empty, last);
    if aq.inherited_entities.is_empty() {
        return Rewrite { text: question.to_string(), warning: aq.unresolved };
    }
    let mut ordered: Vec<String> = Vec::new();
    for h in history.iter().rev() {
        for e in &h.entities.question_entities {
            if aq.inherited_entities.contains(e) && !ordered.contains(e) {
                ordered.push(e.clone());
            }
        }
    }
    for e in &aq.inherited_entities {
        if !ordered.contains(e) {
            ordered.push(e.clone());
        }
    }
    let own = aq.own.all();
    ordered.retain(|e| !own.contains(e));
    let toks = tokenize(question);
    let pron = toks.iter().position(|t| is_trigger_pronoun(&t.norm()));
    let mut text = String::new();
    let mut rest = ordered.iter();
    match pron {
        Some(i) => {
            let head = rest.next().cloned().unwrap_or_default();
            text.push_str(&question[..toks[i].start]);
            text.push_str(&head);
            text.push_str(&question[toks[i].end..]);
        }
        None => text.push_str(question),
    }
    let clauses: Vec<&String> = rest.collect();
    if !clauses.is_empty() {
        let trimmed = text.trim_end();
        let (body, tail) = match trimmed.char_indices().last() {
            Some((i, c)) if c.is_ascii_punctuation() => (&trimmed[..i], &trimmed[i..]),
            _ => (trimmed, ""),
        };
        let list: Vec<&str> = clauses.iter().map(|s| s.as_str()).collect();
        text = format!("{body} about {}{tail}", list.join(" about "));
    }
    Rewrite { text, warning: false }
}

/// Rewrite with `rewriter`, then read the rewritten question against the
/// passage with no history at all.
pub fn compose_pipeline(
    rewriter: Option<&dyn Rewriter>,
    reader: &dyn Reader,
    question: &str,
    history: &[RewriteContext],
    passage: &Passage,
    config: &ReaderConfig,
    idf: Option<&IdfTable>,
) -> Result<(Rewrite, SpanPrediction)> {
    let rewriter = rewriter.ok_or_else(|| Error::Config("pipeline requires a rewriter".into()))?;
    let rewrite = rewriter.rewrite(question, history).map_err(|e| e.at_stage("rewrite"))?;
    let aq = propagate(&rewrite.text, passage, None);
    let input = ReaderInput { idf, ..ReaderInput::bare(passage, &aq, config) };
    let pred = reader.predict(&input)?;
    Ok((rewrite, pred))
}
