//! Entity extraction, pronoun-triggered propagation and distant labeling.

use std::collections::{BTreeSet, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::corpus::{Conversation, Passage};
use crate::error::{Error, Result};
use crate::reader::{gold_hit, Reader, ReaderConfig, ReaderInput};
use crate::text::{is_stopword, is_trigger_pronoun, tokenize, words};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntitySet {
    pub context_entities: BTreeSet<String>,
    pub question_entities: BTreeSet<String>,
}

impl EntitySet {
    pub fn all(&self) -> BTreeSet<String> {
        self.context_entities.union(&self.question_entities).cloned().collect()
    }

    pub fn is_empty(&self) -> bool {
        self.context_entities.is_empty() && self.question_entities.is_empty()
    }

    pub fn contains(&self, e: &str) -> bool {
        self.context_entities.contains(e) || self.question_entities.contains(e)
    }

    /// Individual words of all entities (phrases split on spaces).
    pub fn words(&self) -> BTreeSet<String> {
        self.all().iter().flat_map(|e| e.split(' ').map(str::to_string).collect::<Vec<_>>()).collect()
    }

    pub fn shared_with(&self, other: &EntitySet) -> BTreeSet<String> {
        self.all().intersection(&other.all()).cloned().collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentedQuestion {
    pub text: String,
    pub original_tokens: Vec<String>,
    /// Entities extractable from the question alone.
    pub own: EntitySet,
    pub inherited_entities: BTreeSet<String>,
    pub effective_entities: EntitySet,
    /// A trigger pronoun was present but nothing could be inherited.
    pub unresolved: bool,
}

impl AugmentedQuestion {
    /// Inherited entity words not already among the question's own words,
    /// in sorted order.
    pub fn inherited_words(&self) -> Vec<String> {
        let own = self.own.words();
        let mut out = BTreeSet::new();
        for e in &self.inherited_entities {
            for w in e.split(' ') {
                if !own.contains(w) {
                    out.insert(w.to_string());
                }
            }
        }
        out.into_iter().collect()
    }

    /// Same own extraction with a different inherited set.
    pub fn with_inherited(&self, inherited: BTreeSet<String>) -> AugmentedQuestion {
        let mut effective = self.own.clone();
        effective.context_entities.extend(inherited.iter().cloned());
        AugmentedQuestion { inherited_entities: inherited, effective_entities: effective, ..self.clone() }
    }
}

/// Unigram content words followed by capitalized phrases (runs of two or
/// three capitalized, non-initial, non-stopword words), deduplicated in
/// order of appearance.
pub fn question_ngrams(question: &str) -> Vec<String> {
    let toks: Vec<_> = tokenize(question).into_iter().filter(|t| !t.is_punct()).collect();
    let mut out: Vec<String> = Vec::new();
    let push = |s: String, out: &mut Vec<String>| {
        if !out.contains(&s) {
            out.push(s);
        }
    };
    for t in &toks {
        let w = t.norm();
        if !is_stopword(&w) {
            push(w, &mut out);
        }
    }
    let mut run: Vec<String> = Vec::new();
    let flush = |run: &mut Vec<String>, out: &mut Vec<String>| {
        for n in 2..=3 {
            for win in run.windows(n) {
                push(win.join(" "), out);
            }
        }
        run.clear();
    };
    for (i, t) in toks.iter().enumerate() {
        if i > 0 && t.is_capitalized() && !is_stopword(&t.norm()) {
            run.push(t.norm());
        } else {
            flush(&mut run, &mut out);
        }
    }
    flush(&mut run, &mut out);
    out
}

fn has_trigger(question: &str) -> bool {
    words(question).iter().any(|w| is_trigger_pronoun(w))
}

/// Question entities are the question's n-grams; context entities are
/// those that also occur in the passage or in `previous`, plus the
/// antecedents in `previous` when the question contains a trigger pronoun.
pub fn extract_entities(question: &str, passage: &Passage, previous: Option<&EntitySet>) -> EntitySet {
    let passage_words = passage.word_set();
    let prev = previous.map(EntitySet::all).unwrap_or_default();
    let mut set = EntitySet::default();
    for e in question_ngrams(question) {
        if prev.contains(&e) || e.split(' ').all(|w| passage_words.contains(w)) {
            set.context_entities.insert(e.clone());
        }
        set.question_entities.insert(e);
    }
    if has_trigger(question) {
        set.context_entities.extend(prev);
    }
    set
}

pub fn propagate(current: &str, passage: &Passage, last_effective: Option<&EntitySet>) -> AugmentedQuestion {
    let own = extract_entities(current, passage, None);
    let trigger = has_trigger(current);
    let wants = own.is_empty() || trigger;
    let inherited = match last_effective {
        Some(last) if wants => last.all(),
        _ => BTreeSet::new(),
    };
    let base = AugmentedQuestion {
        text: current.to_string(),
        original_tokens: words(current),
        own,
        inherited_entities: BTreeSet::new(),
        effective_entities: EntitySet::default(),
        unresolved: wants && trigger && inherited.is_empty(),
    };
    base.with_inherited(inherited)
}

/// Propagated questions for every turn, in order.
pub fn augment_conversation(conv: &Conversation) -> Vec<AugmentedQuestion> {
    let mut out: Vec<AugmentedQuestion> = Vec::with_capacity(conv.turns.len());
    for t in &conv.turns {
        let last = out.last().map(|a| &a.effective_entities);
        out.push(propagate(&t.question, &conv.passage, last));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnLabel {
    pub turn_id: String,
    pub required_entities: BTreeSet<String>,
    /// One bit per word of the question.
    pub token_bits: Vec<u8>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub unresolvable: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DistantLabels {
    pub conversation_id: String,
    pub turns: Vec<TurnLabel>,
}

impl DistantLabels {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("labels serialize")
    }
}

/// Position of each entity's first mention: (turn, word index).
fn first_mentions(conv: &Conversation) -> HashMap<String, (usize, usize)> {
    let mut out = HashMap::new();
    for (i, t) in conv.turns.iter().enumerate() {
        let ws = words(&t.question);
        for e in question_ngrams(&t.question) {
            let head = e.split(' ').next().unwrap_or_default();
            let pos = ws.iter().position(|w| w == head).unwrap_or(ws.len());
            out.entry(e).or_insert((i, pos));
        }
    }
    out
}

fn hits(
    reader: &dyn Reader,
    conv: &Conversation,
    turn: usize,
    q: &AugmentedQuestion,
    config: &ReaderConfig,
) -> Result<bool> {
    let input = ReaderInput::bare(&conv.passage, q, config);
    match reader.predict(&input) {
        Ok(pred) => Ok(conv.turns[turn].gold_answers.iter().any(|g| gold_hit(&pred.span, g))),
        Err(Error::EmptyQuery) => Ok(false),
        Err(e) => Err(Error::validation(format!("turn {}", conv.turns[turn].id), e.to_string())),
    }
}

/// Greedy necessity search. The own extraction is tried first; if it does
/// not retrieve the gold span, inherited candidates are added in order of
/// first mention until it does, then each accepted candidate is dropped
/// again (latest first) if the rest still retrieves the gold span.
pub fn distant_label(conv: &Conversation, reader: &dyn Reader, config: &ReaderConfig) -> Result<DistantLabels> {
    let augmented = augment_conversation(conv);
    let order = first_mentions(conv);
    let mut turns = Vec::with_capacity(conv.turns.len());
    for (i, (turn, aq)) in conv.turns.iter().zip(&augmented).enumerate() {
        if !turn.is_answerable() {
            return Err(Error::validation(format!("turn {}", turn.id), "no gold answer to label against"));
        }
        let own = aq.own.all();
        let mut required = own.clone();
        let mut unresolvable = false;
        let own_q = aq.with_inherited(BTreeSet::new());
        if i > 0 && !aq.inherited_entities.is_empty() && (own.is_empty() || !hits(reader, conv, i, &own_q, config)?)
        {
            let mut cands: Vec<String> =
                aq.inherited_entities.iter().filter(|e| !own.contains(*e)).cloned().collect();
            cands.sort_by_key(|e| (order.get(e).copied().unwrap_or((usize::MAX, usize::MAX)), e.clone()));
            let mut accepted: Vec<String> = Vec::new();
            let mut found = false;
            for c in &cands {
                accepted.push(c.clone());
                if hits(reader, conv, i, &aq.with_inherited(accepted.iter().cloned().collect()), config)? {
                    found = true;
                    break;
                }
            }
            if found {
                for c in accepted.clone().iter().rev() {
                    let trial: BTreeSet<String> = accepted.iter().filter(|e| *e != c).cloned().collect();
                    if hits(reader, conv, i, &aq.with_inherited(trial), config)? {
                        accepted.retain(|e| e != c);
                    }
                }
                required.extend(accepted);
            } else {
                unresolvable = true;
                required.extend(cands);
            }
        }
        let relevant: HashSet<String> =
            required.iter().chain(&own).flat_map(|e| e.split(' ').map(str::to_string).collect::<Vec<_>>()).collect();
        let token_bits = words(&turn.question).iter().map(|w| relevant.contains(w) as u8).collect();
        turns.push(TurnLabel { turn_id: turn.id.clone(), required_entities: required, token_bits, unresolvable });
    }
    Ok(DistantLabels { conversation_id: conv.id.clone(), turns })
}
