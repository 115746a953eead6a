//! Hard selection (entity-overlap pruning) and soft selection (softmax
//! attention over turn representations).

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::corpus::Conversation;
use crate::entities::{extract_entities, DistantLabels, EntitySet};
use crate::error::{Error, Result};
use crate::nncore::{fit, grad_check, EmbeddingTable, Example, FitReport, LinearLayer, Loss, TrainConfig};
use crate::nncore::softmax;
use crate::text::words;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMode {
    ExactToken,
    /// Overlap coefficient `|A ∩ B| / min(|A|, |B|)`.
    NormalizedOverlap,
}

/// Which of a history turn's entity sets must match the current question.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchScope {
    /// Context or question entities (their union).
    Either,
    /// Context and question entities must each match.
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PruneConfig {
    pub min_shared_entities: usize,
    pub match_mode: MatchMode,
    pub overlap_threshold: f64,
    pub scope: MatchScope,
}

impl Default for PruneConfig {
    fn default() -> Self {
        PruneConfig {
            min_shared_entities: 1,
            match_mode: MatchMode::ExactToken,
            overlap_threshold: 0.5,
            scope: MatchScope::Either,
        }
    }
}

impl PruneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_shared_entities == 0 {
            return Err(Error::Config("min_shared_entities must be >= 1".into()));
        }
        if !(self.overlap_threshold > 0.0 && self.overlap_threshold <= 1.0) {
            return Err(Error::Config(format!("overlap_threshold {} outside (0, 1]", self.overlap_threshold)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneDecision {
    /// Position in the history passed to `prune`.
    pub index: usize,
    pub turn_id: String,
    pub shared_entities: Vec<String>,
    pub reason: Option<String>,
}

fn matches(part: &BTreeSet<String>, current: &BTreeSet<String>, cfg: &PruneConfig) -> bool {
    let shared = part.intersection(current).count();
    match cfg.match_mode {
        MatchMode::ExactToken => shared >= cfg.min_shared_entities,
        MatchMode::NormalizedOverlap => {
            let denom = part.len().min(current.len());
            denom > 0 && shared as f64 / denom as f64 >= cfg.overlap_threshold
        }
    }
}

/// Splits the history into retained and pruned turns, both in input order.
pub fn prune(
    history: &[(&str, &EntitySet)],
    current: &EntitySet,
    cfg: &PruneConfig,
) -> (Vec<PruneDecision>, Vec<PruneDecision>) {
    let cur = current.all();
    let mut kept = Vec::new();
    let mut pruned = Vec::new();
    for (index, (id, ents)) in history.iter().enumerate() {
        let all = ents.all();
        let shared: Vec<String> = all.intersection(&cur).cloned().collect();
        let keep = match cfg.scope {
            MatchScope::Either => matches(&all, &cur, cfg),
            MatchScope::Both => matches(&ents.context_entities, &cur, cfg) && matches(&ents.question_entities, &cur, cfg),
        };
        let mut d = PruneDecision { index, turn_id: id.to_string(), shared_entities: shared, reason: None };
        if keep {
            kept.push(d);
        } else {
            d.reason = Some(if d.shared_entities.is_empty() {
                "no shared entities".to_string()
            } else {
                format!("{} shared, below threshold", d.shared_entities.len())
            });
            pruned.push(d);
        }
    }
    (kept, pruned)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnRepresentation {
    pub turn_id: String,
    pub vector: Vec<f64>,
}

/// Mean embedding of the question's words followed by the answer's words.
pub fn represent(turn_id: &str, question: &str, answer: &str, emb: &EmbeddingTable) -> Result<TurnRepresentation> {
    let toks: Vec<String> = words(question).into_iter().chain(words(answer)).collect();
    if toks.is_empty() {
        return Err(Error::InvalidInput(format!("turn {turn_id} has no tokens to represent")));
    }
    let mut v = vec![0.0; emb.d];
    for t in &toks {
        for (a, b) in v.iter_mut().zip(emb.row(t)) {
            *a += b;
        }
    }
    let n = toks.len() as f64;
    v.iter_mut().for_each(|a| *a /= n);
    Ok(TurnRepresentation { turn_id: turn_id.to_string(), vector: v })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionScorer {
    pub layer: LinearLayer,
}

impl AttentionScorer {
    pub fn zeros(d: usize) -> Self {
        AttentionScorer { layer: LinearLayer::zeros(d, 1) }
    }

    pub fn logit(&self, rep: &TurnRepresentation) -> Result<f64> {
        self.layer.logit(&rep.vector)
    }

    pub fn grad_check(&self, rep: &[f64], label: f64, epsilon: f64) -> Result<f64> {
        grad_check(&self.layer, rep, label, epsilon)
    }
}

/// A rerank result: positions into the input with their weights, sorted by
/// weight descending and, on equal weight, by position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ranked {
    pub index: usize,
    pub turn_id: String,
    pub weight: f64,
}

pub fn rerank(reps: &[TurnRepresentation], scorer: &AttentionScorer) -> Result<Vec<Ranked>> {
    if reps.is_empty() {
        return Err(Error::InvalidInput("rerank needs at least one turn".into()));
    }
    let logits = reps.iter().map(|r| scorer.logit(r)).collect::<Result<Vec<_>>>()?;
    let weights = softmax(&logits)?;
    let mut order: Vec<usize> = (0..reps.len()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    Ok(order
        .into_iter()
        .map(|i| Ranked { index: i, turn_id: reps[i].turn_id.clone(), weight: weights[i] })
        .collect())
}

/// Conversation order with uniform weights, for when re-ranking is off.
pub fn uniform(reps: &[TurnRepresentation]) -> Vec<Ranked> {
    let w = 1.0 / reps.len().max(1) as f64;
    reps.iter()
        .enumerate()
        .map(|(i, r)| Ranked { index: i, turn_id: r.turn_id.clone(), weight: w })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeptTurn {
    pub turn_id: String,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrunedTurn {
    pub turn_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub kept: Vec<KeptTurn>,
    pub pruned: Vec<PrunedTurn>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Kept,
    Pruned,
}

/// One history turn in the selection trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub turn_id: String,
    pub decision: Decision,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight: Option<f64>,
    pub shared_entities: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    /// Injected from another conversation.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub injected: bool,
}

/// Turn `j` is relevant to turn `i` when its own question mentions one of
/// `i`'s required entities.
pub fn turn_relevance(conv: &Conversation, labels: &DistantLabels, i: usize, j: usize) -> bool {
    let own = extract_entities(&conv.turns[j].question, &conv.passage, None).all();
    !own.is_disjoint(&labels.turns[i].required_entities)
}

pub fn attention_examples(conv: &Conversation, labels: &DistantLabels, emb: &EmbeddingTable) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for i in 1..conv.turns.len() {
        for j in 0..i {
            let t = &conv.turns[j];
            let rep = represent(&t.id, &t.question, t.answer_text(), emb)?;
            out.push(Example::new(rep.vector, turn_relevance(conv, labels, i, j) as u8 as f64));
        }
    }
    Ok(out)
}

pub fn train_attention(
    corpus: &[(&Conversation, &DistantLabels)],
    emb: &EmbeddingTable,
    scorer: &mut AttentionScorer,
    cfg: &TrainConfig,
) -> Result<FitReport> {
    let mut data = Vec::new();
    for (conv, labels) in corpus {
        data.extend(attention_examples(conv, labels, emb)?);
    }
    train_attention_examples(&data, scorer, cfg)
}

pub fn train_attention_examples(data: &[Example], scorer: &mut AttentionScorer, cfg: &TrainConfig) -> Result<FitReport> {
    if data.is_empty() {
        return Err(Error::InvalidInput("no attention labels".into()));
    }
    fit(&mut scorer.layer, data, None, Loss::BinaryCrossEntropy, cfg)
}
