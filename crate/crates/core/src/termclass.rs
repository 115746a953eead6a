//! Binary term classification: a linear layer and a sigmoid score every
//! candidate token; tokens at or above the threshold are highlighted.

use std::collections::{BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nncore::{fit, grad_check, sigmoid, EmbeddingTable, Example, FitReport, LinearLayer, Loss, TrainConfig};

/// Features appended after the embedding.
pub const EXTRA_FEATURES: usize = 7;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledToken {
    pub token: String,
    pub score: f64,
    pub bit: u8,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TokenLabeling {
    pub tokens: Vec<LabeledToken>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnLabeling {
    pub turn_id: String,
    pub tokens: Vec<LabeledToken>,
}

/// Highlights for one question, grouped by where the tokens came from.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Highlights {
    pub question: Vec<LabeledToken>,
    pub inherited: Vec<LabeledToken>,
    pub history: Vec<TurnLabeling>,
}

impl Highlights {
    pub fn all_tokens(&self) -> impl Iterator<Item = &LabeledToken> {
        self.question.iter().chain(&self.inherited).chain(self.history.iter().flat_map(|h| &h.tokens))
    }

    pub fn highlighted(&self) -> usize {
        self.all_tokens().filter(|t| t.bit == 1).count()
    }
}

/// Everything token features depend on besides the token itself.
pub struct FeatureContext<'a> {
    pub embeddings: &'a EmbeddingTable,
    /// Words of the current question's effective entities.
    pub effective_words: &'a BTreeSet<String>,
    pub passage_words: &'a HashSet<String>,
    /// Words capitalized mid-sentence somewhere in the passage.
    pub proper_words: &'a HashSet<String>,
    /// Content words of the current question itself.
    pub own_words: &'a BTreeSet<String>,
    /// The current question has no content words of its own.
    pub contentless: bool,
}

/// Embedding row, then: in effective entities, in passage, turn recency,
/// normalized turn attention, in the current question, proper noun in the
/// passage, current question contentless.
pub fn token_features(token: &str, recency: f64, attention: f64, ctx: &FeatureContext<'_>) -> Vec<f64> {
    let mut v = Vec::with_capacity(ctx.embeddings.d + EXTRA_FEATURES);
    v.extend_from_slice(ctx.embeddings.row(token));
    let ind = |b: bool| if b { 1.0 } else { 0.0 };
    v.push(ind(ctx.effective_words.contains(token)));
    v.push(ind(ctx.passage_words.contains(token)));
    v.push(recency);
    v.push(attention);
    v.push(ind(ctx.own_words.contains(token)));
    v.push(ind(ctx.proper_words.contains(token)));
    v.push(ind(ctx.contentless));
    v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermClassifier {
    pub layer: LinearLayer,
    pub dropout_rate: f64,
}

impl TermClassifier {
    pub fn zeros(d_in: usize, dropout_rate: f64) -> Self {
        TermClassifier { layer: LinearLayer::zeros(d_in, 1), dropout_rate }
    }

    pub fn score(&self, features: &[f64]) -> Result<f64> {
        Ok(sigmoid(self.layer.logit(features)?))
    }

    pub fn grad_check(&self, features: &[f64], label: f64, epsilon: f64) -> Result<f64> {
        grad_check(&self.layer, features, label, epsilon)
    }
}

/// Scores tokens in inference mode; `bit = 1` iff `score >= threshold`.
pub fn classify_terms(tokens: &[(String, Vec<f64>)], model: &TermClassifier, threshold: f64) -> Result<TokenLabeling> {
    let mut out = Vec::with_capacity(tokens.len());
    for (tok, feats) in tokens {
        if feats.len() != model.layer.d_in {
            return Err(Error::Dimension { expected: model.layer.d_in, got: feats.len() });
        }
        let score = model.score(feats)?;
        out.push(LabeledToken { token: tok.clone(), score, bit: (score >= threshold) as u8 });
    }
    Ok(TokenLabeling { tokens: out })
}

pub fn train_termclass(data: &[Example], d_in: usize, cfg: &TrainConfig) -> Result<(TermClassifier, FitReport)> {
    let mut model = TermClassifier::zeros(d_in, cfg.dropout_rate);
    let report = train_termclass_from(&mut model, data, cfg)?;
    Ok((model, report))
}

pub fn train_termclass_from(model: &mut TermClassifier, data: &[Example], cfg: &TrainConfig) -> Result<FitReport> {
    if data.is_empty() {
        return Err(Error::InvalidInput("no labeled tokens".into()));
    }
    model.dropout_rate = cfg.dropout_rate;
    fit(&mut model.layer, data, None, Loss::BinaryCrossEntropy, cfg)
}
