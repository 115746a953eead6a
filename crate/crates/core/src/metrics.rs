//! Token F1, HEQ-Q/HEQ-D, dialog-feature tagging and evaluation reports.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::corpus::{Conversation, DialogFeature};
use crate::entities::augment_conversation;
use crate::error::{Error, Result};
use crate::text::words;

fn multiset(text: &str) -> HashMap<String, usize> {
    let mut m = HashMap::new();
    for w in words(text) {
        *m.entry(w).or_insert(0) += 1;
    }
    m
}

fn f1_single(pred: &HashMap<String, usize>, gold: &HashMap<String, usize>) -> f64 {
    let np: usize = pred.values().sum();
    let ng: usize = gold.values().sum();
    if np == 0 || ng == 0 {
        return if np == ng { 1.0 } else { 0.0 };
    }
    let common: usize = pred.iter().map(|(w, c)| (*c).min(gold.get(w).copied().unwrap_or(0))).sum();
    if common == 0 {
        return 0.0;
    }
    let p = common as f64 / np as f64;
    let r = common as f64 / ng as f64;
    2.0 * p * r / (p + r)
}

/// Max token F1 of `prediction` against any gold reference.
pub fn token_f1<S: AsRef<str>>(prediction: &str, golds: &[S]) -> Result<f64> {
    if golds.is_empty() {
        return Err(Error::InvalidInput("token_f1 needs at least one gold answer".into()));
    }
    let p = multiset(prediction);
    Ok(golds.iter().map(|g| f1_single(&p, &multiset(g.as_ref()))).fold(0.0, f64::max))
}

/// Percent of questions where the model's F1 reaches the human F1.
pub fn heq_q(per_question: &[(f64, f64)]) -> Result<f64> {
    if per_question.is_empty() {
        return Err(Error::InvalidInput("heq_q of empty list".into()));
    }
    let pass = per_question.iter().filter(|(m, h)| m >= h).count();
    Ok(100.0 * pass as f64 / per_question.len() as f64)
}

/// Percent of dialogs in which every question reaches the human F1.
pub fn heq_d(per_dialog: &[Vec<(f64, f64)>]) -> Result<f64> {
    if per_dialog.is_empty() {
        return Err(Error::InvalidInput("heq_d of empty list".into()));
    }
    if per_dialog.iter().any(Vec::is_empty) {
        return Err(Error::InvalidInput("heq_d dialog without questions".into()));
    }
    let pass = per_dialog.iter().filter(|d| d.iter().all(|(m, h)| m >= h)).count();
    Ok(100.0 * pass as f64 / per_dialog.len() as f64)
}

fn contentless(question: &str, own_empty: bool) -> bool {
    let ws = words(question);
    let lower = question.to_lowercase();
    own_empty || ws.is_empty() || lower.starts_with("what else") || (ws.len() <= 3 && ws.first().is_some_and(|w| w == "why"))
}

/// Heuristic dialog features from entity overlap with earlier turns.
pub fn tag_features(conv: &Conversation) -> Vec<DialogFeature> {
    let aug = augment_conversation(conv);
    let mut out = Vec::with_capacity(aug.len());
    for (i, aq) in aug.iter().enumerate() {
        if i == 0 {
            out.push(DialogFeature::FirstQuestion);
            continue;
        }
        if contentless(&aq.text, aq.own.is_empty()) {
            out.push(DialogFeature::Clarification);
            continue;
        }
        let cur = aq.effective_entities.all();
        let shares = |j: usize| !aug[j].effective_entities.all().is_disjoint(&cur);
        let f = if shares(i - 1) {
            DialogFeature::DrillDown
        } else if (0..i - 1).any(shares) {
            DialogFeature::TopicReturn
        } else {
            DialogFeature::TopicShift
        };
        out.push(f);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub question_id: String,
    pub text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HumanF1 {
    /// Every question's human reference scores 1.0 (synthetic data).
    Perfect,
    /// Each gold reference scored against the others, max; 1.0 with a
    /// single reference.
    LeaveOneOut,
}

pub fn human_f1(golds: &[String], source: HumanF1) -> f64 {
    match source {
        HumanF1::Perfect => 1.0,
        HumanF1::LeaveOneOut if golds.len() < 2 => 1.0,
        HumanF1::LeaveOneOut => {
            let mut best: f64 = 0.0;
            for i in 0..golds.len() {
                let others: Vec<&String> = golds.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, g)| g).collect();
                best = best.max(token_f1(&golds[i], &others).expect("others non-empty"));
            }
            best
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metric: String,
    pub f1: f64,
    pub heq_q: f64,
    pub heq_d: f64,
    pub per_feature: BTreeMap<DialogFeature, f64>,
    pub n_questions: usize,
    pub n_dialogs: usize,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str =
        "config,f1,heq_q,heq_d,clarification,topic_shift,topic_return,n_questions,n_dialogs";

    pub fn csv_row(&self, config: &str) -> String {
        let feat = |f: DialogFeature| self.per_feature.get(&f).map(|v| format!("{v:.4}")).unwrap_or_default();
        format!(
            "{config},{:.4},{:.4},{:.4},{},{},{},{},{}",
            self.f1,
            self.heq_q,
            self.heq_d,
            feat(DialogFeature::Clarification),
            feat(DialogFeature::TopicShift),
            feat(DialogFeature::TopicReturn),
            self.n_questions,
            self.n_dialogs
        )
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Per-question scores in corpus order, grouped by dialog.
pub fn score_questions(
    predictions: &[Prediction],
    gold: &[Conversation],
    human: HumanF1,
) -> Result<Vec<Vec<(DialogFeature, f64, f64)>>> {
    let mut by_id: HashMap<&str, &str> = HashMap::with_capacity(predictions.len());
    for p in predictions {
        if by_id.insert(&p.question_id, &p.text).is_some() {
            return Err(Error::InvalidInput(format!("duplicate prediction for {}", p.question_id)));
        }
    }
    let mut used = 0;
    let mut out = Vec::with_capacity(gold.len());
    for conv in gold {
        let mut dialog = Vec::with_capacity(conv.turns.len());
        for t in &conv.turns {
            let pred = by_id
                .get(t.id.as_str())
                .ok_or_else(|| Error::InvalidInput(format!("no prediction for question {}", t.id)))?;
            used += 1;
            let golds: Vec<String> = if t.gold_answers.is_empty() {
                vec![String::new()]
            } else {
                t.gold_answers.iter().map(|a| a.text.clone()).collect()
            };
            dialog.push((t.feature, token_f1(pred, &golds)?, human_f1(&golds, human)));
        }
        out.push(dialog);
    }
    if used != predictions.len() {
        return Err(Error::InvalidInput(format!("{} predictions do not match any gold question", predictions.len() - used)));
    }
    Ok(out)
}

pub fn evaluate(predictions: &[Prediction], gold: &[Conversation], human: HumanF1) -> Result<EvalReport> {
    let scored = score_questions(predictions, gold, human)?;
    report_from_scores(&scored)
}

pub fn report_from_scores(scored: &[Vec<(DialogFeature, f64, f64)>]) -> Result<EvalReport> {
    let flat: Vec<&(DialogFeature, f64, f64)> = scored.iter().flatten().collect();
    if flat.is_empty() {
        return Err(Error::InvalidInput("nothing to evaluate".into()));
    }
    let pairs: Vec<(f64, f64)> = flat.iter().map(|(_, m, h)| (*m, *h)).collect();
    let dialogs: Vec<Vec<(f64, f64)>> =
        scored.iter().filter(|d| !d.is_empty()).map(|d| d.iter().map(|(_, m, h)| (*m, *h)).collect()).collect();
    let mut sums: BTreeMap<DialogFeature, (f64, usize)> = BTreeMap::new();
    for (f, m, _) in &flat {
        let e = sums.entry(*f).or_insert((0.0, 0));
        e.0 += m;
        e.1 += 1;
    }
    Ok(EvalReport {
        metric: "f1".into(),
        f1: 100.0 * pairs.iter().map(|p| p.0).sum::<f64>() / pairs.len() as f64,
        heq_q: heq_q(&pairs)?,
        heq_d: heq_d(&dialogs)?,
        per_feature: sums.into_iter().map(|(f, (s, n))| (f, 100.0 * s / n as f64)).collect(),
        n_questions: pairs.len(),
        n_dialogs: dialogs.len(),
    })
}
