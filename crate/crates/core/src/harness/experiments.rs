//! Ablations, negative-sample injection, pruning degradation and the
//! records they produce.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    evaluate_corpus, evaluate_plain, history_token_bits, label_corpus, relevant_words, run_turn, train_models,
    EvalRun, Models, PipelineConfig, RunOptions, TrainSummary, TurnTrace, Variant,
};
use crate::corpus::{to_quac_json, Conversation, DialogFeature, InjectedTurn};
use crate::entities::{augment_conversation, DistantLabels};
use crate::error::{Error, Result};
use crate::metrics::EvalReport;
use crate::rng;

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn corpus_fingerprint(corpus: &[Conversation]) -> String {
    hex(&Sha256::digest(to_quac_json(corpus).as_bytes()))
}

pub fn config_hash(cfg: &impl Serialize) -> String {
    let json = serde_json::to_string(cfg).expect("config serializes");
    hex(&Sha256::digest(json.as_bytes()))[..16].to_string()
}

/// Seeded shuffle, then the first `round(n * (1 - eval_fraction))`
/// conversations train and the rest evaluate.
pub fn split_corpus(corpus: &[Conversation], seed: u64, eval_fraction: f64) -> Result<(Vec<Conversation>, Vec<Conversation>)> {
    if !(0.0..1.0).contains(&eval_fraction) {
        return Err(Error::Config(format!("eval_fraction {eval_fraction} outside [0, 1)")));
    }
    let mut idx: Vec<usize> = (0..corpus.len()).collect();
    idx.shuffle(&mut rng::stream(seed, "split", 0));
    let n_train = (corpus.len() as f64 * (1.0 - eval_fraction)).round() as usize;
    let train = idx[..n_train].iter().map(|&i| corpus[i].clone()).collect();
    let eval = idx[n_train..].iter().map(|&i| corpus[i].clone()).collect();
    Ok((train, eval))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub name: String,
    pub config: PipelineConfig,
    pub report: EvalReport,
    pub traces: Vec<TurnTrace>,
    pub wall_clock_ms: u128,
    pub corpus_fingerprint: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub notes: BTreeMap<String, String>,
}

impl ExperimentRecord {
    fn new(name: String, config: PipelineConfig, run: EvalRun, started: Instant, corpus: &[Conversation]) -> Self {
        ExperimentRecord {
            name,
            config,
            report: run.report,
            traces: run.traces,
            wall_clock_ms: started.elapsed().as_millis(),
            corpus_fingerprint: corpus_fingerprint(corpus),
            notes: BTreeMap::new(),
        }
    }

    /// Record without the wall-clock field, for determinism checks.
    pub fn without_timing(&self) -> ExperimentRecord {
        ExperimentRecord { wall_clock_ms: 0, ..self.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationOutput {
    pub records: Vec<ExperimentRecord>,
    pub table: String,
    pub train_summary: TrainSummary,
}

pub fn parse_variants<S: AsRef<str>>(names: &[S]) -> Result<Vec<Variant>> {
    names.iter().map(|n| n.as_ref().parse()).collect()
}

pub fn comparison_table(records: &[ExperimentRecord]) -> String {
    let mut out = String::from("| run | F1 | HEQ-Q | HEQ-D | clarification F1 | topic_shift F1 | topic_return F1 | drill_down F1 |\n");
    out.push_str("|---|---|---|---|---|---|---|---|\n");
    for r in records {
        let f = |k: DialogFeature| r.report.per_feature.get(&k).map(|v| format!("{v:.1}")).unwrap_or_else(|| "-".into());
        out.push_str(&format!(
            "| {} | {:.1} | {:.1} | {:.1} | {} | {} | {} | {} |\n",
            r.name,
            r.report.f1,
            r.report.heq_q,
            r.report.heq_d,
            f(DialogFeature::Clarification),
            f(DialogFeature::TopicShift),
            f(DialogFeature::TopicReturn),
            f(DialogFeature::DrillDown)
        ));
    }
    out
}

/// Trains once on the train split and evaluates each variant on the eval
/// split with the shared models.
pub fn run_ablation(
    train: &[Conversation],
    eval: &[Conversation],
    variants: &[Variant],
    base: &PipelineConfig,
) -> Result<AblationOutput> {
    if variants.is_empty() {
        return Err(Error::Config("no variants requested".into()));
    }
    let (models, summary) = train_models(train, base)?;
    let mut records = Vec::with_capacity(variants.len());
    for &v in variants {
        let started = Instant::now();
        let cfg = base.with_variant(v);
        let run = evaluate_plain(eval, &models, &cfg)?;
        records.push(ExperimentRecord::new(v.to_string(), cfg, run, started, eval));
    }
    let table = comparison_table(&records);
    Ok(AblationOutput { records, table, train_summary: summary })
}

/// Adds `k` same-topic turns from other passages to every question's
/// history. Sampling is nested: the turns chosen for `k` are a prefix of
/// those chosen for any larger `k` under the same seed.
pub fn inject_negatives(eval: &[Conversation], k: usize, pool: &[Conversation], seed: u64) -> Result<Vec<Conversation>> {
    if k == 0 {
        return Ok(eval.to_vec());
    }
    let mut by_topic: BTreeMap<&str, Vec<(&Conversation, usize)>> = BTreeMap::new();
    for c in pool {
        for t in 0..c.turns.len() {
            by_topic.entry(c.topic_key()).or_default().push((c, t));
        }
    }
    let mut out = Vec::with_capacity(eval.len());
    for (ci, conv) in eval.iter().enumerate() {
        let cands: Vec<&(&Conversation, usize)> = by_topic
            .get(conv.topic_key())
            .map(|v| v.iter().filter(|(c, _)| c.passage.id != conv.passage.id && c.passage.text != conv.passage.text).collect())
            .unwrap_or_default();
        let mut conv = conv.clone();
        for i in 0..conv.turns.len() {
            if cands.len() < k {
                return Err(Error::InvalidInput(format!(
                    "pool has {} same-topic turns for {} ({}), need {k}",
                    cands.len(),
                    conv.id,
                    conv.topic_key()
                )));
            }
            let stream_id = (ci as u64) << 16 | i as u64;
            let mut order: Vec<usize> = (0..cands.len()).collect();
            order.shuffle(&mut rng::stream(seed, "negatives", stream_id));
            let mut pos_rng = rng::stream(seed, "negative-positions", stream_id);
            conv.turns[i].injected_history = order[..k]
                .iter()
                .map(|&o| {
                    let (src, t) = cands[o];
                    InjectedTurn {
                        position: pos_rng.gen_range(0..=i),
                        source: src.id.clone(),
                        id: format!("{}#neg", src.turns[*t].id),
                        question: src.turns[*t].question.clone(),
                        answer: src.turns[*t].answer_text().to_string(),
                    }
                })
                .collect();
        }
        out.push(conv);
    }
    Ok(out)
}

/// Flips a seeded subset of decisions so agreement with `oracle` is
/// `round` of the target percentage.
pub fn degrade_pruning(oracle: &[bool], target_accuracy: f64, seed: u64) -> Result<Vec<bool>> {
    if !(target_accuracy > 0.0 && target_accuracy <= 100.0) {
        return Err(Error::InvalidInput(format!("target accuracy {target_accuracy} outside (0, 100]")));
    }
    let n_flip = ((1.0 - target_accuracy / 100.0) * oracle.len() as f64).round() as usize;
    let mut idx: Vec<usize> = (0..oracle.len()).collect();
    idx.shuffle(&mut rng::stream(seed, "degrade", 0));
    let mut out = oracle.to_vec();
    for &i in &idx[..n_flip] {
        out[i] = !out[i];
    }
    Ok(out)
}

pub fn agreement(a: &[bool], b: &[bool]) -> f64 {
    let same = a.iter().zip(b).filter(|(x, y)| x == y).count();
    100.0 * same as f64 / a.len().max(1) as f64
}

/// Oracle keep/prune decision for every (conversation, turn, prior turn):
/// keep iff the prior turn's effective entities meet the turn's required
/// entities.
pub fn oracle_decisions(corpus: &[Conversation], labels: &[DistantLabels]) -> Vec<Vec<Vec<bool>>> {
    corpus
        .iter()
        .zip(labels)
        .map(|(conv, lab)| {
            let aug = augment_conversation(conv);
            (0..conv.turns.len())
                .map(|i| {
                    (0..i)
                        .map(|j| !aug[j].effective_entities.all().is_disjoint(&lab.turns[i].required_entities))
                        .collect()
                })
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradePoint {
    pub target: f64,
    pub measured_agreement: f64,
    pub answer_f1: f64,
    pub term_token_f1: f64,
}

/// Evaluates the full pipeline under pruning decisions degraded to each
/// target agreement. Term-classification token F1 counts every own
/// history token against the distant labels; tokens of pruned turns are
/// predicted 0.
pub fn degrade_experiment(
    eval: &[Conversation],
    models: &Models,
    cfg: &PipelineConfig,
    targets: &[f64],
    seed: u64,
) -> Result<Vec<DegradePoint>> {
    let labels = label_corpus(eval, &cfg.reader)?;
    let oracle = oracle_decisions(eval, &labels);
    let flat: Vec<bool> = oracle.iter().flatten().flatten().copied().collect();
    let full = cfg.with_variant(Variant::Full);
    let mut points = Vec::new();
    for &t in targets {
        let degraded = degrade_pruning(&flat, t, seed)?;
        let mut cursor = 0;
        let mut forced: Vec<Vec<Vec<bool>>> = Vec::with_capacity(oracle.len());
        for conv in &oracle {
            let mut c = Vec::with_capacity(conv.len());
            for turn in conv {
                c.push(degraded[cursor..cursor + turn.len()].to_vec());
                cursor += turn.len();
            }
            forced.push(c);
        }
        let index: BTreeMap<&str, usize> = eval.iter().enumerate().map(|(i, c)| (c.id.as_str(), i)).collect();
        let run = evaluate_corpus(eval, models, &full, |conv| {
            forced[index[conv.id.as_str()]]
                .iter()
                .map(|d| RunOptions { use_injected: false, forced_decisions: Some(d.clone()) })
                .collect()
        })?;
        let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
        for (ci, conv) in eval.iter().enumerate() {
            let aug = augment_conversation(conv);
            for i in 0..conv.turns.len() {
                let rel = relevant_words(&aug[i], &labels[ci].turns[i]);
                let opts = RunOptions { use_injected: false, forced_decisions: Some(forced[ci][i].clone()) };
                let out = run_turn(conv, &aug, i, models, &full, &opts)?;
                let bits = history_token_bits(&out);
                for j in 0..i {
                    let id = &conv.turns[j].id;
                    let kept: Vec<u8> = bits.iter().filter(|(t, _, _)| t == id).map(|(_, _, b)| *b).collect();
                    for (k, w) in crate::text::content_words(&conv.turns[j].question).into_iter().enumerate() {
                        let gold = rel.contains(&w);
                        let pred = kept.get(k).copied().unwrap_or(0) == 1;
                        match (gold, pred) {
                            (true, true) => tp += 1,
                            (false, true) => fp += 1,
                            (true, false) => fn_ += 1,
                            _ => {}
                        }
                    }
                }
            }
        }
        let denom = 2 * tp + fp + fn_;
        points.push(DegradePoint {
            target: t,
            measured_agreement: agreement(&flat, &degraded),
            answer_f1: run.report.f1,
            term_token_f1: if denom == 0 { 1.0 } else { 2.0 * tp as f64 / denom as f64 },
        });
    }
    Ok(points)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NegativePoint {
    pub k: usize,
    pub report: EvalReport,
}

/// Full pipeline with each `k` negatives joined to the retained history.
pub fn negative_sweep(
    eval: &[Conversation],
    pool: &[Conversation],
    models: &Models,
    cfg: &PipelineConfig,
    ks: &[usize],
    seed: u64,
) -> Result<Vec<NegativePoint>> {
    let full = cfg.with_variant(Variant::Full);
    let mut out = Vec::with_capacity(ks.len());
    for &k in ks {
        let perturbed = inject_negatives(eval, k, pool, seed)?;
        let run = evaluate_corpus(&perturbed, models, &full, |conv| {
            vec![RunOptions { use_injected: true, forced_decisions: None }; conv.turns.len()]
        })?;
        out.push(NegativePoint { k, report: run.report });
    }
    Ok(out)
}

/// Writes `record.json` and `report.csv` under `<root>/<config hash>/`.
pub fn write_records(root: &Path, cfg: &PipelineConfig, records: &[ExperimentRecord]) -> Result<PathBuf> {
    let dir = root.join(config_hash(cfg));
    let io = |p: &Path, e| Error::Io { path: p.display().to_string(), source: e };
    std::fs::create_dir_all(&dir).map_err(|e| io(&dir, e))?;
    let json = serde_json::to_string_pretty(records)?;
    let rec = dir.join("records.json");
    std::fs::write(&rec, json).map_err(|e| io(&rec, e))?;
    let mut csv = String::from(EvalReport::CSV_HEADER);
    csv.push('\n');
    for r in records {
        csv.push_str(&r.report.csv_row(&r.name));
        csv.push('\n');
    }
    let path = dir.join("report.csv");
    std::fs::write(&path, csv).map_err(|e| io(&path, e))?;
    Ok(dir)
}
