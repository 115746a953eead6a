//! End-to-end wiring: model training, the per-turn pipeline with its
//! selection trace, and corpus evaluation.

mod experiments;

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{Conversation, IdfTable};
use crate::entities::{augment_conversation, distant_label, extract_entities, AugmentedQuestion, DistantLabels, EntitySet};
use crate::error::{Error, Result};
use crate::metrics::{self, EvalReport, HumanF1, Prediction};
use crate::nncore::{EmbeddingTable, Example, FitReport, TrainConfig};
use crate::reader::{
    compose_pipeline, predict_span, HistoryEntry, LexicalReader, ReaderConfig, ReaderInput, RewriteContext,
    SpanPrediction, SpanPredictionJson, TemplateRewriter, WindowScoring,
};
use crate::selection::{
    prune, represent, rerank, train_attention, uniform, AttentionScorer, Decision, PruneConfig, TraceEntry,
};
use crate::termclass::{
    classify_terms, token_features, train_termclass, FeatureContext, Highlights, LabeledToken, TermClassifier,
    TurnLabeling, EXTRA_FEATURES,
};
use crate::text::{content_words, words};

pub use experiments::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoPrune,
    NoRerank,
    NoTermclass,
    PipelineQr,
}

impl Variant {
    pub const ALL: [Variant; 5] =
        [Variant::Full, Variant::NoPrune, Variant::NoRerank, Variant::NoTermclass, Variant::PipelineQr];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoPrune => "no_prune",
            Variant::NoRerank => "no_rerank",
            Variant::NoTermclass => "no_termclass",
            Variant::PipelineQr => "pipeline_qr",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL.into_iter().find(|v| v.as_str() == s).ok_or_else(|| {
            let valid: Vec<&str> = Variant::ALL.iter().map(|v| v.as_str()).collect();
            Error::Config(format!("unknown variant {s:?}; valid variants: {}", valid.join(", ")))
        })
    }
}

/// Learning rate used by the pipeline's heads. The heads are trained from
/// zero over fixed small random embeddings, which the optimizer default
/// of 3e-5 does not move far enough in ten epochs.
pub const DESK_LEARNING_RATE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub variant: Variant,
    pub prune: PruneConfig,
    pub reader: ReaderConfig,
    pub train: TrainConfig,
    pub seed: u64,
    pub embedding_dim: usize,
    pub threshold: f64,
    pub human_f1: HumanF1,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            variant: Variant::Full,
            prune: PruneConfig::default(),
            reader: ReaderConfig::default(),
            train: TrainConfig { learning_rate: DESK_LEARNING_RATE, ..TrainConfig::default() },
            seed: 0,
            embedding_dim: 64,
            threshold: crate::termclass::DEFAULT_THRESHOLD,
            human_f1: HumanF1::Perfect,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.prune.validate()?;
        self.reader.validate()?;
        self.train.validate()?;
        if self.embedding_dim == 0 {
            return Err(Error::Config("embedding_dim must be positive".into()));
        }
        Ok(())
    }

    pub fn with_variant(&self, variant: Variant) -> Self {
        PipelineConfig { variant, ..self.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Models {
    pub embeddings: EmbeddingTable,
    pub scorer: AttentionScorer,
    pub termclass: TermClassifier,
    pub idf: IdfTable,
}

impl Models {
    /// Zero-initialized heads over a vocabulary drawn from `corpus`.
    pub fn untrained(corpus: &[Conversation], cfg: &PipelineConfig) -> Self {
        let embeddings = EmbeddingTable::new(vocabulary(corpus), cfg.embedding_dim, cfg.seed);
        Models {
            scorer: AttentionScorer::zeros(cfg.embedding_dim),
            termclass: TermClassifier::zeros(cfg.embedding_dim + EXTRA_FEATURES, cfg.train.dropout_rate),
            idf: IdfTable::from_conversations(corpus),
            embeddings,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("models serialize")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: Models = serde_json::from_str(s)?;
        m.embeddings.validate()?;
        m.scorer.layer.validate()?;
        m.termclass.layer.validate()?;
        if m.scorer.layer.d_in != m.embeddings.d || m.termclass.layer.d_in != m.embeddings.d + EXTRA_FEATURES {
            return Err(Error::validation("models", "head dimensions do not match embeddings"));
        }
        Ok(m)
    }
}

fn vocabulary(corpus: &[Conversation]) -> BTreeSet<String> {
    let mut v = BTreeSet::new();
    for c in corpus {
        v.extend(c.passage.word_set());
        for t in &c.turns {
            v.extend(words(&t.question));
        }
    }
    v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub attention: FitReport,
    pub termclass: FitReport,
    pub n_attention_examples: usize,
    pub n_term_examples: usize,
    pub unresolvable_turns: usize,
}

pub fn label_corpus(corpus: &[Conversation], reader: &ReaderConfig) -> Result<Vec<DistantLabels>> {
    corpus.iter().map(|c| distant_label(c, &LexicalReader, reader)).collect()
}

/// Distant labels, then the attention scorer, then the term classifier on
/// tokens produced by running the full pipeline's selection with the
/// trained scorer.
pub fn train_models(train: &[Conversation], cfg: &PipelineConfig) -> Result<(Models, TrainSummary)> {
    cfg.validate()?;
    let mut models = Models::untrained(train, cfg);
    let labels = label_corpus(train, &cfg.reader).map_err(|e| e.at_stage("distant_label"))?;
    let unresolvable_turns = labels.iter().flat_map(|l| &l.turns).filter(|t| t.unresolvable).count();
    let pairs: Vec<(&Conversation, &DistantLabels)> = train.iter().zip(&labels).collect();
    let attn_cfg = TrainConfig { dropout_rate: 0.0, ..cfg.train.clone() };
    let n_attention_examples = pairs.iter().map(|(c, _)| c.turns.len() * (c.turns.len() - 1) / 2).sum();
    let attention = train_attention(&pairs, &models.embeddings, &mut models.scorer, &attn_cfg)
        .map_err(|e| e.at_stage("train_attention"))?;
    let unpruned = cfg.with_variant(Variant::NoPrune);
    let mut examples = Vec::new();
    for (conv, lab) in &pairs {
        examples.extend(term_examples(conv, lab, &models, &unpruned)?);
    }
    let (termclass, termclass_report) =
        train_termclass(&examples, models.termclass.layer.d_in, &cfg.train).map_err(|e| e.at_stage("train_termclass"))?;
    models.termclass = termclass;
    let summary = TrainSummary {
        attention,
        termclass: termclass_report,
        n_attention_examples,
        n_term_examples: examples.len(),
        unresolvable_turns,
    };
    Ok((models, summary))
}

/// Words that should be highlighted for turn `i`: its required entities
/// and its own question entities.
pub fn relevant_words(aug: &AugmentedQuestion, label: &crate::entities::TurnLabel) -> HashSet<String> {
    label
        .required_entities
        .iter()
        .chain(&aug.own.all())
        .flat_map(|e| e.split(' ').map(str::to_string).collect::<Vec<_>>())
        .collect()
}

fn term_examples(conv: &Conversation, labels: &DistantLabels, models: &Models, cfg: &PipelineConfig) -> Result<Vec<Example>> {
    let aug = augment_conversation(conv);
    let mut out = Vec::new();
    for i in 0..conv.turns.len() {
        let sel = select(conv, &aug, i, models, cfg, &RunOptions::default())?;
        let units = term_units(conv, &aug, i, &sel);
        let rel = relevant_words(&aug[i], &labels.turns[i]);
        let feats = PassageFeatures::new(conv, &aug[i]);
        for u in &units {
            let x = token_features(&u.token, u.recency, u.attention, &feats.context(&models.embeddings));
            out.push(Example::new(x, rel.contains(&u.token) as u8 as f64));
        }
    }
    Ok(out)
}

/// Run-time switches beyond the variant.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Append each turn's injected negatives after pruning.
    pub use_injected: bool,
    /// Keep/prune decision for each prior turn, overriding the pruner.
    pub forced_decisions: Option<Vec<bool>>,
}

#[derive(Debug, Clone)]
struct Candidate {
    turn_id: String,
    question: String,
    answer: String,
    entities: EntitySet,
    /// Conversation-order position; injected turns sit between own turns.
    order: f64,
    injected: bool,
}

struct Selection {
    /// Retained candidates in rank order, with weight.
    ranked: Vec<(Candidate, f64)>,
    trace: Vec<TraceEntry>,
}

fn history_candidates(conv: &Conversation, aug: &[AugmentedQuestion], i: usize) -> Vec<Candidate> {
    (0..i)
        .map(|j| Candidate {
            turn_id: conv.turns[j].id.clone(),
            question: conv.turns[j].question.clone(),
            answer: conv.turns[j].answer_text().to_string(),
            entities: aug[j].effective_entities.clone(),
            order: j as f64,
            injected: false,
        })
        .collect()
}

fn injected_candidates(conv: &Conversation, i: usize) -> Vec<Candidate> {
    let n = conv.turns[i].injected_history.len().max(1) as f64;
    conv.turns[i]
        .injected_history
        .iter()
        .enumerate()
        .map(|(k, inj)| Candidate {
            turn_id: inj.id.clone(),
            question: inj.question.clone(),
            answer: inj.answer.clone(),
            entities: extract_entities(&inj.question, &conv.passage, None),
            order: inj.position as f64 - 0.5 + k as f64 / (2.0 * n),
            injected: true,
        })
        .collect()
}

fn select(
    conv: &Conversation,
    aug: &[AugmentedQuestion],
    i: usize,
    models: &Models,
    cfg: &PipelineConfig,
    opts: &RunOptions,
) -> Result<Selection> {
    let own = history_candidates(conv, aug, i);
    let current = &aug[i].effective_entities;
    let mut trace = Vec::new();
    let mut kept: Vec<Candidate> = Vec::new();
    let mut pruned_entries = Vec::new();
    let keep_flags: Vec<(bool, Vec<String>, Option<String>)> = match (&opts.forced_decisions, cfg.variant) {
        (_, Variant::NoPrune) => own.iter().map(|c| (true, c.entities.shared_with(current).into_iter().collect(), None)).collect(),
        (Some(forced), _) => {
            if forced.len() != own.len() {
                return Err(Error::InvalidInput(format!("{} forced decisions for {} turns", forced.len(), own.len())));
            }
            own.iter()
                .zip(forced)
                .map(|(c, &k)| {
                    let shared: Vec<String> = c.entities.shared_with(current).into_iter().collect();
                    (k, shared, (!k).then(|| "forced".to_string()))
                })
                .collect()
        }
        (None, _) => {
            let hist: Vec<(&str, &EntitySet)> = own.iter().map(|c| (c.turn_id.as_str(), &c.entities)).collect();
            let (k, p) = prune(&hist, current, &cfg.prune);
            let mut flags = vec![(false, Vec::new(), None); own.len()];
            for d in k {
                flags[d.index] = (true, d.shared_entities, None);
            }
            for d in p {
                flags[d.index] = (false, d.shared_entities, d.reason);
            }
            flags
        }
    };
    for (c, (keep, shared, reason)) in own.into_iter().zip(keep_flags) {
        if keep {
            kept.push(c);
        } else {
            pruned_entries.push(TraceEntry {
                turn_id: c.turn_id.clone(),
                decision: Decision::Pruned,
                weight: None,
                shared_entities: shared,
                rank: None,
                reason,
                injected: false,
            });
        }
    }
    if opts.use_injected {
        kept.extend(injected_candidates(conv, i));
        kept.sort_by(|a, b| a.order.total_cmp(&b.order));
    }
    let ranked: Vec<(Candidate, f64)> = if kept.is_empty() {
        Vec::new()
    } else {
        let reps = kept
            .iter()
            .map(|c| represent(&c.turn_id, &c.question, &c.answer, &models.embeddings))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| e.at_stage("represent"))?;
        let order = if cfg.variant == Variant::NoRerank {
            uniform(&reps)
        } else {
            rerank(&reps, &models.scorer).map_err(|e| e.at_stage("rerank"))?
        };
        order.into_iter().map(|r| (kept[r.index].clone(), r.weight)).collect()
    };
    for (rank, (c, w)) in ranked.iter().enumerate() {
        trace.push(TraceEntry {
            turn_id: c.turn_id.clone(),
            decision: Decision::Kept,
            weight: Some(*w),
            shared_entities: c.entities.shared_with(current).into_iter().collect(),
            rank: Some(rank + 1),
            reason: None,
            injected: c.injected,
        });
    }
    trace.extend(pruned_entries);
    Ok(Selection { ranked, trace })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum UnitGroup {
    Question,
    Inherited,
    History(usize),
}

#[derive(Debug, Clone)]
struct Unit {
    group: UnitGroup,
    token: String,
    recency: f64,
    attention: f64,
}

fn term_units(conv: &Conversation, aug: &[AugmentedQuestion], i: usize, sel: &Selection) -> Vec<Unit> {
    let mut units = Vec::new();
    for w in content_words(&conv.turns[i].question) {
        units.push(Unit { group: UnitGroup::Question, token: w, recency: 1.0, attention: 1.0 });
    }
    for w in aug[i].inherited_words() {
        units.push(Unit { group: UnitGroup::Inherited, token: w, recency: 1.0, attention: 1.0 });
    }
    let max_w = sel.ranked.iter().map(|(_, w)| *w).fold(0.0, f64::max);
    for (k, (c, w)) in sel.ranked.iter().enumerate() {
        let recency = ((c.order + 1.0) / i.max(1) as f64).clamp(0.0, 1.0);
        let attention = if max_w > 0.0 { w / max_w } else { 0.0 };
        for t in content_words(&c.question) {
            units.push(Unit { group: UnitGroup::History(k), token: t, recency, attention });
        }
    }
    units
}

/// Passage-level lookups shared by all tokens of one question.
struct PassageFeatures {
    effective: BTreeSet<String>,
    passage: HashSet<String>,
    proper: HashSet<String>,
    own: BTreeSet<String>,
    contentless: bool,
}

impl PassageFeatures {
    fn new(conv: &Conversation, aq: &AugmentedQuestion) -> Self {
        let own: BTreeSet<String> = content_words(&aq.text).into_iter().collect();
        PassageFeatures {
            effective: aq.effective_entities.words(),
            passage: conv.passage.word_set(),
            proper: conv.passage.proper_words(),
            contentless: own.is_empty(),
            own,
        }
    }

    fn context<'a>(&'a self, emb: &'a EmbeddingTable) -> FeatureContext<'a> {
        FeatureContext {
            embeddings: emb,
            effective_words: &self.effective,
            passage_words: &self.passage,
            proper_words: &self.proper,
            own_words: &self.own,
            contentless: self.contentless,
        }
    }
}

fn highlight(
    conv: &Conversation,
    aug: &[AugmentedQuestion],
    i: usize,
    sel: &Selection,
    models: &Models,
    cfg: &PipelineConfig,
) -> Result<Highlights> {
    let units = term_units(conv, aug, i, sel);
    let feats = PassageFeatures::new(conv, &aug[i]);
    let ctx = feats.context(&models.embeddings);
    let rows: Vec<(String, Vec<f64>)> =
        units.iter().map(|u| (u.token.clone(), token_features(&u.token, u.recency, u.attention, &ctx))).collect();
    let labeled = classify_terms(&rows, &models.termclass, cfg.threshold)?;
    let mut h = Highlights {
        history: sel.ranked.iter().map(|(c, _)| TurnLabeling { turn_id: c.turn_id.clone(), tokens: Vec::new() }).collect(),
        ..Highlights::default()
    };
    for (u, t) in units.iter().zip(labeled.tokens) {
        match u.group {
            UnitGroup::Question => h.question.push(t),
            UnitGroup::Inherited => h.inherited.push(t),
            UnitGroup::History(k) => h.history[k].tokens.push(t),
        }
    }
    Ok(h)
}

/// Everything emitted for one answered question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnTrace {
    pub turn_id: String,
    pub question: String,
    pub variant: Variant,
    pub inherited_entities: Vec<String>,
    pub effective_entities: Vec<String>,
    pub history: Vec<TraceEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_labels: Option<Highlights>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rewrite: Option<String>,
    pub answer: Option<SpanPredictionJson>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TurnOutput {
    /// `None` when the query bag was empty.
    pub prediction: Option<SpanPrediction>,
    pub trace: TurnTrace,
}

impl TurnOutput {
    pub fn answer_text(&self) -> &str {
        self.prediction.as_ref().map(|p| p.span.text.as_str()).unwrap_or("")
    }
}

fn absorb_empty(r: Result<SpanPrediction>) -> Result<Option<SpanPrediction>> {
    match r {
        Ok(p) => Ok(Some(p)),
        Err(Error::EmptyQuery) => Ok(None),
        Err(e) => Err(e.at_stage("predict_span")),
    }
}

/// Runs one turn through the configured variant.
pub fn run_pipeline(conv: &Conversation, turn: usize, models: &Models, cfg: &PipelineConfig) -> Result<TurnOutput> {
    let aug = augment_conversation(conv);
    run_turn(conv, &aug, turn, models, cfg, &RunOptions::default())
}

pub fn run_turn(
    conv: &Conversation,
    aug: &[AugmentedQuestion],
    i: usize,
    models: &Models,
    cfg: &PipelineConfig,
    opts: &RunOptions,
) -> Result<TurnOutput> {
    if i >= conv.turns.len() {
        return Err(Error::InvalidInput(format!("turn {i} out of range for {}", conv.id)));
    }
    let aq = &aug[i];
    let idf = (cfg.reader.window_scoring == WindowScoring::IdfWeighted).then_some(&models.idf);
    let mut trace = TurnTrace {
        turn_id: conv.turns[i].id.clone(),
        question: conv.turns[i].question.clone(),
        variant: cfg.variant,
        inherited_entities: aq.inherited_entities.iter().cloned().collect(),
        effective_entities: aq.effective_entities.all().into_iter().collect(),
        history: Vec::new(),
        token_labels: None,
        rewrite: None,
        answer: None,
    };
    let prediction = if cfg.variant == Variant::PipelineQr {
        let ctx: Vec<RewriteContext> = (0..i)
            .map(|j| RewriteContext { question: conv.turns[j].question.clone(), entities: aug[j].effective_entities.clone() })
            .collect();
        let result = compose_pipeline(
            Some(&TemplateRewriter),
            &LexicalReader,
            &conv.turns[i].question,
            &ctx,
            &conv.passage,
            &cfg.reader,
            idf,
        );
        match result {
            Ok((rw, p)) => {
                trace.rewrite = Some(rw.text);
                Some(p)
            }
            Err(Error::EmptyQuery) => None,
            Err(e) => return Err(e.at_stage("compose_pipeline")),
        }
    } else {
        let sel = select(conv, aug, i, models, cfg, opts).map_err(|e| e.at_stage("select"))?;
        let highlights = if cfg.variant == Variant::NoTermclass {
            None
        } else {
            Some(highlight(conv, aug, i, &sel, models, cfg).map_err(|e| e.at_stage("classify_terms"))?)
        };
        let history: Vec<HistoryEntry> = sel
            .ranked
            .iter()
            .map(|(c, _)| HistoryEntry { turn_id: c.turn_id.clone(), question: c.question.clone() })
            .collect();
        let input = ReaderInput {
            passage: &conv.passage,
            question: aq,
            selected_history: history,
            highlights: highlights.as_ref(),
            config: &cfg.reader,
            idf,
        };
        let p = absorb_empty(predict_span(&input))?;
        trace.history = sel.trace;
        trace.token_labels = highlights;
        p
    };
    trace.answer = prediction.as_ref().map(SpanPredictionJson::from);
    Ok(TurnOutput { prediction, trace })
}

/// Bits of every own-history token proposed to the classifier, marked 0
/// when its turn was not retained.
pub fn history_token_bits(out: &TurnOutput) -> Vec<(String, String, u8)> {
    let Some(h) = &out.trace.token_labels else { return Vec::new() };
    h.history
        .iter()
        .flat_map(|t| t.tokens.iter().map(move |l: &LabeledToken| (t.turn_id.clone(), l.token.clone(), l.bit)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRun {
    pub report: EvalReport,
    pub traces: Vec<TurnTrace>,
}

/// Evaluates every turn of every conversation. Conversations run in
/// parallel; results are collected in corpus order.
pub fn evaluate_corpus(
    corpus: &[Conversation],
    models: &Models,
    cfg: &PipelineConfig,
    opts: impl Fn(&Conversation) -> Vec<RunOptions> + Sync,
) -> Result<EvalRun> {
    use rayon::prelude::*;
    let per_conv: Vec<Result<Vec<TurnOutput>>> = corpus
        .par_iter()
        .map(|conv| {
            let aug = augment_conversation(conv);
            let o = opts(conv);
            (0..conv.turns.len())
                .map(|i| {
                    let def = RunOptions::default();
                    run_turn(conv, &aug, i, models, cfg, o.get(i).unwrap_or(&def))
                })
                .collect()
        })
        .collect();
    let mut preds = Vec::new();
    let mut traces = Vec::new();
    for outs in per_conv {
        for o in outs? {
            preds.push(Prediction { question_id: o.trace.turn_id.clone(), text: o.answer_text().to_string() });
            traces.push(o.trace);
        }
    }
    let report = metrics::evaluate(&preds, corpus, cfg.human_f1)?;
    Ok(EvalRun { report, traces })
}

/// Plain evaluation: no injected turns, no forced decisions.
pub fn evaluate_plain(corpus: &[Conversation], models: &Models, cfg: &PipelineConfig) -> Result<EvalRun> {
    evaluate_corpus(corpus, models, cfg, |_| Vec::new())
}
