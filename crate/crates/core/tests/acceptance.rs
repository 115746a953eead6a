//! End-to-end acceptance run. Every criterion is evaluated, one line per
//! criterion is written to stderr, and the test fails if any line fails.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::time::{Duration, Instant};

use dhs_convqa::corpus::{default_mix, generate_synthetic, Conversation, DialogFeature, Passage};
use dhs_convqa::entities::{augment_conversation, AugmentedQuestion, EntitySet};
use dhs_convqa::harness::*;
use dhs_convqa::metrics::{heq_d, heq_q, human_f1, report_from_scores, token_f1, HumanF1};
use dhs_convqa::nncore::LinearLayer;
use dhs_convqa::reader::{gold_hit, predict_span, ReaderConfig, ReaderInput};
use dhs_convqa::selection::{rerank, AttentionScorer, TurnRepresentation};
use dhs_convqa::termclass::{TermClassifier, EXTRA_FEATURES};
use dhs_convqa::text::is_stopword;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

struct Outcome {
    id: usize,
    pass: bool,
    detail: String,
}

fn report(o: &Outcome) {
    let line = format!("criterion {:>2}: {} | {}\n", o.id, if o.pass { "PASS" } else { "FAIL" }, o.detail);
    let _ = std::io::stderr().lock().write_all(line.as_bytes());
}

fn within(t: Instant, limit: Duration) -> (bool, String) {
    let e = t.elapsed();
    (e < limit, format!("{:.2}s/{}s", e.as_secs_f64(), limit.as_secs()))
}

struct Setup {
    train: Vec<Conversation>,
    eval: Vec<Conversation>,
    cfg: PipelineConfig,
}

fn setup() -> Setup {
    let corpus = generate_synthetic(42, 700, &default_mix()).unwrap();
    let (train, eval) = split_corpus(&corpus, 42, 2.0 / 7.0).unwrap();
    assert_eq!((train.len(), eval.len()), (500, 200));
    Setup { train, eval, cfg: PipelineConfig { seed: 42, ..PipelineConfig::default() } }
}

fn c1_rerank_weights() -> Outcome {
    let t = Instant::now();
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let d = 16;
    let mut ok = true;
    let mut worst_sum: f64 = 0.0;
    for _ in 0..1000 {
        let n = r.gen_range(1..=50);
        let scorer = AttentionScorer { layer: LinearLayer::random(d, 1, r.gen_range(0.1..5.0), &mut r) };
        let reps: Vec<TurnRepresentation> = (0..n)
            .map(|k| TurnRepresentation { turn_id: format!("t{k}"), vector: (0..d).map(|_| r.gen_range(-1.0..1.0)).collect() })
            .collect();
        let ranked = rerank(&reps, &scorer).unwrap();
        let ws: Vec<f64> = ranked.iter().map(|x| x.weight).collect();
        let sum: f64 = ws.iter().sum();
        worst_sum = worst_sum.max((sum - 1.0).abs());
        ok &= ws.iter().all(|&w| w > 0.0) && (sum - 1.0).abs() <= 1e-9 && ws.windows(2).all(|p| p[0] >= p[1]);
        if n == 1 {
            ok &= ws == [1.0];
        }
    }
    let one = rerank(&[TurnRepresentation { turn_id: "x".into(), vector: vec![3.0; d] }], &AttentionScorer::zeros(d)).unwrap();
    ok &= one.len() == 1 && one[0].weight == 1.0;
    let (fast, time) = within(t, Duration::from_secs(5));
    Outcome { id: 1, pass: ok && fast, detail: format!("1000 histories, max |sum-1| {worst_sum:.1e}, {time}") }
}

fn c2_gradients() -> Outcome {
    let t = Instant::now();
    let mut worst: f64 = 0.0;
    for seed in 0..10 {
        let mut r = ChaCha8Rng::seed_from_u64(100 + seed);
        let d = 32;
        let scorer = AttentionScorer { layer: LinearLayer::random(d, 1, 0.5, &mut r) };
        let term = TermClassifier { layer: LinearLayer::random(d + EXTRA_FEATURES, 1, 0.5, &mut r), dropout_rate: 0.1 };
        for _ in 0..5 {
            let x: Vec<f64> = (0..d).map(|_| r.gen_range(-1.0..1.0)).collect();
            let y = r.gen_range(0..2) as f64;
            worst = worst.max(scorer.grad_check(&x, y, 1e-5).unwrap());
            let x: Vec<f64> = (0..d + EXTRA_FEATURES).map(|_| r.gen_range(-1.0..1.0)).collect();
            worst = worst.max(term.grad_check(&x, y, 1e-5).unwrap());
        }
    }
    let (fast, time) = within(t, Duration::from_secs(10));
    Outcome { id: 2, pass: worst <= 1e-4 && fast, detail: format!("max relative error {worst:.2e} over 10 seeds, {time}") }
}

#[derive(Deserialize)]
struct GoldenQuestion {
    feature: DialogFeature,
    prediction: String,
    golds: Vec<String>,
    f1: String,
    human: String,
}

#[derive(Deserialize)]
struct GoldenDialog {
    questions: Vec<GoldenQuestion>,
}

#[derive(Deserialize)]
struct GoldenReport {
    f1: String,
    heq_q: String,
    heq_d: String,
    per_feature: BTreeMap<DialogFeature, String>,
    n_questions: usize,
    n_dialogs: usize,
}

#[derive(Deserialize)]
struct Golden {
    dialogs: Vec<GoldenDialog>,
    report: GoldenReport,
}

fn frac(s: &str) -> f64 {
    match s.split_once('/') {
        Some((a, b)) => a.parse::<f64>().unwrap() / b.parse::<f64>().unwrap(),
        None => s.parse().unwrap(),
    }
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9
}

fn c3_metric_oracles() -> Outcome {
    let golden: Golden = serde_json::from_str(include_str!("fixtures/metrics_golden.json")).unwrap();
    let mut mismatches = Vec::new();
    let mut scored = Vec::new();
    for d in &golden.dialogs {
        let mut dialog = Vec::new();
        for q in &d.questions {
            let f1 = token_f1(&q.prediction, &q.golds).unwrap();
            let h = human_f1(&q.golds, HumanF1::LeaveOneOut);
            if !close(f1, frac(&q.f1)) || !close(h, frac(&q.human)) {
                mismatches.push(format!("{:?} f1 {f1} human {h}", q.prediction));
            }
            dialog.push((q.feature, f1, h));
        }
        scored.push(dialog);
    }
    let rep = report_from_scores(&scored).unwrap();
    let g = &golden.report;
    let feats_ok = rep.per_feature.len() == g.per_feature.len()
        && g.per_feature.iter().all(|(k, v)| rep.per_feature.get(k).is_some_and(|x| close(*x, frac(v))));
    let report_ok = close(rep.f1, frac(&g.f1))
        && close(rep.heq_q, frac(&g.heq_q))
        && close(rep.heq_d, frac(&g.heq_d))
        && feats_ok
        && rep.n_questions == g.n_questions
        && rep.n_dialogs == g.n_dialogs;
    let band = close(token_f1("the band jal", &["jal"]).unwrap(), 0.5);

    let mut r = ChaCha8Rng::seed_from_u64(3);
    let mut prop_ok = true;
    for _ in 0..100 {
        let len = r.gen_range(1..10);
        let dialogs: Vec<Vec<(f64, f64)>> = (0..r.gen_range(1..8))
            .map(|_| (0..len).map(|_| (r.gen_range(0..5) as f64 / 4.0, r.gen_range(0..5) as f64 / 4.0)).collect())
            .collect();
        let flat: Vec<(f64, f64)> = dialogs.iter().flatten().copied().collect();
        prop_ok &= heq_d(&dialogs).unwrap() <= heq_q(&flat).unwrap();
    }
    Outcome {
        id: 3,
        pass: mismatches.is_empty() && report_ok && band && prop_ok,
        detail: format!(
            "20 golden questions, {} mismatches, report {}, band/jal {}, heq_d<=heq_q on 100 equal-length inputs {}",
            mismatches.len(),
            if report_ok { "matches" } else { "differs" },
            band,
            prop_ok
        ),
    }
}

fn retrieves(conv: &Conversation, turn: usize, entities: &BTreeSet<String>, cfg: &ReaderConfig) -> bool {
    let q = AugmentedQuestion {
        text: String::new(),
        original_tokens: Vec::new(),
        own: EntitySet::default(),
        inherited_entities: entities.clone(),
        effective_entities: EntitySet { context_entities: entities.clone(), question_entities: BTreeSet::new() },
        unresolved: false,
    };
    match predict_span(&ReaderInput::bare(&conv.passage, &q, cfg)) {
        Ok(p) => conv.turns[turn].gold_answers.iter().any(|g| gold_hit(&p.span, g)),
        Err(_) => false,
    }
}

fn c4_distant_labels(s: &Setup) -> Outcome {
    let labels = label_corpus(&s.eval, &s.cfg.reader).unwrap();
    let (mut tp, mut n_pred, mut n_gold) = (0usize, 0usize, 0usize);
    let (mut necessary, mut checked) = (0usize, 0usize);
    for (conv, lab) in s.eval.iter().zip(&labels) {
        for (i, (turn, tl)) in conv.turns.iter().zip(&lab.turns).enumerate() {
            let planted: BTreeSet<String> = turn.planted_required_entities.clone().unwrap().into_iter().collect();
            tp += tl.required_entities.intersection(&planted).count();
            n_pred += tl.required_entities.len();
            n_gold += planted.len();
            for e in &tl.required_entities {
                let mut rest = tl.required_entities.clone();
                rest.remove(e);
                checked += 1;
                necessary += !retrieves(conv, i, &rest, &s.cfg.reader) as usize;
            }
        }
    }
    let p = tp as f64 / n_pred as f64;
    let r = tp as f64 / n_gold as f64;
    Outcome {
        id: 4,
        pass: p >= 0.95 && r >= 0.95 && necessary == checked,
        detail: format!("precision {p:.4}, recall {r:.4}, necessity {necessary}/{checked}"),
    }
}

fn c5_ablation(s: &Setup) -> (Outcome, Models) {
    let t = Instant::now();
    let out = run_ablation(&s.train, &s.eval, &Variant::ALL[..4], &s.cfg).unwrap();
    let f1 = |name: &str| out.records.iter().find(|r| r.name == name).unwrap().report.f1;
    let (full, np, nr, nt) = (f1("full"), f1("no_prune"), f1("no_rerank"), f1("no_termclass"));
    let (fast, time) = within(t, Duration::from_secs(180));
    let pass = full >= np + 1.0 && full >= nt + 1.0 && full >= nr - 0.5 && fast;
    let (models, _) = train_models(&s.train, &s.cfg).unwrap();
    (
        Outcome {
            id: 5,
            pass,
            detail: format!("full {full:.2}, no_prune {np:.2}, no_termclass {nt:.2}, no_rerank {nr:.2}, {time}"),
        },
        models,
    )
}

fn c6_negatives(s: &Setup, models: &Models) -> Outcome {
    let t = Instant::now();
    let ks = [0, 1, 3, 5, 7, 9, 11];
    let pts = negative_sweep(&s.eval, &s.train, models, &s.cfg, &ks, 42).unwrap();
    let f1s: Vec<f64> = pts.iter().map(|p| p.report.f1).collect();
    let monotone = f1s.windows(2).all(|w| w[1] <= w[0]);
    let drop = f1s[0] - f1s[f1s.len() - 1];
    let frac_drop = |f: DialogFeature| {
        let a = pts[0].report.per_feature[&f];
        let b = pts[pts.len() - 1].report.per_feature[&f];
        (a - b) / a
    };
    let (c, ts, tr) =
        (frac_drop(DialogFeature::Clarification), frac_drop(DialogFeature::TopicShift), frac_drop(DialogFeature::TopicReturn));
    let (fast, time) = within(t, Duration::from_secs(300));
    let series: Vec<String> = f1s.iter().map(|f| format!("{f:.1}")).collect();
    Outcome {
        id: 6,
        pass: monotone && drop >= 10.0 && c < ts && c < tr && fast,
        detail: format!(
            "F1 {} (drop {drop:.1}), relative drop clarification {c:.3} topic_shift {ts:.3} topic_return {tr:.3}, {time}",
            series.join(" > ")
        ),
    }
}

fn c7_degrade(s: &Setup, models: &Models) -> Outcome {
    let t = Instant::now();
    let pts = degrade_experiment(&s.eval, models, &s.cfg, &[100.0, 70.0, 50.0], 42).unwrap();
    let strict = |v: Vec<f64>| v.windows(2).all(|w| w[1] < w[0]);
    let term = strict(pts.iter().map(|p| p.term_token_f1).collect());
    let answer = strict(pts.iter().map(|p| p.answer_f1).collect());
    let agree = pts.iter().zip([100.0, 70.0, 50.0]).all(|(p, t)| (p.measured_agreement - t).abs() < 0.5);
    let (fast, time) = within(t, Duration::from_secs(180));
    let series: Vec<String> =
        pts.iter().map(|p| format!("{:.0}%: token F1 {:.3} answer F1 {:.2}", p.measured_agreement, p.term_token_f1, p.answer_f1)).collect();
    Outcome { id: 7, pass: term && answer && agree && fast, detail: format!("{}, {time}", series.join("; ")) }
}

fn oracle_span(passage: &Passage, bag: &dhs_convqa::reader::QueryBag, max_len: usize) -> Option<(usize, usize)> {
    let toks = &passage.tokens;
    let mut bounds = Vec::new();
    let mut start = 0;
    for (i, t) in toks.iter().enumerate() {
        if t.ends_sentence() || i + 1 == toks.len() {
            bounds.push((start, i));
            start = i + 1;
        }
    }
    let is_content = |i: usize| !toks[i].is_punct() && !is_stopword(&toks[i].norm());
    let mut best: Option<(f64, usize, usize)> = None;
    for (a, b) in bounds {
        let total = (a..=b).filter(|&i| is_content(i)).count();
        for s in a..=b {
            for e in s..=b.min(s + max_len - 1) {
                let terms: BTreeSet<String> = (s..=e).filter(|&i| !toks[i].is_punct()).map(|i| toks[i].norm()).collect();
                let sum: f64 = terms.iter().map(|w| bag.weight(w)).sum();
                let cov = if total == 0 { 0.0 } else { (s..=e).filter(|&i| is_content(i)).count() as f64 / total as f64 };
                let score = sum + 1e-6 * cov;
                if best.is_none_or(|(b, _, _)| score > b + 1e-10) {
                    best = Some((score, s, e));
                }
            }
        }
    }
    best.map(|(_, s, e)| (s, e))
}

fn c8_reader_oracle() -> Outcome {
    let vocab = ["jal", "band", "formed", "2002", "atif", "born", "album", "the", "was", "in", "Lahore", "by", "first"];
    let mut r = ChaCha8Rng::seed_from_u64(8);
    let cfg = ReaderConfig { max_answer_length: 12, ..ReaderConfig::default() };
    let (mut checked, mut equal) = (0, 0);
    let mut k = 0;
    while checked < 500 {
        k += 1;
        let n = r.gen_range(1..=28);
        let mut text = String::new();
        for i in 0..n {
            text.push_str(vocab.choose(&mut r).unwrap());
            if r.gen_bool(0.15) || i + 1 == n {
                text.push('.');
            }
            text.push(' ');
        }
        let passage = Passage::new(format!("p{k}"), "t", text.trim_end());
        if passage.tokens.len() > 30 {
            continue;
        }
        let q: Vec<&str> = (0..r.gen_range(1..5)).map(|_| *vocab.choose(&mut r).unwrap()).collect();
        let question = dhs_convqa::entities::propagate(&format!("{}?", q.join(" ")), &passage, None);
        let input = ReaderInput::bare(&passage, &question, &cfg);
        let bag = dhs_convqa::reader::build_query(&input);
        checked += 1;
        let got = predict_span(&input).ok().map(|p| p.span);
        let want = if bag.terms.is_empty() { None } else { oracle_span(&passage, &bag, cfg.max_answer_length) };
        let same = match (&got, want) {
            (None, None) => true,
            (Some(g), Some((s, e))) => {
                let bytes = &passage.text[passage.tokens[s].start..passage.tokens[e].end];
                g.start == s && g.end == e && g.text == bytes
            }
            _ => false,
        };
        equal += same as usize;
    }
    Outcome { id: 8, pass: equal == checked, detail: format!("{equal}/{checked} passages byte-exact") }
}

fn c9_pipeline(s: &Setup, models: &Models) -> Outcome {
    let single: Vec<Conversation> = s.eval.to_vec();
    let mut per = BTreeMap::new();
    for v in [Variant::Full, Variant::PipelineQr] {
        let run = evaluate_plain(&single, models, &s.cfg.with_variant(v)).unwrap();
        let preds: BTreeMap<&str, &str> =
            run.traces.iter().map(|t| (t.turn_id.as_str(), t.answer.as_ref().map(|a| a.text.as_str()).unwrap_or(""))).collect();
        let mut scores = Vec::new();
        for conv in &single {
            let aug = augment_conversation(conv);
            for (t, a) in conv.turns.iter().zip(&aug) {
                let planted: BTreeSet<String> = t.planted_required_entities.clone().unwrap().into_iter().collect();
                let own = a.own.all();
                if planted.difference(&own).count() == 1 {
                    let golds: Vec<&str> = t.gold_answers.iter().map(|g| g.text.as_str()).collect();
                    scores.push(token_f1(preds[t.id.as_str()], &golds).unwrap());
                }
            }
        }
        per.insert(v, (100.0 * scores.iter().sum::<f64>() / scores.len() as f64, scores.len()));
    }
    let (dhs, n) = per[&Variant::Full];
    let (qr, _) = per[&Variant::PipelineQr];
    Outcome { id: 9, pass: n > 0 && dhs >= qr, detail: format!("{n} single-antecedent questions: selection F1 {dhs:.2}, pipeline_qr F1 {qr:.2}") }
}

fn c10_determinism(s: &Setup) -> Outcome {
    let a = run_ablation(&s.train, &s.eval, &Variant::ALL, &s.cfg).unwrap();
    let b = run_ablation(&s.train, &s.eval, &Variant::ALL, &s.cfg).unwrap();
    let strip = |o: &AblationOutput| o.records.iter().map(ExperimentRecord::without_timing).collect::<Vec<_>>();
    let same = strip(&a) == strip(&b) && a.table == b.table;
    let json_same = serde_json::to_string(&strip(&a)).unwrap() == serde_json::to_string(&strip(&b)).unwrap();
    let traces: usize = a.records.iter().map(|r| r.traces.len()).sum();
    Outcome { id: 10, pass: same && json_same, detail: format!("two ablate runs, {} reports and {traces} traces identical: {}", a.records.len(), same && json_same) }
}

#[test]
fn acceptance() {
    let mut outcomes = vec![c1_rerank_weights(), c2_gradients(), c3_metric_oracles()];
    let s = setup();
    outcomes.push(c4_distant_labels(&s));
    let (o5, models) = c5_ablation(&s);
    outcomes.push(o5);
    outcomes.push(c6_negatives(&s, &models));
    outcomes.push(c7_degrade(&s, &models));
    outcomes.push(c8_reader_oracle());
    outcomes.push(c9_pipeline(&s, &models));
    outcomes.push(c10_determinism(&s));
    for o in &outcomes {
        report(o);
    }
    let failed: Vec<usize> = outcomes.iter().filter(|o| !o.pass).map(|o| o.id).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
