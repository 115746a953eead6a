use std::collections::BTreeMap;

use dhs_convqa::corpus::{default_mix, generate_synthetic, parse_quac, AnswerSpan, Conversation, DialogFeature, Passage, Turn};
use dhs_convqa::metrics::*;
use proptest::prelude::*;
use serde::Deserialize;

#[derive(Deserialize)]
struct Golden {
    dialogs: Vec<GoldenDialog>,
    report: GoldenReport,
}

#[derive(Deserialize)]
struct GoldenDialog {
    id: String,
    questions: Vec<GoldenQuestion>,
}

#[derive(Deserialize)]
struct GoldenQuestion {
    id: String,
    feature: DialogFeature,
    prediction: String,
    golds: Vec<String>,
}

#[derive(Deserialize)]
struct GoldenReport {
    f1: String,
    heq_q: String,
    heq_d: String,
    per_feature: BTreeMap<DialogFeature, String>,
}

fn frac(s: &str) -> f64 {
    match s.split_once('/') {
        Some((a, b)) => a.parse::<f64>().unwrap() / b.parse::<f64>().unwrap(),
        None => s.parse().unwrap(),
    }
}

fn golden() -> (Vec<Conversation>, Vec<Prediction>, GoldenReport) {
    let g: Golden = serde_json::from_str(include_str!("fixtures/metrics_golden.json")).unwrap();
    let mut convs = Vec::new();
    let mut preds = Vec::new();
    for d in g.dialogs {
        let turns = d
            .questions
            .into_iter()
            .map(|q| {
                preds.push(Prediction { question_id: q.id.clone(), text: q.prediction });
                Turn {
                    id: q.id,
                    question: "?".into(),
                    gold_answers: q.golds.into_iter().filter(|t| !t.is_empty()).map(|text| AnswerSpan { text, start: 0, end: 0 }).collect(),
                    feature: q.feature,
                    planted_required_entities: None,
                    injected_history: vec![],
                }
            })
            .collect();
        convs.push(Conversation { id: d.id.clone(), topic: None, passage: Passage::new(d.id, "", ""), turns });
    }
    (convs, preds, g.report)
}

#[test]
fn golden_report_through_evaluate() {
    let (convs, preds, want) = golden();
    let rep = evaluate(&preds, &convs, HumanF1::LeaveOneOut).unwrap();
    assert!((rep.f1 - frac(&want.f1)).abs() < 1e-9, "{}", rep.f1);
    assert!((rep.heq_q - frac(&want.heq_q)).abs() < 1e-9);
    assert!((rep.heq_d - frac(&want.heq_d)).abs() < 1e-9);
    for (f, v) in &want.per_feature {
        assert!((rep.per_feature[f] - frac(v)).abs() < 1e-9, "{f:?}");
    }
    assert_eq!((rep.n_questions, rep.n_dialogs), (20, 4));

    let mut reversed = preds.clone();
    reversed.reverse();
    assert_eq!(evaluate(&reversed, &convs, HumanF1::LeaveOneOut).unwrap(), rep);
    let header_cols = EvalReport::CSV_HEADER.split(',').count();
    assert_eq!(rep.csv_row("golden").split(',').count(), header_cols);
}

#[test]
fn evaluate_rejects_mismatched_predictions() {
    let (convs, mut preds, _) = golden();
    let extra = Prediction { question_id: "nope".into(), text: String::new() };
    preds.push(extra);
    assert!(evaluate(&preds, &convs, HumanF1::Perfect).is_err());
    preds.pop();
    preds.pop();
    assert!(evaluate(&preds, &convs, HumanF1::Perfect).is_err());
    let dup = preds[0].clone();
    preds.push(dup);
    assert!(evaluate(&preds, &convs, HumanF1::Perfect).is_err());
}

#[test]
fn jal_tags() {
    let c = parse_quac(include_str!("fixtures/jal.json")).unwrap().remove(0);
    let got = tag_features(&c);
    let want: Vec<DialogFeature> = c.turns.iter().map(|t| t.feature).collect();
    assert_eq!(got, want);
}

#[test]
fn synthetic_tags_agree_with_generator() {
    let corpus = generate_synthetic(17, 100, &default_mix()).unwrap();
    let mut agree = 0;
    let mut total = 0;
    for c in &corpus {
        for (t, f) in c.turns.iter().zip(tag_features(c)) {
            agree += (t.feature == f) as usize;
            total += 1;
        }
    }
    assert!(agree as f64 >= 0.95 * total as f64, "{agree}/{total}");
}

#[test]
fn human_f1_sources() {
    let golds = vec!["a b".to_string(), "a c".to_string()];
    assert_eq!(human_f1(&golds, HumanF1::Perfect), 1.0);
    assert!((human_f1(&golds, HumanF1::LeaveOneOut) - 0.5).abs() < 1e-12);
    assert_eq!(human_f1(&golds[..1], HumanF1::LeaveOneOut), 1.0);
}

fn pair() -> impl Strategy<Value = (f64, f64)> {
    (0u8..5, 0u8..5).prop_map(|(a, b)| (a as f64 / 4.0, b as f64 / 4.0))
}

/// Counts by hand what the HEQ definitions describe.
fn recount(dialogs: &[Vec<(f64, f64)>]) -> (f64, f64) {
    let mut q_pass = 0;
    let mut q_total = 0;
    let mut d_pass = 0;
    for d in dialogs {
        let mut all = true;
        for &(m, h) in d {
            q_total += 1;
            if m >= h {
                q_pass += 1;
            } else {
                all = false;
            }
        }
        if all {
            d_pass += 1;
        }
    }
    (100.0 * q_pass as f64 / q_total as f64, 100.0 * d_pass as f64 / dialogs.len() as f64)
}

const WORDS: [&str; 6] = ["jal", "band", "the", "2002", "lahore", "album"];

fn phrase() -> impl Strategy<Value = String> {
    prop::collection::vec(prop::sample::select(&WORDS[..]), 0..6).prop_map(|w| w.join(" "))
}

proptest! {
    #[test]
    fn heq_matches_recount(dialogs in prop::collection::vec(prop::collection::vec(pair(), 1..10), 1..8)) {
        let flat: Vec<(f64, f64)> = dialogs.iter().flatten().copied().collect();
        let (q, d) = recount(&dialogs);
        prop_assert!((heq_q(&flat).unwrap() - q).abs() < 1e-9);
        prop_assert!((heq_d(&dialogs).unwrap() - d).abs() < 1e-9);
    }

    #[test]
    fn heq_d_bounded_by_heq_q_for_equal_lengths(n in 1usize..10, flat in prop::collection::vec(pair(), 1..80)) {
        let dialogs: Vec<Vec<(f64, f64)>> = flat.chunks(n).filter(|c| c.len() == n).map(<[_]>::to_vec).collect();
        prop_assume!(!dialogs.is_empty());
        let used: Vec<(f64, f64)> = dialogs.iter().flatten().copied().collect();
        prop_assert!(heq_d(&dialogs).unwrap() <= heq_q(&used).unwrap() + 1e-9);
    }

    #[test]
    fn heq_d_can_exceed_heq_q_with_uneven_dialogs(k in 2usize..10) {
        let dialogs = vec![vec![(1.0, 1.0)], vec![(0.0, 1.0); k]];
        let flat: Vec<(f64, f64)> = dialogs.iter().flatten().copied().collect();
        prop_assert!(heq_d(&dialogs).unwrap() > heq_q(&flat).unwrap());
    }

    #[test]
    fn token_f1_properties(p in phrase(), g in phrase(), h in phrase()) {
        let f = token_f1(&p, &[&g]).unwrap();
        prop_assert!((0.0..=1.0).contains(&f));
        prop_assert!((f - token_f1(&g, &[&p]).unwrap()).abs() < 1e-12);
        prop_assert_eq!(token_f1(&p, &[&p]).unwrap(), 1.0);
        let both = token_f1(&p, &[&g, &h]).unwrap();
        prop_assert!(both >= f && both >= token_f1(&p, &[&h]).unwrap());
    }
}
