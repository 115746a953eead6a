use std::collections::BTreeMap;

use dhs_convqa::corpus::*;
use dhs_convqa::text::words;
use proptest::prelude::*;

const JAL: &str = include_str!("fixtures/jal.json");

fn one_turn(context: &str, answer: &str, start: usize) -> String {
    serde_json::json!({
        "data": [{
            "id": "c1", "title": "T", "context": context,
            "qas": [{"id": "c1_q0", "question": "Who?", "answers": [{"text": answer, "answer_start": start}]}]
        }]
    })
    .to_string()
}

#[test]
fn loads_jal_fixture() {
    let convs = parse_quac(JAL).unwrap();
    assert_eq!(convs.len(), 1);
    let c = &convs[0];
    assert_eq!(c.turns.len(), 5);
    assert_eq!(c.turns[0].id, "jal_q1");
    assert_eq!(c.turns[2].gold_answers[0].text, "The band was founded in 2002");
    assert_eq!(c.turns[1].feature, DialogFeature::TopicShift);
}

#[test]
fn two_turn_file_preserves_ids() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("two.json");
    let ctx = "Jal was founded in 2002. It was popular.";
    let json = serde_json::json!({
        "data": [{
            "id": "conv-7", "title": "Jal", "context": ctx,
            "qas": [
                {"id": "conv-7_a", "question": "When was Jal founded?", "answers": [{"text": "2002", "answer_start": 19}]},
                {"id": "conv-7_b", "question": "Was it popular?", "answers": [{"text": "It was popular", "answer_start": 25}]}
            ]
        }]
    });
    std::fs::write(&path, json.to_string()).unwrap();
    let convs = load_quac(&path).unwrap();
    assert_eq!(convs[0].id, "conv-7");
    let ids: Vec<&str> = convs[0].turns.iter().map(|t| t.id.as_str()).collect();
    assert_eq!(ids, ["conv-7_a", "conv-7_b"]);
}

#[test]
fn answer_past_end_cites_turn() {
    let err = parse_quac(&one_turn("Short text.", "text", 400)).unwrap_err().to_string();
    assert!(err.contains("c1_q0"), "{err}");
}

#[test]
fn answer_text_mismatch_rejected() {
    let err = parse_quac(&one_turn("Jal was founded in 2002.", "1999", 19)).unwrap_err().to_string();
    assert!(err.contains("c1_q0"), "{err}");
}

#[test]
fn cannotanswer_turns_have_no_gold() {
    let convs = parse_quac(&one_turn("Jal was founded in 2002.", CANNOT_ANSWER, 0)).unwrap();
    assert!(!convs[0].turns[0].is_answerable());
}

#[test]
fn canard_records() {
    let one = r#"[{"History": ["Jal", "Who founded Jal?"], "Question": "When?", "Rewrite": "When was Jal founded?"}]"#;
    let recs = parse_canard(one).unwrap();
    assert_eq!(recs.len(), 1);
    assert_eq!(recs[0].history.len(), 2);
    assert!(parse_canard(r#"[{"History": [], "Question": "When?"}]"#).is_err());
    assert!(parse_canard("[]").unwrap().is_empty());
}

#[test]
fn canard_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.json");
    std::fs::write(&path, r#"[{"History": ["a"], "Question": "b", "Rewrite": "c"}]"#).unwrap();
    assert_eq!(load_canard(&path).unwrap()[0].rewrite, "c");
}

#[test]
fn missing_file_is_io_error() {
    assert!(matches!(load_quac("/nonexistent/x.json"), Err(dhs_convqa::Error::Io { .. })));
}

#[test]
fn generator_determinism_and_empty() {
    let a = generate_synthetic(42, 10, &default_mix()).unwrap();
    let b = generate_synthetic(42, 10, &default_mix()).unwrap();
    assert_eq!(to_quac_json(&a), to_quac_json(&b));
    assert!(generate_synthetic(42, 0, &default_mix()).unwrap().is_empty());
}

#[test]
fn forced_topic_shift() {
    let mix: FeatureMix = BTreeMap::from([(DialogFeature::TopicShift, 1.0)]);
    for c in generate_synthetic(3, 20, &mix).unwrap() {
        assert_eq!(c.turns[0].feature, DialogFeature::FirstQuestion);
        assert!(c.turns[1..].iter().all(|t| t.feature == DialogFeature::TopicShift));
    }
}

#[test]
fn different_seeds_differ() {
    let mut differ = 0;
    for s in 0..100u64 {
        let a = generate_synthetic(s, 1, &default_mix()).unwrap();
        let b = generate_synthetic(s + 1000, 1, &default_mix()).unwrap();
        let qa: Vec<&str> = a[0].turns.iter().map(|t| t.question.as_str()).collect();
        let qb: Vec<&str> = b[0].turns.iter().map(|t| t.question.as_str()).collect();
        differ += (qa != qb) as usize;
    }
    assert!(differ > 99, "{differ}");
}

#[test]
fn synthetic_round_trip() {
    let a = generate_synthetic(5, 12, &default_mix()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("syn.json");
    write_quac(&path, &a).unwrap();
    let b = load_quac(&path).unwrap();
    assert_eq!(a, b);
    assert_eq!(to_quac_json(&a), to_quac_json(&b));
}

#[test]
fn idf_formula() {
    let p = [Passage::new("a", "", "jal band"), Passage::new("b", "", "band")];
    let idf = IdfTable::from_passages(&p);
    assert!((idf.idf("band") - (1.0f64 + 2.0 / 2.0).ln()).abs() < 1e-12);
    assert!((idf.idf("jal") - (1.0f64 + 2.0).ln()).abs() < 1e-12);
}

fn spans_match_tokens(c: &Conversation) {
    for t in &c.turns {
        for g in &t.gold_answers {
            let slice = &c.passage.text[c.passage.tokens[g.start].start..c.passage.tokens[g.end].end];
            assert_eq!(slice, g.text, "{}", t.id);
        }
    }
}

#[test]
fn fixture_spans_match_tokens() {
    parse_quac(JAL).unwrap().iter().for_each(spans_match_tokens);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn generated_spans_match_tokens(seed in 0u64..10_000, n in 1usize..6) {
        let corpus = generate_synthetic(seed, n, &default_mix()).unwrap();
        corpus.iter().for_each(spans_match_tokens);
        for c in &corpus {
            prop_assert!(c.validate().is_ok());
            prop_assert!(c.turns.iter().all(|t| t.is_answerable()));
        }
    }

    #[test]
    fn quac_round_trip(seed in 0u64..10_000) {
        let a = generate_synthetic(seed, 3, &default_mix()).unwrap();
        let b = parse_quac(&to_quac_json(&a)).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn tokenization_keeps_offsets(text in "[A-Za-z0-9 ,.?']{0,60}") {
        let p = Passage::new("x", "", text.clone());
        for t in &p.tokens {
            prop_assert_eq!(&text[t.start..t.end], t.text.as_str());
        }
        let ws = words(&text);
        prop_assert!(ws.iter().all(|w| *w == w.to_lowercase()));
    }
}
