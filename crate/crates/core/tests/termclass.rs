use std::collections::{BTreeSet, HashSet};

use dhs_convqa::nncore::{EmbeddingTable, Example, LinearLayer, TrainConfig};
use dhs_convqa::termclass::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Owned {
    emb: EmbeddingTable,
    effective: BTreeSet<String>,
    passage: HashSet<String>,
    proper: HashSet<String>,
    own: BTreeSet<String>,
}

impl Owned {
    fn new() -> Self {
        fn s(xs: &[&str]) -> Vec<String> { xs.iter().map(|x| x.to_string()).collect() }
        Owned {
            emb: EmbeddingTable::new(["jal", "band", "album", "weather"], 6, 2),
            effective: s(&["band", "album"]).into_iter().collect(),
            passage: s(&["jal", "band", "album"]).into_iter().collect(),
            proper: s(&["jal"]).into_iter().collect(),
            own: s(&["album"]).into_iter().collect(),
        }
    }

    fn ctx(&self, contentless: bool) -> FeatureContext<'_> {
        FeatureContext {
            embeddings: &self.emb,
            effective_words: &self.effective,
            passage_words: &self.passage,
            proper_words: &self.proper,
            own_words: &self.own,
            contentless,
        }
    }
}

#[test]
fn features_recomputed_independently() {
    let o = Owned::new();
    for tok in ["jal", "band", "album", "weather", "unseen"] {
        for (rec, att, cl) in [(1.0, 0.5, false), (0.25, 0.0, true)] {
            let f = token_features(tok, rec, att, &o.ctx(cl));
            assert_eq!(f.len(), 6 + EXTRA_FEATURES);
            assert_eq!(&f[..6], o.emb.row(tok));
            let b = |x: bool| x as u8 as f64;
            let want = [
                b(o.effective.contains(tok)),
                b(o.passage.contains(tok)),
                rec,
                att,
                b(o.own.contains(tok)),
                b(o.proper.contains(tok)),
                b(cl),
            ];
            assert_eq!(&f[6..], want);
        }
    }
}

#[test]
fn recency_endpoint() {
    let o = Owned::new();
    // the most recent turn gets recency 1
    let f = token_features("band", 1.0, 0.0, &o.ctx(false));
    assert_eq!(f[6 + 2], 1.0);
}

#[test]
fn zero_logit_is_highlighted_and_strong_negative_bias_is_not() {
    let m = TermClassifier::zeros(3, 0.0);
    let toks = vec![("a".to_string(), vec![1.0, -2.0, 0.5]), ("b".to_string(), vec![0.0; 3])];
    let lab = classify_terms(&toks, &m, 0.5).unwrap();
    assert!(lab.tokens.iter().all(|t| t.bit == 1 && t.score == 0.5));
    let neg = TermClassifier { layer: LinearLayer { d_in: 3, d_out: 1, weights: vec![0.0; 3], bias: vec![-10.0] }, dropout_rate: 0.0 };
    let lab = classify_terms(&toks, &neg, 0.5).unwrap();
    assert!(lab.tokens.iter().all(|t| t.bit == 0));
    assert!(classify_terms(&[("c".into(), vec![1.0])], &m, 0.5).is_err());
}

fn indicator_set(seed: u64, n: usize) -> Vec<Example> {
    let o = Owned::new();
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let toks = ["jal", "band", "album", "weather"];
    (0..n)
        .map(|_| {
            let tok = toks[r.gen_range(0..toks.len())];
            let f = token_features(tok, r.gen_range(0.0..1.0), r.gen_range(0.0..1.0), &o.ctx(false));
            Example::new(f, o.effective.contains(tok) as u8 as f64)
        })
        .collect()
}

#[test]
fn learns_entity_indicator() {
    let data = indicator_set(1, 400);
    let cfg = TrainConfig { learning_rate: 0.05, max_epochs: 40, dropout_rate: 0.0, ..TrainConfig::default() };
    let (m, _) = train_termclass(&data, 6 + EXTRA_FEATURES, &cfg).unwrap();
    let toks: Vec<(String, Vec<f64>)> = data.iter().map(|e| (String::new(), e.features.clone())).collect();
    let lab = classify_terms(&toks, &m, 0.5).unwrap();
    let correct = lab.tokens.iter().zip(&data).filter(|(t, e)| t.bit as f64 == e.label).count();
    assert!(correct as f64 >= 0.99 * data.len() as f64, "{correct}");

    let (again, _) = train_termclass(&data, 6 + EXTRA_FEATURES, &cfg).unwrap();
    assert_eq!(m, again);

    let (z, _) = train_termclass(&data, 6 + EXTRA_FEATURES, &TrainConfig { max_epochs: 0, ..cfg }).unwrap();
    assert_eq!(z.layer, LinearLayer::zeros(6 + EXTRA_FEATURES, 1));
    assert!(train_termclass(&[], 4, &TrainConfig::default()).is_err());
}

#[test]
fn classifier_gradient() {
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let m = TermClassifier { layer: LinearLayer::random(5, 1, 1.0, &mut r), dropout_rate: 0.3 };
    let x: Vec<f64> = (0..5).map(|_| r.gen_range(-1.0..1.0)).collect();
    assert!(m.grad_check(&x, 1.0, 1e-5).unwrap() <= 1e-4);
}

proptest! {
    #[test]
    fn bits_follow_threshold(seed in 0u64..10_000, threshold in 0.01f64..0.99) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let m = TermClassifier { layer: LinearLayer::random(4, 1, 2.0, &mut r), dropout_rate: 0.5 };
        let toks: Vec<(String, Vec<f64>)> = (0..20).map(|k| (format!("t{k}"), (0..4).map(|_| r.gen_range(-2.0..2.0)).collect())).collect();
        let a = classify_terms(&toks, &m, threshold).unwrap();
        let b = classify_terms(&toks, &m, threshold).unwrap();
        prop_assert_eq!(&a, &b);
        for (t, (_, f)) in a.tokens.iter().zip(&toks) {
            let z = m.layer.bias[0] + f.iter().zip(&m.layer.weights).map(|(x, w)| x * w).sum::<f64>();
            let p = 1.0 / (1.0 + (-z).exp());
            prop_assert!((t.score - p).abs() < 1e-12);
            prop_assert_eq!(t.bit == 1, t.score >= threshold);
        }
    }
}
