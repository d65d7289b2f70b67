use std::collections::{BTreeMap, BTreeSet};

use ligero::metrics::{
    accuracy, comparison_ratios, entity_f1, entity_f1_corpus, evaluation_average, qa_em, qa_f1, render_ratio,
    render_score, task_score, token_f1, EvaluationReport, MetricKind,
};
use ligero::presets::{published_scores, REFERENCE_MODEL};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TAGS: [&str; 5] = ["O", "B-PER", "I-PER", "B-LOC", "I-LOC"];

fn random_tags(rng: &mut ChaCha8Rng, n: usize) -> Vec<String> {
    (0..n)
        .map(|_| TAGS[rng.random_range(0..TAGS.len())].to_string())
        .collect()
}

/// Every `(start, end, type)` that is an entity under the rule that an entity
/// starts at `B-X`, or at `I-X` not preceded by a tag of type X, and extends
/// over the following `I-X` tags.
fn brute_force_spans(tags: &[String]) -> BTreeSet<(usize, usize, String)> {
    let kind = |t: &str| t.split_once('-').map(|(_, k)| k.to_string());
    let mut out = BTreeSet::new();
    for x in ["PER", "LOC"] {
        let b = format!("B-{x}");
        let i_tag = format!("I-{x}");
        for start in 0..tags.len() {
            let opens = tags[start] == b
                || tags[start] == i_tag && (start == 0 || kind(&tags[start - 1]).as_deref() != Some(x));
            if !opens {
                continue;
            }
            for end in start + 1..=tags.len() {
                let inner = (start + 1..end).all(|k| tags[k] == i_tag);
                let closed = end == tags.len() || tags[end] != i_tag;
                if inner && closed {
                    out.insert((start, end, x.to_string()));
                }
            }
        }
    }
    out
}

fn brute_force_prf(pred: &[Vec<String>], gold: &[Vec<String>]) -> (f64, f64, f64) {
    let (mut correct, mut predicted, mut golds) = (0usize, 0usize, 0usize);
    for (p, g) in pred.iter().zip(gold) {
        let ps = brute_force_spans(p);
        let gs = brute_force_spans(g);
        correct += ps.intersection(&gs).count();
        predicted += ps.len();
        golds += gs.len();
    }
    if predicted == 0 && golds == 0 {
        return (1.0, 1.0, 1.0);
    }
    let p = if predicted == 0 {
        0.0
    } else {
        correct as f64 / predicted as f64
    };
    let r = if golds == 0 { 0.0 } else { correct as f64 / golds as f64 };
    let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f)
}

#[test]
fn entity_f1_matches_brute_force_on_500_sequences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut all_pred = Vec::new();
    let mut all_gold = Vec::new();
    for _ in 0..500 {
        let gold = random_tags(&mut rng, 10);
        let pred = random_tags(&mut rng, 10);
        let scores = entity_f1(&pred, &gold).unwrap();
        let (p, r, f) = brute_force_prf(std::slice::from_ref(&pred), std::slice::from_ref(&gold));
        assert_eq!(
            (scores.precision, scores.recall, scores.f1),
            (p, r, f),
            "{pred:?} vs {gold:?}"
        );
        all_pred.push(pred);
        all_gold.push(gold);
    }
    let corpus = entity_f1_corpus(&all_pred, &all_gold).unwrap();
    let (p, r, f) = brute_force_prf(&all_pred, &all_gold);
    assert_eq!((corpus.precision, corpus.recall, corpus.f1), (p, r, f));
}

#[test]
fn entity_f1_hand_examples() {
    let gold = ["B-PER", "I-PER", "O", "B-LOC"];
    let pred = ["B-PER", "I-PER", "O", "O"];
    let s = entity_f1(&pred, &gold).unwrap();
    assert_eq!(s.precision, 1.0);
    assert_eq!(s.recall, 0.5);
    assert!((s.f1 - 2.0 / 3.0).abs() < 1e-15);
    assert_eq!(entity_f1(&gold, &gold).unwrap().f1, 1.0);
    // A dangling I-LOC is read as B-LOC.
    assert_eq!(entity_f1(&["O", "I-LOC"], &["O", "B-LOC"]).unwrap().f1, 1.0);
    // Type mismatch on the same span is not a match.
    assert_eq!(entity_f1(&["B-PER"], &["B-LOC"]).unwrap().f1, 0.0);
    assert!(entity_f1(&["O"], &["O", "O"]).is_err());
}

#[test]
fn accuracy_matches_direct_count_on_1000_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let pred: Vec<u8> = (0..1000).map(|_| rng.random_range(0..4)).collect();
    let gold: Vec<u8> = (0..1000).map(|_| rng.random_range(0..4)).collect();
    let mut correct = 0;
    for i in 0..1000 {
        if pred[i] == gold[i] {
            correct += 1;
        }
    }
    assert_eq!(accuracy(&pred, &gold).unwrap(), correct as f64 / 1000.0);
    assert_eq!(accuracy(&[1, 2, 3, 4], &[1, 2, 3, 0]).unwrap(), 0.75);
    assert_eq!(accuracy(&gold, &gold).unwrap(), 1.0);
    assert!(accuracy::<u8>(&[], &[]).is_err());
}

/// Micro F1 from a full confusion matrix.
fn confusion_f1(pred: &[u8], gold: &[u8], labels: u8) -> f64 {
    let k = labels as usize;
    let mut m = vec![vec![0usize; k]; k];
    for (p, g) in pred.iter().zip(gold) {
        m[*g as usize][*p as usize] += 1;
    }
    let (mut tp, mut fp, mut fnc) = (0.0, 0.0, 0.0);
    for c in 0..k {
        tp += m[c][c] as f64;
        fp += (0..k).filter(|&r| r != c).map(|r| m[r][c]).sum::<usize>() as f64;
        fnc += (0..k).filter(|&p| p != c).map(|p| m[c][p]).sum::<usize>() as f64;
    }
    let precision = tp / (tp + fp);
    let recall = tp / (tp + fnc);
    if tp == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

proptest! {
    #[test]
    fn token_f1_matches_confusion_matrix(pairs in prop::collection::vec((0u8..5, 0u8..5), 1..200)) {
        let (pred, gold): (Vec<u8>, Vec<u8>) = pairs.into_iter().unzip();
        let f = token_f1(&pred, &gold).unwrap();
        prop_assert!((f - confusion_f1(&pred, &gold, 5)).abs() < 1e-12);
        prop_assert_eq!(f, accuracy(&pred, &gold).unwrap());
    }

    #[test]
    fn entity_f1_ignores_outside_padding(seed in any::<u64>(), n in 1usize..15, pad in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pred = random_tags(&mut rng, n);
        let mut gold = random_tags(&mut rng, n);
        let before = entity_f1(&pred, &gold).unwrap();
        for _ in 0..pad {
            pred.push("O".into());
            gold.push("O".into());
        }
        prop_assert_eq!(entity_f1(&pred, &gold).unwrap(), before);
    }

    #[test]
    fn qa_f1_dominates_em(pred in "[a-c ]{0,12}", golds in prop::collection::vec("[a-c ]{0,12}", 1..4)) {
        let em = qa_em(&pred, &golds).unwrap();
        let f1 = qa_f1(&pred, &golds).unwrap();
        prop_assert!(em == 0.0 || em == 1.0);
        prop_assert!((0.0..=1.0).contains(&f1));
        prop_assert!(f1 >= em);
    }

    #[test]
    fn evaluation_average_is_symmetric_and_bounded(mut scores in prop::collection::vec(0.0f64..100.0, 8), rot in 0usize..8) {
        let avg = evaluation_average(&scores).unwrap();
        let lo = scores.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(lo - 1e-9 <= avg && avg <= hi + 1e-9);
        scores.rotate_left(rot);
        scores.reverse();
        prop_assert!((evaluation_average(&scores).unwrap() - avg).abs() < 1e-12);
    }
}

#[test]
fn qa_hand_examples() {
    assert_eq!(qa_em("gato negro", &["gato negro"]).unwrap(), 1.0);
    assert_eq!(qa_f1("gato negro", &["gato negro"]).unwrap(), 1.0);
    assert_eq!(qa_em("el gato negro", &["gato negro"]).unwrap(), 1.0);
    assert_eq!(qa_f1("el gato negro", &["gato negro"]).unwrap(), 1.0);
    assert_eq!(qa_f1("gato", &["gato negro"]).unwrap(), 2.0 / 3.0);
    assert_eq!(qa_em("gato", &["gato negro"]).unwrap(), 0.0);
    // Case, punctuation and whitespace are normalized away.
    assert_eq!(qa_em("  Los  Gatos, ", &["gatos"]).unwrap(), 1.0);
    // The best gold wins.
    assert_eq!(qa_f1("perro", &["gato", "perro"]).unwrap(), 1.0);
    let no_golds: [&str; 0] = [];
    assert!(qa_f1("x", &no_golds).is_err());
}

#[test]
fn task_score_examples() {
    let qa = |f1: f64, em: f64| BTreeMap::from([("f1".to_string(), f1), ("em".to_string(), em)]);
    assert!((task_score(MetricKind::QaF1Em, &qa(67.65, 43.38)).unwrap() - 55.515).abs() < 1e-9);
    assert!((task_score(MetricKind::QaF1Em, &qa(81.49, 62.67)).unwrap() - 72.08).abs() < 1e-9);
    assert_eq!(task_score(MetricKind::QaF1Em, &qa(40.0, 40.0)).unwrap(), 40.0);
    assert!(task_score(MetricKind::Accuracy, &qa(1.0, 1.0)).is_err());
    assert!(evaluation_average(&[1.0; 7]).is_err());
}

#[test]
fn ratio_examples() {
    let (size, perf) = comparison_ratios(5e6, 70.86, 110e6, 81.02).unwrap();
    assert_eq!((render_ratio(size), render_ratio(perf)), ("22x".into(), "0.87x".into()));
    let (size, perf) = comparison_ratios(12e6, 79.35, 110e6, 81.02).unwrap();
    assert_eq!(
        (render_ratio(size), render_ratio(perf)),
        ("9.16x".into(), "0.97x".into())
    );
    let (size, perf) = comparison_ratios(110e6, 81.02, 110e6, 81.02).unwrap();
    assert_eq!((render_ratio(size), render_ratio(perf)), ("1x".into(), "1x".into()));
    assert!(comparison_ratios(0.0, 1.0, 1.0, 1.0).is_err());
}

/// Printed comparison rows: model, average, size ratio, performance ratio.
const PUBLISHED_ROWS: [(&str, f64, &str, &str); 8] = [
    ("BETO uncased", 77.48, "1x", "0.95x"),
    ("BETO cased", 81.02, "1x", "1x"),
    ("DistilBETO", 73.22, "1.64x", "0.90x"),
    ("ALBETO tiny", 70.86, "22x", "0.87x"),
    ("ALBETO base", 79.35, "9.16x", "0.97x"),
    ("ALBETO large", 78.12, "6.11x", "0.96x"),
    ("ALBETO xlarge", 80.20, "1.86x", "0.98x"),
    ("ALBETO xxlarge", 81.34, "0.49x", "1x"),
];

#[test]
fn published_comparison_is_reproduced() {
    let report = EvaluationReport::build(&published_scores().unwrap(), REFERENCE_MODEL).unwrap();
    assert_eq!(report.rows.len(), PUBLISHED_ROWS.len());
    for (row, (model, average, size, perf)) in report.rows.iter().zip(PUBLISHED_ROWS) {
        assert_eq!(row.model, model);
        assert!((row.average - average).abs() <= 0.01 + 1e-9, "{model}: {}", row.average);
        assert_eq!(render_score(row.average), format!("{average:.2}"), "{model}");
        assert_eq!(render_ratio(row.size_ratio), size, "{model}");
        assert_eq!(render_ratio(row.performance_ratio), perf, "{model}");
    }
    let table = report.to_table();
    assert!(table.starts_with("Model"));
    assert!(table.contains("ALBETO tiny"));
    assert_eq!(
        report.to_tsv(),
        EvaluationReport::build(&published_scores().unwrap(), REFERENCE_MODEL)
            .unwrap()
            .to_tsv()
    );
}
