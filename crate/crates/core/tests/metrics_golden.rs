use std::path::PathBuf;

use ccx::metrics::{evaluate, EvalCorpus, MetricReport};

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/metrics").join(name)
}

#[test]
fn golden_corpus_matches_stored_report() {
    let corpus = EvalCorpus::load_jsonl(&fixture("golden_corpus.jsonl")).unwrap();
    assert_eq!(corpus.len(), 10);
    let expected: MetricReport = serde_json::from_str(&std::fs::read_to_string(fixture("golden_report.json")).unwrap()).unwrap();
    let got = evaluate(&corpus).unwrap();
    for (a, b) in got.bleu.iter().zip(&expected.bleu) {
        assert!((a - b).abs() < 1e-9, "bleu {a} vs {b}");
    }
    assert!((got.meteor - expected.meteor).abs() < 1e-9, "meteor {} vs {}", got.meteor, expected.meteor);
    assert!((got.rouge_l - expected.rouge_l).abs() < 1e-9);
    assert!((got.cider_d - expected.cider_d).abs() < 1e-9, "cider {} vs {}", got.cider_d, expected.cider_d);
    assert!((got.s_star_m - expected.s_star_m).abs() < 1e-9);
}

#[test]
fn report_json_has_sorted_keys() {
    let corpus = EvalCorpus::load_jsonl(&fixture("golden_corpus.jsonl")).unwrap();
    let json = evaluate(&corpus).unwrap().to_json();
    let keys: Vec<usize> = ["\"bleu\"", "\"cider_d\"", "\"meteor\"", "\"rouge_l\"", "\"s_star_m\""]
        .iter()
        .map(|k| json.find(k).unwrap())
        .collect();
    assert!(keys.windows(2).all(|w| w[0] < w[1]));
}
