mod common;

use common::{oracle_bleu, oracle_lcs, oracle_rouge_l, random_corpus};
use hialign_core::metrics::{bleu, corpus_rouge_l, evaluate, lcs_length, rouge_l, EvalReport};
use hialign_core::numerics::Rng;
use proptest::prelude::*;

fn words(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

#[test]
fn bleu_and_rouge_match_enumeration_oracle_on_random_corpora() {
    let mut rng = Rng::new(2024, 0);
    for _ in 0..50 {
        let n = rng.range_inclusive(1, 8);
        let (hyps, refs) = random_corpus(&mut rng, n);
        let got = bleu(&hyps, &refs, 4).unwrap();
        let want = oracle_bleu(&hyps, &refs);
        assert!((got.bp - want.bp).abs() <= 1e-9, "bp {} vs {}", got.bp, want.bp);
        for k in 0..4 {
            assert!((got.precisions[k] - want.precisions[k]).abs() <= 1e-9);
            assert!(
                (got.scores[k] - want.scores[k]).abs() <= 1e-9,
                "BLEU-{} {} vs {}",
                k + 1,
                got.scores[k],
                want.scores[k]
            );
        }
        let r = corpus_rouge_l(&hyps, &refs).unwrap();
        assert!((r - oracle_rouge_l(&hyps, &refs)).abs() <= 1e-9);
    }
}

#[test]
fn self_evaluation_is_perfect() {
    let refs = vec![words("der hund lauft heute schnell"), words("a b c d")];
    let rep = evaluate(&refs, &refs).unwrap();
    assert!((rep.bleu4 - 100.0).abs() < 1e-12);
    assert!((rep.rouge_l - 1.0).abs() < 1e-12);
    assert_eq!(rep.bp, 1.0);
}

#[test]
fn short_hypothesis_hand_case() {
    let rep = evaluate(&[words("a b c d")], &[words("a b c d e")]).unwrap();
    assert!((rep.bleu4 - 77.88).abs() <= 0.01, "{}", rep.bleu4);
    assert!((rep.bp - (-0.25f64).exp()).abs() < 1e-12);
}

#[test]
fn report_json_field_names() {
    let rep = evaluate(&[words("a b")], &[words("a b")]).unwrap();
    let v: serde_json::Value = serde_json::to_value(&rep).unwrap();
    let mut keys: Vec<&str> = v.as_object().unwrap().keys().map(|k| k.as_str()).collect();
    keys.sort();
    assert_eq!(keys, ["bleu1", "bleu2", "bleu3", "bleu4", "bp", "count", "n", "rouge_l"]);
    let back: EvalReport = serde_json::from_value(v).unwrap();
    assert_eq!(back, rep);
}

#[test]
fn mismatched_or_empty_corpora_are_rejected() {
    assert!(bleu::<&str>(&[], &[], 4).is_err());
    assert!(bleu(&[words("a")], &[], 4).is_err());
    assert!(corpus_rouge_l::<&str>(&[], &[]).is_err());
}

#[test]
fn empty_hypothesis_scores_zero() {
    let rep = evaluate(&[vec![]], &[words("a b")]).unwrap();
    assert_eq!(rep.bleu4, 0.0);
    assert_eq!(rep.bp, 0.0);
    assert_eq!(rep.rouge_l, 0.0);
}

fn sentence() -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(0u8..10, 0..12)
}

proptest! {
    #[test]
    fn lcs_matches_memoized_oracle(a in sentence(), b in sentence()) {
        let sa: Vec<String> = a.iter().map(|x| x.to_string()).collect();
        let sb: Vec<String> = b.iter().map(|x| x.to_string()).collect();
        let ra: Vec<&str> = sa.iter().map(|s| s.as_str()).collect();
        let rb: Vec<&str> = sb.iter().map(|s| s.as_str()).collect();
        prop_assert_eq!(lcs_length(&a, &b), oracle_lcs(&ra, &rb));
    }

    #[test]
    fn rouge_is_bounded(a in sentence(), b in sentence()) {
        let r = rouge_l(&a, &b);
        prop_assert!((0.0..=1.0).contains(&r));
        if !a.is_empty() && a == b {
            prop_assert!((r - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn bleu_is_bounded(a in sentence(), b in prop::collection::vec(0u8..10, 1..12)) {
        let s = bleu(&[a], &[b], 4).unwrap();
        for v in s.scores {
            prop_assert!((0.0..=100.0 + 1e-9).contains(&v));
        }
    }
}
