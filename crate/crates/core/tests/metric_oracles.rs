mod support;

use hockeygen::metrics::{bleu, cider, corpus_wer, nist, rouge_l, rouge_l_pair, sttr, wer, EvalPair};
use proptest::prelude::*;
use support::metric_oracle::{self as oracle, sent, Sent};

fn to_pairs(c: &[(Sent, Vec<Sent>)]) -> Vec<EvalPair> {
    c.iter().map(|(h, r)| EvalPair::new(h.clone(), r.clone())).collect()
}

#[test]
fn nist_matches_brute_force() {
    for c in oracle::fixed_corpora() {
        for n in 1..=5 {
            let want = oracle::nist(&c, n);
            let got = nist(&to_pairs(&c), n).unwrap();
            assert!((got - want).abs() <= 1e-10, "n={n}: {got} vs {want}");
        }
    }
}

#[test]
fn cider_matches_brute_force() {
    for c in oracle::fixed_corpora() {
        for n in 1..=4 {
            let want = oracle::cider(&c, n);
            let got = cider(&to_pairs(&c), n).unwrap();
            assert!(got.flag.is_none());
            assert!((got.value - want).abs() <= 1e-10, "n={n}: {} vs {want}", got.value);
        }
    }
}

#[test]
fn nist_is_unchanged_by_duplicating_pairs() {
    for c in oracle::fixed_corpora() {
        let once = to_pairs(&c);
        let twice: Vec<EvalPair> = once.iter().chain(&once).cloned().collect();
        let (a, b) = (nist(&once, 5).unwrap(), nist(&twice, 5).unwrap());
        assert!((a - b).abs() <= 1e-10, "{a} vs {b}");
    }
}

#[test]
fn empty_hypotheses_score_zero() {
    let c = vec![EvalPair::new(vec![], vec![sent("a b c")]), EvalPair::new(vec![], vec![sent("d e")])];
    assert_eq!(nist(&c, 5).unwrap(), 0.0);
    assert_eq!(bleu(&c, 4).unwrap(), 0.0);
    assert_eq!(nist(&[], 5).unwrap(), 0.0);
}

#[test]
fn wer_counts_substitutions_on_equal_lengths() {
    let r = sent("Kärpät voitti Ilveksen maalein 3-2 .");
    let h = sent("Kärpät hävisi Ilvekselle maalein 3-2 .");
    assert_eq!(wer(&h, &r, false).unwrap(), 2.0 / 6.0);
    let c = vec![EvalPair::new(h, vec![r.clone()]), EvalPair::new(r.clone(), vec![r])];
    assert_eq!(corpus_wer(&c, false).unwrap(), 2.0 / 12.0);
}

fn word() -> impl Strategy<Value = String> {
    prop::sample::select(vec!["a", "b", "c", "d", "e"]).prop_map(str::to_string)
}

fn sentence() -> impl Strategy<Value = Sent> {
    prop::collection::vec(word(), 1..8)
}

fn corpus() -> impl Strategy<Value = Vec<(Sent, Vec<Sent>)>> {
    prop::collection::vec((sentence(), prop::collection::vec(sentence(), 1..3)), 2..5)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn random_corpora_match_oracles(c in corpus()) {
        let p = to_pairs(&c);
        prop_assert!((nist(&p, 5).unwrap() - oracle::nist(&c, 5)).abs() <= 1e-10);
        prop_assert!((cider(&p, 4).unwrap().value - oracle::cider(&c, 4)).abs() <= 1e-10);
    }

    #[test]
    fn scores_are_order_invariant_and_bounded(c in corpus()) {
        let p = to_pairs(&c);
        let mut r = p.clone();
        r.reverse();
        let b = bleu(&p, 4).unwrap();
        prop_assert!((0.0..=1.0).contains(&b));
        prop_assert!((b - bleu(&r, 4).unwrap()).abs() <= 1e-12);
        prop_assert!((nist(&p, 5).unwrap() - nist(&r, 5).unwrap()).abs() <= 1e-10);
        let l = rouge_l(&p).unwrap();
        prop_assert!((0.0..=1.0).contains(&l));
        prop_assert!((l - rouge_l(&r).unwrap()).abs() <= 1e-12);
        prop_assert!((cider(&p, 4).unwrap().value - cider(&r, 4).unwrap().value).abs() <= 1e-10);
        prop_assert!(nist(&p, 5).unwrap() >= 0.0);
    }

    #[test]
    fn extra_reference_never_lowers_rouge(h in sentence(), r in sentence(), extra in sentence()) {
        let one = rouge_l_pair(&EvalPair::new(h.clone(), vec![r.clone()]));
        let two = rouge_l_pair(&EvalPair::new(h, vec![r, extra]));
        prop_assert!(two >= one);
    }

    #[test]
    fn wer_is_bounded(h in prop::collection::vec(word(), 0..10), r in sentence()) {
        let w = wer(&h, &r, false).unwrap();
        prop_assert!(w >= 0.0);
        prop_assert!(w <= 1f64.max(h.len() as f64 / r.len() as f64));
    }
}

#[test]
fn sttr_uses_full_segments() {
    let mut toks: Vec<String> = (0..1000).map(|i| format!("t{}", i % 500)).collect();
    toks.extend((0..1000).map(|i| format!("u{}", i % 300)));
    assert_eq!(sttr(&toks, 1000).value, 0.4);
}
