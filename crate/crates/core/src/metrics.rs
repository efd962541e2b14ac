//! Automatic evaluation: BLEU, NIST, ROUGE-L, CIDEr, WER and STTR.
//!
//! BLEU and NIST are corpus-level. ROUGE-L and CIDEr are averaged over
//! pairs. Multi-reference handling follows the E2E challenge scorer: n-gram
//! clipping against the per-n-gram maximum over references, closest
//! reference length for BLEU, maximum precision and recall for ROUGE-L, and
//! averaged similarity over references for CIDEr.

use std::collections::{HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::Flagged;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricError {
    #[error("pair {0} has no references")]
    NoReferences(usize),
    #[error("pair {0} has an empty reference")]
    EmptyReference(usize),
    #[error("empty reference")]
    EmptyWerReference,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalPair {
    pub hypothesis: Vec<String>,
    pub references: Vec<Vec<String>>,
}

impl EvalPair {
    pub fn new(hypothesis: Vec<String>, references: Vec<Vec<String>>) -> Self {
        EvalPair { hypothesis, references }
    }

    /// Convenience constructor from whitespace-tokenized strings.
    pub fn from_strs(hypothesis: &str, references: &[&str]) -> Self {
        let split = |s: &str| s.split_whitespace().map(str::to_string).collect::<Vec<_>>();
        EvalPair { hypothesis: split(hypothesis), references: references.iter().map(|r| split(r)).collect() }
    }
}

fn check_references(corpus: &[EvalPair], allow_empty: bool) -> Result<(), MetricError> {
    for (i, p) in corpus.iter().enumerate() {
        if p.references.is_empty() {
            return Err(MetricError::NoReferences(i));
        }
        if !allow_empty && p.references.iter().any(Vec::is_empty) {
            return Err(MetricError::EmptyReference(i));
        }
    }
    Ok(())
}

type NGram<'a> = &'a [String];

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<NGram<'_>, usize> {
    let mut m = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

fn max_ref_counts(refs: &[Vec<String>], n: usize) -> HashMap<NGram<'_>, usize> {
    let mut m: HashMap<NGram<'_>, usize> = HashMap::new();
    for r in refs {
        for (g, c) in ngram_counts(r, n) {
            let e = m.entry(g).or_insert(0);
            *e = (*e).max(c);
        }
    }
    m
}

fn clipped_hits(hyp: &[String], refs: &[Vec<String>], n: usize) -> HashMap<Vec<String>, usize> {
    let max_ref = max_ref_counts(refs, n);
    ngram_counts(hyp, n)
        .into_iter()
        .filter_map(|(g, c)| {
            let hits = c.min(max_ref.get(g).copied().unwrap_or(0));
            (hits > 0).then(|| (g.to_vec(), hits))
        })
        .collect()
}

/// Corpus BLEU with uniform weights over n = 1..=`max_n`, no smoothing.
pub fn bleu(corpus: &[EvalPair], max_n: usize) -> Result<f64, MetricError> {
    check_references(corpus, true)?;
    let mut hits = vec![0usize; max_n];
    let mut totals = vec![0usize; max_n];
    let (mut cand_len, mut ref_len) = (0usize, 0usize);
    for p in corpus {
        let c = p.hypothesis.len();
        cand_len += c;
        ref_len += p
            .references
            .iter()
            .map(Vec::len)
            .min_by_key(|&r| (r.abs_diff(c), r))
            .unwrap_or(0);
        for n in 1..=max_n {
            hits[n - 1] += clipped_hits(&p.hypothesis, &p.references, n).values().sum::<usize>();
            totals[n - 1] += c.saturating_sub(n - 1);
        }
    }
    if cand_len == 0 || hits.iter().any(|&h| h == 0) {
        return Ok(0.0);
    }
    let log_prec: f64 = hits
        .iter()
        .zip(&totals)
        .map(|(&h, &t)| (h as f64 / t as f64).ln())
        .sum::<f64>()
        / max_n as f64;
    let bp = if cand_len < ref_len { (1.0 - ref_len as f64 / cand_len as f64).exp() } else { 1.0 };
    Ok(bp * log_prec.exp())
}

/// Length penalty factor β: the penalty is 0.5 when the system output is
/// two thirds of the reference length.
fn nist_beta() -> f64 {
    -(0.5f64.ln()) / 1.5f64.ln().powi(2)
}

/// Corpus NIST score with information weights estimated from all reference
/// n-grams in the corpus.
pub fn nist(corpus: &[EvalPair], max_n: usize) -> Result<f64, MetricError> {
    check_references(corpus, true)?;
    // Reference n-gram counts for orders 0..=max_n; order 0 is the total
    // reference word count.
    let mut ref_counts: Vec<HashMap<NGram<'_>, usize>> = vec![HashMap::new(); max_n + 1];
    let mut total_ref_words = 0usize;
    let mut avg_ref_len = 0.0f64;
    for p in corpus {
        for r in &p.references {
            total_ref_words += r.len();
            for n in 1..=max_n {
                for (g, c) in ngram_counts(r, n) {
                    *ref_counts[n].entry(g).or_insert(0) += c;
                }
            }
        }
        avg_ref_len +=
            p.references.iter().map(Vec::len).sum::<usize>() as f64 / p.references.len() as f64;
    }
    let info = |g: &[String]| -> f64 {
        let n = g.len();
        let num = if n == 1 { total_ref_words } else { ref_counts[n - 1][&g[..n - 1]] };
        (num as f64 / ref_counts[n][g] as f64).log2()
    };

    let mut score = 0.0;
    let mut sys_len = 0usize;
    for n in 1..=max_n {
        let mut weighted = 0.0;
        let mut total = 0usize;
        for p in corpus {
            total += p.hypothesis.len().saturating_sub(n - 1);
            for (g, h) in clipped_hits(&p.hypothesis, &p.references, n) {
                weighted += info(&g) * h as f64;
            }
        }
        if n == 1 {
            sys_len = total;
        }
        if total > 0 {
            score += weighted / total as f64;
        }
    }
    if sys_len == 0 || avg_ref_len == 0.0 {
        return Ok(0.0);
    }
    let ratio = sys_len as f64 / avg_ref_len;
    let penalty = if ratio >= 1.0 { 1.0 } else { (-nist_beta() * ratio.ln().powi(2)).exp() };
    Ok(score * penalty)
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub const ROUGE_BETA: f64 = 1.2;

/// ROUGE-L F-measure of one hypothesis against its references.
pub fn rouge_l_pair(p: &EvalPair) -> f64 {
    let (mut prec, mut rec) = (0.0f64, 0.0f64);
    for r in &p.references {
        let l = lcs_len(&p.hypothesis, r) as f64;
        if !p.hypothesis.is_empty() {
            prec = prec.max(l / p.hypothesis.len() as f64);
        }
        rec = rec.max(l / r.len() as f64);
    }
    if prec == 0.0 || rec == 0.0 {
        return 0.0;
    }
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * prec * rec / (rec + b2 * prec)
}

/// Mean ROUGE-L over pairs.
pub fn rouge_l(corpus: &[EvalPair]) -> Result<f64, MetricError> {
    check_references(corpus, false)?;
    if corpus.is_empty() {
        return Ok(0.0);
    }
    Ok(corpus.iter().map(rouge_l_pair).sum::<f64>() / corpus.len() as f64)
}

/// CIDEr: tf-idf cosine similarity over n = 1..=`max_n`, averaged over
/// references and orders, times 10, averaged over pairs. Document frequencies
/// come from the reference sets. A corpus with fewer than two reference sets
/// gives zero idf everywhere and is flagged.
pub fn cider(corpus: &[EvalPair], max_n: usize) -> Result<Flagged<f64>, MetricError> {
    check_references(corpus, true)?;
    if corpus.is_empty() {
        return Ok(Flagged::flagged(0.0, "empty corpus"));
    }
    let mut df: Vec<HashMap<NGram<'_>, usize>> = vec![HashMap::new(); max_n + 1];
    for p in corpus {
        for n in 1..=max_n {
            let seen: HashSet<NGram<'_>> =
                p.references.iter().flat_map(|r| ngram_counts(r, n).into_keys()).collect();
            for g in seen {
                *df[n].entry(g).or_insert(0) += 1;
            }
        }
    }
    let log_docs = (corpus.len() as f64).ln();
    let vector = |tokens: &[String], n: usize| -> (HashMap<Vec<String>, f64>, f64) {
        let v: HashMap<Vec<String>, f64> = ngram_counts(tokens, n)
            .into_iter()
            .map(|(g, tf)| {
                let d = df[n].get(g).copied().unwrap_or(0).max(1) as f64;
                (g.to_vec(), tf as f64 * (log_docs - d.ln()))
            })
            .collect();
        let norm = v.values().map(|x| x * x).sum::<f64>().sqrt();
        (v, norm)
    };

    let mut total = 0.0;
    for p in corpus {
        let mut per_n = 0.0;
        for n in 1..=max_n {
            let (hv, hn) = vector(&p.hypothesis, n);
            for r in &p.references {
                let (rv, rn) = vector(r, n);
                let dot: f64 = hv.iter().map(|(g, x)| x * rv.get(g).copied().unwrap_or(0.0)).sum();
                if hn != 0.0 && rn != 0.0 {
                    per_n += dot / (hn * rn);
                }
            }
        }
        total += per_n / max_n as f64 / p.references.len() as f64 * 10.0;
    }
    let score = total / corpus.len() as f64;
    let distinct: HashSet<&Vec<Vec<String>>> = corpus.iter().map(|p| &p.references).collect();
    Ok(if distinct.len() < 2 {
        Flagged::flagged(score, "fewer than two distinct reference sets: idf is degenerate")
    } else {
        Flagged::ok(score)
    })
}

/// Tokens made only of these characters are dropped by the punctuation-free
/// WER variant.
pub const WER_PUNCTUATION: &[char] =
    &['.', ',', ':', ';', '!', '?', '(', ')', '[', ']', '"', '\'', '«', '»', '-', '–', '—'];

pub fn is_punctuation(token: &str) -> bool {
    !token.is_empty() && token.chars().all(|c| WER_PUNCTUATION.contains(&c))
}

/// Token-level Levenshtein distance with unit costs.
pub fn edit_distance<S: PartialEq>(a: &[S], b: &[S]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn strip_punct(t: &[String]) -> Vec<&str> {
    t.iter().map(String::as_str).filter(|x| !is_punctuation(x)).collect()
}

/// Word error rate: edits divided by reference length.
pub fn wer(hypothesis: &[String], reference: &[String], ignore_punctuation: bool) -> Result<f64, MetricError> {
    let (edits, len) = wer_counts(hypothesis, reference, ignore_punctuation);
    if len == 0 {
        return Err(MetricError::EmptyWerReference);
    }
    Ok(edits as f64 / len as f64)
}

/// `(edits, reference length)`, for corpus-level aggregation.
pub fn wer_counts(hypothesis: &[String], reference: &[String], ignore_punctuation: bool) -> (usize, usize) {
    if ignore_punctuation {
        let (h, r) = (strip_punct(hypothesis), strip_punct(reference));
        (edit_distance(&h, &r), r.len())
    } else {
        (edit_distance(hypothesis, reference), reference.len())
    }
}

/// Corpus WER: total edits over total reference length, first reference of
/// each pair.
pub fn corpus_wer(corpus: &[EvalPair], ignore_punctuation: bool) -> Result<f64, MetricError> {
    check_references(corpus, false)?;
    let (mut edits, mut len) = (0, 0);
    for p in corpus {
        let (e, l) = wer_counts(&p.hypothesis, &p.references[0], ignore_punctuation);
        edits += e;
        len += l;
    }
    if len == 0 {
        return Err(MetricError::EmptyWerReference);
    }
    Ok(edits as f64 / len as f64)
}

pub const STTR_SEGMENT: usize = 1000;

/// Standardized type-token ratio over consecutive full segments. A trailing
/// partial segment is discarded; input shorter than one segment falls back
/// to the plain type-token ratio. Both situations are flagged.
pub fn sttr<S: AsRef<str>>(tokens: &[S], segment: usize) -> Flagged<f64> {
    assert!(segment > 0, "segment length must be positive");
    if tokens.is_empty() {
        return Flagged::flagged(0.0, "no tokens");
    }
    let ttr = |seg: &[S]| {
        let types: HashSet<&str> = seg.iter().map(AsRef::as_ref).collect();
        types.len() as f64 / seg.len() as f64
    };
    if tokens.len() < segment {
        return Flagged::flagged(
            ttr(tokens),
            format!("{} tokens is shorter than one segment: plain type-token ratio", tokens.len()),
        );
    }
    let full = tokens.len() / segment;
    let mean = tokens.chunks_exact(segment).map(ttr).sum::<f64>() / full as f64;
    let rest = tokens.len() % segment;
    if rest > 0 {
        Flagged::flagged(mean, format!("{rest} trailing tokens discarded"))
    } else {
        Flagged::ok(mean)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu: f64,
    pub nist: f64,
    pub rouge_l: f64,
    pub cider: f64,
    pub wer: Option<f64>,
}

impl MetricReport {
    /// Computes the full suite. WER uses the first reference of each pair.
    pub fn compute(corpus: &[EvalPair], with_wer: bool) -> Result<Self, MetricError> {
        Ok(MetricReport {
            bleu: bleu(corpus, 4)?,
            nist: nist(corpus, 5)?,
            rouge_l: rouge_l(corpus)?,
            cider: cider(corpus, 4)?.value,
            wer: if with_wer { Some(corpus_wer(corpus, false)?) } else { None },
        })
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "BLEU: {:.4}", self.bleu)?;
        writeln!(f, "NIST: {:.4}", self.nist)?;
        writeln!(f, "ROUGE_L: {:.4}", self.rouge_l)?;
        write!(f, "CIDEr: {:.4}", self.cider)?;
        if let Some(w) = self.wer {
            write!(f, "\nWER: {w:.4}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn bleu_identity_and_disjoint() {
        let c = vec![EvalPair::from_strs("a b c d e", &["a b c d e"]), EvalPair::from_strs("x y z w", &["x y z w"])];
        assert!((bleu(&c, 4).unwrap() - 1.0).abs() < 1e-12);
        let c = vec![EvalPair::from_strs("p q r s", &["a b c d"])];
        assert_eq!(bleu(&c, 4).unwrap(), 0.0);
        assert_eq!(bleu(&[], 4).unwrap(), 0.0);
    }

    #[test]
    fn bleu_brevity_toy() {
        let c = vec![EvalPair::from_strs("a b c d e", &["a b c d e f"])];
        let expected = (1.0f64 - 6.0 / 5.0).exp();
        assert!((bleu(&c, 4).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 0.81873).abs() < 1e-5);
    }

    #[test]
    fn bleu_closest_reference_length_prefers_shorter_on_tie() {
        // c = 4; refs of length 3 and 5 are equally close, the shorter wins, so BP = 1.
        let c = vec![EvalPair::from_strs("a b c d", &["a b c", "a b c d e"])];
        assert!((bleu(&c, 2).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rouge_l_toy() {
        let c = vec![EvalPair::from_strs("a b", &["a c b"])];
        let (p, r, b2) = (1.0, 2.0 / 3.0, 1.44);
        let expected = (1.0 + b2) * p * r / (r + b2 * p);
        assert!((rouge_l(&c).unwrap() - expected).abs() < 1e-12);
        assert_eq!(rouge_l(&[EvalPair::from_strs("a", &["a"])]).unwrap(), 1.0);
        assert_eq!(rouge_l(&[EvalPair::from_strs("a", &["b"])]).unwrap(), 0.0);
        assert!(rouge_l(&[EvalPair::new(t("a"), vec![vec![]])]).is_err());
    }

    #[test]
    fn wer_cases() {
        assert_eq!(wer(&t("a x c"), &t("a b c d"), false).unwrap(), 0.5);
        assert_eq!(wer(&t("a b"), &t("a b"), false).unwrap(), 0.0);
        assert_eq!(wer(&[], &t("a b c"), false).unwrap(), 1.0);
        assert_eq!(wer(&t("a"), &[], false), Err(MetricError::EmptyWerReference));
        assert_eq!(wer(&t("a , b ."), &t("a b ."), true).unwrap(), 0.0);
        assert_eq!(wer(&t("a x c y"), &t("a b c d"), false).unwrap(), 0.5);
    }

    #[test]
    fn sttr_cases() {
        let mut toks: Vec<String> = (0..500).map(|i| format!("w{i}")).collect();
        toks.extend((0..500).map(|i| format!("w{}", i % 10)));
        toks.extend((0..1000).map(|i| format!("v{}", i % 300)));
        // First segment: 500 types; second: 300.
        let s = sttr(&toks, 1000);
        assert_eq!(s.value, 0.4);
        assert!(s.flag.is_none());

        let same = vec!["x"; 2000];
        assert_eq!(sttr(&same, 1000).value, 1.0 / 1000.0);

        let s = sttr(&toks[..1500], 1000);
        assert_eq!(s.value, 0.5);
        assert!(s.flag.unwrap().contains("500"));

        let s = sttr(&["a", "b", "a"], 1000);
        assert!((s.value - 2.0 / 3.0).abs() < 1e-12);
        assert!(s.flag.is_some());
    }

    #[test]
    fn cider_disjoint_and_single_pair_flag() {
        let c = vec![EvalPair::from_strs("a b", &["c d"]), EvalPair::from_strs("e f", &["g h"])];
        assert_eq!(cider(&c, 4).unwrap().value, 0.0);
        let one = vec![EvalPair::from_strs("a b", &["a b"])];
        assert!(cider(&one, 4).unwrap().flag.is_some());
    }

    #[test]
    fn report_format() {
        let c = vec![EvalPair::from_strs("a b c d", &["a b c d"]), EvalPair::from_strs("e f g h", &["e f g x"])];
        let r = MetricReport::compute(&c, true).unwrap();
        let text = r.to_string();
        let keys: Vec<&str> = text.lines().map(|l| l.split(':').next().unwrap()).collect();
        assert_eq!(keys, ["BLEU", "NIST", "ROUGE_L", "CIDEr", "WER"]);
        assert!((0.0..=1.0).contains(&r.bleu));
    }
}
