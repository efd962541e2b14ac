//! Slow reference implementations of NIST and CIDEr. N-grams are plain
//! vectors counted by linear scans so nothing is shared with the library.

#![allow(dead_code)]

pub type Sent = Vec<String>;

pub fn sent(s: &str) -> Sent {
    s.split_whitespace().map(str::to_string).collect()
}

fn grams(s: &[String], n: usize) -> Vec<Vec<String>> {
    if s.len() < n {
        return Vec::new();
    }
    (0..=s.len() - n).map(|i| s[i..i + n].to_vec()).collect()
}

fn count(list: &[Vec<String>], g: &[String]) -> usize {
    list.iter().filter(|x| x.as_slice() == g).count()
}

fn distinct(list: &[Vec<String>]) -> Vec<Vec<String>> {
    let mut out: Vec<Vec<String>> = Vec::new();
    for g in list {
        if !out.contains(g) {
            out.push(g.clone());
        }
    }
    out
}

/// Hypothesis n-gram occurrences that also occur in some reference, each
/// n-gram type credited at most its largest count in a single reference.
fn matched(hyp: &[String], refs: &[Sent], n: usize) -> Vec<(Vec<String>, usize)> {
    let h = grams(hyp, n);
    distinct(&h)
        .into_iter()
        .filter_map(|g| {
            let best = refs.iter().map(|r| count(&grams(r, n), &g)).max().unwrap_or(0);
            let m = count(&h, &g).min(best);
            (m > 0).then_some((g, m))
        })
        .collect()
}

/// Doddington's NIST score: information-weighted matches per order, summed,
/// times exp(β·ln²(min(L_sys / L_ref, 1))) where β makes the factor 0.5 at a
/// length ratio of 2/3.
pub fn nist(corpus: &[(Sent, Vec<Sent>)], max_n: usize) -> f64 {
    let all_refs: Vec<&Sent> = corpus.iter().flat_map(|(_, r)| r).collect();
    let ref_grams = |n: usize| -> Vec<Vec<String>> { all_refs.iter().flat_map(|r| grams(r, n)).collect() };
    let words: usize = all_refs.iter().map(|r| r.len()).sum();
    let mut total = 0.0;
    for n in 1..=max_n {
        let this = ref_grams(n);
        let shorter = if n > 1 { ref_grams(n - 1) } else { Vec::new() };
        let mut num = 0.0;
        let mut den = 0usize;
        for (hyp, refs) in corpus {
            den += grams(hyp, n).len();
            for (g, m) in matched(hyp, refs, n) {
                let prefix = if n == 1 { words } else { count(&shorter, &g[..n - 1]) };
                num += m as f64 * (prefix as f64 / count(&this, &g) as f64).log2();
            }
        }
        if den > 0 {
            total += num / den as f64;
        }
    }
    let sys: usize = corpus.iter().map(|(h, _)| h.len()).sum();
    let avg_ref: f64 =
        corpus.iter().map(|(_, r)| r.iter().map(Vec::len).sum::<usize>() as f64 / r.len() as f64).sum();
    if sys == 0 {
        return 0.0;
    }
    let beta = 0.5f64.ln() / (2.0f64 / 3.0).ln().powi(2);
    let ratio = (sys as f64 / avg_ref).min(1.0);
    total * (beta * ratio.ln().powi(2)).exp()
}

/// CIDEr with raw term frequencies and idf ln(N / max(1, df)), where df is the
/// number of pairs whose references contain the n-gram.
pub fn cider(corpus: &[(Sent, Vec<Sent>)], max_n: usize) -> f64 {
    let docs = corpus.len() as f64;
    let df = |g: &[String]| -> f64 {
        let n = g.len();
        corpus.iter().filter(|(_, refs)| refs.iter().any(|r| count(&grams(r, n), g) > 0)).count().max(1) as f64
    };
    let vector = |s: &[String], n: usize| -> Vec<(Vec<String>, f64)> {
        let all = grams(s, n);
        distinct(&all).into_iter().map(|g| {
            let w = count(&all, &g) as f64 * (docs / df(&g)).ln();
            (g, w)
        }).collect()
    };
    let norm = |v: &[(Vec<String>, f64)]| v.iter().map(|(_, w)| w * w).sum::<f64>().sqrt();
    let mut sum = 0.0;
    for (hyp, refs) in corpus {
        let mut pair = 0.0;
        for n in 1..=max_n {
            let hv = vector(hyp, n);
            let mut sims = 0.0;
            for r in refs {
                let rv = vector(r, n);
                let dot: f64 =
                    hv.iter().map(|(g, w)| w * rv.iter().find(|(h, _)| h == g).map_or(0.0, |(_, x)| *x)).sum();
                let d = norm(&hv) * norm(&rv);
                if d > 0.0 {
                    sims += dot / d;
                }
            }
            pair += sims / refs.len() as f64;
        }
        sum += 10.0 * pair / max_n as f64;
    }
    sum / docs
}

/// Fixed small corpora: single and multi reference, with repeated n-grams,
/// partial matches and a short hypothesis to trigger the brevity factor.
pub fn fixed_corpora() -> Vec<Vec<(Sent, Vec<Sent>)>> {
    let pair = |h: &str, rs: &[&str]| (sent(h), rs.iter().map(|r| sent(r)).collect::<Vec<_>>());
    vec![
        vec![
            pair("the cat sat on the mat", &["the cat is on the mat"]),
            pair("there is a cat on the mat", &["a cat is on the mat"]),
        ],
        vec![
            pair("Kärpät voitti Ilveksen 3-2", &["Kärpät voitti Ilveksen maalein 3-2", "Kärpät kaatoi Ilveksen 3-2"]),
            pair("Blues vei voiton Ässistä", &["Blues vei voiton Ässistä maalein 4-0"]),
            pair("a a a b", &["a a b b", "b a a"]),
            pair("x y", &["z w x y", "y x"]),
        ],
        vec![
            pair("Koivu teki maalin", &["Koivu teki maalin ylivoimalla toisessa erässä"]),
            pair("Selänne syötti", &["Selänne ja Koivu syöttivät"]),
            pair("maali maali maali", &["maali tuli"]),
        ],
    ]
}
