//! Finite-difference and distribution checks for the pointer-generator on a
//! tiny double-precision model (hidden 8, vocabulary 20).

#![allow(dead_code)]

use hockeygen::pgen::{batch_loss, decode_step, encode, Example, PgConfig, PgModel, Vocabulary, BOS};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

pub fn tiny_config(seed: u64) -> PgConfig {
    PgConfig {
        embedding_dim: 6,
        hidden_dim: 8,
        batch_size: 4,
        init_scale: 0.5,
        coverage_loss_weight: 0.7,
        seed,
        ..Default::default()
    }
}

/// 20-token vocabulary shared by source and target.
pub fn tiny_vocab() -> Vocabulary {
    Vocabulary::build(&[toks("a b c d e f g h i j k l m n o p")], 1)
}

pub fn tiny_model(seed: u64) -> PgModel<f64> {
    let v = tiny_vocab();
    PgModel::new(tiny_config(seed), v.clone(), v).unwrap()
}

/// Includes out-of-vocabulary source words, a copied target word, an unknown
/// target word and uneven lengths.
pub fn tiny_examples(model: &PgModel<f64>) -> Vec<Example> {
    [("a b Koivu c", "Koivu a a b"), ("d e f g h i Teemu Teemu", "e Teemu zz f"), ("k", "k l")]
        .iter()
        .map(|(s, t)| model.example(&toks(s), &toks(t)).unwrap())
        .collect()
}

/// One parameter entry whose analytic and numeric derivatives disagree most
/// within its tensor.
#[derive(Debug, Clone)]
pub struct GradientError {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub relative: f64,
}

/// Central differences with step 1e-5 for every entry of every tensor.
/// Entries where both derivatives are below 1e-8 count as agreeing.
pub fn gradient_errors(model: &PgModel<f64>, examples: &[Example], dropout: bool) -> Vec<GradientError> {
    let refs: Vec<&Example> = examples.iter().collect();
    let loss_at = |m: &PgModel<f64>, grads: bool| {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        batch_loss(&m.params, &refs, &m.config, dropout.then_some(&mut rng), grads).unwrap()
    };
    let analytic = loss_at(model, true).grads.unwrap();
    let h = 1e-5;
    let mut out = Vec::new();
    for (ti, tensor) in model.params.tensors.iter().enumerate() {
        let mut worst = GradientError { tensor: tensor.name.clone(), index: 0, analytic: 0.0, numeric: 0.0, relative: 0.0 };
        let mut m = model.clone();
        for i in 0..tensor.data.len() {
            let x = tensor.data[i];
            m.params.tensors[ti].data[i] = x + h;
            let up = loss_at(&m, false).loss;
            m.params.tensors[ti].data[i] = x - h;
            let down = loss_at(&m, false).loss;
            m.params.tensors[ti].data[i] = x;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[ti][i];
            let scale = a.abs().max(numeric.abs());
            let relative = if scale < 1e-8 { 0.0 } else { (a - numeric).abs() / scale };
            if relative >= worst.relative {
                worst = GradientError { tensor: tensor.name.clone(), index: i, analytic: a, numeric, relative };
            }
        }
        out.push(worst);
    }
    out
}

/// Summary of decode-step distribution checks over random models and states.
#[derive(Debug, Clone, Default)]
pub struct CopyReport {
    pub states: usize,
    /// Largest |Σ P(w) − 1|.
    pub max_sum_error: f64,
    /// Gate forced to 1 gave exactly the vocabulary softmax and gate 0
    /// exactly the aggregated attention, at every state.
    pub extremes_exact: bool,
    /// Coverage equalled the running attention sum exactly at every state.
    pub coverage_exact: bool,
    /// Largest deviation of the unforced distribution from the gate mixture.
    pub max_mixture_error: f64,
}

pub fn random_source(rng: &mut ChaCha8Rng, vocab: &Vocabulary) -> Vec<String> {
    let n = rng.random_range(1..10);
    (0..n)
        .map(|_| {
            if rng.random_bool(0.3) {
                format!("Name{}", rng.random_range(0..4))
            } else {
                vocab.tokens()[rng.random_range(4..vocab.len())].clone()
            }
        })
        .collect()
}

/// 50 random models, 20 decode steps each, with random previous tokens.
pub fn copy_report() -> CopyReport {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut r = CopyReport { extremes_exact: true, coverage_exact: true, ..Default::default() };
    for seed in 0..50 {
        let model = tiny_model(seed);
        let src = random_source(&mut rng, &model.src_vocab);
        let enc = encode(&model, &src).unwrap();
        let v = model.tgt_vocab.len();
        let ext = v + enc.example.oov.len();
        let mut state = enc.initial_state();
        let mut running = vec![0.0f64; src.len()];
        let mut prev = BOS;
        for _ in 0..20 {
            let (dist, next) = decode_step(&model, &enc, &state, prev, None);
            r.max_sum_error = r.max_sum_error.max((dist.iter().sum::<f64>() - 1.0).abs());
            for (c, a) in running.iter_mut().zip(&next.attention) {
                *c += a;
            }
            r.coverage_exact &= next.coverage == running;

            let (vocab_only, _) = decode_step(&model, &enc, &state, prev, Some(1.0));
            let (copy_only, _) = decode_step(&model, &enc, &state, prev, Some(0.0));
            let pv = &vocab_only[..v];
            let mut copy = vec![0.0; ext];
            for (&id, &a) in enc.example.src_ext.iter().zip(&next.attention) {
                copy[id] += a;
            }
            r.extremes_exact &= vocab_only[v..].iter().all(|&x| x == 0.0) && copy_only == copy;
            // The vocabulary part must itself be a softmax over the fixed vocabulary.
            r.extremes_exact &= (pv.iter().sum::<f64>() - 1.0).abs() <= 1e-12;

            let g = next.p_gen.unwrap();
            for (i, &x) in dist.iter().enumerate() {
                let expect = if i < v { g * pv[i] + (1.0 - g) * copy[i] } else { (1.0 - g) * copy[i] };
                r.max_mixture_error = r.max_mixture_error.max((x - expect).abs());
            }
            prev = rng.random_range(0..ext);
            state = next;
            r.states += 1;
        }
    }
    r
}
