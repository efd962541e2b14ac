//! Brute-force reference computations for the chain CRF: path scores from
//! the public weight accessors and exhaustive enumeration of labelings.

#![allow(dead_code)]

use hockeygen::select::{CrfModel, EventFeatures, Label};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FEATURES: [&str; 5] = ["f0", "f1", "f2", "f3", "f4"];

pub fn random_instance(rng: &mut ChaCha8Rng, len: usize) -> (CrfModel, Vec<EventFeatures>) {
    let mut model = CrfModel::new(FEATURES.iter().map(|s| s.to_string()).collect());
    let w: Vec<f64> = (0..model.weights().len()).map(|_| rng.random_range(-2.0..2.0)).collect();
    model.set_weights(&w);
    let mut seq = Vec::with_capacity(len);
    for _ in 0..len {
        let mut feats = Vec::new();
        for f in FEATURES {
            if rng.random_bool(0.6) {
                feats.push((f.to_string(), rng.random_range(0.0..1.5)));
            }
        }
        seq.push(feats);
    }
    (model, seq)
}

pub fn labels_of(mask: usize, len: usize) -> Vec<Label> {
    (0..len).map(|t| Label::from_bool(mask >> t & 1 == 1)).collect()
}

/// Path score computed from the public weight accessors only.
pub fn oracle_score(model: &CrfModel, seq: &[EventFeatures], labels: &[Label]) -> f64 {
    let mut s = 0.0;
    for (t, (feats, &y)) in seq.iter().zip(labels).enumerate() {
        for (name, v) in feats {
            s += v * model.emission(name, y).unwrap();
        }
        if t > 0 {
            s += model.transition(labels[t - 1], y);
        }
    }
    s
}

pub fn oracle_log_z(model: &CrfModel, seq: &[EventFeatures]) -> f64 {
    let n = seq.len();
    let scores: Vec<f64> = (0..1usize << n).map(|m| oracle_score(model, seq, &labels_of(m, n))).collect();
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln()
}

pub fn oracle_argmax(model: &CrfModel, seq: &[EventFeatures]) -> Vec<Label> {
    let n = seq.len();
    let best = (0..1usize << n)
        .max_by(|&a, &b| {
            oracle_score(model, seq, &labels_of(a, n)).total_cmp(&oracle_score(model, seq, &labels_of(b, n)))
        })
        .unwrap();
    labels_of(best, n)
}

/// Deterministic generator for instance streams.
pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
