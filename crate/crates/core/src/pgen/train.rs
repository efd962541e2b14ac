use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::metrics::{bleu, EvalPair};

use super::checkpoint::save_state;
use super::decode::{encode_example, greedy_decode};
use super::net::batch_loss;
use super::params::Params;
use super::real::Real;
use super::vocab::Example;
use super::{PgError, PgModel, SelectBy};

const DROPOUT_SEED_MIX: u64 = 0x9e37_79b9_7f4a_7c15;

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<R> {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub t: u64,
    pub m: Vec<Vec<R>>,
    pub v: Vec<Vec<R>>,
}

impl<R: Real> Adam<R> {
    pub fn new(params: &Params<R>, learning_rate: f64) -> Self {
        Adam { learning_rate, beta1: 0.9, beta2: 0.999, epsilon: 1e-8, t: 0, m: params.zeros_like(), v: params.zeros_like() }
    }

    pub fn step(&mut self, params: &mut Params<R>, grads: &[Vec<R>]) {
        self.t += 1;
        let (b1, b2) = (R::from_f64(self.beta1), R::from_f64(self.beta2));
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let lr = R::from_f64(self.learning_rate * c2.sqrt() / c1);
        let eps = R::from_f64(self.epsilon * c2.sqrt());
        let one = R::one();
        for (((p, g), m), v) in params.tensors.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..g.len() {
                m[i] = b1 * m[i] + (one - b1) * g[i];
                v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
                p.data[i] = p.data[i] - lr * m[i] / (v[i].sqrt() + eps);
            }
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainLogEntry {
    pub step: usize,
    pub train_loss: f64,
    pub valid_loss: Option<f64>,
    pub checkpoint: Option<PathBuf>,
}

impl fmt::Display for TrainLogEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "step={} train_loss={:.6}", self.step, self.train_loss)?;
        match self.valid_loss {
            Some(v) => write!(f, " valid_loss={v:.6}")?,
            None => write!(f, " valid_loss=-")?,
        }
        match &self.checkpoint {
            Some(p) => write!(f, " checkpoint={}", p.display()),
            None => write!(f, " checkpoint=-"),
        }
    }
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<R: Real> {
    /// Current model.
    pub model: PgModel<R>,
    pub adam: Adam<R>,
    /// Completed optimizer steps.
    pub step: usize,
    pub best_params: Params<R>,
    /// Best validation score so far (lower is better).
    pub best_score: Option<f64>,
    pub best_step: usize,
    /// Validations since the last improvement.
    pub stale: usize,
    pub initial_loss: Option<f64>,
}

impl<R: Real> TrainState<R> {
    pub fn new(model: PgModel<R>) -> Self {
        let adam = Adam::new(&model.params, model.config.learning_rate);
        let best_params = model.params.clone();
        TrainState { model, adam, step: 0, best_params, best_score: None, best_step: 0, stale: 0, initial_loss: None }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<R: Real> {
    /// Model with the selected parameters.
    pub model: PgModel<R>,
    pub best_step: usize,
    /// Final state, including the last parameters.
    pub state: TrainState<R>,
    pub log: Vec<TrainLogEntry>,
    pub stopped_early: bool,
}

/// Indices of the examples in the batch of `step`: consecutive slices of a
/// fresh seeded permutation per pass over the data.
fn batch_indices(seed: u64, step: usize, batch: usize, n: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(batch);
    let mut pos = step * batch;
    let mut perm: Option<(usize, Vec<usize>)> = None;
    while out.len() < batch {
        let epoch = pos / n;
        if perm.as_ref().is_none_or(|(e, _)| *e != epoch) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(epoch as u64);
            let mut p: Vec<usize> = (0..n).collect();
            p.shuffle(&mut rng);
            perm = Some((epoch, p));
        }
        out.push(perm.as_ref().expect("set above").1[pos % n]);
        pos += 1;
    }
    out
}

/// Mean per-example loss over a dataset, without dropout.
pub fn dataset_loss<R: Real>(model: &PgModel<R>, data: &[Example]) -> Result<f64, PgError> {
    if data.is_empty() {
        return Err(PgError::EmptyDataset);
    }
    let mut total = 0.0;
    for chunk in data.chunks(model.config.batch_size) {
        let refs: Vec<&Example> = chunk.iter().collect();
        total += batch_loss(&model.params, &refs, &model.config, None, false)?.loss * chunk.len() as f64;
    }
    Ok(total / data.len() as f64)
}

/// Corpus BLEU-4 of greedy decodes against the example targets.
pub fn dataset_bleu<R: Real>(model: &PgModel<R>, data: &[Example]) -> f64 {
    let pairs: Vec<EvalPair> = data
        .iter()
        .map(|ex| {
            let enc = encode_example(model, ex);
            let hyp = greedy_decode(model, &enc, model.config.max_decode_len).tokens;
            let reference =
                ex.tgt[..ex.tgt.len() - 1].iter().map(|&id| ex.token(id, &model.tgt_vocab).to_string()).collect();
            EvalPair::new(hyp, vec![reference])
        })
        .collect();
    bleu(&pairs, 4).unwrap_or(0.0)
}

fn global_norm<R: Real>(grads: &[Vec<R>]) -> f64 {
    grads.iter().flatten().map(|g| g.as_f64() * g.as_f64()).sum::<f64>().sqrt()
}

/// Trains for `config.max_steps` steps from fresh optimizer state.
pub fn train<R: Real>(
    model: PgModel<R>,
    train: &[Example],
    valid: &[Example],
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutcome<R>, PgError> {
    let until = model.config.max_steps;
    train_resume(TrainState::new(model), train, valid, checkpoint_dir, until)
}

/// Continues training from `state` up to step `until`.
///
/// The batch and dropout masks of each step depend only on the seed and the
/// step number, so stopping and resuming reproduces an uninterrupted run.
pub fn train_resume<R: Real>(
    mut state: TrainState<R>,
    train: &[Example],
    valid: &[Example],
    checkpoint_dir: Option<&Path>,
    until: usize,
) -> Result<TrainOutcome<R>, PgError> {
    if train.is_empty() {
        return Err(PgError::EmptyDataset);
    }
    let cfg = state.model.config.clone();
    cfg.validate()?;
    if let Some(dir) = checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut log = Vec::new();
    let mut stopped_early = false;
    let mut window = Vec::new();
    while state.step < until {
        let step = state.step;
        let idx = batch_indices(cfg.seed, step, cfg.batch_size, train.len());
        let batch: Vec<&Example> = idx.iter().map(|&i| &train[i]).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ DROPOUT_SEED_MIX);
        rng.set_stream(step as u64);
        let out = batch_loss(&state.model.params, &batch, &cfg, Some(&mut rng), true)
            .map_err(|e| match e {
                PgError::NonFinite { .. } => PgError::NonFinite { step: step + 1 },
                e => e,
            })?;
        let initial = *state.initial_loss.get_or_insert(out.loss);
        if out.loss > 10.0 * initial {
            log::error!("diverged at step {}: loss {:.4}, initial {:.4}", step + 1, out.loss, initial);
            return Err(PgError::Diverged { step: step + 1, loss: out.loss, initial });
        }
        let mut grads = out.grads.expect("gradients requested");
        let norm = global_norm(&grads);
        if !norm.is_finite() {
            return Err(PgError::NonFinite { step: step + 1 });
        }
        if cfg.max_grad_norm > 0.0 && norm > cfg.max_grad_norm {
            let s = R::from_f64(cfg.max_grad_norm / norm);
            for g in grads.iter_mut().flatten() {
                *g = *g * s;
            }
        }
        state.adam.step(&mut state.model.params, &grads);
        state.step += 1;
        window.push(out.loss);

        if state.step % cfg.valid_every == 0 || state.step == until {
            let train_loss = window.iter().sum::<f64>() / window.len() as f64;
            window.clear();
            let valid_loss = if valid.is_empty() { None } else { Some(dataset_loss(&state.model, valid)?) };
            let score = match (cfg.select_by, valid_loss) {
                (_, None) => None,
                (SelectBy::ValidLoss, Some(v)) => Some(v),
                (SelectBy::ValidBleu, Some(_)) => Some(-dataset_bleu(&state.model, valid)),
            };
            match score {
                None => {
                    state.best_params = state.model.params.clone();
                    state.best_step = state.step;
                }
                Some(s) if state.best_score.is_none_or(|b| s < b) => {
                    state.best_score = Some(s);
                    state.best_params = state.model.params.clone();
                    state.best_step = state.step;
                    state.stale = 0;
                }
                Some(_) => state.stale += 1,
            }
            let checkpoint = match checkpoint_dir {
                Some(dir) => {
                    let path = dir.join(format!("step_{:06}.pgen", state.step));
                    save_state(&state, &path)?;
                    Some(path)
                }
                None => None,
            };
            let entry = TrainLogEntry { step: state.step, train_loss, valid_loss, checkpoint };
            log::info!("{entry}");
            log.push(entry);
            if cfg.patience > 0 && state.stale >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }
    let mut model = state.model.clone();
    model.params = state.best_params.clone();
    Ok(TrainOutcome { model, best_step: state.best_step, state, log, stopped_early })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_cover_each_pass() {
        let mut seen: Vec<usize> = (0..5).flat_map(|s| batch_indices(3, s, 4, 20)).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..20).collect::<Vec<_>>());
        assert_eq!(batch_indices(3, 7, 4, 20), batch_indices(3, 7, 4, 20));
        assert_eq!(batch_indices(1, 0, 5, 3).len(), 5);
    }
}
