//! Event selection as binary sequence labeling with a linear-chain CRF.
//!
//! Each event of a game is labeled `select` or `skip`. Potentials are sparse
//! emission features per (feature, label) plus a 2×2 label transition table.
//! Training minimizes the label-weighted negative log-likelihood with an L1
//! and squared-L2 penalty using OWL-QN.
//!
//! Label weighting works on the chain-rule decomposition of the sequence
//! likelihood, `log p(y|x) = Σ_t log p(y_t | y_{t-1}, x)`: the term for
//! position `t` is scaled by the positive-class weight when the gold label
//! is `select`. With unit weights this is exactly the CRF log-likelihood.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::game::{Event, EventKind, GameRecord, Resolution, Score, Side};

pub const NUM_LABELS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Skip = 0,
    Select = 1,
}

impl Label {
    pub fn from_index(i: usize) -> Label {
        if i == 0 {
            Label::Skip
        } else {
            Label::Select
        }
    }

    pub fn from_bool(selected: bool) -> Label {
        if selected {
            Label::Select
        } else {
            Label::Skip
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Error)]
pub enum CrfError {
    #[error("sequence has {features} positions but {labels} labels")]
    LengthMismatch { features: usize, labels: usize },
    #[error("empty training set")]
    EmptyDataset,
    #[error("objective is not finite")]
    NonFinite,
    #[error("model file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Named feature values of one event.
pub type EventFeatures = Vec<(String, f64)>;

fn bucket_saves(count: u32) -> u32 {
    (count / 5 * 5).min(50)
}

fn margin_feature(score: Score, side: Side) -> String {
    let m = (score.get(side) as i64 - score.get(side.other()) as i64).clamp(-3, 3);
    format!("margin={m:+}")
}

/// Deterministic feature extraction over a game with derived flags.
///
/// Templates: bias; event type; period; strength; goal flags; penalty
/// minutes; save count in steps of five (capped at 50); score margin after
/// the event from the event team's point of view (winner's for the end
/// result), clamped to ±3; position in the game in fifths; first/last;
/// predecessor and successor event types; end-result resolution.
pub fn featurize_sequence(game: &GameRecord) -> Vec<EventFeatures> {
    let n = game.events.len();
    let ctx = game.context();
    let mut score = Score::default();
    let mut out = Vec::with_capacity(n);
    for (i, e) in game.events.iter().enumerate() {
        let mut f: EventFeatures = Vec::new();
        let mut bin = |name: String| f.push((name, 1.0));
        bin("bias".into());
        bin(format!("type={}", e.kind()));
        let side = e.team().and_then(|t| ctx.as_ref().and_then(|c| c.side_of(t)));
        match e {
            Event::EndResult { final_score, resolution, .. } => {
                let r = match resolution {
                    Resolution::Regulation => "regulation",
                    Resolution::Overtime => "overtime",
                    Resolution::Shootout => "shootout",
                };
                bin(format!("resolution={r}"));
                bin(margin_feature(*final_score, final_score.leader().unwrap_or(Side::Home)));
            }
            Event::Goal { resulting_score, period, strength, derived, .. } => {
                score = *resulting_score;
                bin(format!("period={period}"));
                bin(format!("strength={}", strength.as_str()));
                for flag in derived {
                    bin(format!("flag={}", flag.as_str()));
                }
                if let Some(s) = side {
                    bin(margin_feature(score, s));
                }
            }
            Event::Penalty { time, penalty_minutes, .. } => {
                bin(format!("period={}", time.period()));
                bin(format!("pim={penalty_minutes}"));
                if let Some(s) = side {
                    bin(margin_feature(score, s));
                }
            }
            Event::Save { count, .. } => {
                bin(format!("saves_bucket={}", bucket_saves(*count)));
                if let (Some(s), Some(c)) = (side, &ctx) {
                    bin(margin_feature(c.final_score, s));
                }
            }
        }
        bin(format!("pos={}", 5 * i / n));
        if i == 0 {
            bin("is_first".into());
        }
        if i + 1 == n {
            bin("is_last".into());
        }
        let kind_or_none = |j: Option<usize>| {
            j.and_then(|j| game.events.get(j)).map_or("none", |e| e.kind().as_str())
        };
        bin(format!("prev={}", kind_or_none(i.checked_sub(1))));
        bin(format!("next={}", kind_or_none(Some(i + 1))));
        out.push(f);
    }
    out
}

/// A sequence mapped onto registry indices; unknown names are dropped.
pub type CompiledSequence = Vec<Vec<(usize, f64)>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CrfTrainConfig {
    pub c1: f64,
    pub c2: f64,
    pub positive_label_weight: f64,
    pub max_iterations: usize,
    /// Stop when the relative objective decrease over the last
    /// `convergence_window` iterations falls below this.
    pub tolerance: f64,
    pub convergence_window: usize,
    /// L-BFGS history length.
    pub memory: usize,
    /// Recorded for reproducibility; the optimizer itself is deterministic.
    pub seed: u64,
}

impl Default for CrfTrainConfig {
    fn default() -> Self {
        CrfTrainConfig {
            c1: 35.0,
            c2: 0.5,
            positive_label_weight: 0.85,
            max_iterations: 300,
            tolerance: 1e-6,
            convergence_window: 10,
            memory: 6,
            seed: 0,
        }
    }
}

impl CrfTrainConfig {
    fn label_weight(&self, y: Label) -> f64 {
        match y {
            Label::Select => self.positive_label_weight,
            Label::Skip => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrfModel {
    feature_names: Vec<String>,
    index: HashMap<String, usize>,
    /// `[feature * 2 + label]` emissions followed by `[prev * 2 + next]`
    /// transitions.
    weights: Vec<f64>,
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn lse2(a: f64, b: f64) -> f64 {
    log_sum_exp(&[a, b])
}

/// Forward/backward tables of one sequence.
pub struct Lattice {
    pub emissions: Vec<[f64; 2]>,
    pub alpha: Vec<[f64; 2]>,
    pub beta: Vec<[f64; 2]>,
    pub log_z: f64,
}

impl CrfModel {
    pub fn new(feature_names: Vec<String>) -> Self {
        let index = feature_names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        let weights = vec![0.0; feature_names.len() * NUM_LABELS + NUM_LABELS * NUM_LABELS];
        CrfModel { feature_names, index, weights }
    }

    /// Registry of every feature name in the dataset, in first-seen order.
    pub fn with_registry<'a>(sequences: impl IntoIterator<Item = &'a Vec<EventFeatures>>) -> Self {
        let mut names = Vec::new();
        let mut seen = HashMap::new();
        for seq in sequences {
            for f in seq {
                for (name, _) in f {
                    if !seen.contains_key(name) {
                        seen.insert(name.clone(), names.len());
                        names.push(name.clone());
                    }
                }
            }
        }
        CrfModel::new(names)
    }

    pub fn num_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn set_weights(&mut self, w: &[f64]) {
        assert_eq!(w.len(), self.weights.len());
        self.weights.copy_from_slice(w);
    }

    pub fn emission_index(&self, feature: usize, label: Label) -> usize {
        feature * NUM_LABELS + label.index()
    }

    pub fn transition_index(&self, prev: Label, next: Label) -> usize {
        self.feature_names.len() * NUM_LABELS + prev.index() * NUM_LABELS + next.index()
    }

    pub fn emission(&self, feature: &str, label: Label) -> Option<f64> {
        self.index.get(feature).map(|&f| self.weights[self.emission_index(f, label)])
    }

    pub fn transition(&self, prev: Label, next: Label) -> f64 {
        self.weights[self.transition_index(prev, next)]
    }

    pub fn compile(&self, seq: &[EventFeatures]) -> CompiledSequence {
        seq.iter()
            .map(|f| f.iter().filter_map(|(n, v)| self.index.get(n).map(|&i| (i, *v))).collect())
            .collect()
    }

    fn trans(&self, w: &[f64]) -> [[f64; 2]; 2] {
        let base = self.feature_names.len() * NUM_LABELS;
        [[w[base], w[base + 1]], [w[base + 2], w[base + 3]]]
    }

    fn emissions_with(&self, w: &[f64], seq: &CompiledSequence) -> Vec<[f64; 2]> {
        seq.iter()
            .map(|feats| {
                let mut e = [0.0; 2];
                for &(f, v) in feats {
                    e[0] += v * w[f * NUM_LABELS];
                    e[1] += v * w[f * NUM_LABELS + 1];
                }
                e
            })
            .collect()
    }

    pub fn lattice(&self, seq: &CompiledSequence) -> Lattice {
        self.lattice_with(&self.weights, seq)
    }

    fn lattice_with(&self, w: &[f64], seq: &CompiledSequence) -> Lattice {
        let tr = self.trans(w);
        let emissions = self.emissions_with(w, seq);
        let n = emissions.len();
        let mut alpha = vec![[0.0; 2]; n];
        let mut beta = vec![[0.0; 2]; n];
        if n == 0 {
            return Lattice { emissions, alpha, beta, log_z: 0.0 };
        }
        alpha[0] = emissions[0];
        for t in 1..n {
            for y in 0..2 {
                alpha[t][y] = emissions[t][y]
                    + lse2(alpha[t - 1][0] + tr[0][y], alpha[t - 1][1] + tr[1][y]);
            }
        }
        for t in (0..n - 1).rev() {
            for y in 0..2 {
                beta[t][y] = lse2(
                    tr[y][0] + emissions[t + 1][0] + beta[t + 1][0],
                    tr[y][1] + emissions[t + 1][1] + beta[t + 1][1],
                );
            }
        }
        let log_z = lse2(alpha[n - 1][0], alpha[n - 1][1]);
        Lattice { emissions, alpha, beta, log_z }
    }

    /// Log-partition computed right to left from the backward table.
    pub fn log_partition_backward(&self, seq: &CompiledSequence) -> f64 {
        let l = self.lattice(seq);
        if l.emissions.is_empty() {
            return 0.0;
        }
        lse2(l.emissions[0][0] + l.beta[0][0], l.emissions[0][1] + l.beta[0][1])
    }

    pub fn log_partition(&self, seq: &CompiledSequence) -> f64 {
        self.lattice(seq).log_z
    }

    /// Unnormalized log score of a label path.
    pub fn path_score(&self, seq: &CompiledSequence, labels: &[Label]) -> f64 {
        let tr = self.trans(&self.weights);
        let em = self.emissions_with(&self.weights, seq);
        let mut s = 0.0;
        for (t, y) in labels.iter().enumerate() {
            s += em[t][y.index()];
            if t > 0 {
                s += tr[labels[t - 1].index()][y.index()];
            }
        }
        s
    }

    /// Per-position label marginals.
    pub fn marginals(&self, seq: &CompiledSequence) -> Vec<[f64; 2]> {
        let l = self.lattice(seq);
        (0..l.emissions.len())
            .map(|t| {
                [(l.alpha[t][0] + l.beta[t][0] - l.log_z).exp(), (l.alpha[t][1] + l.beta[t][1] - l.log_z).exp()]
            })
            .collect()
    }

    /// Weighted negative log-likelihood of one sequence and its gradient
    /// with respect to all weights, added into `grad`. No regularization.
    fn weighted_nll_into(
        &self,
        w: &[f64],
        seq: &CompiledSequence,
        labels: &[Label],
        config: &CrfTrainConfig,
        grad: &mut [f64],
    ) -> f64 {
        let n = seq.len();
        if n == 0 {
            return 0.0;
        }
        let tr = self.trans(w);
        let l = self.lattice_with(w, seq);
        let (em, alpha, beta, log_z) = (&l.emissions, &l.alpha, &l.beta, l.log_z);
        let y: Vec<usize> = labels.iter().map(|l| l.index()).collect();
        let wt: Vec<f64> = labels.iter().map(|&l| config.label_weight(l)).collect();

        // Value.
        let mut value = wt[0] * (log_z - em[0][y[0]] - beta[0][y[0]]);
        for t in 1..n {
            value -= wt[t] * (tr[y[t - 1]][y[t]] + em[t][y[t]] + beta[t][y[t]] - beta[t - 1][y[t - 1]]);
        }

        // Gradient with respect to emission scores and transitions. The
        // value equals w_0·logZ − Σ_t w_t·(gold potentials) − Σ_t c_t·β_t(y_t)
        // with c_t = w_t − w_{t+1}; ∂β_t(y)/∂· is an expectation under the
        // suffix chain conditioned on y_t = y, accumulated forward in `mass`.
        let mut d_em = vec![[0.0f64; 2]; n];
        let mut d_tr = [[0.0f64; 2]; 2];
        for t in 0..n {
            for k in 0..2 {
                let marginal = (alpha[t][k] + beta[t][k] - log_z).exp();
                d_em[t][k] += wt[0] * marginal;
            }
            d_em[t][y[t]] -= wt[t];
            if t > 0 {
                d_tr[y[t - 1]][y[t]] -= wt[t];
                for a in 0..2 {
                    for b in 0..2 {
                        let pair = (alpha[t - 1][a] + tr[a][b] + em[t][b] + beta[t][b] - log_z).exp();
                        d_tr[a][b] += wt[0] * pair;
                    }
                }
            }
        }
        let mut mass = [0.0f64; 2];
        for s in 1..n {
            let mut source = mass;
            source[y[s - 1]] += wt[s - 1] - wt[s];
            let mut next = [0.0f64; 2];
            for a in 0..2 {
                if source[a] == 0.0 {
                    continue;
                }
                for b in 0..2 {
                    let q = (tr[a][b] + em[s][b] + beta[s][b] - beta[s - 1][a]).exp();
                    let m = source[a] * q;
                    next[b] += m;
                    d_tr[a][b] -= m;
                }
            }
            for b in 0..2 {
                d_em[s][b] -= next[b];
            }
            mass = next;
        }

        for (t, feats) in seq.iter().enumerate() {
            for &(f, v) in feats {
                grad[f * NUM_LABELS] += v * d_em[t][0];
                grad[f * NUM_LABELS + 1] += v * d_em[t][1];
            }
        }
        let base = self.feature_names.len() * NUM_LABELS;
        for a in 0..2 {
            for b in 0..2 {
                grad[base + a * 2 + b] += d_tr[a][b];
            }
        }
        value
    }

    /// Smooth part of the training objective (weighted NLL summed over the
    /// dataset plus `c2·‖w‖²`) and its gradient.
    fn smooth_objective(
        &self,
        w: &[f64],
        data: &[(CompiledSequence, Vec<Label>)],
        config: &CrfTrainConfig,
    ) -> (f64, Vec<f64>) {
        let mut grad = vec![0.0; w.len()];
        let mut value = 0.0;
        for (seq, labels) in data {
            value += self.weighted_nll_into(w, seq, labels, config, &mut grad);
        }
        for (g, wi) in grad.iter_mut().zip(w) {
            value += config.c2 * wi * wi;
            *g += 2.0 * config.c2 * wi;
        }
        (value, grad)
    }

    /// Full objective on one sequence at the model's weights:
    /// weighted NLL + `c1·‖w‖₁` + `c2·‖w‖²`, with `sign(w)` as the L1
    /// subgradient.
    pub fn objective(
        &self,
        seq: &CompiledSequence,
        labels: &[Label],
        config: &CrfTrainConfig,
    ) -> Result<(f64, Vec<f64>), CrfError> {
        if seq.len() != labels.len() {
            return Err(CrfError::LengthMismatch { features: seq.len(), labels: labels.len() });
        }
        let data = [(seq.clone(), labels.to_vec())];
        let (mut value, mut grad) = self.smooth_objective(&self.weights, &data, config);
        for (g, wi) in grad.iter_mut().zip(&self.weights) {
            value += config.c1 * wi.abs();
            *g += config.c1 * sign(*wi);
        }
        if !value.is_finite() {
            return Err(CrfError::NonFinite);
        }
        Ok((value, grad))
    }

    /// Maximum a-posteriori labels; ties resolve toward `skip`.
    pub fn predict(&self, seq: &[EventFeatures]) -> Vec<Label> {
        self.viterbi(&self.compile(seq))
    }

    pub fn viterbi(&self, seq: &CompiledSequence) -> Vec<Label> {
        let n = seq.len();
        if n == 0 {
            return Vec::new();
        }
        let tr = self.trans(&self.weights);
        let em = self.emissions_with(&self.weights, seq);
        let mut delta = vec![[0.0f64; 2]; n];
        let mut back = vec![[0usize; 2]; n];
        delta[0] = em[0];
        for t in 1..n {
            for y in 0..2 {
                let from_skip = delta[t - 1][0] + tr[0][y];
                let from_select = delta[t - 1][1] + tr[1][y];
                let (best, arg) = if from_select > from_skip { (from_select, 1) } else { (from_skip, 0) };
                delta[t][y] = best + em[t][y];
                back[t][y] = arg;
            }
        }
        let mut y = usize::from(delta[n - 1][1] > delta[n - 1][0]);
        let mut out = vec![Label::Skip; n];
        for t in (0..n).rev() {
            out[t] = Label::from_index(y);
            y = back[t][y];
        }
        out
    }

    /// Writes the `CRF1` flat file: header, feature registry with
    /// per-label emission weights, then the transition table.
    pub fn save<W: Write>(&self, mut out: W) -> Result<(), CrfError> {
        writeln!(out, "CRF1")?;
        writeln!(out, "labels\tskip\tselect")?;
        writeln!(out, "features\t{}", self.feature_names.len())?;
        for (i, name) in self.feature_names.iter().enumerate() {
            writeln!(out, "{}\t{:?}\t{:?}", name, self.weights[i * 2], self.weights[i * 2 + 1])?;
        }
        let t = self.trans(&self.weights);
        writeln!(out, "transitions\t{:?}\t{:?}\t{:?}\t{:?}", t[0][0], t[0][1], t[1][0], t[1][1])?;
        Ok(())
    }

    pub fn load<R: BufRead>(input: R) -> Result<CrfModel, CrfError> {
        let bad = |m: &str| CrfError::Format(m.to_string());
        let mut lines = input.lines();
        let mut next = || -> Result<String, CrfError> {
            lines.next().ok_or_else(|| bad("unexpected end of file"))?.map_err(|e| match e.kind() {
                std::io::ErrorKind::InvalidData => bad("not a text model file"),
                _ => CrfError::from(e),
            })
        };
        if next()? != "CRF1" {
            return Err(bad("missing CRF1 magic"));
        }
        if next()? != "labels\tskip\tselect" {
            return Err(bad("unsupported label set"));
        }
        let count: usize = next()?
            .strip_prefix("features\t")
            .and_then(|c| c.parse().ok())
            .ok_or_else(|| bad("missing feature count"))?;
        let float = |s: &str| s.parse::<f64>().map_err(|_| bad(&format!("bad weight {s:?}")));
        let mut names = Vec::with_capacity(count);
        let mut weights = Vec::with_capacity(count * 2 + 4);
        for _ in 0..count {
            let line = next()?;
            let parts: Vec<&str> = line.split('\t').collect();
            let [name, skip, select] = parts[..] else {
                return Err(bad(&format!("bad feature line {line:?}")));
            };
            names.push(name.to_string());
            weights.push(float(skip)?);
            weights.push(float(select)?);
        }
        let line = next()?;
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 5 || parts[0] != "transitions" {
            return Err(bad("bad transitions line"));
        }
        for p in &parts[1..] {
            weights.push(float(p)?);
        }
        let mut model = CrfModel::new(names);
        if model.index.len() != count {
            return Err(bad("duplicate feature names"));
        }
        model.weights = weights;
        if model.weights.iter().any(|w| !w.is_finite()) {
            return Err(bad("non-finite weight"));
        }
        Ok(model)
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone)]
pub struct CrfTrainOutcome {
    pub model: CrfModel,
    pub final_objective: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Objective after every accepted step, starting from the initial point.
    pub objective_trace: Vec<f64>,
}

/// Trains a model on featurized games with gold labels using OWL-QN.
/// The feature registry is every name seen in the dataset.
pub fn crf_train(
    dataset: &[(Vec<EventFeatures>, Vec<Label>)],
    config: &CrfTrainConfig,
) -> Result<CrfTrainOutcome, CrfError> {
    if dataset.is_empty() {
        return Err(CrfError::EmptyDataset);
    }
    for (f, l) in dataset {
        if f.len() != l.len() {
            return Err(CrfError::LengthMismatch { features: f.len(), labels: l.len() });
        }
    }
    let mut model = CrfModel::with_registry(dataset.iter().map(|(f, _)| f));
    let data: Vec<(CompiledSequence, Vec<Label>)> =
        dataset.iter().map(|(f, l)| (model.compile(f), l.clone())).collect();
    let (w, trace, iterations, converged) = owlqn(&model, &data, config)?;
    model.weights = w;
    let final_objective = *trace.last().unwrap();
    if !converged {
        log::warn!(
            "CRF training did not converge in {} iterations (objective {final_objective:.6})",
            config.max_iterations
        );
    }
    Ok(CrfTrainOutcome { model, final_objective, iterations, converged, objective_trace: trace })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn pseudo_gradient(w: &[f64], g: &[f64], c1: f64) -> Vec<f64> {
    w.iter()
        .zip(g)
        .map(|(&wi, &gi)| {
            if c1 == 0.0 {
                gi
            } else if wi > 0.0 {
                gi + c1
            } else if wi < 0.0 {
                gi - c1
            } else if gi + c1 < 0.0 {
                gi + c1
            } else if gi - c1 > 0.0 {
                gi - c1
            } else {
                0.0
            }
        })
        .collect()
}

fn l1(w: &[f64]) -> f64 {
    w.iter().map(|x| x.abs()).sum()
}

/// Orthant-wise limited-memory quasi-Newton. Returns the weights, the
/// objective trace, the iteration count and whether it converged.
fn owlqn(
    model: &CrfModel,
    data: &[(CompiledSequence, Vec<Label>)],
    config: &CrfTrainConfig,
) -> Result<(Vec<f64>, Vec<f64>, usize, bool), CrfError> {
    let c1 = config.c1;
    let mut w = model.weights.clone();
    let (mut f, mut g) = model.smooth_objective(&w, data, config);
    let mut obj = f + c1 * l1(&w);
    if !obj.is_finite() {
        return Err(CrfError::NonFinite);
    }
    let mut trace = vec![obj];
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();

    for iter in 1..=config.max_iterations {
        let pg = pseudo_gradient(&w, &g, c1);
        let pg_norm = dot(&pg, &pg).sqrt();
        if pg_norm <= 1e-10 * w.len().max(1) as f64 {
            return Ok((w, trace, iter - 1, true));
        }

        // Two-loop recursion on the pseudo-gradient.
        let mut d: Vec<f64> = pg.iter().map(|x| -x).collect();
        let mut alphas = Vec::with_capacity(history.len());
        for (s, y, rho) in history.iter().rev() {
            let a = rho * dot(s, &d);
            for (di, yi) in d.iter_mut().zip(y) {
                *di -= a * yi;
            }
            alphas.push(a);
        }
        if let Some((s, y, _)) = history.back() {
            let gamma = dot(s, y) / dot(y, y);
            d.iter_mut().for_each(|di| *di *= gamma);
        }
        for ((s, y, rho), a) in history.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &d);
            for (di, si) in d.iter_mut().zip(s) {
                *di += (a - b) * si;
            }
        }
        // Keep the direction in the descent orthant of the pseudo-gradient.
        for (di, pi) in d.iter_mut().zip(&pg) {
            if *di * -pi <= 0.0 {
                *di = 0.0;
            }
        }
        let orthant: Vec<f64> =
            w.iter().zip(&pg).map(|(&wi, &pi)| if wi != 0.0 { sign(wi) } else { -sign(pi) }).collect();

        let mut step = if history.is_empty() { 1.0 / pg_norm } else { 1.0 };
        let mut accepted = None;
        for _ in 0..40 {
            let mut wn: Vec<f64> = w.iter().zip(&d).map(|(wi, di)| wi + step * di).collect();
            if c1 > 0.0 {
                for (x, o) in wn.iter_mut().zip(&orthant) {
                    if sign(*x) != *o {
                        *x = 0.0;
                    }
                }
            }
            let (fn_, gn) = model.smooth_objective(&wn, data, config);
            let objn = fn_ + c1 * l1(&wn);
            let decrease: f64 = pg.iter().zip(wn.iter().zip(&w)).map(|(p, (a, b))| p * (a - b)).sum();
            if objn.is_finite() && objn <= obj + 1e-4 * decrease {
                accepted = Some((wn, fn_, gn, objn));
                break;
            }
            step *= 0.5;
        }
        let Some((wn, fn_, gn, objn)) = accepted else {
            // No progress possible along this direction: at a (numerical) optimum.
            return Ok((w, trace, iter - 1, true));
        };
        let s: Vec<f64> = wn.iter().zip(&w).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 {
            if history.len() == config.memory {
                history.pop_front();
            }
            history.push_back((s, y, 1.0 / sy));
        }
        w = wn;
        f = fn_;
        g = gn;
        obj = objn;
        trace.push(obj);
        let _ = f;

        let k = config.convergence_window;
        if trace.len() > k {
            let past = trace[trace.len() - 1 - k];
            if (past - obj) / obj.abs().max(1.0) < config.tolerance {
                return Ok((w, trace, iter, true));
            }
        }
    }
    Ok((w, trace, config.max_iterations, false))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Set when a precision or recall denominator was zero.
    pub degenerate: bool,
}

impl Prf {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Prf {
        let ratio = |a: usize, b: usize| if b == 0 { None } else { Some(a as f64 / b as f64) };
        let p = ratio(tp, tp + fp);
        let r = ratio(tp, tp + fn_);
        let (precision, recall) = (p.unwrap_or(0.0), r.unwrap_or(0.0));
        let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        Prf { tp, fp, fn_, precision, recall, f1, degenerate: p.is_none() || r.is_none() }
    }
}

impl fmt::Display for Prf {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "P={:.4} R={:.4} F1={:.4}", self.precision, self.recall, self.f1)?;
        if self.degenerate {
            f.write_str(" (degenerate)")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionScores {
    pub overall: Prf,
    pub per_type: BTreeMap<EventKind, Prf>,
}

/// Select-class precision, recall and F1, overall and per event type.
pub fn evaluate_selection(
    pred: &[Vec<Label>],
    gold: &[Vec<Label>],
    kinds: &[Vec<EventKind>],
) -> Result<SelectionScores, CrfError> {
    let mut counts: BTreeMap<EventKind, (usize, usize, usize)> =
        EventKind::ALL.iter().map(|&k| (k, (0, 0, 0))).collect();
    if pred.len() != gold.len() || pred.len() != kinds.len() {
        return Err(CrfError::LengthMismatch { features: pred.len(), labels: gold.len() });
    }
    for ((p, g), k) in pred.iter().zip(gold).zip(kinds) {
        if p.len() != g.len() || p.len() != k.len() {
            return Err(CrfError::LengthMismatch { features: p.len(), labels: g.len() });
        }
        for ((&p, &g), &k) in p.iter().zip(g).zip(k) {
            let c = counts.get_mut(&k).unwrap();
            match (p, g) {
                (Label::Select, Label::Select) => c.0 += 1,
                (Label::Select, Label::Skip) => c.1 += 1,
                (Label::Skip, Label::Select) => c.2 += 1,
                _ => {}
            }
        }
    }
    let (tp, fp, fn_) = counts
        .values()
        .fold((0, 0, 0), |a, c| (a.0 + c.0, a.1 + c.1, a.2 + c.2));
    Ok(SelectionScores {
        overall: Prf::from_counts(tp, fp, fn_),
        per_type: counts.into_iter().map(|(k, (a, b, c))| (k, Prf::from_counts(a, b, c))).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::game::{derive_features, GameTime, Strength};
    use chrono::NaiveDate;
    use std::collections::BTreeSet;

    fn sample_game() -> GameRecord {
        let t = |m, s| GameTime::new(m, s).unwrap();
        let g = GameRecord {
            id: "x".into(),
            date: NaiveDate::from_ymd_opt(2018, 1, 1).unwrap(),
            events: vec![
                Event::EndResult {
                    home_team: "A".into(),
                    guest_team: "B".into(),
                    final_score: Score::new(1, 0),
                    period_scores: vec![Score::new(0, 0), Score::new(0, 0), Score::new(1, 0)],
                    resolution: Resolution::Regulation,
                },
                Event::Penalty { player: "P".into(), team: "B".into(), time: t(12, 0), penalty_minutes: 2 },
                Event::Goal {
                    scorer: "S".into(),
                    assists: vec![],
                    team: "A".into(),
                    resulting_score: Score::new(1, 0),
                    time: t(45, 10),
                    period: 3,
                    strength: Strength::Even,
                    derived: BTreeSet::new(),
                },
                Event::Save { goalie: "G".into(), team: "A".into(), count: 31 },
            ],
        };
        derive_features(&g).unwrap()
    }

    fn names(f: &EventFeatures) -> Vec<&str> {
        f.iter().map(|(n, _)| n.as_str()).collect()
    }

    #[test]
    fn features_for_each_event_type() {
        let f = featurize_sequence(&sample_game());
        assert_eq!(f.len(), 4);
        let r = names(&f[0]);
        assert!(r.contains(&"type=end_result") && r.contains(&"is_first") && r.contains(&"prev=none"));
        let p = names(&f[1]);
        assert!(p.contains(&"pim=2") && p.contains(&"period=1"));
        let g = names(&f[2]);
        for want in ["type=goal", "flag=deciding", "period=3", "strength=even", "margin=+1"] {
            assert!(g.contains(&want), "{want} missing from {g:?}");
        }
        let s = names(&f[3]);
        assert!(s.contains(&"saves_bucket=30") && s.contains(&"is_last") && s.contains(&"next=none"));
    }

    #[test]
    fn zero_weights_length_one_nll_is_ln2() {
        let f = featurize_sequence(&sample_game());
        let model = CrfModel::with_registry([&f]);
        let seq = model.compile(&f[..1]);
        let cfg = CrfTrainConfig { c1: 0.0, c2: 0.0, positive_label_weight: 1.0, ..Default::default() };
        let (v, _) = model.objective(&seq, &[Label::Select], &cfg).unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn zero_model_predicts_all_skip() {
        let f = featurize_sequence(&sample_game());
        let model = CrfModel::with_registry([&f]);
        assert_eq!(model.predict(&f), vec![Label::Skip; 4]);
    }

    #[test]
    fn objective_rejects_length_mismatch() {
        let f = featurize_sequence(&sample_game());
        let model = CrfModel::with_registry([&f]);
        let seq = model.compile(&f);
        assert!(matches!(
            model.objective(&seq, &[Label::Skip], &CrfTrainConfig::default()),
            Err(CrfError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn selection_scores() {
        use EventKind::*;
        use Label::*;
        let kinds = vec![vec![Goal, Goal, Goal, Penalty]];
        let s = evaluate_selection(&[vec![Select, Select, Skip, Select]], &[vec![Select, Select, Skip, Select]], &kinds)
            .unwrap();
        assert_eq!(s.overall.f1, 1.0);
        assert_eq!(s.per_type[&Goal].f1, 1.0);
        assert_eq!(s.per_type[&Penalty].f1, 1.0);

        let s = evaluate_selection(&[vec![Skip; 4]], &[vec![Select, Skip, Skip, Skip]], &kinds).unwrap();
        assert_eq!((s.overall.precision, s.overall.recall, s.overall.f1), (0.0, 0.0, 0.0));
        assert!(s.overall.degenerate);

        let s = evaluate_selection(
            &[vec![Select, Select, Select, Skip]],
            &[vec![Select, Select, Skip, Select]],
            &kinds,
        )
        .unwrap();
        assert!((s.overall.precision - 2.0 / 3.0).abs() < 1e-12);
        assert!((s.overall.recall - 2.0 / 3.0).abs() < 1e-12);
        assert!((s.overall.f1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn model_file_round_trip() {
        let f = featurize_sequence(&sample_game());
        let mut model = CrfModel::with_registry([&f]);
        let w: Vec<f64> = (0..model.weights().len()).map(|i| (i as f64 * 0.37).sin() / 3.0).collect();
        model.set_weights(&w);
        let mut buf = Vec::new();
        model.save(&mut buf).unwrap();
        assert!(buf.starts_with(b"CRF1\n"));
        let back = CrfModel::load(&buf[..]).unwrap();
        assert_eq!(back, model);
        assert!(CrfModel::load(&b"CRF2\n"[..]).is_err());
    }
}
