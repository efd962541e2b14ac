use rand::RngExt;
use rand_chacha::ChaCha8Rng;

use super::params::{LstmIds, Params};
use super::real::{gemm, sigmoid, softmax_in_place, Real};
use super::vocab::{Example, BOS, EOS, PAD, UNK};
use super::{PgConfig, PgError};

/// Inverted dropout: a fresh mask scaled by `1/(1-p)`.
pub(crate) struct Dropout<'a> {
    pub rng: &'a mut ChaCha8Rng,
    pub p: f64,
}

impl Dropout<'_> {
    fn mask<R: Real>(&mut self, n: usize) -> Vec<R> {
        let keep = R::from_f64(1.0 / (1.0 - self.p));
        (0..n).map(|_| if self.rng.random::<f64>() < self.p { R::zero() } else { keep }).collect()
    }
}

fn apply_mask<R: Real>(x: &mut [R], mask: &[R]) {
    for (v, m) in x.iter_mut().zip(mask) {
        *v = *v * *m;
    }
}

fn add_into<R: Real>(dst: &mut [R], src: &[R]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = *d + *s;
    }
}

fn gather_rows<R: Real>(table: &[R], cols: usize, ids: &[usize]) -> Vec<R> {
    let mut out = Vec::with_capacity(ids.len() * cols);
    for &i in ids {
        out.extend_from_slice(&table[i * cols..(i + 1) * cols]);
    }
    out
}

fn scatter_rows<R: Real>(grad: &mut [R], cols: usize, ids: &[usize], d: &[R]) {
    for (r, &i) in ids.iter().enumerate() {
        add_into(&mut grad[i * cols..(i + 1) * cols], &d[r * cols..(r + 1) * cols]);
    }
}

fn col_sums_into<R: Real>(g: &mut [R], d: &[R], cols: usize) {
    for row in d.chunks(cols) {
        add_into(g, row);
    }
}

fn affine_rows<R: Real>(x: &[R], rows: usize, w: &[R], b: &[R], out_dim: usize, in_dim: usize) -> Vec<R> {
    let mut out = Vec::with_capacity(rows * out_dim);
    for _ in 0..rows {
        out.extend_from_slice(b);
    }
    gemm(false, true, rows, out_dim, in_dim, R::one(), x, w, R::one(), &mut out);
    out
}

fn concat_rows<R: Real>(a: &[R], ac: usize, b: &[R], bc: usize, rows: usize) -> Vec<R> {
    let mut out = Vec::with_capacity(rows * (ac + bc));
    for r in 0..rows {
        out.extend_from_slice(&a[r * ac..(r + 1) * ac]);
        out.extend_from_slice(&b[r * bc..(r + 1) * bc]);
    }
    out
}

/// Forward values of one LSTM step over a batch.
pub(crate) struct LstmStep<R> {
    xh: Vec<R>,
    /// Activated gates `i, f, g, o` per row.
    act: Vec<R>,
    c_prev: Vec<R>,
    tc: Vec<R>,
    pub h: Vec<R>,
    pub c: Vec<R>,
    mask: Option<Vec<bool>>,
}

/// One LSTM step. Rows whose `mask` entry is false carry the previous state.
pub(crate) fn lstm_forward<R: Real>(
    p: &Params<R>,
    ids: LstmIds,
    batch: usize,
    x: &[R],
    h_prev: &[R],
    c_prev: &[R],
    mask: Option<&[bool]>,
) -> LstmStep<R> {
    let (ni, nh) = (ids.input, ids.hidden);
    let k = ni + nh;
    let xh = concat_rows(x, ni, h_prev, nh, batch);
    let mut act = affine_rows(&xh, batch, p.get(ids.w), p.get(ids.b), 4 * nh, k);
    let mut h = vec![R::zero(); batch * nh];
    let mut c = vec![R::zero(); batch * nh];
    let mut tc = vec![R::zero(); batch * nh];
    for b in 0..batch {
        let a = &mut act[b * 4 * nh..(b + 1) * 4 * nh];
        let live = mask.is_none_or(|m| m[b]);
        for j in 0..nh {
            let (i, f, g, o) = (sigmoid(a[j]), sigmoid(a[nh + j]), a[2 * nh + j].tanh(), sigmoid(a[3 * nh + j]));
            a[j] = i;
            a[nh + j] = f;
            a[2 * nh + j] = g;
            a[3 * nh + j] = o;
            let r = b * nh + j;
            if live {
                c[r] = f * c_prev[r] + i * g;
                tc[r] = c[r].tanh();
                h[r] = o * tc[r];
            } else {
                c[r] = c_prev[r];
                h[r] = h_prev[r];
            }
        }
    }
    LstmStep { xh, act, c_prev: c_prev.to_vec(), tc, h, c, mask: mask.map(<[bool]>::to_vec) }
}

/// Backward through one LSTM step; returns `(dx, dh_prev, dc_prev)`.
fn lstm_backward<R: Real>(
    p: &Params<R>,
    grads: &mut [Vec<R>],
    ids: LstmIds,
    batch: usize,
    st: &LstmStep<R>,
    dh: &[R],
    dc: &[R],
) -> (Vec<R>, Vec<R>, Vec<R>) {
    let (ni, nh) = (ids.input, ids.hidden);
    let k = ni + nh;
    let one = R::one();
    let mut dg = vec![R::zero(); batch * 4 * nh];
    let mut dc_prev = vec![R::zero(); batch * nh];
    let mut carry = vec![R::zero(); batch * nh];
    for b in 0..batch {
        let rows = b * nh..(b + 1) * nh;
        if st.mask.as_ref().is_some_and(|m| !m[b]) {
            carry[rows.clone()].copy_from_slice(&dh[rows.clone()]);
            dc_prev[rows.clone()].copy_from_slice(&dc[rows]);
            continue;
        }
        let a = &st.act[b * 4 * nh..(b + 1) * 4 * nh];
        let d = &mut dg[b * 4 * nh..(b + 1) * 4 * nh];
        for j in 0..nh {
            let r = b * nh + j;
            let (i, f, g, o) = (a[j], a[nh + j], a[2 * nh + j], a[3 * nh + j]);
            let tc = st.tc[r];
            let dcj = dc[r] + dh[r] * o * (one - tc * tc);
            d[j] = dcj * g * i * (one - i);
            d[nh + j] = dcj * st.c_prev[r] * f * (one - f);
            d[2 * nh + j] = dcj * i * (one - g * g);
            d[3 * nh + j] = dh[r] * tc * o * (one - o);
            dc_prev[r] = dcj * f;
        }
    }
    gemm(true, false, 4 * nh, k, batch, one, &dg, &st.xh, one, &mut grads[ids.w]);
    col_sums_into(&mut grads[ids.b], &dg, 4 * nh);
    let mut dxh = vec![R::zero(); batch * k];
    gemm(false, false, batch, k, 4 * nh, one, &dg, p.get(ids.w), R::zero(), &mut dxh);
    let mut dx = Vec::with_capacity(batch * ni);
    let mut dh_prev = Vec::with_capacity(batch * nh);
    for b in 0..batch {
        dx.extend_from_slice(&dxh[b * k..b * k + ni]);
        dh_prev.extend_from_slice(&dxh[b * k + ni..(b + 1) * k]);
    }
    add_into(&mut dh_prev, &carry);
    (dx, dh_prev, dc_prev)
}

/// Encoder outputs for a padded batch, with what backward needs.
pub(crate) struct EncForward<R> {
    pub s_max: usize,
    pub lens: Vec<usize>,
    /// Top-layer states, `batch × s_max × hidden`.
    pub hs: Vec<R>,
    /// `hs · W_hᵀ`, same shape.
    pub enc_proj: Vec<R>,
    /// Decoder initial states per layer, `batch × hidden`.
    pub init_h: Vec<Vec<R>>,
    pub init_c: Vec<Vec<R>>,
    src_ids: Vec<Vec<usize>>,
    /// `[layer][direction][t]`.
    steps: Vec<[Vec<LstmStep<R>>; 2]>,
    /// Dropout masks on the inputs of layers above the first, `[layer-1][t]`.
    drops: Vec<Vec<Vec<R>>>,
}

pub(crate) fn encoder_forward<R: Real>(
    p: &Params<R>,
    srcs: &[&[usize]],
    mut dropout: Option<&mut Dropout<'_>>,
) -> EncForward<R> {
    let lay = &p.layout;
    let (e, hd) = (lay.embedding_dim, lay.hidden_dim);
    let half = hd / 2;
    let batch = srcs.len();
    let lens: Vec<usize> = srcs.iter().map(|s| s.len()).collect();
    let s_max = lens.iter().copied().max().unwrap_or(0);
    let src_ids: Vec<Vec<usize>> =
        (0..s_max).map(|t| srcs.iter().map(|s| s.get(t).copied().unwrap_or(PAD)).collect()).collect();
    let masks: Vec<Vec<bool>> = (0..s_max).map(|t| lens.iter().map(|&l| t < l).collect()).collect();
    let mut inputs: Vec<Vec<R>> = src_ids.iter().map(|ids| gather_rows(p.get(lay.src_emb), e, ids)).collect();
    let mut steps = Vec::new();
    let mut drops = Vec::new();
    let mut init_h = Vec::new();
    let mut init_c = Vec::new();
    let n_layers = lay.enc.len();
    for (l, dirs) in lay.enc.iter().enumerate() {
        let mut outs: [Vec<Vec<R>>; 2] = [vec![Vec::new(); s_max], vec![Vec::new(); s_max]];
        let mut layer_steps: [Vec<LstmStep<R>>; 2] = [Vec::new(), Vec::new()];
        let mut finals = Vec::new();
        for (d, ids) in dirs.iter().enumerate() {
            let mut h = vec![R::zero(); batch * half];
            let mut c = vec![R::zero(); batch * half];
            let order: Vec<usize> = if d == 0 { (0..s_max).collect() } else { (0..s_max).rev().collect() };
            let mut st_by_t: Vec<Option<LstmStep<R>>> = (0..s_max).map(|_| None).collect();
            for t in order {
                let st = lstm_forward(p, *ids, batch, &inputs[t], &h, &c, Some(&masks[t]));
                h.clone_from(&st.h);
                c.clone_from(&st.c);
                outs[d][t] = st.h.clone();
                st_by_t[t] = Some(st);
            }
            layer_steps[d] = st_by_t.into_iter().map(|s| s.expect("every step visited")).collect();
            finals.push((h, c));
        }
        init_h.push(concat_rows(&finals[0].0, half, &finals[1].0, half, batch));
        init_c.push(concat_rows(&finals[0].1, half, &finals[1].1, half, batch));
        let mut next: Vec<Vec<R>> = (0..s_max).map(|t| concat_rows(&outs[0][t], half, &outs[1][t], half, batch)).collect();
        if l + 1 < n_layers {
            if let Some(dr) = dropout.as_deref_mut() {
                let layer_masks: Vec<Vec<R>> = (0..s_max).map(|_| dr.mask(batch * hd)).collect();
                for (x, m) in next.iter_mut().zip(&layer_masks) {
                    apply_mask(x, m);
                }
                drops.push(layer_masks);
            } else {
                drops.push(Vec::new());
            }
        }
        steps.push(layer_steps);
        inputs = next;
    }
    let mut hs = vec![R::zero(); batch * s_max * hd];
    for (t, out) in inputs.iter().enumerate() {
        for b in 0..batch {
            hs[(b * s_max + t) * hd..(b * s_max + t + 1) * hd].copy_from_slice(&out[b * hd..(b + 1) * hd]);
        }
    }
    let mut enc_proj = vec![R::zero(); batch * s_max * hd];
    gemm(false, true, batch * s_max, hd, hd, R::one(), &hs, p.get(lay.att_wh), R::zero(), &mut enc_proj);
    EncForward { s_max, lens, hs, enc_proj, init_h, init_c, src_ids, steps, drops }
}

/// Attention of one decoder row over one source.
pub(crate) struct Attention<R> {
    pub a: Vec<R>,
    pub ctx: Vec<R>,
    u: Vec<R>,
}

fn attend<R: Real>(p: &Params<R>, enc: &EncForward<R>, row: usize, sp: &[R], cov: &[R]) -> Attention<R> {
    let lay = &p.layout;
    let hd = lay.hidden_dim;
    let len = enc.lens[row];
    let base = row * enc.s_max * hd;
    let (wc, bias, v) = (p.get(lay.att_wc), p.get(lay.att_b), p.get(lay.att_v));
    let mut u = vec![R::zero(); len * hd];
    let mut a = vec![R::zero(); len];
    for i in 0..len {
        let ep = &enc.enc_proj[base + i * hd..base + (i + 1) * hd];
        let mut e = R::zero();
        for j in 0..hd {
            let x = (ep[j] + sp[j] + wc[j] * cov[i] + bias[j]).tanh();
            u[i * hd + j] = x;
            e = e + v[j] * x;
        }
        a[i] = e;
    }
    softmax_in_place(&mut a);
    let mut ctx = vec![R::zero(); hd];
    for (i, &ai) in a.iter().enumerate() {
        for (c, &h) in ctx.iter_mut().zip(&enc.hs[base + i * hd..base + (i + 1) * hd]) {
            *c = *c + ai * h;
        }
    }
    Attention { a, ctx, u }
}

/// Forward values of one decoder step over a batch of rows.
pub(crate) struct DecStep<R> {
    lstm: Vec<LstmStep<R>>,
    drops: Vec<Vec<R>>,
    emb_ids: Vec<usize>,
    emb: Vec<R>,
    /// Top decoder state, `rows × hidden`.
    pub s: Vec<R>,
    pub attn: Vec<Attention<R>>,
    cov_before: Vec<Vec<R>>,
    so: Vec<R>,
    /// Attentional output fed to the next step.
    pub o: Vec<R>,
    /// Vocabulary softmax, `rows × V`.
    pub pv: Vec<R>,
    /// Generation probability per row.
    pub g: Vec<R>,
}

/// Recurrent decoder state of a batch of rows.
#[derive(Debug, Clone)]
pub(crate) struct DecCarry<R> {
    pub h: Vec<Vec<R>>,
    pub c: Vec<Vec<R>>,
    pub o: Vec<R>,
    pub cov: Vec<Vec<R>>,
}

/// Input id of an extended target id: source OOVs read as UNK.
pub(crate) fn input_id(id: usize, vocab: usize) -> usize {
    if id >= vocab {
        UNK
    } else {
        id
    }
}

/// One decoder step. `enc_rows[r]` names the encoded source of row `r`;
/// `carry` is advanced in place.
pub(crate) fn decoder_step<R: Real>(
    p: &Params<R>,
    enc: &EncForward<R>,
    enc_rows: &[usize],
    prev: &[usize],
    carry: &mut DecCarry<R>,
    mut dropout: Option<&mut Dropout<'_>>,
) -> DecStep<R> {
    let lay = &p.layout;
    let (e, hd, v) = (lay.embedding_dim, lay.hidden_dim, lay.tgt_vocab);
    let rows = prev.len();
    let emb_ids: Vec<usize> = prev.iter().map(|&y| input_id(y, v)).collect();
    let emb = gather_rows(p.get(lay.tgt_emb), e, &emb_ids);
    let mut input = concat_rows(&emb, e, &carry.o, hd, rows);
    let mut lstm = Vec::with_capacity(lay.dec.len());
    let mut drops = Vec::new();
    for (l, ids) in lay.dec.iter().enumerate() {
        let st = lstm_forward(p, *ids, rows, &input, &carry.h[l], &carry.c[l], None);
        carry.h[l].clone_from(&st.h);
        carry.c[l].clone_from(&st.c);
        input = st.h.clone();
        if l + 1 < lay.dec.len() {
            if let Some(dr) = dropout.as_deref_mut() {
                let m = dr.mask(rows * hd);
                apply_mask(&mut input, &m);
                drops.push(m);
            }
        }
        lstm.push(st);
    }
    let s = input;
    let mut sp = vec![R::zero(); rows * hd];
    gemm(false, true, rows, hd, hd, R::one(), &s, p.get(lay.att_ws), R::zero(), &mut sp);
    let cov_before = carry.cov.clone();
    let attn: Vec<Attention<R>> =
        (0..rows).map(|r| attend(p, enc, enc_rows[r], &sp[r * hd..(r + 1) * hd], &cov_before[r])).collect();
    for (cov, at) in carry.cov.iter_mut().zip(&attn) {
        add_into(cov, &at.a);
    }
    let ctx: Vec<R> = attn.iter().flat_map(|a| a.ctx.iter().copied()).collect();
    let so = concat_rows(&s, hd, &ctx, hd, rows);
    let mut o = affine_rows(&so, rows, p.get(lay.out_w), p.get(lay.out_b), hd, 2 * hd);
    for x in &mut o {
        *x = x.tanh();
    }
    let mut pv = affine_rows(&o, rows, p.get(lay.vocab_w), p.get(lay.vocab_b), v, hd);
    for row in pv.chunks_mut(v) {
        softmax_in_place(row);
    }
    let gw = p.get(lay.gen_w);
    let gb = p.get(lay.gen_b)[0];
    let g = (0..rows)
        .map(|r| {
            let mut z = gb;
            for j in 0..hd {
                z = z + gw[j] * ctx[r * hd + j] + gw[hd + j] * s[r * hd + j];
            }
            for j in 0..e {
                z = z + gw[2 * hd + j] * emb[r * e + j];
            }
            sigmoid(z)
        })
        .collect();
    carry.o.clone_from(&o);
    DecStep { lstm, drops, emb_ids, emb, s, attn, cov_before, so, o, pv, g }
}

/// Initial decoder carry for rows reading the given encoded sources.
pub(crate) fn initial_carry<R: Real>(enc: &EncForward<R>, enc_rows: &[usize], hd: usize) -> DecCarry<R> {
    let pick = |m: &Vec<R>| -> Vec<R> { enc_rows.iter().flat_map(|&r| m[r * hd..(r + 1) * hd].iter().copied()).collect() };
    DecCarry {
        h: enc.init_h.iter().map(pick).collect(),
        c: enc.init_c.iter().map(pick).collect(),
        o: vec![R::zero(); enc_rows.len() * hd],
        cov: enc_rows.iter().map(|&r| vec![R::zero(); enc.lens[r]]).collect(),
    }
}

/// Probability of extended id `y` for row `r`: generation plus copy mass.
fn target_prob<R: Real>(step: &DecStep<R>, r: usize, v: usize, src_ext: &[usize], y: usize) -> (R, R, R) {
    let pv_y = if y < v { step.pv[r * v + y] } else { R::zero() };
    let pc = src_ext
        .iter()
        .zip(&step.attn[r].a)
        .filter(|(&x, _)| x == y)
        .fold(R::zero(), |s, (_, &a)| s + a);
    let g = step.g[r];
    (g * pv_y + (R::one() - g) * pc, pv_y, pc)
}

/// Full distribution over `V + n_oov` extended ids for row `r`.
pub(crate) fn final_distribution<R: Real>(
    step: &DecStep<R>,
    r: usize,
    v: usize,
    src_ext: &[usize],
    n_oov: usize,
    g_override: Option<R>,
) -> Vec<R> {
    let g = g_override.unwrap_or(step.g[r]);
    let mut dist: Vec<R> = step.pv[r * v..(r + 1) * v].iter().map(|&x| g * x).collect();
    dist.resize(v + n_oov, R::zero());
    for (&x, &a) in src_ext.iter().zip(&step.attn[r].a) {
        dist[x] = dist[x] + (R::one() - g) * a;
    }
    dist
}

/// Loss of a batch and, when requested, its gradient.
#[derive(Debug, Clone)]
pub struct BatchLoss<R> {
    /// Mean over examples of the per-step average of `-log P + λ·covloss`.
    pub loss: f64,
    /// Same average restricted to the likelihood term.
    pub nll: f64,
    /// Same average restricted to the coverage term.
    pub coverage: f64,
    /// Target tokens, EOS included.
    pub tokens: usize,
    pub grads: Option<Vec<Vec<R>>>,
}

/// Teacher-forced loss over `examples`. Dropout is active when an RNG is given.
pub fn batch_loss<R: Real>(
    params: &Params<R>,
    examples: &[&Example],
    config: &PgConfig,
    dropout_rng: Option<&mut ChaCha8Rng>,
    want_grads: bool,
) -> Result<BatchLoss<R>, PgError> {
    if examples.is_empty() {
        return Err(PgError::EmptyDataset);
    }
    for ex in examples {
        if ex.src.is_empty() {
            return Err(PgError::EmptySource);
        }
        if ex.tgt.last() != Some(&EOS) {
            return Err(PgError::MissingEos);
        }
    }
    let lay = &params.layout;
    let (e, hd, v) = (lay.embedding_dim, lay.hidden_dim, lay.tgt_vocab);
    let half = hd / 2;
    let bsz = examples.len();
    let lambda = R::from_f64(config.coverage_loss_weight);
    let mut dropout = dropout_rng.filter(|_| config.dropout > 0.0).map(|rng| Dropout { rng, p: config.dropout });

    let srcs: Vec<&[usize]> = examples.iter().map(|x| x.src.as_slice()).collect();
    let enc = encoder_forward(params, &srcs, dropout.as_mut());
    let rows: Vec<usize> = (0..bsz).collect();
    let t_lens: Vec<usize> = examples.iter().map(|x| x.tgt.len()).collect();
    let t_max = t_lens.iter().copied().max().unwrap_or(0);
    let weights: Vec<R> = t_lens.iter().map(|&t| R::from_f64(1.0 / (t as f64 * bsz as f64))).collect();

    let mut carry = initial_carry(&enc, &rows, hd);
    let mut steps = Vec::with_capacity(t_max);
    let mut probs: Vec<Vec<(R, R, R)>> = Vec::with_capacity(t_max);
    let (mut nll, mut cov_loss) = (0.0f64, 0.0f64);
    for t in 0..t_max {
        let prev: Vec<usize> =
            examples.iter().map(|x| if t == 0 { BOS } else { x.tgt.get(t - 1).copied().unwrap_or(PAD) }).collect();
        let st = decoder_step(params, &enc, &rows, &prev, &mut carry, dropout.as_mut());
        let mut pt = Vec::with_capacity(bsz);
        for (b, ex) in examples.iter().enumerate() {
            if t >= t_lens[b] {
                pt.push((R::one(), R::zero(), R::zero()));
                continue;
            }
            let (pr, pv_y, pc) = target_prob(&st, b, v, &ex.src_ext, ex.tgt[t]);
            let w = weights[b].as_f64();
            nll -= w * pr.as_f64().ln();
            let c: f64 = st.attn[b].a.iter().zip(&st.cov_before[b]).map(|(&a, &c)| a.min(c).as_f64()).sum();
            cov_loss += w * lambda.as_f64() * c;
            pt.push((pr, pv_y, pc));
        }
        steps.push(st);
        probs.push(pt);
    }
    let loss = nll + cov_loss;
    if !loss.is_finite() {
        return Err(PgError::NonFinite { step: 0 });
    }
    let tokens = t_lens.iter().sum();
    if !want_grads {
        return Ok(BatchLoss { loss, nll, coverage: cov_loss, tokens, grads: None });
    }

    let one = R::one();
    let mut grads = params.zeros_like();
    let n_dec = lay.dec.len();
    let mut dh: Vec<Vec<R>> = vec![vec![R::zero(); bsz * hd]; n_dec];
    let mut dc: Vec<Vec<R>> = vec![vec![R::zero(); bsz * hd]; n_dec];
    let mut d_o_next = vec![R::zero(); bsz * hd];
    let mut g_cov: Vec<Vec<R>> = enc.lens.iter().map(|&l| vec![R::zero(); l]).collect();
    let mut d_hs = vec![R::zero(); bsz * enc.s_max * hd];
    let mut d_ep = vec![R::zero(); bsz * enc.s_max * hd];
    let (gen_w, vocab_w, out_w, att_ws) =
        (params.get(lay.gen_w), params.get(lay.vocab_w), params.get(lay.out_w), params.get(lay.att_ws));
    let (wc, att_v) = (params.get(lay.att_wc), params.get(lay.att_v));

    for t in (0..t_max).rev() {
        let st = &steps[t];
        let mut d_logits = vec![R::zero(); bsz * v];
        let mut d_g = vec![R::zero(); bsz];
        let mut d_a: Vec<Vec<R>> = g_cov.iter().map(|_| Vec::new()).collect();
        let mut d_cov_direct: Vec<Vec<R>> = d_a.clone();
        for (b, ex) in examples.iter().enumerate() {
            if t >= t_lens[b] {
                continue;
            }
            let y = ex.tgt[t];
            let (pr, pv_y, pc) = probs[t][b];
            let w = weights[b];
            let g = st.g[b];
            let dp = -w / pr;
            d_g[b] = dp * (pv_y - pc);
            if y < v {
                let dpy = dp * g;
                let row = &mut d_logits[b * v..(b + 1) * v];
                for (k, d) in row.iter_mut().enumerate() {
                    *d = -dpy * pv_y * st.pv[b * v + k];
                }
                row[y] = row[y] + dpy * pv_y;
            }
            let a = &st.attn[b].a;
            let cov = &st.cov_before[b];
            let mut da = vec![R::zero(); a.len()];
            let mut dcv = vec![R::zero(); a.len()];
            for i in 0..a.len() {
                if ex.src_ext[i] == y {
                    da[i] = da[i] + dp * (one - g);
                }
                if a[i] < cov[i] {
                    da[i] = da[i] + lambda * w;
                } else {
                    dcv[i] = lambda * w;
                }
            }
            d_a[b] = da;
            d_cov_direct[b] = dcv;
        }

        gemm(true, false, v, hd, bsz, one, &d_logits, &st.o, one, &mut grads[lay.vocab_w]);
        col_sums_into(&mut grads[lay.vocab_b], &d_logits, v);
        let mut d_o = std::mem::replace(&mut d_o_next, vec![R::zero(); bsz * hd]);
        gemm(false, false, bsz, hd, v, one, &d_logits, vocab_w, one, &mut d_o);
        for (d, &o) in d_o.iter_mut().zip(&st.o) {
            *d = *d * (one - o * o);
        }
        gemm(true, false, hd, 2 * hd, bsz, one, &d_o, &st.so, one, &mut grads[lay.out_w]);
        col_sums_into(&mut grads[lay.out_b], &d_o, hd);
        let mut d_so = vec![R::zero(); bsz * 2 * hd];
        gemm(false, false, bsz, 2 * hd, hd, one, &d_o, out_w, R::zero(), &mut d_so);

        let mut d_s = vec![R::zero(); bsz * hd];
        let mut d_emb = vec![R::zero(); bsz * e];
        let mut d_sp = vec![R::zero(); bsz * hd];
        for b in 0..bsz {
            if t >= t_lens[b] {
                continue;
            }
            let g = st.g[b];
            let dz = d_g[b] * g * (one - g);
            let ctx = &st.attn[b].ctx;
            let s_row = &st.s[b * hd..(b + 1) * hd];
            let emb_row = &st.emb[b * e..(b + 1) * e];
            {
                let gw = &mut grads[lay.gen_w];
                for j in 0..hd {
                    gw[j] = gw[j] + dz * ctx[j];
                    gw[hd + j] = gw[hd + j] + dz * s_row[j];
                }
                for j in 0..e {
                    gw[2 * hd + j] = gw[2 * hd + j] + dz * emb_row[j];
                }
                grads[lay.gen_b][0] = grads[lay.gen_b][0] + dz;
            }
            let mut d_ctx: Vec<R> = d_so[b * 2 * hd + hd..(b + 1) * 2 * hd].to_vec();
            for j in 0..hd {
                d_ctx[j] = d_ctx[j] + dz * gen_w[j];
                d_s[b * hd + j] = d_so[b * 2 * hd + j] + dz * gen_w[hd + j];
            }
            for j in 0..e {
                d_emb[b * e + j] = dz * gen_w[2 * hd + j];
            }

            // Attention backward for row b.
            let at = &st.attn[b];
            let len = enc.lens[b];
            let base = b * enc.s_max * hd;
            let da = &mut d_a[b];
            for i in 0..len {
                let hrow = &enc.hs[base + i * hd..base + (i + 1) * hd];
                let mut dot = R::zero();
                for j in 0..hd {
                    dot = dot + d_ctx[j] * hrow[j];
                    d_hs[base + i * hd + j] = d_hs[base + i * hd + j] + at.a[i] * d_ctx[j];
                }
                da[i] = da[i] + dot + g_cov[b][i];
            }
            let mean = at.a.iter().zip(da.iter()).fold(R::zero(), |s, (&a, &d)| s + a * d);
            let cov = &st.cov_before[b];
            let mut d_cov = d_cov_direct[b].clone();
            for i in 0..len {
                let de = at.a[i] * (da[i] - mean);
                for j in 0..hd {
                    let u = at.u[i * hd + j];
                    let dpre = de * att_v[j] * (one - u * u);
                    grads[lay.att_v][j] = grads[lay.att_v][j] + de * u;
                    d_ep[base + i * hd + j] = d_ep[base + i * hd + j] + dpre;
                    d_sp[b * hd + j] = d_sp[b * hd + j] + dpre;
                    grads[lay.att_wc][j] = grads[lay.att_wc][j] + dpre * cov[i];
                    grads[lay.att_b][j] = grads[lay.att_b][j] + dpre;
                    d_cov[i] = d_cov[i] + dpre * wc[j];
                }
            }
            add_into(&mut g_cov[b], &d_cov);
        }
        gemm(true, false, hd, hd, bsz, one, &d_sp, &st.s, one, &mut grads[lay.att_ws]);
        gemm(false, false, bsz, hd, hd, one, &d_sp, att_ws, one, &mut d_s);

        add_into(&mut dh[n_dec - 1], &d_s);
        for l in (0..n_dec).rev() {
            let (mut dx, dhp, dcp) = lstm_backward(params, &mut grads, lay.dec[l], bsz, &st.lstm[l], &dh[l], &dc[l]);
            dh[l] = dhp;
            dc[l] = dcp;
            if l > 0 {
                if let Some(m) = st.drops.get(l - 1) {
                    apply_mask(&mut dx, m);
                }
                add_into(&mut dh[l - 1], &dx);
            } else {
                for b in 0..bsz {
                    add_into(&mut d_emb[b * e..(b + 1) * e], &dx[b * (e + hd)..b * (e + hd) + e]);
                    d_o_next[b * hd..(b + 1) * hd].copy_from_slice(&dx[b * (e + hd) + e..(b + 1) * (e + hd)]);
                }
            }
        }
        scatter_rows(&mut grads[lay.tgt_emb], e, &st.emb_ids, &d_emb);
    }

    // Encoder.
    let rows_all = bsz * enc.s_max;
    gemm(true, false, hd, hd, rows_all, one, &d_ep, &enc.hs, one, &mut grads[lay.att_wh]);
    gemm(false, false, rows_all, hd, hd, one, &d_ep, params.get(lay.att_wh), one, &mut d_hs);
    let mut d_out: Vec<Vec<R>> = (0..enc.s_max)
        .map(|t| (0..bsz).flat_map(|b| d_hs[(b * enc.s_max + t) * hd..(b * enc.s_max + t + 1) * hd].to_vec()).collect())
        .collect();
    for l in (0..lay.enc.len()).rev() {
        let in_dim = lay.enc[l][0].input;
        let mut d_in: Vec<Vec<R>> = vec![vec![R::zero(); bsz * in_dim]; enc.s_max];
        for d in 0..2 {
            let ids = lay.enc[l][d];
            let split = |m: &Vec<R>| -> Vec<R> {
                (0..bsz).flat_map(|b| m[b * hd + d * half..b * hd + (d + 1) * half].to_vec()).collect()
            };
            let mut gh = split(&dh[l]);
            let mut gc = split(&dc[l]);
            let order: Vec<usize> = if d == 0 { (0..enc.s_max).rev().collect() } else { (0..enc.s_max).collect() };
            for t in order {
                add_into(&mut gh, &split(&d_out[t]));
                let (dx, dhp, dcp) = lstm_backward(params, &mut grads, ids, bsz, &enc.steps[l][d][t], &gh, &gc);
                add_into(&mut d_in[t], &dx);
                gh = dhp;
                gc = dcp;
            }
        }
        if l > 0 {
            if let Some(masks) = enc.drops.get(l - 1).filter(|m| !m.is_empty()) {
                for (x, m) in d_in.iter_mut().zip(masks) {
                    apply_mask(x, m);
                }
            }
            d_out = d_in;
        } else {
            for (t, dx) in d_in.iter().enumerate() {
                scatter_rows(&mut grads[lay.src_emb], e, &enc.src_ids[t], dx);
            }
        }
    }
    Ok(BatchLoss { loss, nll, coverage: cov_loss, tokens, grads: Some(grads) })
}
