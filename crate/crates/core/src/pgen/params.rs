use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::real::Real;
use super::PgConfig;

/// Index of a parameter tensor.
pub type ParamId = usize;

/// One LSTM: weights `4h × (input + h)` acting on `[x; h_prev]` with gate
/// blocks in the order input, forget, cell, output, and a `4h` bias.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LstmIds {
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub hidden: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub embedding_dim: usize,
    pub hidden_dim: usize,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub src_emb: ParamId,
    pub tgt_emb: ParamId,
    /// `[forward, backward]` per encoder layer.
    pub enc: Vec<[LstmIds; 2]>,
    pub dec: Vec<LstmIds>,
    pub att_wh: ParamId,
    pub att_ws: ParamId,
    pub att_wc: ParamId,
    pub att_b: ParamId,
    pub att_v: ParamId,
    pub out_w: ParamId,
    pub out_b: ParamId,
    pub vocab_w: ParamId,
    pub vocab_b: ParamId,
    /// Copy gate over `[context; decoder state; input embedding]`.
    pub gen_w: ParamId,
    pub gen_b: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<R> {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<R>,
}

/// All trainable tensors with their layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<R> {
    pub layout: Layout,
    pub tensors: Vec<Tensor<R>>,
}

struct Builder<R> {
    tensors: Vec<Tensor<R>>,
}

impl<R: Real> Builder<R> {
    fn add(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.tensors.push(Tensor { name: name.into(), rows, cols, data: vec![R::zero(); rows * cols] });
        self.tensors.len() - 1
    }

    fn lstm(&mut self, name: &str, input: usize, hidden: usize) -> LstmIds {
        LstmIds {
            w: self.add(format!("{name}.w"), 4 * hidden, input + hidden),
            b: self.add(format!("{name}.b"), 1, 4 * hidden),
            input,
            hidden,
        }
    }
}

impl<R: Real> Params<R> {
    /// Zero-filled tensors for the given dimensions.
    pub fn zeros(config: &PgConfig, src_vocab: usize, tgt_vocab: usize) -> Self {
        let (e, h) = (config.embedding_dim, config.hidden_dim);
        let half = h / 2;
        let mut b = Builder { tensors: Vec::new() };
        let src_emb = b.add("src_emb", src_vocab, e);
        let tgt_emb = b.add("tgt_emb", tgt_vocab, e);
        let enc = (0..config.encoder_layers)
            .map(|l| {
                let input = if l == 0 { e } else { h };
                [b.lstm(&format!("enc.{l}.fw"), input, half), b.lstm(&format!("enc.{l}.bw"), input, half)]
            })
            .collect();
        let dec = (0..config.decoder_layers)
            .map(|l| b.lstm(&format!("dec.{l}"), if l == 0 { e + h } else { h }, h))
            .collect();
        let att_wh = b.add("att.wh", h, h);
        let att_ws = b.add("att.ws", h, h);
        let att_wc = b.add("att.wc", 1, h);
        let att_b = b.add("att.b", 1, h);
        let att_v = b.add("att.v", 1, h);
        let out_w = b.add("out.w", h, 2 * h);
        let out_b = b.add("out.b", 1, h);
        let vocab_w = b.add("vocab.w", tgt_vocab, h);
        let vocab_b = b.add("vocab.b", 1, tgt_vocab);
        let gen_w = b.add("gen.w", 1, 2 * h + e);
        let gen_b = b.add("gen.b", 1, 1);
        let layout = Layout {
            embedding_dim: e,
            hidden_dim: h,
            src_vocab,
            tgt_vocab,
            src_emb,
            tgt_emb,
            enc,
            dec,
            att_wh,
            att_ws,
            att_wc,
            att_b,
            att_v,
            out_w,
            out_b,
            vocab_w,
            vocab_b,
            gen_w,
            gen_b,
        };
        Params { layout, tensors: b.tensors }
    }

    /// Uniform ±`init_scale` initialization with forget-gate biases at 1.
    pub fn init(config: &PgConfig, src_vocab: usize, tgt_vocab: usize) -> Self {
        let mut p = Self::zeros(config, src_vocab, tgt_vocab);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let s = config.init_scale;
        for t in &mut p.tensors {
            for x in &mut t.data {
                *x = R::from_f64(rng.random_range(-s..s));
            }
        }
        let lstms: Vec<LstmIds> = p.layout.enc.iter().flatten().chain(&p.layout.dec).copied().collect();
        for l in lstms {
            for x in &mut p.tensors[l.b].data[l.hidden..2 * l.hidden] {
                *x = R::one();
            }
        }
        p
    }

    pub fn get(&self, id: ParamId) -> &[R] {
        &self.tensors[id].data
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    /// Zero tensors of the same shapes, used for gradients and moments.
    pub fn zeros_like(&self) -> Vec<Vec<R>> {
        self.tensors.iter().map(|t| vec![R::zero(); t.data.len()]).collect()
    }

    pub fn convert<S: Real>(&self) -> Params<S> {
        Params {
            layout: self.layout.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor {
                    name: t.name.clone(),
                    rows: t.rows,
                    cols: t.cols,
                    data: t.data.iter().map(|x| S::from_f64(x.as_f64())).collect(),
                })
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|x| x.is_finite()))
    }
}
