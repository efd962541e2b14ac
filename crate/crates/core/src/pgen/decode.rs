use crate::game::{Event, GameContext};
use crate::linearize::{detokenize, linearize_event, LengthBucket};

use super::net::{decoder_step, encoder_forward, final_distribution, initial_carry, DecCarry, EncForward};
use super::real::Real;
use super::vocab::{Example, BOS, EOS, PAD};
use super::{PgError, PgModel};

/// Encoded source: per-position states, decoder initial states and the
/// source's extended ids.
pub struct EncoderOutput<R> {
    pub(crate) enc: EncForward<R>,
    pub example: Example,
}

impl<R: Real> EncoderOutput<R> {
    pub fn len(&self) -> usize {
        self.enc.lens[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Top-layer state of source position `i` (`hidden_dim` values).
    pub fn state(&self, i: usize) -> &[R] {
        let hd = self.enc.hs.len() / self.enc.s_max;
        &self.enc.hs[i * hd..(i + 1) * hd]
    }

    /// Decoder state before the first step.
    pub fn initial_state(&self) -> DecoderState<R> {
        let hd = self.enc.hs.len() / self.enc.s_max;
        let c = initial_carry(&self.enc, &[0], hd);
        DecoderState {
            hidden: c.h,
            cell: c.c,
            output: c.o,
            coverage: c.cov.into_iter().next().unwrap_or_default(),
            attention: Vec::new(),
            p_gen: None,
        }
    }
}

/// Recurrent state between decode steps.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderState<R> {
    /// Hidden state per decoder layer.
    pub hidden: Vec<Vec<R>>,
    pub cell: Vec<Vec<R>>,
    /// Attentional output fed into the next step.
    pub output: Vec<R>,
    /// Sum of all attention distributions so far.
    pub coverage: Vec<R>,
    /// Attention of the last step.
    pub attention: Vec<R>,
    /// Copy gate of the last step.
    pub p_gen: Option<R>,
}

impl<R: Real> DecoderState<R> {
    fn carry(states: &[&DecoderState<R>]) -> DecCarry<R> {
        let layers = states[0].hidden.len();
        DecCarry {
            h: (0..layers).map(|l| states.iter().flat_map(|s| s.hidden[l].iter().copied()).collect()).collect(),
            c: (0..layers).map(|l| states.iter().flat_map(|s| s.cell[l].iter().copied()).collect()).collect(),
            o: states.iter().flat_map(|s| s.output.iter().copied()).collect(),
            cov: states.iter().map(|s| s.coverage.clone()).collect(),
        }
    }
}

/// Encodes a tokenized source. Inference mode: no dropout.
pub fn encode<R: Real>(model: &PgModel<R>, source: &[String]) -> Result<EncoderOutput<R>, PgError> {
    let example = Example::new(source, None, &model.src_vocab, &model.tgt_vocab)?;
    let enc = encoder_forward(&model.params, &[example.src.as_slice()], None);
    Ok(EncoderOutput { enc, example })
}

pub(crate) fn encode_example<R: Real>(model: &PgModel<R>, example: &Example) -> EncoderOutput<R> {
    let enc = encoder_forward(&model.params, &[example.src.as_slice()], None);
    EncoderOutput { enc, example: example.clone() }
}

/// Runs the decoder on several states at once, returning each row's
/// extended distribution and successor state.
fn step_rows<R: Real>(
    model: &PgModel<R>,
    enc: &EncoderOutput<R>,
    states: &[&DecoderState<R>],
    prev: &[usize],
    p_gen: Option<R>,
) -> Vec<(Vec<R>, DecoderState<R>)> {
    let rows = states.len();
    let hd = model.params.layout.hidden_dim;
    let v = model.params.layout.tgt_vocab;
    let mut carry = DecoderState::carry(states);
    let st = decoder_step(&model.params, &enc.enc, &vec![0; rows], prev, &mut carry, None);
    let mut cov = carry.cov.into_iter();
    (0..rows)
        .map(|r| {
            let dist = final_distribution(&st, r, v, &enc.example.src_ext, enc.example.oov.len(), p_gen);
            let next = DecoderState {
                hidden: carry.h.iter().map(|h| h[r * hd..(r + 1) * hd].to_vec()).collect(),
                cell: carry.c.iter().map(|c| c[r * hd..(r + 1) * hd].to_vec()).collect(),
                output: carry.o[r * hd..(r + 1) * hd].to_vec(),
                coverage: cov.next().unwrap_or_default(),
                attention: st.attn[r].a.clone(),
                p_gen: Some(st.g[r]),
            };
            (dist, next)
        })
        .collect()
}

/// One decoder step from `state` after emitting extended id `prev`.
///
/// Returns the distribution over the target vocabulary followed by the
/// source's out-of-vocabulary tokens. `p_gen` overrides the copy gate.
pub fn decode_step<R: Real>(
    model: &PgModel<R>,
    enc: &EncoderOutput<R>,
    state: &DecoderState<R>,
    prev: usize,
    p_gen: Option<R>,
) -> (Vec<R>, DecoderState<R>) {
    step_rows(model, enc, &[state], &[prev], p_gen).pop().expect("one row")
}

/// A decoded sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    /// Extended ids, EOS excluded.
    pub ids: Vec<usize>,
    pub tokens: Vec<String>,
    /// Sum of token log-probabilities, EOS included when emitted.
    pub log_prob: f64,
    /// `log_prob` divided by the number of scored tokens.
    pub confidence: f64,
    /// Hit the length limit without emitting EOS.
    pub truncated: bool,
}

fn finish<R: Real>(model: &PgModel<R>, enc: &EncoderOutput<R>, ids: Vec<usize>, log_prob: f64, ended: bool) -> Decoded {
    let scored = ids.len() + usize::from(ended);
    let tokens = ids.iter().map(|&id| enc.example.token(id, &model.tgt_vocab).to_string()).collect();
    Decoded { ids, tokens, log_prob, confidence: log_prob / scored.max(1) as f64, truncated: !ended }
}

fn allowed(id: usize) -> bool {
    id != PAD && id != BOS
}

/// Argmax decoding; ties go to the lower id.
pub fn greedy_decode<R: Real>(model: &PgModel<R>, enc: &EncoderOutput<R>, max_len: usize) -> Decoded {
    let mut state = enc.initial_state();
    let mut prev = BOS;
    let mut ids = Vec::new();
    let mut log_prob = 0.0;
    for _ in 0..max_len {
        let (dist, next) = decode_step(model, enc, &state, prev, None);
        let (best, p) = dist
            .iter()
            .enumerate()
            .filter(|(i, _)| allowed(*i))
            .fold((usize::MAX, R::neg_infinity()), |acc, (i, &p)| if p > acc.1 { (i, p) } else { acc });
        log_prob += p.as_f64().ln();
        if best == EOS {
            return finish(model, enc, ids, log_prob, true);
        }
        ids.push(best);
        prev = best;
        state = next;
    }
    finish(model, enc, ids, log_prob, false)
}

struct Hyp<R> {
    ids: Vec<usize>,
    log_prob: f64,
    state: DecoderState<R>,
}

/// Beam search ranked by summed log-probability; the returned hypothesis is
/// the finished one with the best mean log-probability. With `beam_size`
/// 1 this is greedy decoding.
pub fn beam_search<R: Real>(model: &PgModel<R>, enc: &EncoderOutput<R>, beam_size: usize, max_len: usize) -> Decoded {
    let k = beam_size.max(1);
    let mut live = vec![Hyp { ids: Vec::new(), log_prob: 0.0, state: enc.initial_state() }];
    let mut done: Vec<(Vec<usize>, f64)> = Vec::new();
    for _ in 0..max_len {
        let states: Vec<&DecoderState<R>> = live.iter().map(|h| &h.state).collect();
        let prev: Vec<usize> = live.iter().map(|h| h.ids.last().copied().unwrap_or(BOS)).collect();
        let stepped = step_rows(model, enc, &states, &prev, None);
        let mut cand: Vec<(usize, usize, f64)> = Vec::new();
        for (b, (dist, _)) in stepped.iter().enumerate() {
            let mut row: Vec<(usize, f64)> =
                dist.iter().enumerate().filter(|(i, _)| allowed(*i)).map(|(i, p)| (i, p.as_f64().ln())).collect();
            row.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
            cand.extend(row.into_iter().take(k).map(|(i, lp)| (b, i, live[b].log_prob + lp)));
        }
        cand.sort_by(|x, y| y.2.total_cmp(&x.2).then(x.0.cmp(&y.0)).then(x.1.cmp(&y.1)));
        let mut next = Vec::new();
        for (b, id, lp) in cand.into_iter().take(k) {
            if id == EOS {
                done.push((live[b].ids.clone(), lp));
            } else {
                let mut ids = live[b].ids.clone();
                ids.push(id);
                next.push(Hyp { ids, log_prob: lp, state: stepped[b].1.clone() });
            }
        }
        live = next;
        if done.len() >= k || live.is_empty() {
            break;
        }
    }
    let mean = |ids: &[usize], lp: f64, ended: bool| lp / (ids.len() + usize::from(ended)).max(1) as f64;
    let best_done = done
        .into_iter()
        .fold(None::<(Vec<usize>, f64)>, |best, (ids, lp)| match best {
            Some((bi, bl)) if mean(&bi, bl, true) >= mean(&ids, lp, true) => Some((bi, bl)),
            _ => Some((ids, lp)),
        });
    match best_done {
        Some((ids, lp)) => finish(model, enc, ids, lp, true),
        None => {
            let h = live.into_iter().next().expect("beam never empties without a finished hypothesis");
            finish(model, enc, h.ids, h.log_prob, false)
        }
    }
}

/// Output of [`generate`].
#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub text: String,
    pub bucket: LengthBucket,
    pub decoded: Decoded,
    /// Confidence of each tried variant, in short, medium, long order.
    pub variants: Vec<(LengthBucket, f64)>,
}

/// Decodes the event linearized with the given length bucket.
pub fn generate_with_bucket<R: Real>(
    model: &PgModel<R>,
    event: &Event,
    context: &GameContext,
    bucket: LengthBucket,
    beam_size: usize,
) -> Result<Generated, PgError> {
    let source = linearize_event(event, context, bucket);
    let enc = encode(model, &source)?;
    let max_len = model.config.max_decode_len;
    let decoded =
        if beam_size <= 1 { greedy_decode(model, &enc, max_len) } else { beam_search(model, &enc, beam_size, max_len) };
    Ok(Generated { text: detokenize(&decoded.tokens), bucket, variants: vec![(bucket, decoded.confidence)], decoded })
}

/// Decodes all three length variants and keeps the most confident; ties
/// keep the shorter variant.
pub fn generate<R: Real>(
    model: &PgModel<R>,
    event: &Event,
    context: &GameContext,
    beam_size: usize,
) -> Result<Generated, PgError> {
    let mut best: Option<Generated> = None;
    let mut variants = Vec::new();
    for bucket in LengthBucket::ALL {
        let g = generate_with_bucket(model, event, context, bucket, beam_size)?;
        variants.push((bucket, g.decoded.confidence));
        if best.as_ref().is_none_or(|b| g.decoded.confidence > b.decoded.confidence) {
            best = Some(g);
        }
    }
    let mut best = best.expect("three variants");
    best.variants = variants;
    Ok(best)
}
