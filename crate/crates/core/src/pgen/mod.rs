//! Pointer-generator encoder-decoder with coverage attention.
//!
//! The encoder is a stack of bidirectional LSTMs whose per-direction size is
//! half the hidden size, so concatenated states have `hidden_dim` entries.
//! The decoder is a stack of LSTMs initialized from the encoder's final
//! states, fed the previous token embedding and the previous attentional
//! output (input feeding). Attention is additive with a coverage term. The
//! output distribution mixes a vocabulary softmax and the attention over
//! source positions through the gate `p_gen`, over an extended vocabulary in
//! which source tokens missing from the target vocabulary get temporary ids.
//!
//! Everything is generic over [`Real`]: `f64` for gradient checks and `f32`
//! for training.

mod checkpoint;
mod decode;
mod net;
mod params;
mod real;
mod train;
mod vocab;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{load_model, load_state, save_model, save_state, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use decode::{
    beam_search, decode_step, encode, generate, generate_with_bucket, greedy_decode, Decoded, DecoderState,
    EncoderOutput, Generated,
};
pub use net::{batch_loss, BatchLoss};
pub use params::{Layout, LstmIds, ParamId, Params};
pub use real::Real;
pub use train::{dataset_bleu, dataset_loss, train, train_resume, Adam, TrainLogEntry, TrainOutcome, TrainState};
pub use vocab::{Example, Vocabulary, BOS, EOS, PAD, RESERVED, UNK};

use crate::linearize::LengthBuckets;

#[derive(Debug, Error)]
pub enum PgError {
    #[error("invalid generator config: {0}")]
    Config(String),
    #[error("empty source sequence")]
    EmptySource,
    #[error("target must end with EOS")]
    MissingEos,
    #[error("loss is not finite at step {step}")]
    NonFinite { step: usize },
    #[error("training diverged at step {step}: loss {loss:.4} exceeds 10x the initial {initial:.4}")]
    Diverged { step: usize, loss: f64, initial: f64 },
    #[error("empty training set")]
    EmptyDataset,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Model selection criterion for the returned checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectBy {
    ValidLoss,
    ValidBleu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PgConfig {
    pub embedding_dim: usize,
    /// Decoder state size; each encoder direction has half of it.
    pub hidden_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub dropout: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub coverage_loss_weight: f64,
    pub beam_size: usize,
    pub max_decode_len: usize,
    pub min_token_freq: usize,
    /// Global gradient-norm clip; 0 disables.
    pub max_grad_norm: f64,
    /// Uniform initialization range.
    pub init_scale: f64,
    pub valid_every: usize,
    /// Stop after this many validations without improvement; 0 disables.
    pub patience: usize,
    pub select_by: SelectBy,
    pub seed: u64,
}

impl Default for PgConfig {
    fn default() -> Self {
        PgConfig {
            embedding_dim: 128,
            hidden_dim: 128,
            encoder_layers: 2,
            decoder_layers: 2,
            dropout: 0.3,
            learning_rate: 0.0005,
            batch_size: 32,
            max_steps: 8000,
            coverage_loss_weight: 1.0,
            beam_size: 5,
            max_decode_len: 60,
            min_token_freq: 2,
            max_grad_norm: 5.0,
            init_scale: 0.1,
            valid_every: 250,
            patience: 0,
            select_by: SelectBy::ValidLoss,
            seed: 1,
        }
    }
}

impl PgConfig {
    /// Full-size dimensions: 500-unit embeddings and hidden states.
    pub fn full_scale() -> Self {
        PgConfig { embedding_dim: 500, hidden_dim: 500, ..Default::default() }
    }

    pub fn validate(&self) -> Result<(), PgError> {
        let bad = |m: &str| Err(PgError::Config(m.to_string()));
        if self.embedding_dim == 0 || self.hidden_dim == 0 {
            return bad("dimensions must be positive");
        }
        if self.hidden_dim % 2 != 0 {
            return bad("hidden_dim must be even (bidirectional halves)");
        }
        if self.encoder_layers == 0 || self.decoder_layers != self.encoder_layers {
            return bad("decoder_layers must equal encoder_layers and be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        if !(self.learning_rate > 0.0) || self.batch_size == 0 || self.beam_size == 0 || self.max_decode_len == 0 {
            return bad("learning_rate, batch_size, beam_size and max_decode_len must be positive");
        }
        if self.coverage_loss_weight < 0.0 || self.max_grad_norm < 0.0 || !(self.init_scale > 0.0) {
            return bad("coverage_loss_weight and max_grad_norm must be non-negative, init_scale positive");
        }
        if self.min_token_freq == 0 || self.valid_every == 0 {
            return bad("min_token_freq and valid_every must be positive");
        }
        Ok(())
    }
}

/// Trained generator: configuration, vocabularies, length thresholds and
/// parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct PgModel<R: Real> {
    pub config: PgConfig,
    pub src_vocab: Vocabulary,
    pub tgt_vocab: Vocabulary,
    pub buckets: Option<LengthBuckets>,
    pub params: Params<R>,
}

impl<R: Real> PgModel<R> {
    /// Fresh model with parameters drawn uniformly from ±`init_scale`.
    pub fn new(config: PgConfig, src_vocab: Vocabulary, tgt_vocab: Vocabulary) -> Result<Self, PgError> {
        config.validate()?;
        let params = Params::init(&config, src_vocab.len(), tgt_vocab.len());
        Ok(PgModel { config, src_vocab, tgt_vocab, buckets: None, params })
    }

    pub fn layout(&self) -> &Layout {
        &self.params.layout
    }

    pub fn example(&self, source: &[String], target: &[String]) -> Result<Example, PgError> {
        Example::new(source, Some(target), &self.src_vocab, &self.tgt_vocab)
    }

    pub fn convert<S: Real>(&self) -> PgModel<S> {
        PgModel {
            config: self.config.clone(),
            src_vocab: self.src_vocab.clone(),
            tgt_vocab: self.tgt_vocab.clone(),
            buckets: self.buckets,
            params: self.params.convert(),
        }
    }
}
