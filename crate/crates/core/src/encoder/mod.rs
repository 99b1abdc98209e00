//! A small pre-LayerNorm transformer classifier written against flat `f64`
//! parameter buffers, with hand-derived backpropagation.
//!
//! The network is split the usual way for feature-space OOD work: the
//! attention stack `f_att` maps a token sequence to the final-LayerNorm
//! `[CLS]` vector, and the linear head `f_out` maps that vector to K logits.
//! [`EncoderOutput::cls_attention`] exposes the last layer's `[CLS]` attention
//! row restricted to real-token positions.

mod model;
mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub(crate) use model::{backward, forward_cached, ForwardCache, Layout};
pub use train::{
    cross_entropy, train_classifier, train_with_hook, AdamW, BatchGrad, BatchView, EpochLog, StepLoss, TrainConfig, TrainOutcome,
};

use crate::data::{TokenizedExample, CLS, MASK};
use crate::{Error, Result};

/// How per-head `[CLS]` attention rows are combined into one score per token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadPooling {
    #[default]
    Mean,
    Max,
    Head(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub max_seq_len: usize,
    pub num_classes: usize,
    pub dropout: f64,
    pub seed: u64,
    #[serde(default)]
    pub attention_pooling: HeadPooling,
}

impl EncoderConfig {
    /// Desk-scale defaults: 2 layers, d = 64, 4 heads.
    pub fn small(vocab_size: usize, num_classes: usize, max_seq_len: usize) -> Self {
        EncoderConfig {
            vocab_size,
            num_layers: 2,
            num_heads: 4,
            model_dim: 64,
            ffn_dim: 128,
            max_seq_len,
            num_classes,
            dropout: 0.1,
            seed: 0,
            attention_pooling: HeadPooling::Mean,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_heads == 0 || self.model_dim == 0 || !self.model_dim.is_multiple_of(self.num_heads) {
            return bad(format!("model_dim {} not divisible by num_heads {}", self.model_dim, self.num_heads));
        }
        if self.num_classes < 2 {
            return bad(format!("num_classes must be >= 2, got {}", self.num_classes));
        }
        if self.num_layers == 0 || self.ffn_dim == 0 || self.max_seq_len == 0 {
            return bad("num_layers, ffn_dim and max_seq_len must be positive".into());
        }
        if self.vocab_size <= crate::data::NUM_SPECIAL {
            return bad(format!("vocab_size {} leaves no regular tokens", self.vocab_size));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if let HeadPooling::Head(h) = self.attention_pooling {
            if h >= self.num_heads {
                return bad(format!("attention head {h} out of range"));
            }
        }
        Ok(())
    }
}

/// Encoder configuration plus one flat parameter vector; see [`Layout`] for
/// the tensor offsets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    pub cls_feature: Vec<f64>,
    pub logits: Vec<f64>,
    /// Attention mass from `[CLS]` onto each maskable position (in position
    /// order), renormalized to sum to 1. Empty for CLS-only inputs.
    pub cls_attention: Vec<f64>,
}

pub fn init_encoder(config: EncoderConfig) -> Result<EncoderParams> {
    config.validate()?;
    let layout = Layout::new(&config);
    let mut values = vec![0.0; layout.total];
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let d = config.model_dim as f64;
    let emb = Normal::new(0.0, 1.0 / d.sqrt()).expect("valid std");
    for slot in [layout.tok_emb, layout.pos_emb] {
        for v in slot.of_mut(&mut values) {
            *v = emb.sample(&mut rng);
        }
    }
    // `[MASK]` never occurs in classifier training, so it keeps its initial
    // embedding; at zero a masked slot carries only its position.
    let m = MASK as usize * config.model_dim;
    layout.tok_emb.of_mut(&mut values)[m..m + config.model_dim].fill(0.0);
    let fill = |slot: model::Slot, fan_in: usize, values: &mut [f64], rng: &mut ChaCha8Rng| {
        let dist = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).expect("valid std");
        for v in slot.of_mut(values) {
            *v = dist.sample(rng);
        }
    };
    for l in &layout.layers {
        for w in [l.wq, l.wk, l.wv, l.wo] {
            fill(w, config.model_dim, &mut values, &mut rng);
        }
        fill(l.w1, config.model_dim, &mut values, &mut rng);
        fill(l.w2, config.ffn_dim, &mut values, &mut rng);
        l.ln1_g.of_mut(&mut values).fill(1.0);
        l.ln2_g.of_mut(&mut values).fill(1.0);
    }
    layout.lnf_g.of_mut(&mut values).fill(1.0);
    fill(layout.head_w, config.model_dim, &mut values, &mut rng);
    Ok(EncoderParams { config, values })
}

impl EncoderParams {
    pub fn layout(&self) -> Layout {
        Layout::new(&self.config)
    }

    pub fn num_params(&self) -> usize {
        self.values.len()
    }

    /// Hex SHA-256 over the config and the little-endian parameter bytes.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).expect("config serializes"));
        for v in &self.values {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Output-head weights as a `d x K` row-major matrix.
    pub fn head_weights(&self) -> &[f64] {
        self.layout().head_w.of(&self.values)
    }

    pub fn head_bias(&self) -> &[f64] {
        self.layout().head_b.of(&self.values)
    }

    /// `f_out`: logits for a penultimate feature, with an optional weight
    /// override of the same shape as [`Self::head_weights`].
    pub fn head_logits(&self, feature: &[f64], weights: Option<&[f64]>) -> Vec<f64> {
        let (d, k) = (self.config.model_dim, self.config.num_classes);
        let w = weights.unwrap_or_else(|| self.head_weights());
        model::linear(feature, w, self.head_bias(), 1, d, k)
    }

    pub fn check_example(&self, ex: &TokenizedExample) -> Result<()> {
        if ex.ids.len() != self.config.max_seq_len {
            return Err(Error::Dimension { expected: self.config.max_seq_len, got: ex.ids.len() });
        }
        if ex.ids.first() != Some(&CLS) {
            return Err(Error::Invalid("example does not start with [CLS]".into()));
        }
        if let Some(&bad) = ex.ids[..ex.active_len()].iter().find(|&&i| i as usize >= self.config.vocab_size) {
            return Err(Error::Invalid(format!("token id {bad} outside vocabulary of {}", self.config.vocab_size)));
        }
        Ok(())
    }

    /// Inference-mode forward pass (dropout off) over one example.
    pub fn forward_one(&self, ex: &TokenizedExample) -> Result<EncoderOutput> {
        self.check_example(ex)?;
        let layout = self.layout();
        let cache = forward_cached(self, &layout, ex, None, None);
        Ok(cache.output(self, &layout, ex))
    }
}

/// Inference-mode forward pass over a batch. Examples are independent, so
/// the batch is processed in parallel.
pub fn forward(params: &EncoderParams, batch: &[TokenizedExample]) -> Result<Vec<EncoderOutput>> {
    for ex in batch {
        params.check_example(ex)?;
    }
    let layout = params.layout();
    Ok(batch.par_iter().map(|ex| forward_cached(params, &layout, ex, None, None).output(params, &layout, ex)).collect())
}

/// Penultimate features for a batch, in order.
pub fn features(params: &EncoderParams, batch: &[TokenizedExample]) -> Result<Vec<Vec<f64>>> {
    Ok(forward(params, batch)?.into_iter().map(|o| o.cls_feature).collect())
}
