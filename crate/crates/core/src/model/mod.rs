//! The frozen base model: a small pre-LayerNorm decoder-only transformer.

mod checkpoint;
mod forward;
mod generate;
mod pretrain;
pub mod tokenizer;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub use checkpoint::{load_model, read_model, save_model, write_model};
pub use forward::{DecodeState, FnHook, Hook, HookOutput, TapeWeights, Trace};
pub use generate::{DecodeMode, GenerateParams};
pub use pretrain::{pretrain_base, KnownProbe, PretrainHyper, PretrainReport};
pub use tokenizer::Tokenizer;

/// Hidden width multiplier of the feed-forward block.
pub const MLP_MULT: usize = 4;
/// Standard deviation of the weight initializer.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { vocab_size: 256, d_model: 64, n_layers: 4, n_heads: 4, max_seq: 80, seed: 0 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 {
            return Err(Error::Config(format!("model sizes must be positive: {self:?}")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "n_heads {} must divide d_model {}",
                self.n_heads, self.d_model
            )));
        }
        if self.max_seq < 2 {
            return Err(Error::Config(format!("max_seq must be at least 2, got {}", self.max_seq)));
        }
        Ok(())
    }

    /// Every parameter tensor's name and shape, in checkpoint order.
    pub fn declared_tensors(&self) -> Vec<(String, Vec<usize>)> {
        let (v, d, h) = (self.vocab_size, self.d_model, self.d_model * MLP_MULT);
        let mut out = vec![
            ("tok_emb".to_string(), vec![v, d]),
            ("pos_emb".to_string(), vec![self.max_seq, d]),
        ];
        for l in 0..self.n_layers {
            let p = |s: &str| format!("layers.{l}.{s}");
            out.extend([
                (p("ln1.gain"), vec![d]),
                (p("ln1.shift"), vec![d]),
                (p("attn.wq"), vec![d, d]),
                (p("attn.bq"), vec![d]),
                (p("attn.wk"), vec![d, d]),
                (p("attn.bk"), vec![d]),
                (p("attn.wv"), vec![d, d]),
                (p("attn.bv"), vec![d]),
                (p("attn.wo"), vec![d, d]),
                (p("attn.bo"), vec![d]),
                (p("ln2.gain"), vec![d]),
                (p("ln2.shift"), vec![d]),
                (p("mlp.w_in"), vec![d, h]),
                (p("mlp.b_in"), vec![h]),
                (p("mlp.w_out"), vec![h, d]),
                (p("mlp.b_out"), vec![d]),
            ]);
        }
        out.extend([
            ("ln_f.gain".to_string(), vec![d]),
            ("ln_f.shift".to_string(), vec![d]),
            ("lm_head".to_string(), vec![d, v]),
        ]);
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    pub ln1_gain: Tensor,
    pub ln1_shift: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_shift: Tensor,
    pub w_in: Tensor,
    pub b_in: Tensor,
    pub w_out: Tensor,
    pub b_out: Tensor,
}

impl LayerWeights {
    fn tensors(&self) -> [&Tensor; 16] {
        [
            &self.ln1_gain, &self.ln1_shift, &self.wq, &self.bq, &self.wk, &self.bk, &self.wv, &self.bv,
            &self.wo, &self.bo, &self.ln2_gain, &self.ln2_shift, &self.w_in, &self.b_in, &self.w_out,
            &self.b_out,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 16] {
        [
            &mut self.ln1_gain, &mut self.ln1_shift, &mut self.wq, &mut self.bq, &mut self.wk, &mut self.bk,
            &mut self.wv, &mut self.bv, &mut self.wo, &mut self.bo, &mut self.ln2_gain, &mut self.ln2_shift,
            &mut self.w_in, &mut self.b_in, &mut self.w_out, &mut self.b_out,
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TinyModel {
    pub config: ModelConfig,
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub layers: Vec<LayerWeights>,
    pub lnf_gain: Tensor,
    pub lnf_shift: Tensor,
    pub lm_head: Tensor,
}

impl TinyModel {
    /// Weights ~ N(0, 0.02), biases and LayerNorm shifts zero, LayerNorm gains one.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut tensors = config.declared_tensors().into_iter().map(|(name, shape)| {
            if name.ends_with(".gain") {
                Tensor::ones(&shape)
            } else if shape.len() == 1 {
                Tensor::zeros(&shape)
            } else {
                Tensor::randn(&shape, INIT_STD, &mut rng)
            }
        });
        let mut next = || tensors.next().expect("declared tensor list matches layout");
        let tok_emb = next();
        let pos_emb = next();
        let layers = (0..config.n_layers)
            .map(|_| LayerWeights {
                ln1_gain: next(),
                ln1_shift: next(),
                wq: next(),
                bq: next(),
                wk: next(),
                bk: next(),
                wv: next(),
                bv: next(),
                wo: next(),
                bo: next(),
                ln2_gain: next(),
                ln2_shift: next(),
                w_in: next(),
                b_in: next(),
                w_out: next(),
                b_out: next(),
            })
            .collect();
        Ok(Self { lnf_gain: next(), lnf_shift: next(), lm_head: next(), config, tok_emb, pos_emb, layers })
    }

    /// Parameter tensors in checkpoint order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.tok_emb, &self.pos_emb];
        for l in &self.layers {
            out.extend(l.tensors());
        }
        out.extend([&self.lnf_gain, &self.lnf_shift, &self.lm_head]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for l in &mut self.layers {
            out.extend(l.tensors_mut());
        }
        out.extend([&mut self.lnf_gain, &mut self.lnf_shift, &mut self.lm_head]);
        out
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        self.config.declared_tensors().into_iter().map(|(n, _)| n).zip(self.tensors()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// SHA-256 over every parameter's little-endian bytes, hex encoded.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for t in self.tensors() {
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}
