//! Training the gated edit on a frozen base model.
//!
//! Layers up to and including the hook layer are frozen and run before the
//! hook, so their outputs are computed once per sample and reused every step.
//! Each step then runs only the later layers and the output head.

use std::time::Instant;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{encode_prompt, Sample};
use crate::error::{Error, Result};
use crate::grft::{tape_apply, GrftConfig, GrftMode, GrftParams};
use crate::model::tokenizer::EOS;
use crate::model::{TinyModel, Tokenizer};
use crate::numerics::{binary_cross_entropy, Adam, AdamConfig, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    /// Passes over the sample set.
    pub epochs: usize,
    pub batch: usize,
    pub rank: usize,
    pub layer_index: usize,
    pub mode: GrftMode,
    pub seed: u64,
    /// Weight of the gate loss in the total; 1 gives the plain sum.
    pub gate_weight: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            lr: adam.lr,
            epochs: 100,
            batch: 5,
            rank: 4,
            layer_index: 1,
            mode: GrftMode::Grft,
            seed: 0,
            gate_weight: 1.0,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
        }
    }
}

impl TrainConfig {
    pub fn grft_config(&self, d: usize) -> GrftConfig {
        GrftConfig { d, rank: self.rank, layer_index: self.layer_index, mode: self.mode, seed: self.seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

/// Per-step loss traces plus the trained parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: TrainConfig,
    pub total_loss: Vec<f64>,
    pub ft_loss: Vec<f64>,
    pub gate_loss: Vec<f64>,
    /// Mean total loss of each epoch.
    pub epoch_loss: Vec<f64>,
    pub params: GrftParams,
    pub base_checksum: String,
    pub wall_clock_secs: f64,
    pub seed: u64,
}

/// Binary cross-entropy of one gate value against its label.
pub fn gate_loss(g: f64, z: u8) -> Result<f64> {
    binary_cross_entropy(&[g], &[z as f64])
}

/// Mean gate loss over a batch.
pub fn gate_loss_batch(gates: &[f64], labels: &[u8]) -> Result<f64> {
    let z: Vec<f64> = labels.iter().map(|&l| l as f64).collect();
    binary_cross_entropy(gates, &z)
}

/// A tokenized sample with the frozen hook-layer activations cached.
#[derive(Clone, Debug)]
pub struct Prepared {
    /// Prompt, target and EOS.
    pub tokens: Vec<usize>,
    pub prompt_len: usize,
    pub gate_label: u8,
    /// Hook-layer output (before the edit) for `tokens[..len - 1]`.
    pub hidden: Tensor,
}

impl Prepared {
    /// Input rows whose next token belongs to the target.
    fn target_rows(&self) -> Vec<usize> {
        (self.prompt_len - 1..self.tokens.len() - 1).collect()
    }

    fn targets(&self) -> &[usize] {
        &self.tokens[self.prompt_len..]
    }

    /// Row of the final prompt token, whose gate is supervised.
    pub fn gate_row(&self) -> usize {
        self.prompt_len - 1
    }
}

pub fn prepare(model: &TinyModel, tok: &Tokenizer, samples: &[Sample], layer: usize) -> Result<Vec<Prepared>> {
    samples
        .iter()
        .map(|s| {
            let mut tokens = encode_prompt(tok, Some(&s.context), &s.question)?;
            let prompt_len = tokens.len();
            tokens.extend(tok.encode(&s.target)?);
            tokens.push(EOS);
            let hidden = model.hidden_at(&tokens[..tokens.len() - 1], layer)?;
            Ok(Prepared { tokens, prompt_len, gate_label: s.gate_label, hidden })
        })
        .collect()
}

/// Fine-tuning, gate and total loss of one batch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub ft: f64,
    pub gate: f64,
}

struct Recorded<'a> {
    tape: Tape<'a>,
    vars: [Var; 5],
    total: Var,
    ft: Var,
    gate: Option<Var>,
}

fn record<'a>(
    model: &'a TinyModel,
    params: &'a GrftParams,
    batch: &'a [Prepared],
    layer: usize,
    mode: GrftMode,
    gate_weight: f64,
) -> Result<Recorded<'a>> {
    if batch.is_empty() {
        return Err(Error::Degenerate("empty training batch".into()));
    }
    let mut tape = Tape::new();
    let w = model.tape_weights(&mut tape, false);
    let v = params.tape_vars(&mut tape, true);
    let inv_b = 1.0 / batch.len() as f64;
    let mut ft: Option<Var> = None;
    let mut gate: Option<Var> = None;
    for p in batch {
        let h = tape.constant_ref(&p.hidden);
        let (mut x, gates) = tape_apply(&mut tape, &v, h, mode)?;
        for l in layer + 1..model.config.n_layers {
            x = model.tape_layer(&mut tape, &w, l, x)?;
        }
        let rows = p.target_rows();
        let logits = model.tape_logits(&mut tape, &w, x, Some(&rows))?;
        let ce = tape.cross_entropy(logits, p.targets(), &vec![true; rows.len()])?;
        let ce = tape.scale(ce, inv_b)?;
        ft = Some(match ft {
            Some(acc) => tape.add(acc, ce)?,
            None => ce,
        });
        if let (Some(g), true) = (gates, mode.has_gate_loss()) {
            let g_last = tape.select_rows(g, &[p.gate_row()])?;
            let bce = tape.bce(g_last, &[p.gate_label as f64])?;
            let bce = tape.scale(bce, inv_b)?;
            gate = Some(match gate {
                Some(acc) => tape.add(acc, bce)?,
                None => bce,
            });
        }
    }
    let ft = ft.expect("batch is nonempty");
    let total = match gate {
        Some(g) if gate_weight == 1.0 => tape.add(ft, g)?,
        Some(g) => {
            let scaled = tape.scale(g, gate_weight)?;
            tape.add(ft, scaled)?
        }
        None => ft,
    };
    Ok(Recorded { tape, vars: v.all, total, ft, gate })
}

fn parts(r: &Recorded<'_>) -> LossParts {
    LossParts {
        total: r.tape.value(r.total).item(),
        ft: r.tape.value(r.ft).item(),
        gate: r.gate.map_or(0.0, |g| r.tape.value(g).item()),
    }
}

/// `L_FT + gate_weight * L_gate` for one batch; the gate term is absent
/// in modes without gate supervision.
pub fn total_loss(
    model: &TinyModel,
    params: &GrftParams,
    batch: &[Prepared],
    layer: usize,
    mode: GrftMode,
    gate_weight: f64,
) -> Result<LossParts> {
    Ok(parts(&record(model, params, batch, layer, mode, gate_weight)?))
}

/// Loss parts and gradients with respect to `W_g, b_g, W, R, b`.
pub fn total_loss_grads(
    model: &TinyModel,
    params: &GrftParams,
    batch: &[Prepared],
    layer: usize,
    mode: GrftMode,
    gate_weight: f64,
) -> Result<(LossParts, Vec<Tensor>)> {
    let r = record(model, params, batch, layer, mode, gate_weight)?;
    let grads = r.tape.grad(r.total, &r.vars)?;
    Ok((parts(&r), grads))
}

/// Train the edit with Adam; base weights are only read.
pub fn train_grft(model: &TinyModel, tok: &Tokenizer, samples: &[Sample], cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Degenerate("no training samples".into()));
    }
    let gcfg = cfg.grft_config(model.config.d_model);
    gcfg.check_model(&model.config)?;
    let start = Instant::now();
    let base_checksum = model.checksum();
    let prepared = prepare(model, tok, samples, cfg.layer_index)?;
    let mut params = GrftParams::init(&gcfg)?;
    let adam = AdamConfig { lr: cfg.lr, beta1: cfg.beta1, beta2: cfg.beta2, eps: cfg.eps };
    let mut opt = Adam::new(adam, params.tensors().iter().map(|t| t.len()));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let (mut total_tr, mut ft_tr, mut gate_tr, mut epoch_loss) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut batch = Vec::with_capacity(cfg.batch);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(cfg.batch) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| prepared[i].clone()));
            let (loss, grads) = total_loss_grads(model, &params, &batch, cfg.layer_index, cfg.mode, cfg.gate_weight)?;
            let step = total_tr.len();
            if !loss.total.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Divergence { step, detail: format!("loss {:?}", loss) });
            }
            opt.update(params.tensors_mut(), &grads);
            total_tr.push(loss.total);
            ft_tr.push(loss.ft);
            gate_tr.push(loss.gate);
            sum += loss.total;
            steps += 1;
        }
        let mean = sum / steps as f64;
        epoch_loss.push(mean);
        debug!("epoch {epoch}: mean loss {mean:.4}");
        if epoch % 10 == 9 || epoch + 1 == cfg.epochs {
            info!("epoch {}: mean loss {mean:.4}", epoch + 1);
        }
    }
    Ok(TrainReport {
        config: cfg.clone(),
        total_loss: total_tr,
        ft_loss: ft_tr,
        gate_loss: gate_tr,
        epoch_loss,
        params,
        base_checksum,
        wall_clock_secs: start.elapsed().as_secs_f64(),
        seed: cfg.seed,
    })
}


#[cfg(test)]
mod tests;
