//! Gated low-rank representation edit.
//!
//! `edit(h) = h + gate(h) * intervention(h)` with
//! `gate(h) = sigmoid(W_g h + b_g)` and `intervention(h) = R^T (W h + b - R h)`.

mod checkpoint;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Hook, HookOutput, ModelConfig};
use crate::numerics::tensor::gemm;
use crate::numerics::{sigmoid_scalar, Tape, Tensor, Var};

pub use checkpoint::{load_grft, read_grft, save_grft, write_grft};

/// Base standard deviation for `W` and `R`; divided by `sqrt(d)` at init.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GrftMode {
    /// Gate and gate supervision.
    Grft,
    /// Intervention applied unconditionally; no gate at all.
    ReftNoGate,
    /// Gate present but trained without gate supervision.
    GrftNoGateLoss,
}

impl GrftMode {
    pub const ALL: [GrftMode; 3] = [GrftMode::Grft, GrftMode::ReftNoGate, GrftMode::GrftNoGateLoss];

    pub fn as_str(self) -> &'static str {
        match self {
            GrftMode::Grft => "grft",
            GrftMode::ReftNoGate => "reft_no_gate",
            GrftMode::GrftNoGateLoss => "grft_no_gate_loss",
        }
    }

    pub fn has_gate(self) -> bool {
        self != GrftMode::ReftNoGate
    }

    pub fn has_gate_loss(self) -> bool {
        self == GrftMode::Grft
    }

    pub(crate) fn tag(self) -> u8 {
        match self {
            GrftMode::Grft => 0,
            GrftMode::ReftNoGate => 1,
            GrftMode::GrftNoGateLoss => 2,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Result<Self> {
        GrftMode::ALL
            .into_iter()
            .find(|m| m.tag() == tag)
            .ok_or_else(|| Error::Format(format!("unknown mode tag {tag}")))
    }
}

impl fmt::Display for GrftMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GrftMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GrftMode::ALL.into_iter().find(|m| m.as_str() == s).ok_or_else(|| {
            let valid: Vec<_> = GrftMode::ALL.iter().map(|m| m.as_str()).collect();
            Error::Validation(format!("invalid mode '{s}', expected one of: {}", valid.join(", ")))
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GrftConfig {
    pub d: usize,
    pub rank: usize,
    pub layer_index: usize,
    pub mode: GrftMode,
    pub seed: u64,
}

impl GrftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.rank == 0 {
            return Err(Error::Config(format!("d and rank must be positive, got d={} r={}", self.d, self.rank)));
        }
        if self.rank > self.d {
            return Err(Error::Config(format!("rank {} exceeds d {}", self.rank, self.d)));
        }
        Ok(())
    }

    /// Check that this edit fits `model`: same width, hook layer in range.
    pub fn check_model(&self, model: &ModelConfig) -> Result<()> {
        if self.d != model.d_model {
            return Err(Error::Shape { tensor: "hidden state".into(), expected: vec![model.d_model], found: vec![self.d] });
        }
        if self.layer_index >= model.n_layers {
            return Err(Error::Config(format!(
                "layer_index {} out of range for {} layers",
                self.layer_index, model.n_layers
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub gate: usize,
    pub intervention: usize,
    pub total: usize,
}

/// Trainable parameter counts: gate `d + 1`, intervention `2rd + r`.
pub fn param_count(d: usize, r: usize) -> ParamCount {
    let gate = d + 1;
    let intervention = 2 * r * d + r;
    ParamCount { gate, intervention, total: gate + intervention }
}

/// Trainable parameters as a percentage of a base model with `base_params` weights.
pub fn percent_of(count: usize, base_params: f64) -> f64 {
    100.0 * count as f64 / base_params
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrftParams {
    /// Gate weights, `1 x d`.
    pub w_g: Tensor,
    /// Gate bias, one element.
    pub b_g: Tensor,
    /// `r x d`.
    pub w: Tensor,
    /// `r x d` projection.
    pub r: Tensor,
    /// Length `r`.
    pub b: Tensor,
}

fn check_dim(h: &[f64], d: usize) -> Result<()> {
    if h.len() != d {
        return Err(Error::Dimension(format!("hidden state has length {}, expected {d}", h.len())));
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl GrftParams {
    /// `W`, `R` ~ N(0, 0.02 / sqrt(d)); `b`, `W_g`, `b_g` zero.
    pub fn init(cfg: &GrftConfig) -> Result<Self> {
        cfg.validate()?;
        let (d, r) = (cfg.d, cfg.rank);
        let std = INIT_STD / (d as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let w = Tensor::randn(&[r, d], std, &mut rng);
        let r_proj = Tensor::randn(&[r, d], std, &mut rng);
        Ok(Self { w_g: Tensor::zeros(&[1, d]), b_g: Tensor::zeros(&[1]), w, r: r_proj, b: Tensor::zeros(&[r]) })
    }

    /// Parameters whose intervention vanishes: `W = R`, `b = 0`.
    pub fn identity(cfg: &GrftConfig) -> Result<Self> {
        let mut p = Self::init(cfg)?;
        p.w = p.r.clone();
        Ok(p)
    }

    pub fn d(&self) -> usize {
        self.w_g.len()
    }

    pub fn rank(&self) -> usize {
        self.b.len()
    }

    /// Tensors in checkpoint order: `W_g, b_g, W, R, b`.
    pub fn tensors(&self) -> [&Tensor; 5] {
        [&self.w_g, &self.b_g, &self.w, &self.r, &self.b]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 5] {
        [&mut self.w_g, &mut self.b_g, &mut self.w, &mut self.r, &mut self.b]
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    pub fn gate(&self, h: &[f64]) -> Result<f64> {
        check_dim(h, self.d())?;
        Ok(sigmoid_scalar(dot(self.w_g.data(), h) + self.b_g.data()[0]))
    }

    pub fn intervention(&self, h: &[f64]) -> Result<Vec<f64>> {
        check_dim(h, self.d())?;
        let d = self.d();
        let mut out = vec![0.0; d];
        for k in 0..self.rank() {
            let z = (dot(self.w.row(k), h) + self.b.data()[k]) - dot(self.r.row(k), h);
            if z != 0.0 {
                out.iter_mut().zip(self.r.row(k)).for_each(|(o, &rv)| *o += z * rv);
            }
        }
        Ok(out)
    }

    /// The composed edit under `mode`.
    pub fn apply(&self, h: &[f64], mode: GrftMode) -> Result<Vec<f64>> {
        let delta = self.intervention(h)?;
        let g = if mode.has_gate() { self.gate(h)? } else { 1.0 };
        Ok(h.iter().zip(&delta).map(|(&x, &dv)| if dv == 0.0 { x } else { x + g * dv }).collect())
    }

    /// Edit every row of an `n x d` matrix; also returns per-row gates for gated modes.
    pub fn apply_rows(&self, rows: &Tensor, mode: GrftMode) -> Result<(Tensor, Option<Vec<f64>>)> {
        let d = self.d();
        if rows.shape().len() != 2 || rows.cols() != d {
            return Err(Error::Dimension(format!("expected n x {d} rows, got {:?}", rows.shape())));
        }
        let (n, r) = (rows.rows(), self.rank());
        let h = rows.data();
        let mut wh = vec![0.0; n * r];
        for row in wh.chunks_mut(r) {
            row.copy_from_slice(self.b.data());
        }
        gemm(n, d, r, 1.0, h, false, self.w.data(), true, 1.0, &mut wh);
        let mut rh = vec![0.0; n * r];
        gemm(n, d, r, 1.0, h, false, self.r.data(), true, 0.0, &mut rh);
        let z: Vec<f64> = wh.iter().zip(&rh).map(|(a, b)| a - b).collect();
        let mut delta = vec![0.0; n * d];
        gemm(n, r, d, 1.0, &z, false, self.r.data(), false, 0.0, &mut delta);
        let gates = if mode.has_gate() {
            let mut s = vec![self.b_g.data()[0]; n];
            gemm(n, d, 1, 1.0, h, false, self.w_g.data(), true, 1.0, &mut s);
            Some(s.into_iter().map(sigmoid_scalar).collect::<Vec<_>>())
        } else {
            None
        };
        let mut out = rows.clone();
        for (i, (orow, drow)) in out.data_mut().chunks_mut(d).zip(delta.chunks(d)).enumerate() {
            let g = gates.as_ref().map_or(1.0, |g| g[i]);
            for (o, &dv) in orow.iter_mut().zip(drow) {
                if dv != 0.0 {
                    *o += g * dv;
                }
            }
        }
        Ok((out, gates))
    }

    /// Record the five tensors on `tape`, marked when `trainable`.
    pub fn tape_vars<'a>(&'a self, tape: &mut Tape<'a>, trainable: bool) -> GrftVars {
        let v = self.tensors().map(|t| if trainable { tape.mark_ref(t) } else { tape.constant_ref(t) });
        GrftVars { all: v }
    }
}

/// Tape handles for `W_g, b_g, W, R, b`.
#[derive(Clone, Copy, Debug)]
pub struct GrftVars {
    pub all: [Var; 5],
}

/// The composed edit on the tape for `n x d` rows; returns the edited rows and,
/// for gated modes, the `n x 1` gate column.
pub fn tape_apply(tape: &mut Tape<'_>, v: &GrftVars, h: Var, mode: GrftMode) -> Result<(Var, Option<Var>)> {
    let [w_g, b_g, w, r, b] = v.all;
    let wh = tape.matmul_t(h, false, w, true)?;
    let wh = tape.add_row(wh, b)?;
    let rh = tape.matmul_t(h, false, r, true)?;
    let z = tape.sub(wh, rh)?;
    let delta = tape.matmul(z, r)?;
    if !mode.has_gate() {
        return Ok((tape.add(h, delta)?, None));
    }
    let s = tape.matmul_t(h, false, w_g, true)?;
    let s = tape.add_row(s, b_g)?;
    let g = tape.sigmoid(s)?;
    let scaled = tape.mul_col(delta, g)?;
    Ok((tape.add(h, scaled)?, Some(g)))
}

/// Forward-pass hook applying the edit at every position of one layer's output.
///
/// Gate values are returned as hook telemetry, so each forward pass keeps its
/// own record in its decode state.
pub struct GrftHook<'a> {
    params: &'a GrftParams,
    layer: usize,
    mode: GrftMode,
}

/// Build the hook for `cfg.layer_index`.
pub fn make_hook<'a>(params: &'a GrftParams, cfg: &GrftConfig, model: &ModelConfig) -> Result<GrftHook<'a>> {
    cfg.check_model(model)?;
    if params.d() != cfg.d || params.rank() != cfg.rank {
        return Err(Error::Shape {
            tensor: "grft params".into(),
            expected: vec![cfg.rank, cfg.d],
            found: vec![params.rank(), params.d()],
        });
    }
    Ok(GrftHook { params, layer: cfg.layer_index, mode: cfg.mode })
}

impl Hook for GrftHook<'_> {
    fn layer_index(&self) -> usize {
        self.layer
    }

    fn apply(&self, _start: usize, rows: &Tensor) -> Result<HookOutput> {
        let (hidden, telemetry) = self.params.apply_rows(rows, self.mode)?;
        Ok(HookOutput { hidden, telemetry })
    }
}
