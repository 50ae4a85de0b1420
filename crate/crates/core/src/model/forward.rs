//! Forward passes: a plain incremental path for inference and a taped path for training.

use super::{LayerWeights, TinyModel};
use crate::error::{Error, Result};
use crate::numerics::tensor::{gemm, layer_norm_row, softmax_in_place};
use crate::numerics::{Tape, Tensor, Var};

/// Result of a hook transform: edited rows plus optional per-row telemetry.
#[derive(Clone, Debug)]
pub struct HookOutput {
    pub hidden: Tensor,
    pub telemetry: Option<Vec<f64>>,
}

/// Residual-stream edit applied to the output of one layer.
pub trait Hook {
    fn layer_index(&self) -> usize;

    /// Edit `rows`, where row `i` is token position `start + i`.
    fn apply(&self, start: usize, rows: &Tensor) -> Result<HookOutput>;
}

/// Hook built from a per-position closure `(position, input row, output row)`.
pub struct FnHook<F> {
    pub layer: usize,
    pub f: F,
}

impl<F: Fn(usize, &[f64], &mut [f64])> Hook for FnHook<F> {
    fn layer_index(&self) -> usize {
        self.layer
    }

    fn apply(&self, start: usize, rows: &Tensor) -> Result<HookOutput> {
        let mut hidden = rows.clone();
        let d = rows.cols();
        for (i, out) in hidden.data_mut().chunks_mut(d).enumerate() {
            (self.f)(start + i, rows.row(i), out);
        }
        Ok(HookOutput { hidden, telemetry: None })
    }
}

/// Cached keys and values for incremental decoding.
#[derive(Clone, Debug)]
pub struct DecodeState {
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    len: usize,
    /// Per-position hook telemetry gathered so far (gate values for Grft hooks).
    pub telemetry: Vec<f64>,
}

impl DecodeState {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Per-layer residual outputs (after any hook) and the final logits.
#[derive(Clone, Debug)]
pub struct Trace {
    pub layer_outputs: Vec<Tensor>,
    pub logits: Tensor,
    pub telemetry: Vec<f64>,
}

fn layer_norm_rows(x: &[f64], gain: &Tensor, shift: &Tensor, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, o) in x.chunks(d).zip(out.chunks_mut(d)) {
        layer_norm_row(row, gain.data(), shift.data(), o);
    }
    out
}

/// `x · w + b` for `n` rows.
fn linear(x: &[f64], n: usize, w: &Tensor, b: Option<&Tensor>) -> Vec<f64> {
    let (k, m) = (w.rows(), w.cols());
    let mut out = vec![0.0; n * m];
    if let Some(b) = b {
        for row in out.chunks_mut(m) {
            row.copy_from_slice(b.data());
        }
    }
    gemm(n, k, m, 1.0, x, false, w.data(), false, if b.is_some() { 1.0 } else { 0.0 }, &mut out);
    out
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (0.797_884_560_802_865_4 * (x + 0.044_715 * x * x * x)).tanh())
}

impl TinyModel {
    pub(crate) fn check_tokens(&self, tokens: &[usize], offset: usize) -> Result<()> {
        let cfg = &self.config;
        if offset + tokens.len() > cfg.max_seq {
            return Err(Error::Length { len: offset + tokens.len(), max: cfg.max_seq });
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
            return Err(Error::Vocab(format!("token id {bad} >= vocab size {}", cfg.vocab_size)));
        }
        Ok(())
    }

    fn check_hook(&self, hook: Option<&dyn Hook>) -> Result<()> {
        if let Some(h) = hook {
            if h.layer_index() >= self.config.n_layers {
                return Err(Error::Config(format!(
                    "hook layer {} out of range for {} layers",
                    h.layer_index(),
                    self.config.n_layers
                )));
            }
        }
        Ok(())
    }

    pub fn start(&self) -> DecodeState {
        let n = self.config.n_layers;
        DecodeState { keys: vec![Vec::new(); n], values: vec![Vec::new(); n], len: 0, telemetry: Vec::new() }
    }

    /// Full causal forward pass; returns `T x V` logits.
    pub fn forward(&self, tokens: &[usize], hook: Option<&dyn Hook>) -> Result<Tensor> {
        let mut state = self.start();
        self.extend(&mut state, tokens, hook)
    }

    pub fn forward_trace(&self, tokens: &[usize], hook: Option<&dyn Hook>) -> Result<Trace> {
        let mut state = self.start();
        let mut outputs = Vec::new();
        let logits = self.run(&mut state, tokens, hook, Some(&mut outputs), None)?;
        Ok(Trace { layer_outputs: outputs, logits: logits.expect("full run"), telemetry: state.telemetry })
    }

    /// Append `tokens` to a decode state; returns logits for the new positions.
    pub fn extend(&self, state: &mut DecodeState, tokens: &[usize], hook: Option<&dyn Hook>) -> Result<Tensor> {
        Ok(self.run(state, tokens, hook, None, None)?.expect("full run"))
    }

    /// Residual stream emitted by `layer` (no hook), one row per position.
    pub fn hidden_at(&self, tokens: &[usize], layer: usize) -> Result<Tensor> {
        if layer >= self.config.n_layers {
            return Err(Error::Config(format!("layer {layer} out of range")));
        }
        let mut state = self.start();
        let mut outputs = Vec::new();
        self.run(&mut state, tokens, None, Some(&mut outputs), Some(layer))?;
        Ok(outputs.pop().expect("stopped after the requested layer"))
    }

    fn run(
        &self,
        state: &mut DecodeState,
        tokens: &[usize],
        hook: Option<&dyn Hook>,
        mut trace: Option<&mut Vec<Tensor>>,
        stop_after: Option<usize>,
    ) -> Result<Option<Tensor>> {
        if tokens.is_empty() {
            return Err(Error::Degenerate("forward pass needs at least one token".into()));
        }
        self.check_tokens(tokens, state.len)?;
        self.check_hook(hook)?;
        let d = self.config.d_model;
        let n = tokens.len();
        let start = state.len;
        let mut x = Vec::with_capacity(n * d);
        for (i, &t) in tokens.iter().enumerate() {
            let pos = self.pos_emb.row(start + i);
            x.extend(self.tok_emb.row(t).iter().zip(pos).map(|(a, b)| a + b));
        }
        for (l, w) in self.layers.iter().enumerate() {
            self.layer_plain(l, w, state, &mut x, n, start);
            if let Some(h) = hook.filter(|h| h.layer_index() == l) {
                let out = h.apply(start, &Tensor::matrix(n, d, x)?)?;
                if out.hidden.shape() != [n, d] {
                    return Err(Error::Dimension(format!(
                        "hook changed residual shape from {:?} to {:?}",
                        [n, d],
                        out.hidden.shape()
                    )));
                }
                if let Some(t) = out.telemetry {
                    state.telemetry.extend(t);
                }
                x = out.hidden.into_data();
            }
            if let Some(tr) = trace.as_deref_mut() {
                tr.push(Tensor::matrix(n, d, x.clone())?);
            }
            if stop_after == Some(l) {
                return Ok(None);
            }
        }
        state.len += n;
        let h = layer_norm_rows(&x, &self.lnf_gain, &self.lnf_shift, d);
        let logits = linear(&h, n, &self.lm_head, None);
        Ok(Some(Tensor::matrix(n, self.config.vocab_size, logits)?))
    }

    fn layer_plain(&self, l: usize, w: &LayerWeights, state: &mut DecodeState, x: &mut [f64], n: usize, start: usize) {
        let d = self.config.d_model;
        let heads = self.config.n_heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let a = layer_norm_rows(x, &w.ln1_gain, &w.ln1_shift, d);
        let q = linear(&a, n, &w.wq, Some(&w.bq));
        state.keys[l].extend(linear(&a, n, &w.wk, Some(&w.bk)));
        state.values[l].extend(linear(&a, n, &w.wv, Some(&w.bv)));
        let (keys, values) = (&state.keys[l], &state.values[l]);
        let mut att = vec![0.0; n * d];
        let mut scores = Vec::with_capacity(start + n);
        for i in 0..n {
            let pos = start + i;
            for h in 0..heads {
                let off = h * dh;
                let qi = &q[i * d + off..i * d + off + dh];
                scores.clear();
                scores.extend((0..=pos).map(|j| {
                    let kj = &keys[j * d + off..j * d + off + dh];
                    qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale
                }));
                softmax_in_place(&mut scores);
                let oi = &mut att[i * d + off..i * d + off + dh];
                for (j, &p) in scores.iter().enumerate() {
                    let vj = &values[j * d + off..j * d + off + dh];
                    for c in 0..dh {
                        oi[c] += p * vj[c];
                    }
                }
            }
        }
        let o = linear(&att, n, &w.wo, Some(&w.bo));
        x.iter_mut().zip(&o).for_each(|(a, b)| *a += b);
        let m = layer_norm_rows(x, &w.ln2_gain, &w.ln2_shift, d);
        let mut u = linear(&m, n, &w.w_in, Some(&w.b_in));
        u.iter_mut().for_each(|v| *v = gelu(*v));
        let f = linear(&u, n, &w.w_out, Some(&w.b_out));
        x.iter_mut().zip(&f).for_each(|(a, b)| *a += b);
    }
}

/// Handles for every model tensor recorded on a tape, in checkpoint order.
#[derive(Clone, Debug)]
pub struct TapeWeights {
    pub all: Vec<Var>,
}

impl TapeWeights {
    fn layer(&self, l: usize) -> &[Var] {
        &self.all[2 + 16 * l..2 + 16 * (l + 1)]
    }

    fn tail(&self) -> &[Var] {
        &self.all[self.all.len() - 3..]
    }
}

impl TinyModel {
    /// Record the weights on `tape`, as marked inputs when `trainable`.
    pub fn tape_weights<'a>(&'a self, tape: &mut Tape<'a>, trainable: bool) -> TapeWeights {
        let all = self
            .tensors()
            .into_iter()
            .map(|t| if trainable { tape.mark_ref(t) } else { tape.constant_ref(t) })
            .collect();
        TapeWeights { all }
    }

    /// Token plus position embeddings for positions `0..tokens.len()`.
    pub fn tape_embed(&self, tape: &mut Tape<'_>, w: &TapeWeights, tokens: &[usize]) -> Result<Var> {
        self.check_tokens(tokens, 0)?;
        let tok = tape.embedding(w.all[0], tokens)?;
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let pos = tape.embedding(w.all[1], &positions)?;
        tape.add(tok, pos)
    }

    /// One transformer block on the tape.
    pub fn tape_layer(&self, tape: &mut Tape<'_>, w: &TapeWeights, l: usize, x: Var) -> Result<Var> {
        let p = w.layer(l);
        let [ln1g, ln1s, wq, bq, wk, bk, wv, bv, wo, bo, ln2g, ln2s, w_in, b_in, w_out, b_out] =
            <[Var; 16]>::try_from(p).expect("16 tensors per layer");
        let a = tape.layer_norm(x, ln1g, ln1s)?;
        let lin = |tape: &mut Tape<'_>, x: Var, w: Var, b: Var| -> Result<Var> {
            let y = tape.matmul(x, w)?;
            tape.add_row(y, b)
        };
        let q = lin(tape, a, wq, bq)?;
        let k = lin(tape, a, wk, bk)?;
        let v = lin(tape, a, wv, bv)?;
        let att = tape.causal_attention(q, k, v, self.config.n_heads)?;
        let o = lin(tape, att, wo, bo)?;
        let x = tape.add(x, o)?;
        let m = tape.layer_norm(x, ln2g, ln2s)?;
        let u = lin(tape, m, w_in, b_in)?;
        let u = tape.gelu(u)?;
        let f = lin(tape, u, w_out, b_out)?;
        tape.add(x, f)
    }

    /// Final LayerNorm and unembedding, optionally restricted to `rows`.
    pub fn tape_logits(&self, tape: &mut Tape<'_>, w: &TapeWeights, x: Var, rows: Option<&[usize]>) -> Result<Var> {
        let [g, s, head] = <[Var; 3]>::try_from(w.tail()).expect("three tail tensors");
        let x = match rows {
            Some(r) => tape.select_rows(x, r)?,
            None => x,
        };
        let h = tape.layer_norm(x, g, s)?;
        tape.matmul(h, head)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model() -> TinyModel {
        let mut m = TinyModel::init(ModelConfig {
            vocab_size: 40,
            d_model: 16,
            n_layers: 3,
            n_heads: 4,
            max_seq: 24,
            seed: 7,
        })
        .unwrap();
        // larger weights so every layer matters
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for t in m.tensors_mut() {
            for v in t.data_mut() {
                *v += rng.gen_range(-0.3..0.3);
            }
        }
        m
    }

    fn tokens() -> Vec<usize> {
        vec![1, 5, 9, 33, 2, 17, 8, 8, 30, 4]
    }

    #[test]
    fn identity_hook_is_bit_exact() {
        let m = model();
        let base = m.forward(&tokens(), None).unwrap();
        for layer in 0..3 {
            let hook = FnHook { layer, f: |_: usize, i: &[f64], o: &mut [f64]| o.copy_from_slice(i) };
            assert_eq!(m.forward(&tokens(), Some(&hook)).unwrap(), base);
        }
    }

    #[test]
    fn hook_is_causal_and_local() {
        let m = model();
        let (layer, p) = (1, 6);
        let base = m.forward_trace(&tokens(), None).unwrap();
        let hook = FnHook {
            layer,
            f: move |pos: usize, i: &[f64], o: &mut [f64]| {
                o.copy_from_slice(i);
                if pos == p {
                    o.iter_mut().for_each(|v| *v += 0.5);
                }
            },
        };
        let edited = m.forward_trace(&tokens(), Some(&hook)).unwrap();
        let d = m.config.d_model;
        for l in 0..3 {
            let (a, b) = (&base.layer_outputs[l], &edited.layer_outputs[l]);
            if l < layer {
                assert_eq!(a, b);
            }
            assert_eq!(a.data()[..p * d], b.data()[..p * d], "layer {l}");
        }
        assert_eq!(base.logits.data()[..p * 40], edited.logits.data()[..p * 40]);
        assert_ne!(base.logits.row(p), edited.logits.row(p));
    }

    #[test]
    fn incremental_matches_full_forward() {
        let m = model();
        let toks = tokens();
        let full = m.forward(&toks, None).unwrap();
        let mut st = m.start();
        let first = m.extend(&mut st, &toks[..4], None).unwrap();
        let rest: Vec<Tensor> = toks[4..].iter().map(|&t| m.extend(&mut st, &[t], None).unwrap()).collect();
        assert!(first.max_abs_diff(&Tensor::matrix(4, 40, full.data()[..160].to_vec()).unwrap()) < 1e-12);
        for (i, r) in rest.iter().enumerate() {
            let want = full.row(4 + i);
            let diff = r.data().iter().zip(want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(diff < 1e-12);
        }
    }

    #[test]
    fn taped_forward_matches_plain() {
        let m = model();
        let toks = tokens();
        let mut tape = Tape::new();
        let w = m.tape_weights(&mut tape, false);
        let mut x = m.tape_embed(&mut tape, &w, &toks).unwrap();
        for l in 0..3 {
            x = m.tape_layer(&mut tape, &w, l, x).unwrap();
        }
        let logits = m.tape_logits(&mut tape, &w, x, None).unwrap();
        assert!(tape.value(logits).max_abs_diff(&m.forward(&toks, None).unwrap()) < 1e-12);
        assert!(m.hidden_at(&toks, 1).unwrap().max_abs_diff(&m.forward_trace(&toks, None).unwrap().layer_outputs[1]) == 0.0);
    }

    #[test]
    fn errors_on_bad_input() {
        let m = model();
        assert!(matches!(m.forward(&[1; 25], None), Err(Error::Length { .. })));
        assert!(matches!(m.forward(&[1, 40], None), Err(Error::Vocab(_))));
        let hook = FnHook { layer: 3, f: |_: usize, _: &[f64], _: &mut [f64]| {} };
        assert!(m.forward(&[1], Some(&hook)).is_err());
    }

    #[test]
    fn deterministic() {
        let m = model();
        assert_eq!(m.forward(&tokens(), None).unwrap(), m.forward(&tokens(), None).unwrap());
    }
}
