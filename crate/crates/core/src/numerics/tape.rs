//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Operations are recorded in execution order. Each node keeps its forward
//! value plus whatever the backward rule needs; `backward` walks the tape in
//! reverse and accumulates gradients only into nodes that depend on a marked
//! input.

use std::borrow::Cow;

use super::tensor::{binary_cross_entropy, gemm, layer_norm_row, sigmoid_scalar, softmax_in_place, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { a: Var, row: Var },
    MulCol { a: Var, col: Var },
    Scale(Var, f64),
    Sigmoid(Var),
    Gelu(Var),
    LayerNorm { x: Var, gain: Var, shift: Var },
    Embedding { table: Var, ids: Vec<usize> },
    Attention { q: Var, k: Var, v: Var, heads: usize },
    SelectRows { a: Var, rows: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize>, mask: Vec<bool> },
    Bce { probs: Var, labels: Vec<f64> },
    Sum(Var),
}

/// Forward-pass byproducts reused by the backward rule.
#[derive(Clone, Debug, Default)]
enum Aux {
    #[default]
    None,
    /// Per-row (mean, reciprocal std).
    Stats(Vec<(f64, f64)>),
    /// Attention probabilities, `heads x T x T`, zero above the diagonal.
    Probs(Vec<f64>),
}

#[derive(Clone, Debug)]
struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    aux: Aux,
    requires_grad: bool,
}

/// Ordered record of primitive operations.
///
/// Constants may be borrowed for the tape's lifetime so frozen weights are
/// never copied.
#[derive(Clone, Debug, Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients of one scalar with respect to every node that needed one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn dims2(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!("{what}: shapes {:?} and {:?} differ", a.shape(), b.shape())));
    }
    Ok(())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("shape preserved")
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record a constant input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_leaf(Cow::Owned(t), false)
    }

    /// Record a borrowed constant input.
    pub fn constant_ref(&mut self, t: &'a Tensor) -> Var {
        self.push_leaf(Cow::Borrowed(t), false)
    }

    /// Record an input whose gradient may be requested.
    pub fn mark(&mut self, t: Tensor) -> Var {
        self.push_leaf(Cow::Owned(t), true)
    }

    /// Record a borrowed input whose gradient may be requested.
    pub fn mark_ref(&mut self, t: &'a Tensor) -> Var {
        self.push_leaf(Cow::Borrowed(t), true)
    }

    fn push_leaf(&mut self, value: Cow<'a, Tensor>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, aux: Aux::None, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn is_marked(&self, v: Var) -> bool {
        matches!(self.nodes[v.0].op, Op::Leaf) && self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: Op) -> Result<Var> {
        let (value, aux) = eval(&op, &self.nodes)?;
        let requires_grad = parents(&op).iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node { value: Cow::Owned(value), op, aux, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// `op(a) · op(b)` where `ta`/`tb` select the transpose of the stored matrix.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        self.push(Op::MatMul { a, b, ta, tb })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul(a, b))
    }

    /// Broadcast-add a length-`n` vector to every row of an `m x n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.push(Op::AddRow { a, row })
    }

    /// Scale row `i` of an `m x n` matrix by entry `i` of a length-`m` column.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        self.push(Op::MulCol { a, col })
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.push(Op::Scale(a, s))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Sigmoid(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Gelu(a))
    }

    /// Row-wise layer normalization.
    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var) -> Result<Var> {
        self.push(Op::LayerNorm { x, gain, shift })
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.push(Op::Embedding { table, ids: ids.to_vec() })
    }

    /// Multi-head causal self-attention on already projected `q`, `k`, `v`.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        self.push(Op::Attention { q, k, v, heads })
    }

    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        self.push(Op::SelectRows { a, rows: rows.to_vec() })
    }

    /// Mean token cross-entropy over masked-in rows; a one-element result.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        self.push(Op::CrossEntropy { logits, targets: targets.to_vec(), mask: mask.to_vec() })
    }

    /// Mean binary cross-entropy of probabilities against 0/1 labels.
    pub fn bce(&mut self, probs: Var, labels: &[f64]) -> Result<Var> {
        self.push(Op::Bce { probs, labels: labels.to_vec() })
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Sum(a))
    }

    /// Recompute every recorded value from the leaves.
    pub fn replay(&self) -> Result<Vec<Tensor>> {
        let mut replayed: Vec<Node> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let value = match node.op {
                Op::Leaf => node.value.as_ref().clone(),
                ref op => eval(op, &replayed)?.0,
            };
            replayed.push(Node { value: Cow::Owned(value), op: node.op.clone(), aux: Aux::None, requires_grad: false });
        }
        Ok(replayed.into_iter().map(|n| n.value.into_owned()).collect())
    }

    /// Gradients of the scalar `loss` with respect to every node on its path.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        if root.requires_grad {
            grads[loss.0] = Some(Tensor::new(root.value.shape().to_vec(), vec![1.0])?);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.backprop(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    /// Gradients of `loss` with respect to marked inputs, in order.
    pub fn grad(&self, loss: Var, inputs: &[Var]) -> Result<Vec<Tensor>> {
        for &v in inputs {
            if !self.is_marked(v) {
                return Err(Error::Usage(format!("input {v:?} was not marked before the forward pass")));
            }
        }
        let mut grads = self.backward(loss)?;
        Ok(inputs
            .iter()
            .map(|&v| grads.take(v).unwrap_or_else(|| Tensor::zeros(self.value(v).shape())))
            .collect())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop(&self, node: &Node<'a>, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| self.nodes[v.0].value.as_ref();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(self.nodes[v.0].value.shape()));
            f(slot.data_mut());
        };
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (val(a), val(b));
                let (m, n) = dims2(&node.value);
                let k = if ta { av.rows() } else { av.cols() };
                if self.wants(a) {
                    acc(a, &mut |ga| {
                        if ta {
                            gemm(k, n, m, 1.0, bv.data(), tb, g.data(), true, 1.0, ga);
                        } else {
                            gemm(m, n, k, 1.0, g.data(), false, bv.data(), !tb, 1.0, ga);
                        }
                    });
                }
                if self.wants(b) {
                    acc(b, &mut |gb| {
                        if tb {
                            gemm(n, m, k, 1.0, g.data(), true, av.data(), ta, 1.0, gb);
                        } else {
                            gemm(k, m, n, 1.0, av.data(), !ta, g.data(), false, 1.0, gb);
                        }
                    });
                }
            }
            &Op::Add(a, b) => {
                acc(a, &mut |ga| add_into(ga, g.data(), 1.0));
                acc(b, &mut |gb| add_into(gb, g.data(), 1.0));
            }
            &Op::Sub(a, b) => {
                acc(a, &mut |ga| add_into(ga, g.data(), 1.0));
                acc(b, &mut |gb| add_into(gb, g.data(), -1.0));
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (val(a), val(b));
                acc(a, &mut |ga| {
                    for ((x, &gi), &y) in ga.iter_mut().zip(g.data()).zip(bv.data()) {
                        *x += gi * y;
                    }
                });
                acc(b, &mut |gb| {
                    for ((x, &gi), &y) in gb.iter_mut().zip(g.data()).zip(av.data()) {
                        *x += gi * y;
                    }
                });
            }
            &Op::AddRow { a, row } => {
                acc(a, &mut |ga| add_into(ga, g.data(), 1.0));
                let n = g.cols();
                acc(row, &mut |gr| {
                    for chunk in g.data().chunks(n) {
                        add_into(gr, chunk, 1.0);
                    }
                });
            }
            &Op::MulCol { a, col } => {
                let (av, cv) = (val(a), val(col));
                let n = g.cols();
                acc(a, &mut |ga| {
                    for (i, (gi, go)) in ga.chunks_mut(n).zip(g.data().chunks(n)).enumerate() {
                        let c = cv.data()[i];
                        for (x, &y) in gi.iter_mut().zip(go) {
                            *x += c * y;
                        }
                    }
                });
                acc(col, &mut |gc| {
                    for (i, (go, ar)) in g.data().chunks(n).zip(av.data().chunks(n)).enumerate() {
                        gc[i] += go.iter().zip(ar).map(|(x, y)| x * y).sum::<f64>();
                    }
                });
            }
            &Op::Scale(a, s) => acc(a, &mut |ga| add_into(ga, g.data(), s)),
            &Op::Sigmoid(a) => {
                let y = &node.value;
                acc(a, &mut |ga| {
                    for ((x, &gi), &yi) in ga.iter_mut().zip(g.data()).zip(y.data()) {
                        *x += gi * yi * (1.0 - yi);
                    }
                });
            }
            &Op::Gelu(a) => {
                let xv = val(a);
                acc(a, &mut |ga| {
                    for ((x, &gi), &xi) in ga.iter_mut().zip(g.data()).zip(xv.data()) {
                        let u = GELU_C * (xi + GELU_A * xi * xi * xi);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * GELU_A * xi * xi);
                        *x += gi * (0.5 * (1.0 + t) + 0.5 * xi * (1.0 - t * t) * du);
                    }
                });
            }
            &Op::LayerNorm { x, gain, shift } => {
                let Aux::Stats(stats) = &node.aux else { unreachable!("layer norm keeps stats") };
                let (xv, gv) = (val(x), val(gain));
                let n = xv.cols();
                let xhat_row = |i: usize, j: usize| {
                    let (mean, rstd) = stats[i];
                    (xv.data()[i * n + j] - mean) * rstd
                };
                acc(gain, &mut |gg| {
                    for (i, go) in g.data().chunks(n).enumerate() {
                        for j in 0..n {
                            gg[j] += go[j] * xhat_row(i, j);
                        }
                    }
                });
                acc(shift, &mut |gs| {
                    for go in g.data().chunks(n) {
                        add_into(gs, go, 1.0);
                    }
                });
                acc(x, &mut |gx| {
                    let mut dxhat = vec![0.0; n];
                    for (i, go) in g.data().chunks(n).enumerate() {
                        let (_, rstd) = stats[i];
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..n {
                            dxhat[j] = go[j] * gv.data()[j];
                            m1 += dxhat[j];
                            m2 += dxhat[j] * xhat_row(i, j);
                        }
                        m1 /= n as f64;
                        m2 /= n as f64;
                        for j in 0..n {
                            gx[i * n + j] += rstd * (dxhat[j] - m1 - xhat_row(i, j) * m2);
                        }
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let n = g.cols();
                acc(*table, &mut |gt| {
                    for (i, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * n..(id + 1) * n], &g.data()[i * n..(i + 1) * n], 1.0);
                    }
                });
            }
            &Op::Attention { q, k, v, heads } => {
                let Aux::Probs(probs) = &node.aux else { unreachable!("attention keeps probabilities") };
                attention_backward(self, node, g, q, k, v, heads, probs, grads);
            }
            Op::SelectRows { a, rows } => {
                let n = g.cols();
                acc(*a, &mut |ga| {
                    for (i, &r) in rows.iter().enumerate() {
                        add_into(&mut ga[r * n..(r + 1) * n], &g.data()[i * n..(i + 1) * n], 1.0);
                    }
                });
            }
            Op::CrossEntropy { logits, targets, mask } => {
                let lv = val(*logits);
                let n = lv.cols();
                let active = mask.iter().filter(|&&m| m).count() as f64;
                let scale = g.item() / active;
                acc(*logits, &mut |gl| {
                    let mut p = vec![0.0; n];
                    for (i, (&t, &m)) in targets.iter().zip(mask).enumerate() {
                        if !m {
                            continue;
                        }
                        p.copy_from_slice(lv.row(i));
                        softmax_in_place(&mut p);
                        p[t] -= 1.0;
                        add_into(&mut gl[i * n..(i + 1) * n], &p, scale);
                    }
                });
            }
            Op::Bce { probs, labels } => {
                let pv = val(*probs);
                let m = labels.len() as f64;
                let scale = g.item() / m;
                acc(*probs, &mut |gp| {
                    for ((x, &p), &z) in gp.iter_mut().zip(pv.data()).zip(labels) {
                        *x += scale * (-z / p + (1.0 - z) / (1.0 - p));
                    }
                });
            }
            &Op::Sum(a) => {
                let s = g.item();
                acc(a, &mut |ga| ga.iter_mut().for_each(|x| *x += s));
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64], alpha: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

#[allow(clippy::too_many_arguments)]
fn attention_backward(
    tape: &Tape<'_>,
    node: &Node<'_>,
    g: &Tensor,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    probs: &[f64],
    grads: &mut [Option<Tensor>],
) {
    let (t, d) = dims2(&node.value);
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (qv, kv, vv) = (tape.value(q).data(), tape.value(k).data(), tape.value(v).data());
    let go = g.data();
    let mut dq = vec![0.0; t * d];
    let mut dk = vec![0.0; t * d];
    let mut dv = vec![0.0; t * d];
    let mut dp = vec![0.0; t];
    for h in 0..heads {
        let off = h * dh;
        let p = &probs[h * t * t..(h + 1) * t * t];
        for i in 0..t {
            let gi = &go[i * d + off..i * d + off + dh];
            let mut dot = 0.0;
            for j in 0..=i {
                let vj = &vv[j * d + off..j * d + off + dh];
                dp[j] = gi.iter().zip(vj).map(|(a, b)| a * b).sum();
                dot += p[i * t + j] * dp[j];
                let pij = p[i * t + j];
                for c in 0..dh {
                    dv[j * d + off + c] += pij * gi[c];
                }
            }
            for j in 0..=i {
                let ds = p[i * t + j] * (dp[j] - dot) * scale;
                for c in 0..dh {
                    dq[i * d + off + c] += ds * kv[j * d + off + c];
                    dk[j * d + off + c] += ds * qv[i * d + off + c];
                }
            }
        }
    }
    for (var, buf) in [(q, dq), (k, dk), (v, dv)] {
        if !tape.nodes[var.0].requires_grad {
            continue;
        }
        let slot = grads[var.0].get_or_insert_with(|| Tensor::zeros(tape.value(var).shape()));
        add_into(slot.data_mut(), &buf, 1.0);
    }
}

fn parents(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        &Op::MatMul { a, b, .. } | &Op::Add(a, b) | &Op::Sub(a, b) | &Op::Mul(a, b) => vec![a, b],
        &Op::AddRow { a, row } => vec![a, row],
        &Op::MulCol { a, col } => vec![a, col],
        &Op::Scale(a, _) | &Op::Sigmoid(a) | &Op::Gelu(a) | &Op::Sum(a) => vec![a],
        &Op::LayerNorm { x, gain, shift } => vec![x, gain, shift],
        Op::Embedding { table, .. } => vec![*table],
        &Op::Attention { q, k, v, .. } => vec![q, k, v],
        Op::SelectRows { a, .. } => vec![*a],
        Op::CrossEntropy { logits, .. } => vec![*logits],
        Op::Bce { probs, .. } => vec![*probs],
    }
}

fn eval(op: &Op, nodes: &[Node<'_>]) -> Result<(Tensor, Aux)> {
    let val = |v: Var| nodes[v.0].value.as_ref();
    let plain = |t: Tensor| Ok((t, Aux::None));
    match op {
        Op::Leaf => unreachable!("leaves are never evaluated"),
        &Op::MatMul { a, b, ta, tb } => {
            let (av, bv) = (val(a), val(b));
            let (ar, ac) = dims2(av);
            let (br, bc) = dims2(bv);
            let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
            let (k2, n) = if tb { (bc, br) } else { (br, bc) };
            if k != k2 {
                return Err(Error::Dimension(format!(
                    "matmul inner dimensions differ: {:?}{} · {:?}{}",
                    av.shape(),
                    if ta { "ᵀ" } else { "" },
                    bv.shape(),
                    if tb { "ᵀ" } else { "" }
                )));
            }
            let mut out = vec![0.0; m * n];
            gemm(m, k, n, 1.0, av.data(), ta, bv.data(), tb, 0.0, &mut out);
            plain(Tensor::matrix(m, n, out)?)
        }
        &Op::Add(a, b) => {
            same_shape(val(a), val(b), "add")?;
            plain(zip_map(val(a), val(b), |x, y| x + y))
        }
        &Op::Sub(a, b) => {
            same_shape(val(a), val(b), "sub")?;
            plain(zip_map(val(a), val(b), |x, y| x - y))
        }
        &Op::Mul(a, b) => {
            same_shape(val(a), val(b), "mul")?;
            plain(zip_map(val(a), val(b), |x, y| x * y))
        }
        &Op::AddRow { a, row } => {
            let (av, rv) = (val(a), val(row));
            let n = av.cols();
            if rv.len() != n {
                return Err(Error::Dimension(format!("add_row: row of {} for {n} columns", rv.len())));
            }
            let mut out = av.clone();
            for chunk in out.data_mut().chunks_mut(n) {
                add_into(chunk, rv.data(), 1.0);
            }
            plain(out)
        }
        &Op::MulCol { a, col } => {
            let (av, cv) = (val(a), val(col));
            let (m, n) = dims2(av);
            if cv.len() != m {
                return Err(Error::Dimension(format!("mul_col: column of {} for {m} rows", cv.len())));
            }
            let mut out = av.clone();
            for (chunk, &c) in out.data_mut().chunks_mut(n).zip(cv.data()) {
                chunk.iter_mut().for_each(|x| *x *= c);
            }
            plain(out)
        }
        &Op::Scale(a, s) => plain(val(a).map(|x| x * s)),
        &Op::Sigmoid(a) => plain(val(a).map(sigmoid_scalar)),
        &Op::Gelu(a) => plain(val(a).map(|x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()))),
        &Op::LayerNorm { x, gain, shift } => {
            let (xv, gv, sv) = (val(x), val(gain), val(shift));
            let n = xv.cols();
            if n < 2 || gv.len() != n || sv.len() != n {
                return Err(Error::Dimension(format!(
                    "layer_norm: {n} features with gain {} / shift {}",
                    gv.len(),
                    sv.len()
                )));
            }
            let mut out = vec![0.0; xv.len()];
            let stats = xv
                .data()
                .chunks(n)
                .zip(out.chunks_mut(n))
                .map(|(row, o)| layer_norm_row(row, gv.data(), sv.data(), o))
                .collect();
            Ok((Tensor::new(xv.shape().to_vec(), out)?, Aux::Stats(stats)))
        }
        Op::Embedding { table, ids } => {
            let tv = val(*table);
            let (rows, n) = dims2(tv);
            let mut out = Vec::with_capacity(ids.len() * n);
            for &id in ids {
                if id >= rows {
                    return Err(Error::Dimension(format!("embedding id {id} out of range for {rows} rows")));
                }
                out.extend_from_slice(tv.row(id));
            }
            plain(Tensor::matrix(ids.len(), n, out)?)
        }
        &Op::Attention { q, k, v, heads } => {
            let (qv, kv, vv) = (val(q), val(k), val(v));
            same_shape(qv, kv, "attention q/k")?;
            same_shape(qv, vv, "attention q/v")?;
            let (t, d) = dims2(qv);
            if heads == 0 || d % heads != 0 {
                return Err(Error::Dimension(format!("{heads} heads do not divide width {d}")));
            }
            let (out, probs) = attention_forward(qv.data(), kv.data(), vv.data(), t, d, heads);
            Ok((Tensor::matrix(t, d, out)?, Aux::Probs(probs)))
        }
        Op::SelectRows { a, rows } => {
            let av = val(*a);
            let (m, n) = dims2(av);
            let mut out = Vec::with_capacity(rows.len() * n);
            for &r in rows {
                if r >= m {
                    return Err(Error::Dimension(format!("row {r} out of range for {m} rows")));
                }
                out.extend_from_slice(av.row(r));
            }
            plain(Tensor::matrix(rows.len(), n, out)?)
        }
        Op::CrossEntropy { logits, targets, mask } => {
            let loss = super::tensor::cross_entropy(val(*logits), targets, mask)?;
            plain(Tensor::scalar(loss))
        }
        Op::Bce { probs, labels } => {
            let pv = val(*probs);
            if pv.len() != labels.len() {
                return Err(Error::Dimension(format!("bce: {} probabilities, {} labels", pv.len(), labels.len())));
            }
            plain(Tensor::scalar(binary_cross_entropy(pv.data(), labels)?))
        }
        &Op::Sum(a) => plain(Tensor::scalar(val(a).sum())),
    }
}

/// Returns `(output, probabilities)` for causal multi-head attention.
pub(crate) fn attention_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    t: usize,
    d: usize,
    heads: usize,
) -> (Vec<f64>, Vec<f64>) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; t * d];
    let mut probs = vec![0.0; heads * t * t];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..t {
            let qi = &q[i * d + off..i * d + off + dh];
            let row = &mut probs[h * t * t + i * t..h * t * t + i * t + i + 1];
            for (j, s) in row.iter_mut().enumerate() {
                let kj = &k[j * d + off..j * d + off + dh];
                *s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
            }
            softmax_in_place(row);
            let oi = &mut out[i * d + off..i * d + off + dh];
            for (j, &p) in row.iter().enumerate() {
                let vj = &v[j * d + off..j * d + off + dh];
                for c in 0..dh {
                    oi[c] += p * vj[c];
                }
            }
        }
    }
    (out, probs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::finite_diff_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.mark(Tensor::from_rows(&[&[1.0, -2.0], &[0.5, 3.0]]));
        let s = tape.sum(x).unwrap();
        let g = tape.grad(s, &[x]).unwrap();
        assert_eq!(g[0].data(), &[1.0; 4]);
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let c = Tensor::vector(vec![2.0, -3.0, 0.5]);
        let mut tape = Tape::new();
        let w = tape.mark(Tensor::zeros(&[3]));
        let cv = tape.constant(c.clone());
        let s = tape.sigmoid(w).unwrap();
        let p = tape.mul(s, cv).unwrap();
        let loss = tape.sum(p).unwrap();
        let g = tape.grad(loss, &[w]).unwrap();
        for (gi, ci) in g[0].data().iter().zip(c.data()) {
            assert_eq!(*gi, 0.25 * ci);
        }
    }

    #[test]
    fn unmarked_input_is_a_usage_error() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[2]));
        let s = tape.sum(x).unwrap();
        assert!(matches!(tape.grad(s, &[x]), Err(Error::Usage(_))));
    }

    /// Every primitive on one composite graph, checked against central differences.
    #[test]
    fn composite_graph_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (t, d, heads, v) = (5, 6, 2, 7);
        let table = Tensor::randn(&[v, d], 0.5, &mut rng);
        let w = Tensor::randn(&[d, 3 * d], 0.4, &mut rng);
        let gain = Tensor::randn(&[d], 0.3, &mut rng).map(|x| x + 1.0);
        let head = Tensor::randn(&[v, d], 0.5, &mut rng);
        let col_w = Tensor::randn(&[1, d], 0.5, &mut rng);
        let ids = [1, 4, 0, 6, 2];
        let targets = [4, 0, 6, 2, 3];
        let mask = [false, true, true, false, true];

        let build = |tape: &mut Tape, w: Var| -> Var {
            let tv = tape.constant(table.clone());
            let x = tape.embedding(tv, &ids).unwrap();
            let g = tape.constant(gain.clone());
            let s = tape.constant(Tensor::zeros(&[d]));
            let h = tape.layer_norm(x, g, s).unwrap();
            let qkv = tape.matmul(h, w).unwrap();
            // split columns through fixed selection matrices
            let pick = |tape: &mut Tape, start: usize| {
                let mut sel = Tensor::zeros(&[3 * d, d]);
                for c in 0..d {
                    sel.data_mut()[(start + c) * d + c] = 1.0;
                }
                let sv = tape.constant(sel);
                tape.matmul(qkv, sv).unwrap()
            };
            let q = pick(tape, 0);
            let k = pick(tape, d);
            let vv = pick(tape, 2 * d);
            let att = tape.causal_attention(q, k, vv, heads).unwrap();
            let act = tape.gelu(att).unwrap();
            let cw = tape.constant(col_w.clone());
            let gate_logit = tape.matmul_t(act, false, cw, true).unwrap();
            let gate = tape.sigmoid(gate_logit).unwrap();
            let gated = tape.mul_col(act, gate).unwrap();
            let res = tape.add(gated, x).unwrap();
            let hv = tape.constant(head.clone());
            let logits = tape.matmul_t(res, false, hv, true).unwrap();
            let ce = tape.cross_entropy(logits, &targets, &mask).unwrap();
            let last = tape.select_rows(gate, &[t - 1]).unwrap();
            let bce = tape.bce(last, &[1.0]).unwrap();
            tape.add(ce, bce).unwrap()
        };

        let mut tape = Tape::new();
        let wv = tape.mark(w.clone());
        let loss = build(&mut tape, wv);
        let analytic = tape.grad(loss, &[wv]).unwrap().remove(0);
        let f = |theta: &Tensor| {
            let mut tape = Tape::new();
            let wv = tape.constant(theta.clone());
            let loss = build(&mut tape, wv);
            tape.value(loss).item()
        };
        let err = finite_diff_check(f, &w, &analytic).unwrap();
        assert!(err < 1e-6, "max relative error {err}");
    }

    #[test]
    fn replay_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut tape = Tape::new();
        let a = tape.mark(Tensor::randn(&[4, 8], 1.0, &mut rng));
        let b = tape.constant(Tensor::randn(&[8, 8], 1.0, &mut rng));
        let c = tape.matmul(a, b).unwrap();
        let q = tape.gelu(c).unwrap();
        let att = tape.causal_attention(q, c, q, 2).unwrap();
        let g = tape.constant(Tensor::ones(&[8]));
        let s = tape.constant(Tensor::zeros(&[8]));
        let n = tape.layer_norm(att, g, s).unwrap();
        let out = tape.sum(n).unwrap();
        let replayed = tape.replay().unwrap();
        for (i, v) in replayed.iter().enumerate() {
            assert_eq!(v, tape.value(Var(i)));
        }
        assert_eq!(replayed.last().unwrap(), tape.value(out));
    }
}
