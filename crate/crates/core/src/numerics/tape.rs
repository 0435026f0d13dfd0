//! Reverse-mode gradient tape over [`Tensor2`] values.
//!
//! Every op appends a node holding its forward value and whatever it needs to
//! form a vector-Jacobian product. A tape created with [`Tape::inference`]
//! keeps values only and refuses to run backward.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use super::conv;
use super::tensor::{self, Tensor2};
use crate::attention::{self, RopeConfig};
use crate::error::{shape_err, Error, Result};

#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.value().shape())
    }
}

enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Hadamard(usize, usize),
    Scale(usize, f64),
    AddColBroadcast(usize, usize),
    Relu(usize),
    Silu(usize),
    Hcat(usize, usize),
    Vcat(usize, usize),
    SliceCols(usize, usize),
    SliceRows(usize, usize),
    SelectCols(usize, Vec<usize>),
    Conv1d {
        input: usize,
        weight: usize,
        k: usize,
    },
    RowNormalize {
        x: usize,
        sums: Vec<f64>,
    },
    RmsNorm {
        x: usize,
        gain: usize,
        inv_rms: Vec<f64>,
    },
    Rope {
        x: usize,
        positions: Vec<f64>,
        cfg: RopeConfig,
        head_dim: usize,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        probs: Rc<Tensor2>,
        scale: f64,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        probs: Tensor2,
    },
    Sum(usize),
}

struct Node {
    value: Rc<Tensor2>,
    op: Op,
    needs_grad: bool,
}

pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    record: bool,
    consumed: Cell<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// A recording tape.
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            record: true,
            consumed: Cell::new(false),
        }
    }

    /// A tape that only carries forward values.
    pub fn inference() -> Self {
        Self {
            record: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Clears all nodes so the tape can record a fresh forward pass.
    pub fn reset(&mut self) {
        self.nodes.get_mut().clear();
        self.consumed.set(false);
    }

    fn push(&self, value: Tensor2, op: Op, needs_grad: bool) -> Var<'_> {
        let needs_grad = needs_grad && self.record;
        let op = if needs_grad { op } else { Op::Leaf };
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    /// A trainable leaf: backward produces a gradient for it.
    pub fn param(&self, value: Tensor2) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor2) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    /// Backpropagates from a `1 × 1` loss with upstream gradient `seed`.
    pub fn backward(&self, loss: Var<'_>, seed: f64) -> Result<Gradients> {
        if !self.record {
            return Err(Error::Config("backward on an inference tape".into()));
        }
        if self.consumed.replace(true) {
            return Err(Error::TapeConsumed);
        }
        if loss.value().shape() != (1, 1) {
            return shape_err("backward", format!("loss shape {:?}", loss.value().shape()));
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor2>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Tensor2::filled(1, 1, seed));

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            let mut send = |to: usize, contrib: Tensor2| {
                if !nodes[to].needs_grad {
                    return;
                }
                match &mut grads[to] {
                    Some(acc) => acc.accumulate(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            };
            let val = |i: usize| nodes[i].value.clone();
            let need = |i: usize| nodes[i].needs_grad;
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if need(*a) {
                        send(*a, tensor::matmul_nt(&g, &val(*b))?);
                    }
                    if need(*b) {
                        send(*b, tensor::matmul_tn(&val(*a), &g)?);
                    }
                }
                Op::Transpose(a) => send(*a, g.transpose()),
                Op::Add(a, b) => {
                    if need(*a) {
                        send(*a, g.clone());
                    }
                    send(*b, g);
                }
                Op::Hadamard(a, b) => {
                    if need(*a) {
                        send(*a, g.hadamard(&val(*b))?);
                    }
                    if need(*b) {
                        send(*b, g.hadamard(&val(*a))?);
                    }
                }
                Op::Scale(a, s) => send(*a, g.scale(*s)),
                Op::AddColBroadcast(x, col) => {
                    if need(*col) {
                        send(*col, g.sum_cols());
                    }
                    send(*x, g);
                }
                Op::Relu(a) => {
                    let x = val(*a);
                    let mut out = g;
                    for (o, &xv) in out.data_mut().iter_mut().zip(x.data()) {
                        if xv <= 0.0 {
                            *o = 0.0;
                        }
                    }
                    send(*a, out);
                }
                Op::Silu(a) => {
                    let x = val(*a);
                    let mut out = g;
                    for (o, &xv) in out.data_mut().iter_mut().zip(x.data()) {
                        let s = sigmoid(xv);
                        *o *= s * (1.0 + xv * (1.0 - s));
                    }
                    send(*a, out);
                }
                Op::Hcat(a, b) => {
                    let ca = nodes[*a].value.cols();
                    if need(*a) {
                        send(*a, g.slice_cols(0, ca));
                    }
                    if need(*b) {
                        send(*b, g.slice_cols(ca, g.cols()));
                    }
                }
                Op::Vcat(a, b) => {
                    let ra = nodes[*a].value.rows();
                    if need(*a) {
                        send(*a, g.slice_rows(0, ra));
                    }
                    if need(*b) {
                        send(*b, g.slice_rows(ra, g.rows()));
                    }
                }
                Op::SliceCols(a, start) => {
                    let (rows, cols) = nodes[*a].value.shape();
                    let mut out = Tensor2::zeros(rows, cols);
                    for r in 0..rows {
                        for c in 0..g.cols() {
                            out.set(r, start + c, g.get(r, c));
                        }
                    }
                    send(*a, out);
                }
                Op::SliceRows(a, start) => {
                    let (rows, cols) = nodes[*a].value.shape();
                    let mut out = Tensor2::zeros(rows, cols);
                    out.data_mut()[start * cols..(start + g.rows()) * cols].copy_from_slice(g.data());
                    send(*a, out);
                }
                Op::SelectCols(a, idx) => {
                    let (rows, cols) = nodes[*a].value.shape();
                    let mut out = Tensor2::zeros(rows, cols);
                    for r in 0..rows {
                        for (j, &c) in idx.iter().enumerate() {
                            let v = out.get(r, c) + g.get(r, j);
                            out.set(r, c, v);
                        }
                    }
                    send(*a, out);
                }
                Op::Conv1d { input, weight, k } => {
                    let x = val(*input);
                    if need(*input) {
                        send(*input, conv::conv1d_backward_input(&g, &val(*weight), x.rows(), *k));
                    }
                    if need(*weight) {
                        send(*weight, conv::conv1d_backward_weight(&g, &x, *k));
                    }
                }
                Op::RowNormalize { x, sums } => {
                    send(*x, tensor::row_normalize_backward(&node.value, sums, &g));
                }
                Op::RmsNorm { x, gain, inv_rms } => {
                    let (dx, dgain) = rms_norm_backward(&val(*x), &val(*gain), inv_rms, &g);
                    if need(*gain) {
                        send(*gain, dgain);
                    }
                    send(*x, dx);
                }
                Op::Rope {
                    x,
                    positions,
                    cfg,
                    head_dim,
                } => {
                    let back: Vec<f64> = positions.iter().map(|p| -p).collect();
                    send(*x, attention::rotate_heads(&g, &back, cfg, *head_dim)?);
                }
                Op::Attention { q, k, v, probs, scale } => {
                    let (dq, dk, dv) =
                        attention::block_attention_backward(&val(*q), &val(*k), &val(*v), probs, *scale, &g)?;
                    if need(*q) {
                        send(*q, dq);
                    }
                    if need(*k) {
                        send(*k, dk);
                    }
                    if need(*v) {
                        send(*v, dv);
                    }
                }
                Op::CrossEntropy { logits, targets, probs } => {
                    let n = targets.len() as f64;
                    let s = g.get(0, 0) / n;
                    let mut out = probs.clone();
                    for (c, &t) in targets.iter().enumerate() {
                        let v = out.get(t, c) - 1.0;
                        out.set(t, c, v);
                    }
                    send(*logits, out.scale(s));
                }
                Op::Sum(a) => {
                    let (rows, cols) = nodes[*a].value.shape();
                    send(*a, Tensor2::filled(rows, cols, g.get(0, 0)));
                }
            }
        }

        Ok(Gradients { grads })
    }
}

/// Gradients keyed by the [`Var`] they belong to.
pub struct Gradients {
    grads: Vec<Option<Tensor2>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor2> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient for `var`, or zeros of its shape if nothing flowed into it.
    pub fn get_or_zeros(&self, var: Var<'_>) -> Tensor2 {
        self.get(var).cloned().unwrap_or_else(|| {
            let (r, c) = var.value().shape();
            Tensor2::zeros(r, c)
        })
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub const RMS_EPS: f64 = 1e-6;

/// Per-column RMS normalisation with a learned `d × 1` gain.
pub fn rms_norm(x: &Tensor2, gain: &Tensor2) -> (Tensor2, Vec<f64>) {
    let (d, t) = x.shape();
    let mut inv = Vec::with_capacity(t);
    let mut out = Tensor2::zeros(d, t);
    for c in 0..t {
        let mut ss = 0.0;
        for r in 0..d {
            ss += x.get(r, c) * x.get(r, c);
        }
        let ir = 1.0 / (ss / d as f64 + RMS_EPS).sqrt();
        inv.push(ir);
        for r in 0..d {
            out.set(r, c, x.get(r, c) * ir * gain.get(r, 0));
        }
    }
    (out, inv)
}

fn rms_norm_backward(x: &Tensor2, gain: &Tensor2, inv: &[f64], g: &Tensor2) -> (Tensor2, Tensor2) {
    let (d, t) = x.shape();
    let mut dx = Tensor2::zeros(d, t);
    let mut dgain = Tensor2::zeros(d, 1);
    for c in 0..t {
        let ir = inv[c];
        let mut dot = 0.0;
        for r in 0..d {
            let xhat = x.get(r, c) * ir;
            let gy = g.get(r, c);
            dgain.data_mut()[r] += gy * xhat;
            dot += gy * gain.get(r, 0) * xhat;
        }
        let mean = dot / d as f64;
        for r in 0..d {
            let xhat = x.get(r, c) * ir;
            let dxhat = g.get(r, c) * gain.get(r, 0);
            dx.set(r, c, (dxhat - xhat * mean) * ir);
        }
    }
    (dx, dgain)
}

/// Column-mean cross-entropy of `logits` (vocab × T) against `targets`.
pub fn cross_entropy(logits: &Tensor2, targets: &[usize]) -> Result<(f64, Tensor2)> {
    if targets.len() != logits.cols() {
        return shape_err(
            "cross_entropy",
            format!("{} targets for {} columns", targets.len(), logits.cols()),
        );
    }
    let probs = tensor::softmax_cols(logits)?;
    let mut nll = 0.0;
    for (c, &t) in targets.iter().enumerate() {
        if t >= logits.rows() {
            return Err(Error::TokenOutOfRange(t));
        }
        nll += log_softmax_at(logits, t, c);
    }
    Ok((-nll / targets.len() as f64, probs))
}

/// `log softmax(logits[:, c])[t]` via log-sum-exp.
pub fn log_softmax_at(logits: &Tensor2, t: usize, c: usize) -> f64 {
    let mut max = f64::NEG_INFINITY;
    for r in 0..logits.rows() {
        max = max.max(logits.get(r, c));
    }
    let mut s = 0.0;
    for r in 0..logits.rows() {
        s += (logits.get(r, c) - max).exp();
    }
    logits.get(t, c) - max - s.ln()
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor2> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.tape.nodes.borrow()[self.id].value.shape()
    }

    fn needs(&self) -> bool {
        self.tape.needs(self.id)
    }

    /// The same value as a constant; gradient flow stops here.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant((*self.value()).clone())
    }

    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let v = tensor::matmul(&self.value(), &other.value())?;
        Ok(self
            .tape
            .push(v, Op::MatMul(self.id, other.id), self.needs() || other.needs()))
    }

    pub fn transpose(&self) -> Var<'t> {
        let v = self.value().transpose();
        self.tape.push(v, Op::Transpose(self.id), self.needs())
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.value().add(&other.value())?;
        Ok(self
            .tape
            .push(v, Op::Add(self.id, other.id), self.needs() || other.needs()))
    }

    pub fn hadamard(&self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.value().hadamard(&other.value())?;
        Ok(self
            .tape
            .push(v, Op::Hadamard(self.id, other.id), self.needs() || other.needs()))
    }

    pub fn scale(&self, s: f64) -> Var<'t> {
        let v = self.value().scale(s);
        self.tape.push(v, Op::Scale(self.id, s), self.needs())
    }

    pub fn add_col_broadcast(&self, col: Var<'t>) -> Result<Var<'t>> {
        let v = self.value().add_col_broadcast(&col.value())?;
        Ok(self
            .tape
            .push(v, Op::AddColBroadcast(self.id, col.id), self.needs() || col.needs()))
    }

    pub fn relu(&self) -> Var<'t> {
        let v = tensor::relu(&self.value());
        self.tape.push(v, Op::Relu(self.id), self.needs())
    }

    pub fn silu(&self) -> Var<'t> {
        let v = self.value().map(|x| x * sigmoid(x));
        self.tape.push(v, Op::Silu(self.id), self.needs())
    }

    pub fn hcat(&self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.value().hcat(&other.value())?;
        Ok(self
            .tape
            .push(v, Op::Hcat(self.id, other.id), self.needs() || other.needs()))
    }

    pub fn vcat(&self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.value().vcat(&other.value())?;
        Ok(self
            .tape
            .push(v, Op::Vcat(self.id, other.id), self.needs() || other.needs()))
    }

    pub fn slice_cols(&self, start: usize, end: usize) -> Var<'t> {
        let v = self.value().slice_cols(start, end);
        self.tape.push(v, Op::SliceCols(self.id, start), self.needs())
    }

    pub fn slice_rows(&self, start: usize, end: usize) -> Var<'t> {
        let v = self.value().slice_rows(start, end);
        self.tape.push(v, Op::SliceRows(self.id, start), self.needs())
    }

    pub fn select_cols(&self, idx: &[usize]) -> Var<'t> {
        let v = self.value().select_cols(idx);
        self.tape.push(v, Op::SelectCols(self.id, idx.to_vec()), self.needs())
    }

    pub fn conv1d(&self, weight: Var<'t>, k: usize) -> Result<Var<'t>> {
        let v = conv::conv1d(&self.value(), &weight.value(), k)?;
        Ok(self.tape.push(
            v,
            Op::Conv1d {
                input: self.id,
                weight: weight.id,
                k,
            },
            self.needs() || weight.needs(),
        ))
    }

    /// Row normalisation with the dead-row floor of [`tensor::row_normalize`].
    pub fn row_normalize(&self) -> Var<'t> {
        let x = self.value();
        let (v, _) = tensor::row_normalize(&x);
        let sums = if self.needs() {
            tensor::row_normalize_sums(&x)
        } else {
            Vec::new()
        };
        self.tape.push(v, Op::RowNormalize { x: self.id, sums }, self.needs())
    }

    pub fn rms_norm(&self, gain: Var<'t>) -> Var<'t> {
        let (v, inv_rms) = rms_norm(&self.value(), &gain.value());
        self.tape.push(
            v,
            Op::RmsNorm {
                x: self.id,
                gain: gain.id,
                inv_rms,
            },
            self.needs() || gain.needs(),
        )
    }

    /// Rotary encoding applied per head of width `head_dim` along the rows.
    pub fn rope(&self, positions: &[f64], cfg: &RopeConfig, head_dim: usize) -> Result<Var<'t>> {
        let v = attention::rotate_heads(&self.value(), positions, cfg, head_dim)?;
        Ok(self.tape.push(
            v,
            Op::Rope {
                x: self.id,
                positions: positions.to_vec(),
                cfg: *cfg,
                head_dim,
            },
            self.needs(),
        ))
    }

    pub fn sum(&self) -> Var<'t> {
        let v = Tensor2::filled(1, 1, self.value().sum());
        self.tape.push(v, Op::Sum(self.id), self.needs())
    }

    /// Mean next-token cross-entropy; `self` holds logits as columns.
    pub fn cross_entropy(&self, targets: &[usize]) -> Result<Var<'t>> {
        let (loss, probs) = cross_entropy(&self.value(), targets)?;
        Ok(self.tape.push(
            Tensor2::filled(1, 1, loss),
            Op::CrossEntropy {
                logits: self.id,
                targets: targets.to_vec(),
                probs,
            },
            self.needs(),
        ))
    }
}

/// Attention of `q` (d × B) over `k`, `v` (d × C) with the last `B` key
/// columns causally aligned to the queries. Returns the output and the
/// attention probabilities (C × B).
pub fn attend<'t>(q: Var<'t>, k: Var<'t>, v: Var<'t>) -> Result<(Var<'t>, Rc<Tensor2>)> {
    let tape = q.tape;
    let (out, probs) = attention::block_attention(&q.value(), &k.value(), &v.value())?;
    let scale = 1.0 / (q.shape().0 as f64).sqrt();
    let probs = Rc::new(probs);
    let needs = q.needs() || k.needs() || v.needs();
    let var = tape.push(
        out,
        Op::Attention {
            q: q.id,
            k: k.id,
            v: v.id,
            probs: probs.clone(),
            scale,
        },
        needs,
    );
    Ok((var, probs))
}
