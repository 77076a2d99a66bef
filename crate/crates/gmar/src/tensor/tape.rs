//! Reverse-mode gradient tape.
//!
//! Operations called through a recording [`Tape`] push one node each, in
//! topological order, holding the parent ids and the values their backward
//! rule needs. [`Tape::backward`] seeds the loss with 1.0, walks the nodes
//! in reverse, and accumulates gradients by addition into a
//! [`GradientStore`]. Inputs without a tape id are treated as constants:
//! their values are saved, but no gradient flows into them.
//!
//! A tape built with [`Tape::no_grad`] computes values only; every result
//! comes back untracked. Saved activations are retained by value, and a
//! tape is meant to live for exactly one inference.

use super::{axis_split, ops, Tensor};
use crate::error::{Error, Result};

type Src = Option<usize>;

enum Op {
    Leaf,
    Add { a: Src, b: Src },
    Sub { a: Src, b: Src },
    Mul { a: Src, b: Src, a_val: Tensor, b_val: Tensor },
    MulScalar { a: Src, k: f64 },
    AddRow { x: Src, b: Src, cols: usize },
    MatMul { a: Src, b: Src, a_val: Tensor, b_val: Tensor },
    Softmax { x: Src, y: Tensor },
    LayerNorm { x: Src, gamma: Src, beta: Src, xhat: Tensor, inv_std: Vec<f64>, gamma_val: Tensor },
    Gelu { x: Src, x_val: Tensor },
    TransposeLast2 { x: Src },
    Reshape { x: Src, from: Vec<usize> },
    SliceAxis { x: Src, axis: usize, start: usize, from: Vec<usize> },
    Concat { parts: Vec<(Src, usize)>, axis: usize },
    SumAxis { x: Src, axis: usize, from: Vec<usize> },
    MeanAxis { x: Src, axis: usize, from: Vec<usize> },
    Abs { x: Src, x_val: Tensor },
    Square { x: Src, x_val: Tensor },
    SqrtScalar { x: Src, y_val: f64 },
    CrossEntropy { logits: Src, probs: Vec<f64>, label: usize },
}

struct Node {
    shape: Vec<usize>,
    op: Op,
}

/// Records tensor operations for one inference and replays them backward.
pub struct Tape {
    nodes: Vec<Node>,
    recording: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    /// A recording tape: results of ops on tracked inputs get node ids.
    pub fn new() -> Tape {
        Tape { nodes: Vec::new(), recording: true }
    }

    /// A pass-through tape: all ops compute values and record nothing.
    pub fn no_grad() -> Tape {
        Tape { nodes: Vec::new(), recording: false }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a tensor as a gradient root and returns the tracked copy.
    pub fn leaf(&mut self, t: &Tensor) -> Tensor {
        if !self.recording {
            return t.detach();
        }
        let id = self.push(t.shape().to_vec(), Op::Leaf);
        t.detach().with_tape_id(id)
    }

    fn push(&mut self, shape: Vec<usize>, op: Op) -> usize {
        self.nodes.push(Node { shape, op });
        self.nodes.len() - 1
    }

    fn track(&mut self, out: Tensor, any_tracked: bool, op: impl FnOnce() -> Op) -> Tensor {
        if self.recording && any_tracked {
            let id = self.push(out.shape().to_vec(), op());
            out.with_tape_id(id)
        } else {
            out
        }
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let out = ops::add(a, b)?;
        Ok(self.track(out, a.tape_id().is_some() || b.tape_id().is_some(), || Op::Add {
            a: a.tape_id(),
            b: b.tape_id(),
        }))
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let out = ops::sub(a, b)?;
        Ok(self.track(out, a.tape_id().is_some() || b.tape_id().is_some(), || Op::Sub {
            a: a.tape_id(),
            b: b.tape_id(),
        }))
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let out = ops::mul(a, b)?;
        Ok(self.track(out, a.tape_id().is_some() || b.tape_id().is_some(), || Op::Mul {
            a: a.tape_id(),
            b: b.tape_id(),
            a_val: a.detach(),
            b_val: b.detach(),
        }))
    }

    pub fn mul_scalar(&mut self, a: &Tensor, k: f64) -> Tensor {
        let out = ops::mul_scalar(a, k);
        self.track(out, a.tape_id().is_some(), || Op::MulScalar { a: a.tape_id(), k })
    }

    pub fn add_row(&mut self, x: &Tensor, b: &Tensor) -> Result<Tensor> {
        let out = ops::add_row(x, b)?;
        let cols = b.numel();
        Ok(self.track(out, x.tape_id().is_some() || b.tape_id().is_some(), || Op::AddRow {
            x: x.tape_id(),
            b: b.tape_id(),
            cols,
        }))
    }

    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let out = ops::matmul(a, b)?;
        Ok(self.track(out, a.tape_id().is_some() || b.tape_id().is_some(), || Op::MatMul {
            a: a.tape_id(),
            b: b.tape_id(),
            a_val: a.detach(),
            b_val: b.detach(),
        }))
    }

    pub fn softmax_lastdim(&mut self, x: &Tensor) -> Result<Tensor> {
        let out = ops::softmax_lastdim(x)?;
        let y = out.clone();
        Ok(self.track(out, x.tape_id().is_some(), || Op::Softmax { x: x.tape_id(), y }))
    }

    pub fn layernorm(&mut self, x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let (out, xhat, inv_std) = ops::layernorm_parts(x, gamma, beta, eps)?;
        let tracked =
            x.tape_id().is_some() || gamma.tape_id().is_some() || beta.tape_id().is_some();
        Ok(self.track(out, tracked, || Op::LayerNorm {
            x: x.tape_id(),
            gamma: gamma.tape_id(),
            beta: beta.tape_id(),
            xhat,
            inv_std,
            gamma_val: gamma.detach(),
        }))
    }

    pub fn gelu(&mut self, x: &Tensor) -> Tensor {
        let out = ops::gelu(x);
        self.track(out, x.tape_id().is_some(), || Op::Gelu { x: x.tape_id(), x_val: x.detach() })
    }

    pub fn transpose_last2(&mut self, x: &Tensor) -> Result<Tensor> {
        let out = ops::transpose_last2(x)?;
        Ok(self.track(out, x.tape_id().is_some(), || Op::TransposeLast2 { x: x.tape_id() }))
    }

    pub fn reshape(&mut self, x: &Tensor, shape: impl Into<Vec<usize>>) -> Result<Tensor> {
        let out = ops::reshape(x, shape)?;
        let from = x.shape().to_vec();
        Ok(self.track(out, x.tape_id().is_some(), || Op::Reshape { x: x.tape_id(), from }))
    }

    pub fn slice_axis(&mut self, x: &Tensor, axis: usize, start: usize, end: usize) -> Result<Tensor> {
        let out = ops::slice_axis(x, axis, start, end)?;
        let from = x.shape().to_vec();
        Ok(self.track(out, x.tape_id().is_some(), || Op::SliceAxis {
            x: x.tape_id(),
            axis,
            start,
            from,
        }))
    }

    pub fn concat(&mut self, parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let out = ops::concat(parts, axis)?;
        let tracked = parts.iter().any(|p| p.tape_id().is_some());
        let srcs: Vec<(Src, usize)> =
            parts.iter().map(|p| (p.tape_id(), p.shape()[axis])).collect();
        Ok(self.track(out, tracked, || Op::Concat { parts: srcs, axis }))
    }

    pub fn sum_axis(&mut self, x: &Tensor, axis: usize) -> Result<Tensor> {
        let out = ops::sum_axis(x, axis)?;
        let from = x.shape().to_vec();
        Ok(self.track(out, x.tape_id().is_some(), || Op::SumAxis { x: x.tape_id(), axis, from }))
    }

    pub fn mean_axis(&mut self, x: &Tensor, axis: usize) -> Result<Tensor> {
        let out = ops::mean_axis(x, axis)?;
        let from = x.shape().to_vec();
        Ok(self.track(out, x.tape_id().is_some(), || Op::MeanAxis { x: x.tape_id(), axis, from }))
    }

    pub fn abs(&mut self, x: &Tensor) -> Tensor {
        let out = ops::abs(x);
        self.track(out, x.tape_id().is_some(), || Op::Abs { x: x.tape_id(), x_val: x.detach() })
    }

    pub fn square(&mut self, x: &Tensor) -> Tensor {
        let out = ops::square(x);
        self.track(out, x.tape_id().is_some(), || Op::Square { x: x.tape_id(), x_val: x.detach() })
    }

    pub fn sqrt_scalar(&mut self, x: &Tensor) -> Result<Tensor> {
        let out = ops::sqrt_scalar(x)?;
        let y_val = out.data()[0];
        Ok(self.track(out, x.tape_id().is_some(), || Op::SqrtScalar { x: x.tape_id(), y_val }))
    }

    /// Negative log-softmax probability of `label`: the classification loss.
    pub fn cross_entropy(&mut self, logits: &Tensor, label: usize) -> Result<Tensor> {
        if logits.rank() != 1 {
            return Err(Error::dim(format!(
                "cross_entropy expects rank-1 logits, got {:?}",
                logits.shape()
            )));
        }
        if label >= logits.numel() {
            return Err(Error::param(format!(
                "label {label} out of range for {} classes",
                logits.numel()
            )));
        }
        let probs = ops::softmax_lastdim(logits)?;
        let loss = -probs.data()[label].ln();
        let out = Tensor::scalar(loss);
        let p = probs.data().to_vec();
        Ok(self.track(out, logits.tape_id().is_some(), || Op::CrossEntropy {
            logits: logits.tape_id(),
            probs: p,
            label,
        }))
    }

    /// Runs the backward pass from a one-element loss tensor.
    ///
    /// The loss gradient is seeded with 1.0; every tape ancestor of the
    /// loss receives a gradient of its own shape, accumulated by addition
    /// where a node feeds several consumers. Iteration order is fixed, so
    /// identical tapes produce bit-identical gradients.
    pub fn backward(&self, loss: &Tensor) -> Result<GradientStore> {
        let loss_id = loss
            .tape_id()
            .ok_or_else(|| Error::contract("backward: loss tensor is not on the tape".to_string()))?;
        if loss.numel() != 1 {
            return Err(Error::contract(format!(
                "backward: loss must be scalar-shaped, got {:?}",
                loss.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss_id] = Some(vec![1.0]);
        for id in (0..=loss_id).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.apply_backward(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        let store = grads
            .iter()
            .enumerate()
            .map(|(id, g)| {
                g.as_ref().map(|data| Tensor::from_parts(self.nodes[id].shape.clone(), data.clone()))
            })
            .collect();
        Ok(GradientStore { grads: store })
    }

    fn accum(grads: &mut [Option<Vec<f64>>], src: Src, delta: impl FnOnce() -> Vec<f64>) {
        let Some(id) = src else { return };
        let d = delta();
        match &mut grads[id] {
            Some(g) => {
                for (gv, dv) in g.iter_mut().zip(&d) {
                    *gv += dv;
                }
            }
            slot => *slot = Some(d),
        }
    }

    fn apply_backward(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                Self::accum(grads, *a, || g.to_vec());
                Self::accum(grads, *b, || g.to_vec());
            }
            Op::Sub { a, b } => {
                Self::accum(grads, *a, || g.to_vec());
                Self::accum(grads, *b, || g.iter().map(|v| -v).collect());
            }
            Op::Mul { a, b, a_val, b_val } => {
                Self::accum(grads, *a, || {
                    g.iter().zip(b_val.data()).map(|(gv, bv)| gv * bv).collect()
                });
                Self::accum(grads, *b, || {
                    g.iter().zip(a_val.data()).map(|(gv, av)| gv * av).collect()
                });
            }
            Op::MulScalar { a, k } => {
                Self::accum(grads, *a, || g.iter().map(|v| v * k).collect());
            }
            Op::AddRow { x, b, cols } => {
                Self::accum(grads, *x, || g.to_vec());
                Self::accum(grads, *b, || {
                    let mut d = vec![0.0; *cols];
                    for row in g.chunks(*cols) {
                        for (dv, gv) in d.iter_mut().zip(row) {
                            *dv += gv;
                        }
                    }
                    d
                });
            }
            Op::MatMul { a, b, a_val, b_val } => {
                let gt = Tensor::from_parts(self.nodes[id].shape.clone(), g.to_vec());
                Self::accum(grads, *a, || {
                    let bt = ops::transpose_last2(b_val).expect("saved matmul operand");
                    ops::matmul(&gt, &bt).expect("matmul backward da").data().to_vec()
                });
                Self::accum(grads, *b, || {
                    let at = ops::transpose_last2(a_val).expect("saved matmul operand");
                    ops::matmul(&at, &gt).expect("matmul backward db").data().to_vec()
                });
            }
            Op::Softmax { x, y } => {
                Self::accum(grads, *x, || {
                    let cols = *y.shape().last().expect("softmax rank >= 1");
                    let mut d = vec![0.0; y.numel()];
                    for (r, (grow, yrow)) in g.chunks(cols).zip(y.data().chunks(cols)).enumerate() {
                        let s: f64 = grow.iter().zip(yrow).map(|(gv, yv)| gv * yv).sum();
                        for c in 0..cols {
                            d[r * cols + c] = yrow[c] * (grow[c] - s);
                        }
                    }
                    d
                });
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std, gamma_val } => {
                let cols = *xhat.shape().last().expect("layernorm rank >= 1");
                Self::accum(grads, *x, || {
                    let mut d = vec![0.0; xhat.numel()];
                    for (r, (grow, hrow)) in
                        g.chunks(cols).zip(xhat.data().chunks(cols)).enumerate()
                    {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for c in 0..cols {
                            let gd = grow[c] * gamma_val.data()[c];
                            m1 += gd;
                            m2 += gd * hrow[c];
                        }
                        m1 /= cols as f64;
                        m2 /= cols as f64;
                        for c in 0..cols {
                            let gd = grow[c] * gamma_val.data()[c];
                            d[r * cols + c] = inv_std[r] * (gd - m1 - hrow[c] * m2);
                        }
                    }
                    d
                });
                Self::accum(grads, *gamma, || {
                    let mut d = vec![0.0; cols];
                    for (grow, hrow) in g.chunks(cols).zip(xhat.data().chunks(cols)) {
                        for c in 0..cols {
                            d[c] += grow[c] * hrow[c];
                        }
                    }
                    d
                });
                Self::accum(grads, *beta, || {
                    let mut d = vec![0.0; cols];
                    for grow in g.chunks(cols) {
                        for (dv, gv) in d.iter_mut().zip(grow) {
                            *dv += gv;
                        }
                    }
                    d
                });
            }
            Op::Gelu { x, x_val } => {
                Self::accum(grads, *x, || {
                    g.iter()
                        .zip(x_val.data())
                        .map(|(gv, &xv)| {
                            gv * (ops::std_normal_cdf(xv) + xv * ops::std_normal_pdf(xv))
                        })
                        .collect()
                });
            }
            Op::TransposeLast2 { x } => {
                let gt = Tensor::from_parts(self.nodes[id].shape.clone(), g.to_vec());
                Self::accum(grads, *x, || {
                    ops::transpose_last2(&gt).expect("transpose backward").data().to_vec()
                });
            }
            Op::Reshape { x, from } => {
                let _ = from;
                Self::accum(grads, *x, || g.to_vec());
            }
            Op::SliceAxis { x, axis, start, from } => {
                Self::accum(grads, *x, || {
                    let (outer, len, inner) = axis_split(from, *axis);
                    let take = self.nodes[id].shape[*axis];
                    let mut d = vec![0.0; outer * len * inner];
                    for o in 0..outer {
                        let dst = (o * len + start) * inner;
                        let src = o * take * inner;
                        d[dst..dst + take * inner].copy_from_slice(&g[src..src + take * inner]);
                    }
                    d
                });
            }
            Op::Concat { parts, axis } => {
                let shape = &self.nodes[id].shape;
                let (outer, total, inner) = axis_split(shape, *axis);
                let _ = total;
                let mut offset = 0;
                for (src, len) in parts {
                    let start = offset;
                    offset += len;
                    Self::accum(grads, *src, || {
                        let mut d = vec![0.0; outer * len * inner];
                        for o in 0..outer {
                            let from = (o * shape[*axis] + start) * inner;
                            let to = o * len * inner;
                            d[to..to + len * inner].copy_from_slice(&g[from..from + len * inner]);
                        }
                        d
                    });
                }
            }
            Op::SumAxis { x, axis, from } => {
                Self::accum(grads, *x, || broadcast_axis(g, from, *axis, 1.0));
            }
            Op::MeanAxis { x, axis, from } => {
                let scale = 1.0 / from[*axis] as f64;
                Self::accum(grads, *x, || broadcast_axis(g, from, *axis, scale));
            }
            Op::Abs { x, x_val } => {
                // Subgradient at 0 is 0.
                Self::accum(grads, *x, || {
                    g.iter()
                        .zip(x_val.data())
                        .map(|(gv, &xv)| {
                            if xv > 0.0 {
                                *gv
                            } else if xv < 0.0 {
                                -*gv
                            } else {
                                0.0
                            }
                        })
                        .collect()
                });
            }
            Op::Square { x, x_val } => {
                Self::accum(grads, *x, || {
                    g.iter().zip(x_val.data()).map(|(gv, xv)| gv * 2.0 * xv).collect()
                });
            }
            Op::SqrtScalar { x, y_val } => {
                Self::accum(grads, *x, || {
                    let d = if *y_val > 0.0 { g[0] * 0.5 / y_val } else { 0.0 };
                    vec![d]
                });
            }
            Op::CrossEntropy { logits, probs, label } => {
                Self::accum(grads, *logits, || {
                    probs
                        .iter()
                        .enumerate()
                        .map(|(i, &p)| g[0] * (p - if i == *label { 1.0 } else { 0.0 }))
                        .collect()
                });
            }
        }
    }
}

/// Expands a reduced gradient back along the removed axis, scaled.
fn broadcast_axis(g: &[f64], from: &[usize], axis: usize, scale: f64) -> Vec<f64> {
    let (outer, len, inner) = axis_split(from, axis);
    let mut d = vec![0.0; outer * len * inner];
    for o in 0..outer {
        for i in 0..len {
            let base = (o * len + i) * inner;
            for n in 0..inner {
                d[base + n] = g[o * inner + n] * scale;
            }
        }
    }
    d
}

/// Gradients produced by [`Tape::backward`], keyed by tape node id.
pub struct GradientStore {
    grads: Vec<Option<Tensor>>,
}

impl GradientStore {
    /// Gradient of the loss with respect to a tracked tensor.
    pub fn get(&self, t: &Tensor) -> Option<&Tensor> {
        t.tape_id().and_then(|id| self.by_id(id))
    }

    pub fn by_id(&self, id: usize) -> Option<&Tensor> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }
}

/// Compares the taped gradient of a scalar function against central finite
/// differences and returns the largest relative error, using
/// `max(|a|, |b|, 1e-8)` as the denominator.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &Tensor) -> Result<Tensor>,
{
    if eps <= 0.0 || eps > 1e-2 {
        return Err(Error::param(format!("grad_check eps must be in (0, 1e-2], got {eps}")));
    }
    let mut tape = Tape::new();
    let xt = tape.leaf(x);
    let y = f(&mut tape, &xt)?;
    if y.numel() != 1 {
        return Err(Error::contract(format!(
            "grad_check: f must return a scalar, got {:?}",
            y.shape()
        )));
    }
    let store = tape.backward(&y)?;
    let zero = Tensor::zeros(x.shape().to_vec());
    let analytic = store.get(&xt).unwrap_or(&zero);

    let mut max_rel = 0.0_f64;
    for i in 0..x.numel() {
        let eval = |v: f64| -> Result<f64> {
            let mut data = x.data().to_vec();
            data[i] = v;
            let probe = Tensor::from_parts(x.shape().to_vec(), data);
            let mut ng = Tape::no_grad();
            Ok(f(&mut ng, &probe)?.item())
        };
        let fd = (eval(x.data()[i] + eps)? - eval(x.data()[i] - eps)?) / (2.0 * eps);
        let a = analytic.data()[i];
        let rel = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-8);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn sum_all(tape: &mut Tape, x: &Tensor) -> Result<Tensor> {
        let flat = tape.reshape(x, vec![x.numel()])?;
        tape.sum_axis(&flat, 0)
    }

    #[test]
    fn backward_of_sum_of_squares() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[3], &[1.0, 2.0, 3.0]));
        let sq = tape.square(&x);
        let loss = tape.sum_axis(&sq, 0).unwrap();
        let store = tape.backward(&loss).unwrap();
        assert_eq!(store.get(&x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_accumulates_reused_nodes() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2], &[1.0, -4.0]));
        let doubled = tape.add(&x, &x).unwrap();
        let loss = tape.sum_axis(&doubled, 0).unwrap();
        let store = tape.backward(&loss).unwrap();
        assert_eq!(store.get(&x).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2], &[1.0, 2.0]));
        let y = tape.square(&x);
        assert!(matches!(tape.backward(&y), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_of_matmul_sum_matches_column_sums() {
        // loss = sum(x @ W) => d loss / d x[i, k] = sum_j W[k, j].
        let w = t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let x0 = t(&[2, 3], &[0.5, -1.0, 2.0, 0.0, 1.0, -2.0]);
        let mut tape = Tape::new();
        let x = tape.leaf(&x0);
        let y = tape.matmul(&x, &w).unwrap();
        let loss = sum_all(&mut tape, &y).unwrap();
        let store = tape.backward(&loss).unwrap();
        let gx = store.get(&x).unwrap();
        for i in 0..2 {
            for k in 0..3 {
                let expected: f64 = (0..2).map(|j| w.at(&[k, j])).sum();
                assert!((gx.at(&[i, k]) - expected).abs() < 1e-12);
            }
        }
        // Same thing via finite differences.
        let err = grad_check(
            |tp, xv| {
                let y = tp.matmul(xv, &w)?;
                let flat = tp.reshape(&y, vec![y.numel()])?;
                tp.sum_axis(&flat, 0)
            },
            &x0,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "matmul fd error {err}");
    }

    #[test]
    fn grad_check_linear_is_exact() {
        let err = grad_check(
            |tp, x| {
                let y = tp.mul_scalar(x, 3.0);
                let flat = tp.reshape(&y, vec![y.numel()])?;
                tp.sum_axis(&flat, 0)
            },
            &t(&[4], &[0.3, -1.2, 0.9, 2.0]),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn grad_of_softmax_sum_is_zero() {
        // Rows of softmax sum to 1, so the gradient of their sum vanishes.
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[3], &[0.2, -0.4, 1.0]));
        let s = tape.softmax_lastdim(&x).unwrap();
        let loss = tape.sum_axis(&s, 0).unwrap();
        let store = tape.backward(&loss).unwrap();
        for &v in store.get(&x).unwrap().data() {
            assert!(v.abs() < 1e-14);
        }
    }

    #[test]
    fn softmax_weighted_sum_matches_finite_differences() {
        let c = t(&[4], &[0.7, -1.3, 0.4, 2.2]);
        let x0 = t(&[4], &[0.1, 0.5, -0.2, 0.8]);
        let err = grad_check(
            |tp, x| {
                let s = tp.softmax_lastdim(x)?;
                let weighted = tp.mul(&s, &c)?;
                tp.sum_axis(&weighted, 0)
            },
            &x0,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "softmax fd error {err}");
    }

    #[test]
    fn layernorm_matches_finite_differences() {
        let gamma = t(&[4], &[1.2, 0.8, -0.5, 1.0]);
        let beta = t(&[4], &[0.1, -0.2, 0.3, 0.0]);
        let c = t(&[8], &[0.7, -1.3, 0.4, 2.2, -0.6, 0.9, 1.4, -0.3]);
        let x0 = t(&[2, 4], &[0.1, 0.5, -0.2, 0.8, 1.4, -0.9, 0.3, 0.2]);
        let err = grad_check(
            |tp, x| {
                let y = tp.layernorm(x, &gamma, &beta, 1e-6)?;
                let flat = tp.reshape(&y, vec![8])?;
                let weighted = tp.mul(&flat, &c)?;
                tp.sum_axis(&weighted, 0)
            },
            &x0,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "layernorm fd error {err}");
    }

    #[test]
    fn cross_entropy_matches_finite_differences() {
        let x0 = t(&[4], &[0.3, -0.8, 1.2, 0.1]);
        let err = grad_check(|tp, x| tp.cross_entropy(x, 2), &x0, 1e-5).unwrap();
        assert!(err < 1e-6, "cross entropy fd error {err}");
    }

    #[test]
    fn grad_check_every_taped_op_on_random_inputs() {
        // 100 seeded trials across the op set; inputs drawn from [-2, 2].
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let coeff = t(&[6], &[0.9, -0.4, 1.3, 0.2, -1.1, 0.6]);
        let gamma = t(&[3], &[1.1, 0.9, 1.3]);
        let beta = t(&[3], &[0.0, 0.2, -0.1]);
        for trial in 0..100 {
            let data: Vec<f64> = (0..6).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect();
            let x0 = t(&[2, 3], &data);
            let cases: Vec<(&str, Box<dyn Fn(&mut Tape, &Tensor) -> Result<Tensor>>, f64)> = vec![
                (
                    "gelu",
                    Box::new(|tp: &mut Tape, x: &Tensor| {
                        let y = tp.gelu(x);
                        let flat = tp.reshape(&y, vec![6])?;
                        let w = tp.mul(&flat, &coeff)?;
                        tp.sum_axis(&w, 0)
                    }),
                    1e-5,
                ),
                (
                    "square_abs",
                    Box::new(|tp: &mut Tape, x: &Tensor| {
                        let sq = tp.square(x);
                        let ab = tp.abs(&sq);
                        let flat = tp.reshape(&ab, vec![6])?;
                        tp.sum_axis(&flat, 0)
                    }),
                    1e-5,
                ),
                (
                    "softmax_composition",
                    Box::new(|tp: &mut Tape, x: &Tensor| {
                        let s = tp.softmax_lastdim(x)?;
                        let flat = tp.reshape(&s, vec![6])?;
                        let w = tp.mul(&flat, &coeff)?;
                        tp.sum_axis(&w, 0)
                    }),
                    1e-4,
                ),
                (
                    "layernorm_composition",
                    Box::new(|tp: &mut Tape, x: &Tensor| {
                        let y = tp.layernorm(x, &gamma, &beta, 1e-6)?;
                        let flat = tp.reshape(&y, vec![6])?;
                        let w = tp.mul(&flat, &coeff)?;
                        tp.sum_axis(&w, 0)
                    }),
                    1e-4,
                ),
                (
                    "mixed_shape_ops",
                    Box::new(|tp: &mut Tape, x: &Tensor| {
                        let tr = tp.transpose_last2(x)?;
                        let left = tp.slice_axis(&tr, 0, 0, 2)?;
                        let right = tp.slice_axis(&tr, 0, 2, 3)?;
                        let joined = tp.concat(&[&left, &right], 0)?;
                        let m = tp.mean_axis(&joined, 1)?;
                        let scaled = tp.mul_scalar(&m, 2.5);
                        tp.sum_axis(&scaled, 0)
                    }),
                    1e-5,
                ),
            ];
            for (name, f, tol) in cases {
                let err = grad_check(f.as_ref(), &x0, 1e-5).unwrap();
                assert!(err < tol, "trial {trial}: {name} fd error {err} >= {tol}");
            }
        }
    }

    #[test]
    fn backward_is_deterministic() {
        let run = || {
            let mut tape = Tape::new();
            let x = tape.leaf(&t(&[2, 3], &[0.3, 1.4, -0.7, 0.9, -1.8, 0.2]));
            let s = tape.softmax_lastdim(&x).unwrap();
            let g = tape.gelu(&s);
            let loss = sum_all(&mut tape, &g).unwrap();
            let store = tape.backward(&loss).unwrap();
            store.get(&x).unwrap().data().to_vec()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
        assert!(a.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn no_grad_tape_records_nothing() {
        let mut tape = Tape::no_grad();
        let x = tape.leaf(&t(&[2], &[1.0, 2.0]));
        assert!(x.tape_id().is_none());
        let y = tape.square(&x);
        assert!(y.tape_id().is_none());
        assert!(tape.is_empty());
    }

    #[test]
    fn constants_receive_no_gradient_but_flow_through() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2, 2], &[1.0, 0.5, -0.5, 2.0]));
        let w = t(&[2, 2], &[0.3, -0.1, 0.8, 0.4]); // constant, not a leaf
        let y = tape.matmul(&x, &w).unwrap();
        let loss = sum_all(&mut tape, &y).unwrap();
        let store = tape.backward(&loss).unwrap();
        assert!(store.get(&x).is_some());
        assert!(store.get(&w).is_none());
    }

    #[test]
    fn abs_backward_uses_sign_with_zero_at_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[3], &[-2.0, 0.0, 3.0]));
        let a = tape.abs(&x);
        let loss = tape.sum_axis(&a, 0).unwrap();
        let store = tape.backward(&loss).unwrap();
        assert_eq!(store.get(&x).unwrap().data(), &[-1.0, 0.0, 1.0]);
    }

    #[test]
    fn grad_check_validates_eps() {
        let x = t(&[1], &[1.0]);
        let f = |tp: &mut Tape, x: &Tensor| -> Result<Tensor> { Ok(tp.square(x)) };
        assert!(matches!(grad_check(f, &x, 0.0), Err(Error::Parameter(_))));
        assert!(matches!(grad_check(f, &x, 0.5), Err(Error::Parameter(_))));
    }

    #[test]
    fn finite_outputs_across_op_suite() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..100 {
            let data: Vec<f64> = (0..9).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect();
            let x = t(&[3, 3], &data);
            let mut tape = Tape::new();
            let xl = tape.leaf(&x);
            let s = tape.softmax_lastdim(&xl).unwrap();
            let m = tape.matmul(&s, &xl).unwrap();
            let g = tape.gelu(&m);
            let loss = sum_all(&mut tape, &g).unwrap();
            assert!(loss.is_finite());
            let store = tape.backward(&loss).unwrap();
            assert!(store.get(&xl).unwrap().is_finite());
        }
    }
}
