//! Reverse-mode autodiff over a linear operation tape.
//!
//! Ops append nodes in topological order; [`Tape::backward`] walks the tape
//! once in reverse. All forward results are checked for finiteness — a
//! NaN/Inf anywhere is reported as an error rather than propagated.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// `trans_a`/`trans_b` transpose the 2-d operand before multiplying.
    MatMul { a: Var, b: Var, trans_a: bool, trans_b: bool },
    /// Batched matmul: `[n, m, k] x [n, k, p] -> [n, m, p]`.
    Bmm { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Concat { inputs: Vec<Var>, axis: usize },
    SliceRow { a: Var, row: usize },
    Sigmoid { a: Var },
    Tanh { a: Var },
    /// Softmax over the last axis, computed with max-subtraction.
    Softmax { a: Var },
    /// L2 norm over the last axis with a small epsilon inside the sqrt, so
    /// the gradient at a zero vector is defined (and zero).
    L2Norm { a: Var },
    /// Multiply a tensor by a scalar (shape `[1]`) tensor.
    ScalarScale { scalar: Var, x: Var },
    /// Elementwise multiply by a fixed (non-differentiable) mask.
    DropoutMask { a: Var, mask: Vec<f64> },
    Reshape { a: Var },
    Transpose { a: Var },
    SumAxis { a: Var, axis: usize },
    SumAll { a: Var },
    /// Tile along a new leading axis: `S -> [n] + S`.
    RepeatFirst { a: Var, n: usize },
    /// Tile along a new trailing axis: `S -> S + [n]`.
    RepeatLast { a: Var, n: usize },
    /// Swap the last two axes of a 3-d tensor.
    SwapLast2 { a: Var },
    /// Binary cross-entropy of a probability vector against one true index,
    /// with probabilities clamped to `[eps, 1-eps]` inside the logs.
    BceLoss { probs: Var, true_item: usize, eps: f64 },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Linear autodiff tape. One tape per forward/backward pass.
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

const L2_NORM_EPS: f64 = 1e-12;

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register an input tensor. Only leaves with `requires_grad` (and nodes
    /// computed from them) receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        Ok(self.push(value, requires_grad, Op::Leaf))
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn zeros(&mut self, shape: &[usize]) -> Var {
        self.push(Tensor::zeros(shape), false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value.data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` call with respect to `v`, if any.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node { value, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, op_name: &'static str, value: Tensor, requires_grad: bool, op: Op) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        Ok(self.push(value, requires_grad, op))
    }

    // ── forward ops ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// Matrix product with optional transposes. 1-d operands are treated as
    /// a row (lhs) or column (rhs) and the unit axis is dropped from the
    /// result; transpose flags require 2-d operands.
    pub fn matmul_t(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let dims = resolve_matmul(&sa, &sb, trans_a, trans_b).ok_or_else(|| Error::ShapeMismatch {
            op: "matmul",
            details: format!("{sa:?} (trans={trans_a}) x {sb:?} (trans={trans_b})"),
        })?;
        let MatDims { m, k, n, out_shape } = dims;
        let mut out = vec![0.0; m * n];
        matmul_acc(&mut out, self.data(a), trans_a, m, k, self.data(b), trans_b, n);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push_op("matmul", Tensor { shape: out_shape, data: out }, rg, Op::MatMul { a, b, trans_a, trans_b })
    }

    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ok = sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0] && sa[2] == sb[1];
        if !ok {
            return Err(Error::ShapeMismatch { op: "bmm", details: format!("{sa:?} x {sb:?}") });
        }
        let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; batch * m * n];
        for t in 0..batch {
            matmul_acc(
                &mut out[t * m * n..(t + 1) * m * n],
                &self.data(a)[t * m * k..(t + 1) * m * k],
                false,
                m,
                k,
                &self.data(b)[t * k * n..(t + 1) * k * n],
                false,
                n,
            );
        }
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push_op("bmm", Tensor { shape: vec![batch, m, n], data: out }, rg, Op::Bmm { a, b })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.elementwise_pair("add", a, b, |x, y| x + y)?;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push_op("add", value, rg, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.elementwise_pair("sub", a, b, |x, y| x - y)?;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push_op("sub", value, rg, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.elementwise_pair("mul", a, b, |x, y| x * y)?;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push_op("mul", value, rg, Op::Mul { a, b })
    }

    fn elementwise_pair(&self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op,
                details: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(Tensor { shape: self.shape(a).to_vec(), data })
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::ShapeMismatch { op: "concat", details: "no inputs".into() });
        }
        let rank = self.shape(inputs[0]).len();
        if axis >= rank || rank > 2 {
            return Err(Error::ShapeMismatch {
                op: "concat",
                details: format!("axis {axis} on rank-{rank} tensors"),
            });
        }
        let base = self.shape(inputs[0]).to_vec();
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == rank
                && s.iter().enumerate().all(|(i, &e)| i == axis || e == base[i]);
            if !compatible {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    details: format!("{s:?} vs {base:?} along axis {axis}"),
                });
            }
        }
        let total_axis: usize = inputs.iter().map(|&v| self.shape(v)[axis]).sum();
        let mut shape = base;
        shape[axis] = total_axis;

        let data = if rank == 1 || axis == 0 {
            let mut data = Vec::with_capacity(shape.iter().product());
            for &v in inputs {
                data.extend_from_slice(self.data(v));
            }
            data
        } else {
            // rank 2, axis 1: interleave rows
            let rows = shape[0];
            let mut data = Vec::with_capacity(rows * total_axis);
            for r in 0..rows {
                for &v in inputs {
                    data.extend_from_slice(self.value(v).row(r));
                }
            }
            data
        };
        let rg = inputs.iter().any(|&v| self.requires_grad(v));
        self.push_op("concat", Tensor { shape, data }, rg, Op::Concat { inputs: inputs.to_vec(), axis })
    }

    pub fn slice_row(&mut self, a: Var, row: usize) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 || row >= s[0] {
            return Err(Error::ShapeMismatch {
                op: "slice_row",
                details: format!("row {row} of {s:?}"),
            });
        }
        let value = Tensor::from_vec(self.value(a).row(row).to_vec());
        let rg = self.requires_grad(a);
        self.push_op("slice_row", value, rg, Op::SliceRow { a, row })
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let data = self.data(a).iter().map(|&x| stable_sigmoid(x)).collect();
        let value = Tensor { shape: self.shape(a).to_vec(), data };
        let rg = self.requires_grad(a);
        self.push_op("sigmoid", value, rg, Op::Sigmoid { a })
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let data = self.data(a).iter().map(|&x| x.tanh()).collect();
        let value = Tensor { shape: self.shape(a).to_vec(), data };
        let rg = self.requires_grad(a);
        self.push_op("tanh", value, rg, Op::Tanh { a })
    }

    /// Softmax over the last axis (rows of a 2-d tensor, or a whole 1-d one).
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let last = *shape.last().ok_or(Error::ShapeMismatch { op: "softmax", details: "rank-0".into() })?;
        let mut data = self.data(a).to_vec();
        for row in data.chunks_mut(last) {
            softmax_in_place(row);
        }
        let rg = self.requires_grad(a);
        self.push_op("softmax", Tensor { shape, data }, rg, Op::Softmax { a })
    }

    /// L2 norm over the last axis. `[r, c] -> [r]`, `[c] -> [1]`.
    pub fn l2_norm(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let last = *shape.last().ok_or(Error::ShapeMismatch { op: "l2_norm", details: "rank-0".into() })?;
        let out_shape: Vec<usize> = if shape.len() == 1 { vec![1] } else { shape[..shape.len() - 1].to_vec() };
        let data: Vec<f64> = self
            .data(a)
            .chunks(last)
            .map(|row| (row.iter().map(|x| x * x).sum::<f64>() + L2_NORM_EPS).sqrt())
            .collect();
        let rg = self.requires_grad(a);
        self.push_op("l2_norm", Tensor { shape: out_shape, data }, rg, Op::L2Norm { a })
    }

    pub fn scalar_scale(&mut self, scalar: Var, x: Var) -> Result<Var> {
        if self.value(scalar).numel() != 1 {
            return Err(Error::ShapeMismatch {
                op: "scalar_scale",
                details: format!("scalar operand has shape {:?}", self.shape(scalar)),
            });
        }
        let s = self.data(scalar)[0];
        let data = self.data(x).iter().map(|&v| s * v).collect();
        let value = Tensor { shape: self.shape(x).to_vec(), data };
        let rg = self.requires_grad(scalar) || self.requires_grad(x);
        self.push_op("scalar_scale", value, rg, Op::ScalarScale { scalar, x })
    }

    /// Apply a precomputed dropout mask (entries `0` or `1/(1-p)`).
    pub fn dropout_mask(&mut self, a: Var, mask: Vec<f64>) -> Result<Var> {
        if mask.len() != self.value(a).numel() {
            return Err(Error::ShapeMismatch {
                op: "dropout_mask",
                details: format!("mask length {} vs {:?}", mask.len(), self.shape(a)),
            });
        }
        let data = self.data(a).iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let value = Tensor { shape: self.shape(a).to_vec(), data };
        let rg = self.requires_grad(a);
        self.push_op("dropout_mask", value, rg, Op::DropoutMask { a, mask })
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(a).numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                details: format!("{:?} -> {:?}", self.shape(a), shape),
            });
        }
        let value = Tensor { shape: shape.to_vec(), data: self.data(a).to_vec() };
        let rg = self.requires_grad(a);
        self.push_op("reshape", value, rg, Op::Reshape { a })
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(Error::ShapeMismatch { op: "transpose", details: format!("{s:?}") });
        }
        let (rows, cols) = (s[0], s[1]);
        let src = self.data(a);
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                data[c * rows + r] = src[r * cols + c];
            }
        }
        let rg = self.requires_grad(a);
        self.push_op("transpose", Tensor { shape: vec![cols, rows], data }, rg, Op::Transpose { a })
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || shape.len() < 2 {
            return Err(Error::ShapeMismatch {
                op: "sum_axis",
                details: format!("axis {axis} of {shape:?}"),
            });
        }
        let (outer, mid, inner) = axis_strides(&shape, axis);
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let src = self.data(a);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for m in 0..mid {
                let base = (o * mid + m) * inner;
                for i in 0..inner {
                    data[o * inner + i] += src[base + i];
                }
            }
        }
        let rg = self.requires_grad(a);
        self.push_op("sum_axis", Tensor { shape: out_shape, data }, rg, Op::SumAxis { a, axis })
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let total: f64 = self.data(a).iter().sum();
        let rg = self.requires_grad(a);
        self.push_op("sum_all", Tensor::scalar(total), rg, Op::SumAll { a })
    }

    pub fn repeat_first(&mut self, a: Var, n: usize) -> Result<Var> {
        if n == 0 {
            return Err(Error::ShapeMismatch { op: "repeat_first", details: "n = 0".into() });
        }
        let src = self.data(a);
        let mut data = Vec::with_capacity(src.len() * n);
        for _ in 0..n {
            data.extend_from_slice(src);
        }
        let mut shape = vec![n];
        shape.extend_from_slice(self.shape(a));
        let rg = self.requires_grad(a);
        self.push_op("repeat_first", Tensor { shape, data }, rg, Op::RepeatFirst { a, n })
    }

    pub fn repeat_last(&mut self, a: Var, n: usize) -> Result<Var> {
        if n == 0 {
            return Err(Error::ShapeMismatch { op: "repeat_last", details: "n = 0".into() });
        }
        let src = self.data(a);
        let mut data = Vec::with_capacity(src.len() * n);
        for &x in src {
            for _ in 0..n {
                data.push(x);
            }
        }
        let mut shape = self.shape(a).to_vec();
        shape.push(n);
        let rg = self.requires_grad(a);
        self.push_op("repeat_last", Tensor { shape, data }, rg, Op::RepeatLast { a, n })
    }

    pub fn swap_last2(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 {
            return Err(Error::ShapeMismatch { op: "swap_last2", details: format!("{s:?}") });
        }
        let (n0, n1, n2) = (s[0], s[1], s[2]);
        let src = self.data(a);
        let mut data = vec![0.0; src.len()];
        for i in 0..n0 {
            for j in 0..n1 {
                for k in 0..n2 {
                    data[(i * n2 + k) * n1 + j] = src[(i * n1 + j) * n2 + k];
                }
            }
        }
        let rg = self.requires_grad(a);
        self.push_op("swap_last2", Tensor { shape: vec![n0, n2, n1], data }, rg, Op::SwapLast2 { a })
    }

    /// Binary cross-entropy of a probability vector against a single true
    /// item: `-(ln p_t + sum_{i != t} ln(1 - p_i))`, probabilities clamped
    /// to `[eps, 1-eps]`.
    pub fn bce_loss(&mut self, probs: Var, true_item: usize, eps: f64) -> Result<Var> {
        let s = self.shape(probs);
        if s.len() != 1 || true_item >= s[0] {
            return Err(Error::ShapeMismatch {
                op: "bce_loss",
                details: format!("true item {true_item} for probabilities of shape {s:?}"),
            });
        }
        let mut loss = 0.0;
        for (i, &p) in self.data(probs).iter().enumerate() {
            let p = p.clamp(eps, 1.0 - eps);
            loss -= if i == true_item { p.ln() } else { (1.0 - p).ln() };
        }
        let rg = self.requires_grad(probs);
        self.push_op("bce_loss", Tensor::scalar(loss), rg, Op::BceLoss { probs, true_item, eps })
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Populate gradients of every `requires_grad` node reachable from the
    /// scalar `loss`. Each tape node is visited exactly once.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        if !self.requires_grad(loss) {
            return Err(Error::DetachedLoss);
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        for g in grads.iter().flatten() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { op: "backward" });
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let op = self.nodes[idx].op.clone();
        match op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_a, trans_b } => {
                let dims = resolve_matmul(self.shape(a), self.shape(b), trans_a, trans_b).unwrap();
                let MatDims { m, k, n, .. } = dims;
                if self.requires_grad(a) {
                    let ga = self.grad_buf(grads, a);
                    if trans_a {
                        matmul_acc(ga, self.data(b), trans_b, k, n, g, true, m);
                    } else {
                        matmul_acc(ga, g, false, m, n, self.data(b), !trans_b, k);
                    }
                }
                if self.requires_grad(b) {
                    let gb = self.grad_buf(grads, b);
                    if trans_b {
                        matmul_acc(gb, g, true, n, m, self.data(a), trans_a, k);
                    } else {
                        matmul_acc(gb, self.data(a), !trans_a, k, m, g, false, n);
                    }
                }
            }
            Op::Bmm { a, b } => {
                let sa = self.shape(a).to_vec();
                let sb = self.shape(b).to_vec();
                let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                if self.requires_grad(a) {
                    let ga = self.grad_buf(grads, a);
                    for t in 0..batch {
                        matmul_acc(
                            &mut ga[t * m * k..(t + 1) * m * k],
                            &g[t * m * n..(t + 1) * m * n],
                            false,
                            m,
                            n,
                            &self.data(b)[t * k * n..(t + 1) * k * n],
                            true,
                            k,
                        );
                    }
                }
                if self.requires_grad(b) {
                    let gb = self.grad_buf(grads, b);
                    for t in 0..batch {
                        matmul_acc(
                            &mut gb[t * k * n..(t + 1) * k * n],
                            &self.data(a)[t * m * k..(t + 1) * m * k],
                            true,
                            k,
                            m,
                            &g[t * m * n..(t + 1) * m * n],
                            false,
                            n,
                        );
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [a, b] {
                    if self.requires_grad(v) {
                        let gv = self.grad_buf(grads, v);
                        for (o, &x) in gv.iter_mut().zip(g) {
                            *o += x;
                        }
                    }
                }
            }
            Op::Sub { a, b } => {
                if self.requires_grad(a) {
                    let ga = self.grad_buf(grads, a);
                    for (o, &x) in ga.iter_mut().zip(g) {
                        *o += x;
                    }
                }
                if self.requires_grad(b) {
                    let gb = self.grad_buf(grads, b);
                    for (o, &x) in gb.iter_mut().zip(g) {
                        *o -= x;
                    }
                }
            }
            Op::Mul { a, b } => {
                if self.requires_grad(a) {
                    let bd = self.data(b);
                    let ga = self.grad_buf(grads, a);
                    for i in 0..g.len() {
                        ga[i] += g[i] * bd[i];
                    }
                }
                if self.requires_grad(b) {
                    let ad = self.data(a);
                    let gb = self.grad_buf(grads, b);
                    for i in 0..g.len() {
                        gb[i] += g[i] * ad[i];
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let rank = self.shape(inputs[0]).len();
                if rank == 1 || axis == 0 {
                    let mut offset = 0;
                    for v in inputs {
                        let len = self.value(v).numel();
                        if self.requires_grad(v) {
                            let gv = self.grad_buf(grads, v);
                            for i in 0..len {
                                gv[i] += g[offset + i];
                            }
                        }
                        offset += len;
                    }
                } else {
                    let rows = self.shape(inputs[0])[0];
                    let widths: Vec<usize> = inputs.iter().map(|&v| self.shape(v)[1]).collect();
                    let total: usize = widths.iter().sum();
                    for r in 0..rows {
                        let mut offset = 0;
                        for (vi, &v) in inputs.iter().enumerate() {
                            let w = widths[vi];
                            if self.requires_grad(v) {
                                let gv = self.grad_buf(grads, v);
                                for c in 0..w {
                                    gv[r * w + c] += g[r * total + offset + c];
                                }
                            }
                            offset += w;
                        }
                    }
                }
            }
            Op::SliceRow { a, row } => {
                if self.requires_grad(a) {
                    let cols = self.shape(a)[1];
                    let ga = self.grad_buf(grads, a);
                    for (c, &x) in g.iter().enumerate() {
                        ga[row * cols + c] += x;
                    }
                }
            }
            Op::Sigmoid { a } => {
                if self.requires_grad(a) {
                    let out = &self.nodes[idx].value.data;
                    let ga = self.grad_buf(grads, a);
                    for i in 0..g.len() {
                        ga[i] += g[i] * out[i] * (1.0 - out[i]);
                    }
                }
            }
            Op::Tanh { a } => {
                if self.requires_grad(a) {
                    let out = &self.nodes[idx].value.data;
                    let ga = self.grad_buf(grads, a);
                    for i in 0..g.len() {
                        ga[i] += g[i] * (1.0 - out[i] * out[i]);
                    }
                }
            }
            Op::Softmax { a } => {
                if self.requires_grad(a) {
                    let out = &self.nodes[idx].value.data;
                    let last = *self.nodes[idx].value.shape.last().unwrap();
                    let ga = self.grad_buf(grads, a);
                    for r in 0..out.len() / last {
                        let s = &out[r * last..(r + 1) * last];
                        let gr = &g[r * last..(r + 1) * last];
                        let dot: f64 = s.iter().zip(gr).map(|(&si, &gi)| si * gi).sum();
                        for i in 0..last {
                            ga[r * last + i] += s[i] * (gr[i] - dot);
                        }
                    }
                }
            }
            Op::L2Norm { a } => {
                if self.requires_grad(a) {
                    let out = &self.nodes[idx].value.data;
                    let src = self.data(a);
                    let last = *self.shape(a).last().unwrap();
                    let ga = self.grad_buf(grads, a);
                    for r in 0..out.len() {
                        for j in 0..last {
                            ga[r * last + j] += g[r] * src[r * last + j] / out[r];
                        }
                    }
                }
            }
            Op::ScalarScale { scalar, x } => {
                let s = self.data(scalar)[0];
                if self.requires_grad(scalar) {
                    let xd = self.data(x);
                    let total: f64 = g.iter().zip(xd).map(|(&gi, &xi)| gi * xi).sum();
                    self.grad_buf(grads, scalar)[0] += total;
                }
                if self.requires_grad(x) {
                    let gx = self.grad_buf(grads, x);
                    for i in 0..g.len() {
                        gx[i] += g[i] * s;
                    }
                }
            }
            Op::DropoutMask { a, mask } => {
                if self.requires_grad(a) {
                    let ga = self.grad_buf(grads, a);
                    for i in 0..g.len() {
                        ga[i] += g[i] * mask[i];
                    }
                }
            }
            Op::Reshape { a } => {
                if self.requires_grad(a) {
                    let ga = self.grad_buf(grads, a);
                    for i in 0..g.len() {
                        ga[i] += g[i];
                    }
                }
            }
            Op::Transpose { a } => {
                if self.requires_grad(a) {
                    let (rows, cols) = (self.shape(a)[0], self.shape(a)[1]);
                    let ga = self.grad_buf(grads, a);
                    for r in 0..rows {
                        for c in 0..cols {
                            ga[r * cols + c] += g[c * rows + r];
                        }
                    }
                }
            }
            Op::SumAxis { a, axis } => {
                if self.requires_grad(a) {
                    let (outer, mid, inner) = axis_strides(self.shape(a), axis);
                    let ga = self.grad_buf(grads, a);
                    for o in 0..outer {
                        for m in 0..mid {
                            let base = (o * mid + m) * inner;
                            for i in 0..inner {
                                ga[base + i] += g[o * inner + i];
                            }
                        }
                    }
                }
            }
            Op::SumAll { a } => {
                if self.requires_grad(a) {
                    let ga = self.grad_buf(grads, a);
                    for v in ga.iter_mut() {
                        *v += g[0];
                    }
                }
            }
            Op::RepeatFirst { a, n } => {
                if self.requires_grad(a) {
                    let len = self.value(a).numel();
                    let ga = self.grad_buf(grads, a);
                    for t in 0..n {
                        for i in 0..len {
                            ga[i] += g[t * len + i];
                        }
                    }
                }
            }
            Op::RepeatLast { a, n } => {
                if self.requires_grad(a) {
                    let len = self.value(a).numel();
                    let ga = self.grad_buf(grads, a);
                    for i in 0..len {
                        for t in 0..n {
                            ga[i] += g[i * n + t];
                        }
                    }
                }
            }
            Op::SwapLast2 { a } => {
                if self.requires_grad(a) {
                    let s = self.shape(a);
                    let (n0, n1, n2) = (s[0], s[1], s[2]);
                    let ga = self.grad_buf(grads, a);
                    for i in 0..n0 {
                        for j in 0..n1 {
                            for k in 0..n2 {
                                ga[(i * n1 + j) * n2 + k] += g[(i * n2 + k) * n1 + j];
                            }
                        }
                    }
                }
            }
            Op::BceLoss { probs, true_item, eps } => {
                if self.requires_grad(probs) {
                    let pd = self.data(probs);
                    let gp = self.grad_buf(grads, probs);
                    for (i, &p) in pd.iter().enumerate() {
                        let p = p.clamp(eps, 1.0 - eps);
                        if i == true_item {
                            gp[i] -= g[0] / p;
                        } else {
                            gp[i] += g[0] / (1.0 - p);
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Borrow (allocating on first touch) the gradient buffer for `v`.
    fn grad_buf<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> &'g mut Vec<f64> {
        let numel = self.value(v).numel();
        grads[v.0].get_or_insert_with(|| vec![0.0; numel])
    }
}

struct MatDims {
    m: usize,
    k: usize,
    n: usize,
    out_shape: Vec<usize>,
}

fn resolve_matmul(sa: &[usize], sb: &[usize], trans_a: bool, trans_b: bool) -> Option<MatDims> {
    let (m, ka, a_vec) = match sa {
        [k] if !trans_a => (1, *k, true),
        [r, c] => {
            if trans_a {
                (*c, *r, false)
            } else {
                (*r, *c, false)
            }
        }
        _ => return None,
    };
    let (kb, n, b_vec) = match sb {
        [k] if !trans_b => (*k, 1, true),
        [r, c] => {
            if trans_b {
                (*c, *r, false)
            } else {
                (*r, *c, false)
            }
        }
        _ => return None,
    };
    if ka != kb {
        return None;
    }
    let out_shape = match (a_vec, b_vec) {
        (true, true) => vec![1],
        (true, false) => vec![n],
        (false, true) => vec![m],
        (false, false) => vec![m, n],
    };
    Some(MatDims { m, k: ka, n, out_shape })
}

/// `out[m x n] += A'[m x k] * B'[k x n]`, where the primes read the raw
/// buffers transposed when the corresponding flag is set.
#[allow(clippy::too_many_arguments)]
fn matmul_acc(out: &mut [f64], a: &[f64], ta: bool, m: usize, k: usize, b: &[f64], tb: bool, n: usize) {
    for i in 0..m {
        for l in 0..k {
            let av = if ta { a[l * m + i] } else { a[i * k + l] };
            if av == 0.0 {
                continue;
            }
            let row = i * n;
            if tb {
                for j in 0..n {
                    out[row + j] += av * b[j * k + l];
                }
            } else {
                let brow = l * n;
                for j in 0..n {
                    out[row + j] += av * b[brow + j];
                }
            }
        }
    }
}

fn axis_strides(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let mid = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, mid, inner)
}

pub(crate) fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}
