//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every primitive appends one node holding its output value and the
//! indices of its inputs, so the recording is topologically ordered by
//! construction. [`Tape::backward`] walks the nodes in exact reverse order
//! and returns a fresh [`Gradients`] table; the tape itself is never
//! mutated by backward, so repeated calls produce identical results.
//!
//! Broadcasting is limited to leading-axis expansion: in a binary op the
//! smaller operand's shape must be a suffix of the larger one's (a scalar
//! has the empty shape and broadcasts everywhere). Any other mismatch is
//! an error.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc, transpose, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Softmax(Var),
    LayerNorm { x: Var, eps: f64 },
    Ln(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Transpose(Var),
    Reshape(Var),
    ReduceMax { x: Var, argmax: Vec<usize> },
    Sum(Var),
    Mean(Var),
    Rows { x: Var, start: usize },
    BroadcastRows(Var),
    Mse(Var, Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of primitive operations.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradient table produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the root w.r.t. `v`, or `None` when `v` does not
    /// influence the root through differentiable nodes.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Which operand of a broadcasting binary op is expanded.
#[derive(Clone, Copy)]
enum Broadcast {
    Same,
    /// rhs repeats over the leading axes of lhs.
    Rhs,
    /// lhs repeats over the leading axes of rhs.
    Lhs,
}

fn broadcast_kind(op: &'static str, a: &[usize], b: &[usize]) -> Result<Broadcast> {
    if a == b {
        Ok(Broadcast::Same)
    } else if a.len() > b.len() && a.ends_with(b) {
        Ok(Broadcast::Rhs)
    } else if b.len() > a.len() && b.ends_with(a) {
        Ok(Broadcast::Lhs)
    } else {
        Err(Error::shape(op, a, b))
    }
}

/// Sums `g` (shaped like the large operand) down to `small_len` by folding
/// the repeated leading blocks.
fn reduce_leading(g: &[f64], small_len: usize) -> Vec<f64> {
    let mut out = vec![0.0; small_len];
    if small_len == 0 {
        return out;
    }
    for chunk in g.chunks(small_len) {
        for (o, v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    out
}

const SQRT_2: f64 = core::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / SQRT_2));
    let pdf = INV_SQRT_2PI * libm::exp(-0.5 * x * x);
    cdf + x * pdf
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Differentiable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = av.dims2("matmul")?;
        let (k2, n) = bv.dims2("matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", av.shape(), bv.shape()));
        }
        let mut out = vec![0.0; m * n];
        gemm_acc(av.data(), bv.data(), &mut out, m, k, n);
        let needs = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), needs))
    }

    fn binary(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let kind = broadcast_kind(op_name, av.shape(), bv.shape())?;
        let (shape, data) = match kind {
            Broadcast::Same => (
                av.shape().to_vec(),
                av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect(),
            ),
            Broadcast::Rhs => {
                let small = bv.data();
                (
                    av.shape().to_vec(),
                    av.data()
                        .iter()
                        .enumerate()
                        .map(|(i, &x)| f(x, small[i % small.len()]))
                        .collect(),
                )
            }
            Broadcast::Lhs => {
                let small = av.data();
                (
                    bv.shape().to_vec(),
                    bv.data()
                        .iter()
                        .enumerate()
                        .map(|(i, &y)| f(small[i % small.len()], y))
                        .collect(),
                )
            }
        };
        let needs = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(&shape, data)?, op, needs))
    }

    /// Elementwise sum with leading-axis broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product with leading-axis broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|v| v * c);
        let needs = self.any_grad(&[a]);
        self.push(value, Op::Scale(a, c), needs)
    }

    /// `x · w + b` for `x[n×i]`, `w[i×o]`, `b[o]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add(xw, b)
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu);
        let needs = self.any_grad(&[a]);
        self.push(value, Op::Gelu(a), needs)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let value = self.value(a).map(libm::log);
        let needs = self.any_grad(&[a]);
        self.push(value, Op::Ln(a), needs)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let cols = *av.shape().last().ok_or(Error::EmptyInput("softmax"))?;
        if cols == 0 {
            return Err(Error::EmptyInput("softmax"));
        }
        let mut out = av.data().to_vec();
        for row in out.chunks_mut(cols) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = libm::exp(*v - max);
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let shape = av.shape().to_vec();
        let needs = self.any_grad(&[a]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Softmax(a), needs))
    }

    /// Normalizes each row (last axis) to zero mean and unit variance,
    /// `(x − μ) / √(σ² + eps)`. No affine part.
    pub fn layernorm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let av = self.value(a);
        let cols = *av.shape().last().ok_or(Error::EmptyInput("layernorm"))?;
        if cols == 0 {
            return Err(Error::EmptyInput("layernorm"));
        }
        let mut out = av.data().to_vec();
        for row in out.chunks_mut(cols) {
            let (mean, inv_std) = row_stats(row, eps);
            for v in row.iter_mut() {
                *v = (*v - mean) * inv_std;
            }
        }
        let shape = av.shape().to_vec();
        let needs = self.any_grad(&[a]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::LayerNorm { x: a, eps }, needs))
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or(Error::EmptyInput("concat"))?;
        let base = self.value(*first).shape().to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", &base, &[axis]));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.value(*v).shape();
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let t = self.value(*v);
                let block = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let needs = self.any_grad(inputs);
        Ok(self.push(
            Tensor::new(&shape, data)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            needs,
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose2()?;
        let needs = self.any_grad(&[a]);
        Ok(self.push(value, Op::Transpose(a), needs))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape)?;
        let needs = self.any_grad(&[a]);
        Ok(self.push(value, Op::Reshape(a), needs))
    }

    /// Columnwise maximum over the point axis of `x[n×c]`.
    ///
    /// Backward routes each column's gradient to the first (lowest-index)
    /// row attaining the maximum.
    pub fn reduce_max(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (n, c) = xv.dims2("reduce_max")?;
        if n == 0 {
            return Err(Error::EmptyInput("reduce_max"));
        }
        let mut best = xv.row(0).to_vec();
        let mut argmax = vec![0usize; c];
        for r in 1..n {
            for (j, &v) in xv.row(r).iter().enumerate() {
                if v > best[j] {
                    best[j] = v;
                    argmax[j] = r;
                }
            }
        }
        let needs = self.any_grad(&[x]);
        Ok(self.push(Tensor::vector(best), Op::ReduceMax { x, argmax }, needs))
    }

    /// Sum of all entries as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let needs = self.any_grad(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), needs)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.is_empty() {
            return Err(Error::EmptyInput("mean"));
        }
        let s = av.data().iter().sum::<f64>() / av.len() as f64;
        let needs = self.any_grad(&[a]);
        Ok(self.push(Tensor::scalar(s), Op::Mean(a), needs))
    }

    /// Rows `start..start + len` of a matrix.
    pub fn rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (n, c) = xv.dims2("rows")?;
        if start + len > n {
            return Err(Error::Size {
                op: "rows",
                requested: start + len,
                available: n,
            });
        }
        let data = xv.data()[start * c..(start + len) * c].to_vec();
        let needs = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(&[len, c], data)?, Op::Rows { x, start }, needs))
    }

    /// Repeats a vector `v[c]` into `n` identical rows.
    pub fn broadcast_rows(&mut self, v: Var, n: usize) -> Result<Var> {
        let vv = self.value(v);
        if vv.rank() != 1 {
            return Err(Error::shape("broadcast_rows", vv.shape(), &[n]));
        }
        let c = vv.len();
        let mut data = Vec::with_capacity(n * c);
        for _ in 0..n {
            data.extend_from_slice(vv.data());
        }
        let needs = self.any_grad(&[v]);
        Ok(self.push(Tensor::new(&[n, c], data)?, Op::BroadcastRows(v), needs))
    }

    /// Mean squared error over all entries of two equal-shaped tensors.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (pv, tv) = (self.value(pred), self.value(target));
        if pv.shape() != tv.shape() {
            return Err(Error::shape("mse_loss", pv.shape(), tv.shape()));
        }
        if pv.is_empty() {
            return Err(Error::EmptyInput("mse_loss"));
        }
        let mut acc = 0.0;
        for (p, t) in pv.data().iter().zip(tv.data()) {
            let d = p - t;
            acc += d * d;
        }
        let value = acc / pv.len() as f64;
        let needs = self.any_grad(&[pred, target]);
        Ok(self.push(Tensor::scalar(value), Op::Mse(pred, target), needs))
    }

    /// Reverse pass from `root`, seeding it with ones (the gradient of the
    /// sum of its entries).
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if root.0 >= self.nodes.len() {
            return Err(Error::Size {
                op: "backward",
                requested: root.0,
                available: self.nodes.len(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::ones(self.nodes[root.0].value.shape()));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, contribution: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&contribution),
            slot @ None => *slot = Some(contribution),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = av.dims2("matmul")?;
                let n = bv.shape()[1];
                if self.nodes[a.0].needs_grad {
                    let mut ga = vec![0.0; m * k];
                    gemm_nt_acc(g.data(), bv.data(), &mut ga, m, k, n);
                    self.accumulate(grads, *a, Tensor::new(&[m, k], ga)?);
                }
                if self.nodes[b.0].needs_grad {
                    let mut gb = vec![0.0; k * n];
                    gemm_tn_acc(av.data(), g.data(), &mut gb, m, k, n);
                    self.accumulate(grads, *b, Tensor::new(&[k, n], gb)?);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                for (v, s) in [(*a, 1.0), (*b, sign)] {
                    if !self.nodes[v.0].needs_grad {
                        continue;
                    }
                    let shape = self.value(v).shape().to_vec();
                    let mut data = if shape == g.shape() {
                        g.data().to_vec()
                    } else {
                        reduce_leading(g.data(), self.value(v).len())
                    };
                    if s != 1.0 {
                        data.iter_mut().for_each(|x| *x *= s);
                    }
                    self.accumulate(grads, v, Tensor::new(&shape, data)?);
                }
            }
            Op::Mul(a, b) => {
                for (v, other) in [(*a, *b), (*b, *a)] {
                    if !self.nodes[v.0].needs_grad {
                        continue;
                    }
                    let vv = self.value(v);
                    let ov = self.value(other);
                    let od = ov.data();
                    let prod: Vec<f64> = g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, &gi)| gi * od[i % od.len()])
                        .collect();
                    let data = if vv.shape() == g.shape() {
                        prod
                    } else {
                        reduce_leading(&prod, vv.len())
                    };
                    self.accumulate(grads, v, Tensor::new(vv.shape(), data)?);
                }
            }
            Op::Scale(a, c) => {
                self.accumulate(grads, *a, g.map(|x| x * c));
            }
            Op::Gelu(a) => {
                let av = self.value(*a);
                let data = av
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &gi)| gi * gelu_grad(x))
                    .collect();
                self.accumulate(grads, *a, Tensor::new(av.shape(), data)?);
            }
            Op::Ln(a) => {
                let av = self.value(*a);
                let data = av.data().iter().zip(g.data()).map(|(&x, &gi)| gi / x).collect();
                self.accumulate(grads, *a, Tensor::new(av.shape(), data)?);
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let cols = *y.shape().last().unwrap_or(&1);
                let mut out = vec![0.0; y.len()];
                for ((yr, gr), or) in y
                    .data()
                    .chunks(cols)
                    .zip(g.data().chunks(cols))
                    .zip(out.chunks_mut(cols))
                {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, &yi), &gi) in or.iter_mut().zip(yr).zip(gr) {
                        *o = yi * (gi - dot);
                    }
                }
                self.accumulate(grads, *a, Tensor::new(y.shape(), out)?);
            }
            Op::LayerNorm { x, eps } => {
                let xv = self.value(*x);
                let cols = *xv.shape().last().unwrap_or(&1);
                let nf = cols as f64;
                let mut out = vec![0.0; xv.len()];
                for ((xr, gr), or) in xv
                    .data()
                    .chunks(cols)
                    .zip(g.data().chunks(cols))
                    .zip(out.chunks_mut(cols))
                {
                    let (mean, inv_std) = row_stats(xr, *eps);
                    let g_mean = gr.iter().sum::<f64>() / nf;
                    let gx_mean = xr
                        .iter()
                        .zip(gr)
                        .map(|(&xi, &gi)| gi * (xi - mean) * inv_std)
                        .sum::<f64>()
                        / nf;
                    for ((o, &xi), &gi) in or.iter_mut().zip(xr).zip(gr) {
                        let xhat = (xi - mean) * inv_std;
                        *o = inv_std * (gi - g_mean - xhat * gx_mean);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(xv.shape(), out)?);
            }
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total_block = shape[*axis] * inner;
                let mut offset = 0;
                for v in inputs {
                    let vv = self.value(*v);
                    let block = vv.shape()[*axis] * inner;
                    if self.nodes[v.0].needs_grad {
                        let mut data = Vec::with_capacity(vv.len());
                        for o in 0..outer {
                            let start = o * total_block + offset;
                            data.extend_from_slice(&g.data()[start..start + block]);
                        }
                        self.accumulate(grads, *v, Tensor::new(vv.shape(), data)?);
                    }
                    offset += block;
                }
            }
            Op::Transpose(a) => {
                let (r, c) = g.dims2("transpose")?;
                let data = transpose(g.data(), r, c);
                self.accumulate(grads, *a, Tensor::new(&[c, r], data)?);
            }
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, g.clone().reshaped(&shape)?);
            }
            Op::ReduceMax { x, argmax } => {
                let xv = self.value(*x);
                let c = argmax.len();
                let mut data = vec![0.0; xv.len()];
                for (j, &r) in argmax.iter().enumerate() {
                    data[r * c + j] += g.data()[j];
                }
                self.accumulate(grads, *x, Tensor::new(xv.shape(), data)?);
            }
            Op::Sum(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, Tensor::full(&shape, g.item()));
            }
            Op::Mean(a) => {
                let av = self.value(*a);
                let shape = av.shape().to_vec();
                let n = av.len() as f64;
                self.accumulate(grads, *a, Tensor::full(&shape, g.item() / n));
            }
            Op::Rows { x, start } => {
                let xv = self.value(*x);
                let c = xv.shape()[1];
                let mut data = vec![0.0; xv.len()];
                data[start * c..start * c + g.len()].copy_from_slice(g.data());
                self.accumulate(grads, *x, Tensor::new(xv.shape(), data)?);
            }
            Op::BroadcastRows(v) => {
                let vv = self.value(*v);
                let data = reduce_leading(g.data(), vv.len());
                self.accumulate(grads, *v, Tensor::new(vv.shape(), data)?);
            }
            Op::Mse(p, t) => {
                let (pv, tv) = (self.value(*p), self.value(*t));
                let scale = 2.0 * g.item() / pv.len() as f64;
                let diff: Vec<f64> = pv
                    .data()
                    .iter()
                    .zip(tv.data())
                    .map(|(a, b)| scale * (a - b))
                    .collect();
                if self.nodes[t.0].needs_grad {
                    let neg = diff.iter().map(|d| -d).collect();
                    self.accumulate(grads, *t, Tensor::new(tv.shape(), neg)?);
                }
                self.accumulate(grads, *p, Tensor::new(pv.shape(), diff)?);
            }
        }
        Ok(())
    }
}

fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / libm::sqrt(var + eps))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_product() {
        let mut tape = Tape::new();
        let i2 = tape.constant(Tensor::identity(2));
        let m = tape.constant(t(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let p = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(p), tape.value(m));

        let a = tape.constant(t(&[&[1.0, 2.0]]));
        let b = tape.constant(t(&[&[3.0], &[4.0]]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 2]));
        let err = tape.matmul(a, b).unwrap_err();
        assert_eq!(err, Error::shape("matmul", &[2, 3], &[2, 2]));
        let msg = alloc::format!("{err}");
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn matmul_backward_matches_transposed_products() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let b = tape.leaf(t(&[&[2.0, 3.0], &[4.0, 5.0]]));
        let c = tape.matmul(a, b).unwrap();
        let s = tape.sum(c);
        let g = tape.backward(s).unwrap();
        // dA = 1·Bᵀ rowsums, dB = Aᵀ·1
        assert_eq!(g.get(a).unwrap().data(), &[5.0, 9.0, 5.0, 9.0]);
        assert_eq!(g.get(b).unwrap().data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn add_broadcasts_only_over_leading_axes() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[3, 2]));
        let bias = tape.constant(Tensor::vector(alloc::vec![1.0, 2.0]));
        let y = tape.add(x, bias).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);

        let bad = tape.constant(Tensor::vector(alloc::vec![1.0, 2.0, 3.0]));
        assert!(matches!(tape.add(x, bad), Err(Error::Shape { .. })));
        let col = tape.constant(Tensor::zeros(&[3, 1]));
        assert!(tape.add(x, col).is_err());
    }

    #[test]
    fn mul_scalar_broadcast_grad_sums() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let alpha = tape.leaf(Tensor::scalar(0.5));
        let y = tape.mul(x, alpha).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(alpha).unwrap().item(), 10.0);
        assert_eq!(g.get(x).unwrap().data(), &[0.5; 4]);
    }

    #[test]
    fn reduce_max_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[&[1.0, 5.0], &[3.0, 2.0]]));
        let m = tape.reduce_max(x).unwrap();
        assert_eq!(tape.value(m).data(), &[3.0, 5.0]);
        let s = tape.sum(m);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 1.0, 1.0, 0.0]);

        let single = tape.constant(t(&[&[7.0, -1.0, 2.0]]));
        let m = tape.reduce_max(single).unwrap();
        assert_eq!(tape.value(m).data(), &[7.0, -1.0, 2.0]);

        let empty = tape.constant(Tensor::zeros(&[0, 2]));
        assert_eq!(tape.reduce_max(empty), Err(Error::EmptyInput("reduce_max")));
    }

    #[test]
    fn reduce_max_ties_go_to_first_row() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[&[2.0], &[2.0], &[2.0]]));
        let m = tape.reduce_max(x).unwrap();
        let g = tape.backward(m).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn softmax_rows_are_distributions() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[&[1000.0, 1000.0], &[-3.0, 2.0]]));
        let y = tape.softmax(x).unwrap();
        let v = tape.value(y);
        assert_eq!(v.row(0), &[0.5, 0.5]);
        assert!((v.row(1).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn concat_axis0_and_axis1() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[&[1.0, 2.0]]));
        let b = tape.constant(t(&[&[3.0, 4.0], &[5.0, 6.0]]));
        let c0 = tape.concat(&[a, b], 0).unwrap();
        assert_eq!(tape.value(c0).shape(), &[3, 2]);
        assert_eq!(tape.value(c0).data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);

        let c = tape.constant(t(&[&[9.0]]));
        let c1 = tape.concat(&[a, c], 1).unwrap();
        assert_eq!(tape.value(c1).data(), &[1.0, 2.0, 9.0]);
        assert!(tape.concat(&[a, b], 1).is_err());
    }

    #[test]
    fn mse_examples() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let b = tape.constant(t(&[&[2.0, 3.0], &[4.0, 5.0]]));
        let same = tape.mse_loss(a, a).unwrap();
        assert_eq!(tape.value(same).item(), 0.0);
        let off = tape.mse_loss(b, a).unwrap();
        assert_eq!(tape.value(off).item(), 1.0);
    }

    #[test]
    fn backward_is_repeatable() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[&[0.3, -1.2], &[2.0, 0.1]]));
        let w = tape.leaf(t(&[&[1.0, 0.5], &[-0.5, 2.0]]));
        let h = tape.matmul(x, w).unwrap();
        let h = tape.gelu(h);
        let n = tape.layernorm(h, 1e-5).unwrap();
        let s = tape.softmax(n).unwrap();
        let loss = tape.mean(s).unwrap();
        let g1 = tape.backward(loss).unwrap();
        let g2 = tape.backward(loss).unwrap();
        assert_eq!(g1.get(x), g2.get(x));
        assert_eq!(g1.get(w), g2.get(w));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::scalar(2.0));
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = tape.mul(c, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap().item(), 2.0);
    }
}
