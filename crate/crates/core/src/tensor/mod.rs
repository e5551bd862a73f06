// SPDX-License-Identifier: Apache-2.0

//! Dense `f64` tensors and a reverse-mode tape.
//!
//! A [`Tape`] records every operation applied to its [`Var`] handles. Values
//! live on the tape; [`Tape::backward`] walks the record once, newest first,
//! and returns a [`Gradients`] table. Nodes whose inputs never require a
//! gradient are skipped during the walk, so constant subgraphs (dataset
//! batches, frozen networks) cost nothing on the way back.
//!
//! Layout is row-major throughout. Convolution is cross-correlation.

mod broadcast;
mod conv;
mod gemm;

use crate::error::{contract_err, dim_err, Result};

pub(crate) use gemm::gemm;

/// Owned n-dimensional array of `f64` in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(dim_err!("shape {shape:?} must be non-empty with positive dims"));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(dim_err!(
                "shape {shape:?} holds {n} elements but {} were given",
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    /// Builds a 2-D tensor from equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(dim_err!("ragged rows"));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.contains(&0) {
            return Err(dim_err!("cannot reshape {:?} to {shape:?}", self.shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Element `(i, j)` of a 2-D tensor.
    pub fn at2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    /// Leading dimension and the flattened size of the rest.
    pub fn rows_cols(&self) -> (usize, usize) {
        let rows = self.shape[0];
        (rows, self.data.len() / rows)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let (_, cols) = self.rows_cols();
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    LeakyRelu(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Abs(Var),
    Exp(Var),
    Square(Var),
    Softplus(Var),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    SliceRows(Var, usize),
    ConcatRows(Vec<Var>),
    Conv2d { x: Var, w: Var, stride: usize, pad: usize },
    AvgPoolGlobal(Var),
    Upsample2x(Var),
    BatchNorm { x: Var, inv_std: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of operations. Inputs always precede the nodes using them.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar with respect to every node that required one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of `shape` if nothing reached it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }

    /// Sum of squared gradient entries of `v` (0 when absent).
    pub fn sq_norm(&self, v: Var) -> f64 {
        self.get(v).map_or(0.0, |g| g.data.iter().map(|a| a * a).sum())
    }
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

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Leaf that requires a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Same value as `x`; the backward pass contributes nothing to `x`.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push(value, Op::Leaf, false)
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let src = self.value(x);
        let data = src.data.iter().map(|&a| f(a)).collect();
        let value = Tensor { shape: src.shape.clone(), data };
        let rg = self.rg(x);
        self.push(value, op, rg)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let value = broadcast::zip(self.value(a), self.value(b), f)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::Scale(x, c), |a| a * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::AddScalar(x), |a| a + c)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.unary(x, Op::LeakyRelu(x, slope), |a| if a > 0.0 { a } else { slope * a })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), f64::tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Op::Abs(x), f64::abs)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Op::Square(x), |a| a * a)
    }

    /// `ln(1 + e^x)` evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Op::Softplus(x), softplus)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let m = v.data.iter().sum::<f64>() / v.data.len() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(m), Op::Mean(x), rg)
    }

    /// Mean over the leading (batch) axis.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let (rows, cols) = v.rows_cols();
        let mut out = vec![0.0; cols];
        for r in 0..rows {
            for (o, &a) in out.iter_mut().zip(&v.data[r * cols..(r + 1) * cols]) {
                *o += a;
            }
        }
        out.iter_mut().for_each(|o| *o /= rows as f64);
        let shape = if v.shape.len() > 1 { v.shape[1..].to_vec() } else { vec![1] };
        let rg = self.rg(x);
        self.push(Tensor { shape, data: out }, Op::MeanRows(x), rg)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x);
        let (rows, cols) = v.rows_cols();
        if len == 0 || start + len > rows {
            return Err(dim_err!("rows {start}..{} out of 0..{rows}", start + len));
        }
        let mut shape = v.shape.clone();
        shape[0] = len;
        let data = v.data[start * cols..(start + len) * cols].to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape, data }, Op::SliceRows(x, start), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| dim_err!("concat of nothing"))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.shape[1..] != tail[..] {
                return Err(dim_err!("concat rows: {:?} vs trailing {tail:?}", v.shape));
            }
            rows += v.shape[0];
            data.extend_from_slice(&v.data);
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor { shape, data }, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape.len() != 2 || bv.shape.len() != 2 || av.shape[1] != bv.shape[0] {
            return Err(dim_err!("matmul {:?} x {:?}", av.shape, bv.shape));
        }
        let (m, k, n) = (av.shape[0], av.shape[1], bv.shape[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &av.data, (k, 1), &bv.data, (n, 1), &mut out, 0.0);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor { shape: vec![m, n], data: out }, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.shape.len() != 2 {
            return Err(dim_err!("transpose needs 2-D, got {:?}", v.shape));
        }
        let (r, c) = (v.shape[0], v.shape[1]);
        let data = transpose(&v.data, r, c);
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape: vec![c, r], data }, Op::Transpose(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Flattens everything after the batch axis.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.value(x).rows_cols();
        self.reshape(x, &[rows, cols])
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(contract_err!("backward needs a scalar loss, got shape {:?}", lv.shape));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor { shape: lv.shape.clone(), data: vec![1.0] });

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, delta: Vec<f64>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.data.iter_mut().zip(delta).for_each(|(a, d)| *a += d),
            slot @ None => {
                *slot = Some(Tensor { shape: self.nodes[v.0].value.shape.clone(), data: delta })
            }
        }
    }

    /// Per-element adjoint for a unary op: `g * dfdx(x, y)`.
    fn unary_adjoint(
        &self,
        grads: &mut [Option<Tensor>],
        x: Var,
        out: &Tensor,
        g: &Tensor,
        dfdx: impl Fn(f64, f64) -> f64,
    ) {
        if !self.rg(x) {
            return;
        }
        let xv = &self.value(x).data;
        let delta = g
            .data
            .iter()
            .zip(xv)
            .zip(&out.data)
            .map(|((&gi, &xi), &yi)| gi * dfdx(xi, yi))
            .collect();
        self.accumulate(grads, x, delta);
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => self.binary_adjoint(grads, *a, *b, g, |_, _| (1.0, 1.0)),
            Op::Sub(a, b) => self.binary_adjoint(grads, *a, *b, g, |_, _| (1.0, -1.0)),
            Op::Mul(a, b) => self.binary_adjoint(grads, *a, *b, g, |x, y| (y, x)),
            Op::Div(a, b) => self.binary_adjoint(grads, *a, *b, g, |x, y| (1.0 / y, -x / (y * y))),
            Op::Scale(x, c) => {
                let c = *c;
                self.unary_adjoint(grads, *x, out, g, |_, _| c)
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                if self.rg(*x) {
                    self.accumulate(grads, *x, g.data.clone());
                }
            }
            Op::LeakyRelu(x, slope) => {
                let s = *slope;
                self.unary_adjoint(grads, *x, out, g, |a, _| if a > 0.0 { 1.0 } else { s })
            }
            Op::Tanh(x) => self.unary_adjoint(grads, *x, out, g, |_, y| 1.0 - y * y),
            Op::Sigmoid(x) => self.unary_adjoint(grads, *x, out, g, |_, y| y * (1.0 - y)),
            Op::Abs(x) => self.unary_adjoint(grads, *x, out, g, |a, _| {
                if a > 0.0 {
                    1.0
                } else if a < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }),
            Op::Exp(x) => self.unary_adjoint(grads, *x, out, g, |_, y| y),
            Op::Square(x) => self.unary_adjoint(grads, *x, out, g, |a, _| 2.0 * a),
            Op::Softplus(x) => self.unary_adjoint(grads, *x, out, g, |a, _| sigmoid(a)),
            Op::Sum(x) => {
                let n = self.value(*x).len();
                self.accumulate(grads, *x, vec![g.data[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                self.accumulate(grads, *x, vec![g.data[0] / n as f64; n]);
            }
            Op::MeanRows(x) => {
                let (rows, cols) = self.value(*x).rows_cols();
                let scale = 1.0 / rows as f64;
                let mut delta = Vec::with_capacity(rows * cols);
                for _ in 0..rows {
                    delta.extend(g.data.iter().map(|&gi| gi * scale));
                }
                self.accumulate(grads, *x, delta);
            }
            Op::SliceRows(x, start) => {
                let xv = self.value(*x);
                let (_, cols) = xv.rows_cols();
                let mut delta = vec![0.0; xv.len()];
                delta[start * cols..start * cols + g.len()].copy_from_slice(&g.data);
                self.accumulate(grads, *x, delta);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    self.accumulate(grads, p, g.data[offset..offset + n].to_vec());
                    offset += n;
                }
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape[0], av.shape[1], bv.shape[1]);
                if self.rg(*a) {
                    // dA = G B^T
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, &g.data, (n, 1), &bv.data, (1, n), &mut da, 0.0);
                    self.accumulate(grads, *a, da);
                }
                if self.rg(*b) {
                    // dB = A^T G
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, &av.data, (1, k), &g.data, (n, 1), &mut db, 0.0);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (out.shape[0], out.shape[1]);
                self.accumulate(grads, *x, transpose(&g.data, r, c));
            }
            Op::Conv2d { x, w, stride, pad } => self.conv2d_adjoint(grads, *x, *w, *stride, *pad, g),
            Op::AvgPoolGlobal(x) => self.avg_pool_adjoint(grads, *x, g),
            Op::Upsample2x(x) => self.upsample_adjoint(grads, *x, g),
            Op::BatchNorm { x, inv_std } => self.batch_norm_adjoint(grads, *x, out, inv_std, g),
        }
    }

    fn binary_adjoint(
        &self,
        grads: &mut [Option<Tensor>],
        a: Var,
        b: Var,
        g: &Tensor,
        partials: impl Fn(f64, f64) -> (f64, f64),
    ) {
        let (av, bv) = (self.value(a), self.value(b));
        let (ga, gb) = broadcast::adjoint(av, bv, g, self.rg(a), self.rg(b), partials);
        if let Some(ga) = ga {
            self.accumulate(grads, a, ga);
        }
        if let Some(gb) = gb {
            self.accumulate(grads, b, gb);
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn transpose(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    out
}
