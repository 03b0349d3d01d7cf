use std::fmt;

use crate::error::{invalid, Result, SigError};
use crate::params::{ParamId, ParameterSet};
use crate::tensor::{
    gelu_grad_scalar, gelu_scalar, matmul_acc, matmul_at_acc, matmul_bt_acc, sigmoid_scalar, Tensor,
};

/// Variance floor inside `layer_norm`.
pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Probabilities are clamped to `[CLAMP_EPS, 1 - CLAMP_EPS]` before logs.
pub const CLAMP_EPS: f64 = 1e-7;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Backward rule for a [`Tape::custom`] op: receives the input values and
/// the gradient of the output, returns one gradient per input.
pub type CustomBackward = Box<dyn Fn(&[&Tensor], &Tensor) -> Vec<Tensor> + Send + Sync>;

enum Value {
    Owned(Tensor),
    Param(ParamId),
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    Transpose(Var),
    Reshape(Var),
    Softmax(Var),
    Sigmoid(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        rstd: Vec<f64>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Mean {
        x: Var,
        axis: usize,
    },
    Sum(Var),
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    Normalize(Var),
    Bce {
        p: Var,
        labels: Vec<f64>,
    },
    Custom {
        inputs: Vec<Var>,
        backward: CustomBackward,
    },
}

struct Node {
    value: Value,
    op: Op,
    needs_grad: bool,
}

/// Records a forward computation so that gradients can be replayed in
/// reverse. Parameters are referenced, not copied.
pub struct Tape<'p> {
    nodes: Vec<Node>,
    params: Option<&'p ParameterSet>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Tape<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.len())
            .finish()
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> SigError {
    SigError::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: None,
        }
    }

    pub fn with_params(params: &'p ParameterSet) -> Self {
        Tape {
            nodes: Vec::with_capacity(256),
            params: Some(params),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.params.expect("param node without params").value(*id),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf (gradient is reported by [`Gradients::wrt`]).
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Constant leaf; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        assert!(self.params.is_some(), "tape has no parameter set");
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = ta.dims2();
        if tb.rank() != 2 || tb.shape()[0] != k || ta.rank() > 2 {
            return Err(shape_err("matmul", ta, tb));
        }
        let n = tb.shape()[1];
        let mut out = vec![0.0; m * n];
        matmul_acc(ta.data(), tb.data(), &mut out, m, k, n);
        let shape = if ta.rank() == 2 { vec![m, n] } else { vec![n] };
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul(a, b), ng))
    }

    fn zip_same(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta, tb));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "add", |x, y| x + y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "sub", |x, y| x - y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Sub(a, b), ng))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "mul", |x, y| x * y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Mul(a, b), ng))
    }

    fn row_broadcast(
        &mut self,
        x: Var,
        r: Var,
        name: &'static str,
        f: fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (tx, tr) = (self.value(x), self.value(r));
        let (m, n) = tx.dims2();
        if tr.numel() != n || tr.rank() > 1 {
            return Err(shape_err(name, tx, tr));
        }
        let mut data = tx.data().to_vec();
        for i in 0..m {
            for (d, rv) in data[i * n..(i + 1) * n].iter_mut().zip(tr.data()) {
                *d = f(*d, *rv);
            }
        }
        Tensor::new(tx.shape().to_vec(), data)
    }

    /// Adds a length-`n` vector to every row of an `m x n` value.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let t = self.row_broadcast(x, bias, "add_row", |a, b| a + b)?;
        let ng = self.needs(x) || self.needs(bias);
        Ok(self.push(t, Op::AddRow(x, bias), ng))
    }

    /// Multiplies every row of an `m x n` value by a length-`n` vector.
    pub fn mul_row(&mut self, x: Var, gain: Var) -> Result<Var> {
        let t = self.row_broadcast(x, gain, "mul_row", |a, b| a * b)?;
        let ng = self.needs(x) || self.needs(gain);
        Ok(self.push(t, Op::MulRow(x, gain), ng))
    }

    /// Multiplies row `i` of an `m x n` value by element `i` of a length-`m` vector.
    pub fn mul_col(&mut self, x: Var, col: Var) -> Result<Var> {
        let (tx, tc) = (self.value(x), self.value(col));
        let (m, n) = tx.dims2();
        if tc.numel() != m || tc.rank() > 1 {
            return Err(shape_err("mul_col", tx, tc));
        }
        let mut data = tx.data().to_vec();
        for (i, c) in tc.data().iter().enumerate() {
            data[i * n..(i + 1) * n].iter_mut().for_each(|d| *d *= c);
        }
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let ng = self.needs(x) || self.needs(col);
        Ok(self.push(t, Op::MulCol(x, col), ng))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().map(|v| v * s).collect();
        let t = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        let ng = self.needs(x);
        self.push(t, Op::Scale(x, s), ng)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 2 {
            return Err(invalid(format!(
                "transpose needs rank 2, got {:?}",
                tx.shape()
            )));
        }
        let (m, n) = tx.dims2();
        let src = tx.data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        let t = Tensor::new(vec![n, m], data)?;
        let ng = self.needs(x);
        Ok(self.push(t, Op::Transpose(x), ng))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let ng = self.needs(x);
        Ok(self.push(t, Op::Reshape(x), ng))
    }

    /// Softmax along the last axis with max subtraction. `-inf` logits map to
    /// exactly zero probability.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (m, n) = tx.dims2();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            data.extend(crate::tensor::softmax_slice(
                &tx.data()[i * n..(i + 1) * n],
            )?);
        }
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let ng = self.needs(x);
        Ok(self.push(t, Op::Softmax(x), ng))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| sigmoid_scalar(v)).collect();
        let t = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        let ng = self.needs(x);
        self.push(t, Op::Sigmoid(x), ng)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| gelu_scalar(v)).collect();
        let t = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        let ng = self.needs(x);
        self.push(t, Op::Gelu(x), ng)
    }

    /// Normalises each row to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let (m, n) = tx.dims2();
        let mut data = tx.data().to_vec();
        let mut rstd = Vec::with_capacity(m);
        for i in 0..m {
            let row = &mut data[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * r);
            rstd.push(r);
        }
        let t = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        let ng = self.needs(x);
        self.push(t, Op::LayerNorm { x, rstd }, ng)
    }

    /// Concatenation along `axis` (0 or 1 for matrices, 0 for vectors).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(invalid("concat of nothing"));
        }
        let first = self.value(parts[0]);
        let rank = first.rank();
        if rank == 0 || axis >= rank || rank > 2 {
            return Err(invalid(format!("concat axis {axis} on rank {rank}")));
        }
        for &p in &parts[1..] {
            let t = self.value(p);
            let ok = t.rank() == rank
                && t.shape()
                    .iter()
                    .enumerate()
                    .all(|(d, &s)| d == axis || s == first.shape()[d]);
            if !ok {
                return Err(shape_err("concat", first, t));
            }
        }
        let (data, shape) = if rank == 1 || axis == 0 {
            let mut shape = first.shape().to_vec();
            shape[0] = parts.iter().map(|&p| self.value(p).shape()[0]).sum();
            let data: Vec<f64> = parts
                .iter()
                .flat_map(|&p| self.value(p).data().iter().copied())
                .collect();
            (data, shape)
        } else {
            let m = first.shape()[0];
            let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).shape()[1]).collect();
            let total: usize = widths.iter().sum();
            let mut data = Vec::with_capacity(m * total);
            for i in 0..m {
                for (&p, &w) in parts.iter().zip(&widths) {
                    data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
                }
            }
            (data, vec![m, total])
        };
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            ng,
        ))
    }

    /// Mean over one axis of a matrix (the axis is removed). On a vector,
    /// axis 0 yields a scalar.
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let tx = self.value(x);
        let (m, n) = tx.dims2();
        let t = match (tx.rank(), axis) {
            (1, 0) => Tensor::scalar(tx.data().iter().sum::<f64>() / n as f64),
            (2, 0) => {
                let mut out = vec![0.0; n];
                for i in 0..m {
                    for (o, v) in out.iter_mut().zip(tx.row(i)) {
                        *o += v;
                    }
                }
                out.iter_mut().for_each(|o| *o /= m as f64);
                Tensor::vector(out)
            }
            (2, 1) => Tensor::vector(
                (0..m)
                    .map(|i| tx.row(i).iter().sum::<f64>() / n as f64)
                    .collect(),
            ),
            _ => {
                return Err(invalid(format!(
                    "mean axis {axis} on shape {:?}",
                    tx.shape()
                )))
            }
        };
        let ng = self.needs(x);
        Ok(self.push(t, Op::Mean { x, axis }, ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let ng = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    /// Selects rows of a matrix (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 2 || rows.is_empty() {
            return Err(invalid("gather_rows needs a matrix and at least one row"));
        }
        let (m, n) = tx.dims2();
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            if r >= m {
                return Err(invalid(format!("row {r} out of range {m}")));
            }
            data.extend_from_slice(tx.row(r));
        }
        let t = Tensor::new(vec![rows.len(), n], data)?;
        let ng = self.needs(x);
        Ok(self.push(
            t,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            ng,
        ))
    }

    /// `x / sum(x)`, for renormalising a block of probabilities.
    pub fn normalize(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let s: f64 = tx.data().iter().sum();
        if s == 0.0 || !s.is_finite() {
            return Err(invalid("normalize by zero sum"));
        }
        let data = tx.data().iter().map(|v| v / s).collect();
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let ng = self.needs(x);
        Ok(self.push(t, Op::Normalize(x), ng))
    }

    /// Mean binary cross-entropy of probabilities `p` against `labels`, with
    /// `p` clamped to `[CLAMP_EPS, 1 - CLAMP_EPS]`.
    pub fn bce(&mut self, p: Var, labels: &[f64]) -> Result<Var> {
        let tp = self.value(p);
        if tp.numel() != labels.len() {
            return Err(SigError::Shape {
                op: "bce",
                lhs: tp.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        let n = labels.len() as f64;
        let loss = tp
            .data()
            .iter()
            .zip(labels)
            .map(|(&q, &y)| bce_scalar(q, y))
            .sum::<f64>()
            / n;
        let ng = self.needs(p);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Bce {
                p,
                labels: labels.to_vec(),
            },
            ng,
        ))
    }

    /// Records an op with a caller-supplied backward rule.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, backward: CustomBackward) -> Var {
        let ng = inputs.iter().any(|&v| self.needs(v));
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                backward,
            },
            ng,
        )
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        let mut params = Vec::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Value::Param(id) = node.value {
                if let Some(g) = &grads[idx] {
                    params.push((id, g.clone()));
                }
            }
        }
        Ok(Gradients {
            nodes: grads,
            params,
        })
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let out = self.value(Var(idx));
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = ta.dims2();
                let n = tb.shape()[1];
                if self.needs(*a) {
                    let ga = acc_slot(grads, *a, m * k);
                    matmul_bt_acc(g, tb.data(), ga, m, n, k);
                }
                if self.needs(*b) {
                    let gb = acc_slot(grads, *b, k * n);
                    matmul_at_acc(ta.data(), g, gb, m, k, n);
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, |i| g[i]);
                self.acc(grads, *b, |i| g[i]);
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |i| g[i]);
                self.acc(grads, *b, |i| -g[i]);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |i| g[i] * tb[i]);
                self.acc(grads, *b, |i| g[i] * ta[i]);
            }
            Op::AddRow(x, r) => {
                self.acc(grads, *x, |i| g[i]);
                let n = self.value(*r).numel();
                if self.needs(*r) {
                    let gr = acc_slot(grads, *r, n);
                    for (i, gv) in g.iter().enumerate() {
                        gr[i % n] += gv;
                    }
                }
            }
            Op::MulRow(x, r) => {
                let (tx, tr) = (self.value(*x).data(), self.value(*r).data());
                let n = tr.len();
                self.acc(grads, *x, |i| g[i] * tr[i % n]);
                if self.needs(*r) {
                    let gr = acc_slot(grads, *r, n);
                    for (i, gv) in g.iter().enumerate() {
                        gr[i % n] += gv * tx[i];
                    }
                }
            }
            Op::MulCol(x, c) => {
                let (tx, tc) = (self.value(*x).data(), self.value(*c).data());
                let n = tx.len() / tc.len();
                self.acc(grads, *x, |i| g[i] * tc[i / n]);
                if self.needs(*c) {
                    let gc = acc_slot(grads, *c, tc.len());
                    for (i, gv) in g.iter().enumerate() {
                        gc[i / n] += gv * tx[i];
                    }
                }
            }
            Op::Scale(x, s) => self.acc(grads, *x, |i| g[i] * s),
            Op::Transpose(x) => {
                let (m, n) = self.value(*x).dims2();
                // out is n x m
                self.acc(grads, *x, |i| {
                    let (r, c) = (i / n, i % n);
                    g[c * m + r]
                });
            }
            Op::Reshape(x) => self.acc(grads, *x, |i| g[i]),
            Op::Softmax(x) => {
                let y = out.data();
                let (m, n) = out.dims2();
                if self.needs(*x) {
                    let gx = acc_slot(grads, *x, m * n);
                    for i in 0..m {
                        let yr = &y[i * n..(i + 1) * n];
                        let gr = &g[i * n..(i + 1) * n];
                        let s: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            gx[i * n + j] += yr[j] * (gr[j] - s);
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                let y = out.data();
                self.acc(grads, *x, |i| g[i] * y[i] * (1.0 - y[i]));
            }
            Op::Gelu(x) => {
                let tx = self.value(*x).data();
                self.acc(grads, *x, |i| g[i] * gelu_grad_scalar(tx[i]));
            }
            Op::LayerNorm { x, rstd } => {
                let y = out.data();
                let (m, n) = out.dims2();
                if self.needs(*x) {
                    let gx = acc_slot(grads, *x, m * n);
                    let nf = n as f64;
                    for i in 0..m {
                        let yr = &y[i * n..(i + 1) * n];
                        let gr = &g[i * n..(i + 1) * n];
                        let sum_g: f64 = gr.iter().sum();
                        let sum_gy: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            gx[i * n + j] += rstd[i] / nf * (nf * gr[j] - sum_g - yr[j] * sum_gy);
                        }
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let rank = out.rank();
                if rank == 1 || *axis == 0 {
                    let mut off = 0;
                    for &p in parts {
                        let len = self.value(p).numel();
                        self.acc(grads, p, |i| g[off + i]);
                        off += len;
                    }
                } else {
                    let total = out.shape()[1];
                    let mut col = 0;
                    for &p in parts {
                        let w = self.value(p).shape()[1];
                        self.acc(grads, p, |i| g[(i / w) * total + col + i % w]);
                        col += w;
                    }
                }
            }
            Op::Mean { x, axis } => {
                let tx = self.value(*x);
                let (m, n) = tx.dims2();
                match (tx.rank(), axis) {
                    (1, 0) => self.acc(grads, *x, |_| g[0] / n as f64),
                    (2, 0) => self.acc(grads, *x, |i| g[i % n] / m as f64),
                    _ => self.acc(grads, *x, |i| g[i / n] / n as f64),
                }
            }
            Op::Sum(x) => self.acc(grads, *x, |_| g[0]),
            Op::GatherRows { x, rows } => {
                if self.needs(*x) {
                    let (m, n) = self.value(*x).dims2();
                    let gx = acc_slot(grads, *x, m * n);
                    for (k, &r) in rows.iter().enumerate() {
                        for j in 0..n {
                            gx[r * n + j] += g[k * n + j];
                        }
                    }
                }
            }
            Op::Normalize(x) => {
                let y = out.data();
                let s: f64 = self.value(*x).data().iter().sum();
                let gy: f64 = g.iter().zip(y).map(|(a, b)| a * b).sum();
                self.acc(grads, *x, |i| (g[i] - gy) / s);
            }
            Op::Bce { p, labels } => {
                let tp = self.value(*p).data();
                let n = labels.len() as f64;
                self.acc(grads, *p, |i| g[0] * bce_grad_scalar(tp[i], labels[i]) / n);
            }
            Op::Custom { inputs, backward } => {
                let vals: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                let gout = Tensor::new(out.shape().to_vec(), g.to_vec())?;
                let gin = backward(&vals, &gout);
                if gin.len() != inputs.len() {
                    return Err(invalid(
                        "custom backward returned wrong number of gradients",
                    ));
                }
                for (&v, gi) in inputs.iter().zip(&gin) {
                    let d = gi.data();
                    self.acc(grads, v, |i| d[i]);
                }
            }
        }
        Ok(())
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl Fn(usize) -> f64) {
        if !self.needs(v) {
            return;
        }
        let n = self.value(v).numel();
        let slot = acc_slot(grads, v, n);
        for (i, s) in slot.iter_mut().enumerate() {
            *s += f(i);
        }
    }
}

fn acc_slot(grads: &mut [Option<Vec<f64>>], v: Var, n: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; n])
}

pub(crate) fn bce_scalar(p: f64, y: f64) -> f64 {
    let q = p.clamp(CLAMP_EPS, 1.0 - CLAMP_EPS);
    -(y * q.ln() + (1.0 - y) * (1.0 - q).ln())
}

fn bce_grad_scalar(p: f64, y: f64) -> f64 {
    if !(CLAMP_EPS..=1.0 - CLAMP_EPS).contains(&p) {
        return 0.0;
    }
    -(y / p - (1.0 - y) / (1.0 - p))
}

/// Result of [`Tape::backward`]; owns its buffers so the tape (and its
/// borrow of the parameter set) can be dropped before accumulation.
#[derive(Debug)]
pub struct Gradients {
    nodes: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, Vec<f64>)>,
}

impl Gradients {
    /// Gradient with respect to a recorded value, if any flowed into it.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.nodes.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param_grads(&self) -> &[(ParamId, Vec<f64>)] {
        &self.params
    }

    /// Adds every parameter gradient into the accumulators of `params`.
    pub fn accumulate_into(&self, params: &mut ParameterSet) -> Result<()> {
        for (id, g) in &self.params {
            params.accumulate(*id, g)?;
        }
        Ok(())
    }
}

/// Runs the reverse pass and adds the parameter gradients into `params`.
/// Accumulators are not reset; call [`ParameterSet::zero_grad`] for that.
pub fn backward<F>(params: &mut ParameterSet, forward: F) -> Result<f64>
where
    F: FnOnce(&mut Tape<'_>) -> Result<Var>,
{
    let (loss, grads) = {
        let mut tape = Tape::with_params(params);
        let loss = forward(&mut tape)?;
        let value = tape.value(loss).item();
        (value, tape.backward(loss)?)
    };
    grads.accumulate_into(params)?;
    Ok(loss)
}
