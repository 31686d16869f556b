//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends one node to a [`Tape`]; nodes only ever refer to
//! earlier nodes, so the tape is already in topological order. A single
//! reverse sweep from the loss visits each node once and accumulates
//! gradients into its inputs (fan-out sums are the only accumulation).
//!
//! ```
//! use relex_core::{Tape, Tensor};
//!
//! let a = Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap();
//! let b = Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap();
//! let mut tape = Tape::new();
//! let va = tape.leaf(a, true);
//! let vb = tape.leaf(b, true);
//! let y = tape.matmul(va, vb).unwrap();
//! let loss = tape.sum(y);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(va).unwrap().data(), &[3.0, 4.0]);
//! ```

use std::borrow::Cow;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{self, gemm_nn, gemm_nt, gemm_tn, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }

    #[cfg(test)]
    pub(crate) fn from_index(i: usize) -> Var {
        Var(i)
    }
}

const LAYER_NORM_EPS: f64 = 1e-12;

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    Reshape(Var),
    Transpose(Var),
    Softmax(Var),
    CrossEntropy {
        p: Var,
        gold: usize,
    },
    Dropout {
        x: Var,
        keep: Vec<f64>,
    },
    Sum(Var),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::MatMulNt(a, b) | Op::Add(a, b) | Op::AddBias(a, b) | Op::Mul(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(x, _)
            | Op::Tanh(x)
            | Op::Sigmoid(x)
            | Op::Gelu(x)
            | Op::SliceRows { x, .. }
            | Op::SliceCols { x, .. }
            | Op::Reshape(x)
            | Op::Transpose(x)
            | Op::Softmax(x)
            | Op::Dropout { x, .. }
            | Op::Sum(x) => vec![*x],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Embedding { table, .. } => vec![*table],
            Op::ConcatCols(xs) | Op::ConcatRows(xs) => xs.clone(),
            Op::CrossEntropy { p, .. } => vec![*p],
        }
    }
}

struct Node<'p> {
    value: Cow<'p, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation. Leaves may borrow parameter tensors for the
/// lifetime `'p` so binding a model to a tape copies nothing.
#[derive(Default)]
pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
    /// First node whose value went non-finite although its inputs were
    /// finite (overflow or a domain error).
    first_non_finite: Option<usize>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like `like` when nothing reached it.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| like.zeros_like())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push_leaf(Cow::Owned(value), requires_grad)
    }

    /// Leaf that borrows its value instead of copying it.
    pub fn param(&mut self, value: &'p Tensor, requires_grad: bool) -> Var {
        self.push_leaf(Cow::Borrowed(value), requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push_leaf(&mut self, value: Cow<'p, Tensor>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let inputs = op.inputs();
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        if self.first_non_finite.is_none()
            && !value.is_finite()
            && inputs.iter().all(|v| self.nodes[v.0].value.is_finite())
        {
            self.first_non_finite = Some(self.nodes.len());
        }
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn dims(&self, v: Var) -> Result<(usize, usize)> {
        self.value(v).dims2()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul_nt(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMulNt(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "add", |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    fn zip_same(&self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(format!(
                "{what}: shapes {:?} and {:?} differ",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::from_parts(ta.shape().to_vec(), data))
    }

    /// Adds a length-`n` bias to every row of an `m × n` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims(x)?;
        let b = self.value(bias);
        if b.numel() != n {
            return Err(Error::shape(format!(
                "bias {:?} does not fit rows of {:?}",
                b.shape(),
                self.value(x).shape()
            )));
        }
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(n) {
            for (v, bv) in row.iter_mut().zip(b.data()) {
                *v += bv;
            }
        }
        let out = Tensor::from_parts(self.value(x).shape().to_vec(), data);
        debug_assert_eq!(out.numel(), m * n);
        Ok(self.push(out, Op::AddBias(x, bias)))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.map(x, |v| v * s);
        self.push(out, Op::Scale(x, s))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.map(x, f64::tanh);
        self.push(out, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.map(x, tensor::sigmoid);
        self.push(out, Op::Sigmoid(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.map(x, tensor::gelu);
        self.push(out, Op::Gelu(x))
    }

    fn map(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(x);
        Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())
    }

    /// Row-wise layer normalisation with learnable gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims(x)?;
        let (g, b) = (self.value(gain), self.value(bias));
        if g.numel() != n || b.numel() != n {
            return Err(Error::shape(format!(
                "layer_norm gain {:?} / bias {:?} do not match width {n}",
                g.shape(),
                b.shape()
            )));
        }
        let xs = self.value(x).data();
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &xs[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for c in 0..n {
                let h = (row[c] - mean) * rs;
                xhat[r * n + c] = h;
                out[r * n + c] = h * g.data()[c] + b.data()[c];
            }
        }
        let out = Tensor::from_parts(self.value(x).shape().to_vec(), out);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    /// Gathers rows of `table` (`V × H`) into an `ids.len() × H` matrix.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, h) = self.dims(table)?;
        if ids.is_empty() {
            return Err(Error::shape("embedding lookup with no ids"));
        }
        let t = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * h);
        for &id in ids {
            if id >= v {
                return Err(Error::Index { index: id, len: v });
            }
            out.extend_from_slice(&t[id * h..(id + 1) * h]);
        }
        let out = Tensor::from_parts(vec![ids.len(), h], out);
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let dims = xs.iter().map(|&x| self.dims(x)).collect::<Result<Vec<_>>>()?;
        let rows = dims.first().ok_or_else(|| Error::shape("concat of nothing"))?.0;
        if dims.iter().any(|d| d.0 != rows) {
            return Err(Error::shape(format!("concat_cols: row counts differ: {dims:?}")));
        }
        let width: usize = dims.iter().map(|d| d.1).sum();
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for &x in xs {
                out.extend_from_slice(self.value(x).row(r));
            }
        }
        let out = Tensor::from_parts(vec![rows, width], out);
        Ok(self.push(out, Op::ConcatCols(xs.to_vec())))
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let dims = xs.iter().map(|&x| self.dims(x)).collect::<Result<Vec<_>>>()?;
        let cols = dims.first().ok_or_else(|| Error::shape("concat of nothing"))?.1;
        if dims.iter().any(|d| d.1 != cols) {
            return Err(Error::shape(format!("concat_rows: widths differ: {dims:?}")));
        }
        let rows: usize = dims.iter().map(|d| d.0).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for &x in xs {
            out.extend_from_slice(self.value(x).data());
        }
        let out = Tensor::from_parts(vec![rows, cols], out);
        Ok(self.push(out, Op::ConcatRows(xs.to_vec())))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(x)?;
        if len == 0 || start + len > m {
            return Err(Error::shape(format!(
                "row slice {start}..{} out of bounds for {m} rows",
                start + len
            )));
        }
        let data = self.value(x).data()[start * n..(start + len) * n].to_vec();
        let out = Tensor::from_parts(vec![len, n], data);
        Ok(self.push(out, Op::SliceRows { x, start }))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(x)?;
        if len == 0 || start + len > n {
            return Err(Error::shape(format!(
                "column slice {start}..{} out of bounds for {n} columns",
                start + len
            )));
        }
        let t = self.value(x);
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&t.row(r)[start..start + len]);
        }
        let out = Tensor::from_parts(vec![m, len], data);
        Ok(self.push(out, Op::SliceCols { x, start }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape.to_vec())?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims(x)?;
        let t = self.value(x).data();
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            for c in 0..n {
                out[c * m + r] = t[r * n + c];
            }
        }
        let out = Tensor::from_parts(vec![n, m], out);
        Ok(self.push(out, Op::Transpose(x)))
    }

    /// Row-wise softmax. With a mask, only columns flagged valid take part
    /// and the rest come out as exactly zero.
    pub fn softmax(&mut self, x: Var, valid: Option<&[bool]>) -> Result<Var> {
        let (m, n) = self.dims(x)?;
        if let Some(mask) = valid {
            if mask.len() != n {
                return Err(Error::shape(format!(
                    "softmax mask length {} does not match width {n}",
                    mask.len()
                )));
            }
        }
        let t = self.value(x);
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            tensor::softmax_into(t.row(r), valid, &mut out[r * n..(r + 1) * n])?;
        }
        let out = Tensor::from_parts(t.shape().to_vec(), out);
        Ok(self.push(out, Op::Softmax(x)))
    }

    /// `-ln p[gold]` for a probability vector `p`.
    pub fn cross_entropy(&mut self, p: Var, gold: usize) -> Result<Var> {
        let t = self.value(p);
        let (rows, c) = t.dims2()?;
        if rows != 1 {
            return Err(Error::shape(format!(
                "cross_entropy expects a single probability row, got {:?}",
                t.shape()
            )));
        }
        if gold >= c {
            return Err(Error::Index { index: gold, len: c });
        }
        let out = Tensor::scalar(-t.data()[gold].ln());
        Ok(self.push(out, Op::CrossEntropy { p, gold }))
    }

    /// Inverted dropout: kept units are scaled by `1 / (1 - rate)`.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut impl Rng) -> Var {
        if rate <= 0.0 {
            return x;
        }
        let scale = 1.0 / (1.0 - rate);
        let t = self.value(x);
        let keep: Vec<f64> = (0..t.numel())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { scale })
            .collect();
        let data = t.data().iter().zip(&keep).map(|(v, k)| v * k).collect();
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        self.push(out, Op::Dropout { x, keep })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x))
    }

    /// Node that first produced non-finite values from finite inputs.
    pub fn first_non_finite(&self) -> Option<Var> {
        self.first_non_finite.map(Var)
    }

    /// Reverse sweep from a scalar `loss`. Fails with a divergence error if
    /// any recorded op overflowed.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if let Some(i) = self.first_non_finite {
            return Err(Error::Divergence(format!(
                "node {i} produced non-finite values from finite inputs"
            )));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::from_parts(self.value(loss).shape().to_vec(), vec![1.0]));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node<'p>, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = ta.dims2().unwrap();
                let n = tb.dims2().unwrap().1;
                if self.requires_grad(*a) {
                    self.accumulate_with(grads, *a, |da| gemm_nt(g.data(), tb.data(), da, m, n, k));
                }
                if self.requires_grad(*b) {
                    self.accumulate_with(grads, *b, |db| gemm_tn(ta.data(), g.data(), db, m, k, n));
                }
            }
            Op::MatMulNt(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = ta.dims2().unwrap();
                let n = tb.dims2().unwrap().0;
                if self.requires_grad(*a) {
                    self.accumulate_with(grads, *a, |da| gemm_nn(g.data(), tb.data(), da, m, n, k));
                }
                if self.requires_grad(*b) {
                    self.accumulate_with(grads, *b, |db| gemm_tn(g.data(), ta.data(), db, m, n, k));
                }
            }
            Op::Add(a, b) => {
                self.accumulate_with(grads, *a, |da| add_into(da, g.data()));
                self.accumulate_with(grads, *b, |db| add_into(db, g.data()));
            }
            Op::AddBias(x, bias) => {
                self.accumulate_with(grads, *x, |dx| add_into(dx, g.data()));
                let n = self.value(*bias).numel();
                self.accumulate_with(grads, *bias, |db| {
                    for row in g.data().chunks(n) {
                        add_into(db, row);
                    }
                });
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                self.accumulate_with(grads, *a, |da| {
                    for ((d, gv), bv) in da.iter_mut().zip(g.data()).zip(tb.data()) {
                        *d += gv * bv;
                    }
                });
                self.accumulate_with(grads, *b, |db| {
                    for ((d, gv), av) in db.iter_mut().zip(g.data()).zip(ta.data()) {
                        *d += gv * av;
                    }
                });
            }
            Op::Scale(x, s) => {
                self.accumulate_with(grads, *x, |dx| {
                    for (d, gv) in dx.iter_mut().zip(g.data()) {
                        *d += s * gv;
                    }
                });
            }
            Op::Tanh(x) => self.accumulate_with(grads, *x, |dx| {
                for ((d, gv), yv) in dx.iter_mut().zip(g.data()).zip(y.data()) {
                    *d += gv * (1.0 - yv * yv);
                }
            }),
            Op::Sigmoid(x) => self.accumulate_with(grads, *x, |dx| {
                for ((d, gv), yv) in dx.iter_mut().zip(g.data()).zip(y.data()) {
                    *d += gv * yv * (1.0 - yv);
                }
            }),
            Op::Gelu(x) => {
                let tx = self.value(*x);
                self.accumulate_with(grads, *x, |dx| {
                    for ((d, gv), xv) in dx.iter_mut().zip(g.data()).zip(tx.data()) {
                        *d += gv * tensor::gelu_grad(*xv);
                    }
                })
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let n = self.value(*gain).numel();
                let gd = self.value(*gain).data();
                self.accumulate_with(grads, *x, |dx| {
                    let mut dxhat = vec![0.0; n];
                    for (r, rs) in rstd.iter().enumerate() {
                        let gr = &g.data()[r * n..(r + 1) * n];
                        let xr = &xhat[r * n..(r + 1) * n];
                        for c in 0..n {
                            dxhat[c] = gr[c] * gd[c];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / n as f64;
                        let mean_dx = dxhat.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for c in 0..n {
                            dx[r * n + c] += rs * (dxhat[c] - mean_d - xr[c] * mean_dx);
                        }
                    }
                });
                self.accumulate_with(grads, *gain, |dg| {
                    for (gr, xr) in g.data().chunks(n).zip(xhat.chunks(n)) {
                        for c in 0..n {
                            dg[c] += gr[c] * xr[c];
                        }
                    }
                });
                self.accumulate_with(grads, *bias, |db| {
                    for gr in g.data().chunks(n) {
                        add_into(db, gr);
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let h = self.value(*table).dims2().unwrap().1;
                self.accumulate_with(grads, *table, |dt| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut dt[id * h..(id + 1) * h], &g.data()[r * h..(r + 1) * h]);
                    }
                });
            }
            Op::ConcatCols(xs) => {
                let (rows, width) = g.dims2().unwrap();
                let mut offset = 0;
                for &x in xs {
                    let w = self.value(x).dims2().unwrap().1;
                    self.accumulate_with(grads, x, |dx| {
                        for r in 0..rows {
                            add_into(
                                &mut dx[r * w..(r + 1) * w],
                                &g.data()[r * width + offset..r * width + offset + w],
                            );
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatRows(xs) => {
                let mut offset = 0;
                for &x in xs {
                    let len = self.value(x).numel();
                    self.accumulate_with(grads, x, |dx| add_into(dx, &g.data()[offset..offset + len]));
                    offset += len;
                }
            }
            Op::SliceRows { x, start } => {
                let n = self.value(*x).dims2().unwrap().1;
                self.accumulate_with(grads, *x, |dx| {
                    add_into(&mut dx[start * n..start * n + g.numel()], g.data())
                });
            }
            Op::SliceCols { x, start } => {
                let n = self.value(*x).dims2().unwrap().1;
                let (rows, len) = g.dims2().unwrap();
                self.accumulate_with(grads, *x, |dx| {
                    for r in 0..rows {
                        add_into(
                            &mut dx[r * n + start..r * n + start + len],
                            &g.data()[r * len..(r + 1) * len],
                        );
                    }
                });
            }
            Op::Reshape(x) => self.accumulate_with(grads, *x, |dx| add_into(dx, g.data())),
            Op::Transpose(x) => {
                let (m, n) = self.value(*x).dims2().unwrap();
                self.accumulate_with(grads, *x, |dx| {
                    for r in 0..m {
                        for c in 0..n {
                            dx[r * n + c] += g.data()[c * m + r];
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let (_, n) = y.dims2().unwrap();
                self.accumulate_with(grads, *x, |dx| {
                    for ((dr, gr), yr) in dx.chunks_mut(n).zip(g.data().chunks(n)).zip(y.data().chunks(n)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for c in 0..n {
                            dr[c] += yr[c] * (gr[c] - dot);
                        }
                    }
                });
            }
            Op::CrossEntropy { p, gold } => {
                let pg = self.value(*p).data()[*gold];
                self.accumulate_with(grads, *p, |dp| dp[*gold] -= g.data()[0] / pg);
            }
            Op::Dropout { x, keep } => self.accumulate_with(grads, *x, |dx| {
                for ((d, gv), k) in dx.iter_mut().zip(g.data()).zip(keep) {
                    *d += gv * k;
                }
            }),
            Op::Sum(x) => {
                let gv = g.data()[0];
                self.accumulate_with(grads, *x, |dx| {
                    for d in dx.iter_mut() {
                        *d += gv;
                    }
                });
            }
        }
    }

    fn accumulate_with(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| self.nodes[v.0].value.zeros_like());
        f(slot.data_mut());
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::gradcheck::{finite_difference_check, GradCheck};

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    /// Runs `build` on a fresh tape, checks every input's analytic gradient
    /// against central differences.
    fn check(inputs: Vec<Tensor>, build: impl Fn(&mut Tape, &[Var]) -> Var) {
        let analytic = {
            let mut tape = Tape::new();
            let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
            let out = build(&mut tape, &vars);
            let grads = tape.backward(out).unwrap();
            vars.iter()
                .zip(&inputs)
                .map(|(&v, t)| grads.get_or_zeros(v, t))
                .collect::<Vec<_>>()
        };
        let f = |params: &[Tensor]| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = params.iter().map(|t| tape.leaf(t.clone(), false)).collect();
            let out = build(&mut tape, &vars);
            tape.value(out).data()[0]
        };
        let report = finite_difference_check(f, &inputs, &analytic, &GradCheck::default());
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn matmul_gradients() {
        let mut r = rng();
        check(
            vec![
                Tensor::uniform([3, 4], -2.0, 2.0, &mut r),
                Tensor::uniform([4, 2], -2.0, 2.0, &mut r),
            ],
            |t, v| {
                let y = t.matmul(v[0], v[1]).unwrap();
                let y = t.tanh(y);
                t.sum(y)
            },
        );
    }

    #[test]
    fn matmul_sum_gradient_is_ones_times_b_transpose() {
        let a = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut tape = Tape::new();
        let va = tape.leaf(a, true);
        let vb = tape.leaf(b, false);
        let y = tape.matmul(va, vb).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        // ones(2x2) · bᵀ: row sums of b.
        assert_eq!(g.get(va).unwrap().data(), &[3.0, 7.0, 3.0, 7.0]);
        assert!(g.get(vb).is_none());
    }

    #[test]
    fn matmul_nt_and_transpose_gradients() {
        let mut r = rng();
        check(
            vec![
                Tensor::uniform([3, 4], -2.0, 2.0, &mut r),
                Tensor::uniform([5, 4], -2.0, 2.0, &mut r),
            ],
            |t, v| {
                let y = t.matmul_nt(v[0], v[1]).unwrap();
                let y = t.transpose(y).unwrap();
                let y = t.sigmoid(y);
                t.sum(y)
            },
        );
    }

    #[test]
    fn elementwise_gradients() {
        let mut r = rng();
        check(
            vec![
                Tensor::uniform([2, 3], -2.0, 2.0, &mut r),
                Tensor::uniform([2, 3], -2.0, 2.0, &mut r),
                Tensor::uniform([3], -2.0, 2.0, &mut r),
            ],
            |t, v| {
                let a = t.mul(v[0], v[1]).unwrap();
                let b = t.add(a, v[0]).unwrap();
                let c = t.add_bias(b, v[2]).unwrap();
                let d = t.gelu(c);
                let e = t.scale(d, -0.7);
                let e = t.tanh(e);
                t.sum(e)
            },
        );
    }

    #[test]
    fn layer_norm_gradients() {
        let mut r = rng();
        let w = Tensor::uniform([3, 5], -2.0, 2.0, &mut r);
        check(
            vec![
                Tensor::uniform([3, 5], -2.0, 2.0, &mut r),
                Tensor::uniform([5], -2.0, 2.0, &mut r),
                Tensor::uniform([5], -2.0, 2.0, &mut r),
            ],
            move |t, v| {
                let y = t.layer_norm(v[0], v[1], v[2]).unwrap();
                let w = t.constant(w.clone());
                let y = t.mul(y, w).unwrap();
                t.sum(y)
            },
        );
    }

    #[test]
    fn softmax_and_cross_entropy_gradients() {
        let mut r = rng();
        let mask = [true, false, true, true];
        check(vec![Tensor::uniform([1, 4], -2.0, 2.0, &mut r)], move |t, v| {
            let p = t.softmax(v[0], Some(&mask)).unwrap();
            t.cross_entropy(p, 2).unwrap()
        });
    }

    #[test]
    fn softmax_cross_entropy_gradient_is_p_minus_onehot() {
        let logits = Tensor::matrix(1, 3, vec![0.3, -1.2, 2.0]).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(logits, true);
        let p = tape.softmax(x, None).unwrap();
        let loss = tape.cross_entropy(p, 1).unwrap();
        let g = tape.backward(loss).unwrap();
        let pv = tape.value(p).data().to_vec();
        let gx = g.get(x).unwrap().data();
        for c in 0..3 {
            let expected = pv[c] - if c == 1 { 1.0 } else { 0.0 };
            assert!((gx[c] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_values() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::matrix(1, 3, vec![0.7, 0.2, 0.1]).unwrap());
        let l = tape.cross_entropy(p, 0).unwrap();
        assert!((tape.value(l).data()[0] - 0.356_674_943_938_732_45).abs() < 1e-12);

        let p = tape.constant(Tensor::matrix(1, 4, vec![0.25; 4]).unwrap());
        let l = tape.cross_entropy(p, 2).unwrap();
        assert!((tape.value(l).data()[0] - 4f64.ln()).abs() < 1e-12);

        let p = tape.constant(Tensor::matrix(1, 3, vec![0.0, 1.0, 0.0]).unwrap());
        let l = tape.cross_entropy(p, 1).unwrap();
        assert_eq!(tape.value(l).data()[0], 0.0);

        assert!(matches!(
            tape.cross_entropy(p, 3),
            Err(Error::Index { index: 3, len: 3 })
        ));
    }

    #[test]
    fn structural_op_gradients() {
        let mut r = rng();
        let w = Tensor::uniform([4, 5], -1.0, 1.0, &mut r);
        check(
            vec![
                Tensor::uniform([6, 3], -2.0, 2.0, &mut r),
                Tensor::uniform([4, 2], -2.0, 2.0, &mut r),
            ],
            move |t, v| {
                let emb = t.embedding(v[0], &[1, 4, 1, 5]).unwrap();
                let a = t.slice_cols(emb, 1, 2).unwrap();
                let b = t.concat_cols(&[a, v[1], a]).unwrap();
                let top = t.slice_rows(b, 0, 2).unwrap();
                let bot = t.slice_rows(b, 2, 2).unwrap();
                let c = t.concat_rows(&[bot, top]).unwrap();
                let c = t.slice_cols(c, 0, 5).unwrap();
                let w = t.constant(w.clone());
                let d = t.mul(c, w).unwrap();
                let d = t.reshape(d, &[20]).unwrap();
                let d = t.tanh(d);
                t.sum(d)
            },
        );
    }

    #[test]
    fn dropout_is_replayable_and_differentiable() {
        let x = Tensor::ones([4, 4]);
        let run = |seed| {
            let mut tape = Tape::new();
            let v = tape.leaf(x.clone(), true);
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let y = tape.dropout(v, 0.5, &mut r);
            let s = tape.sum(y);
            let g = tape.backward(s).unwrap();
            (tape.value(y).clone(), g.get(v).unwrap().clone())
        };
        let (y1, g1) = run(1);
        let (y2, g2) = run(1);
        assert_eq!(y1, y2);
        assert_eq!(g1, y1); // d(sum)/dx == keep mask, and x is all ones
        assert_eq!(g1, g2);
        assert!(y1.data().iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn fan_out_accumulates_once_per_use() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let y = tape.mul(x, x).unwrap();
        let z = tape.add(y, x).unwrap();
        let s = tape.sum(z);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[7.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros([2]), true);
        assert!(matches!(tape.backward(x), Err(Error::Shape(_))));
    }

    #[test]
    fn first_non_finite_node_blocks_backward() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]).unwrap(), true);
        let big = tape.scale(x, 1e300);
        let y = tape.scale(big, 1e10);
        let z = tape.sum(y);
        assert_eq!(tape.first_non_finite(), Some(y));
        assert!(matches!(tape.backward(z), Err(Error::Divergence(_))));

        let mut ok = Tape::new();
        let x = ok.leaf(Tensor::vector(vec![1.0]).unwrap(), true);
        let s = ok.sum(x);
        assert_eq!(ok.first_non_finite(), None);
        assert!(ok.backward(s).is_ok());
    }
}
