//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every primitive is a method on [`Tape`]. Calling one computes the result
//! eagerly, appends an entry to the tape and returns a [`Var`] handle. Entries
//! only ever reference earlier entries, so walking the tape backwards visits
//! every node after all of its consumers.

use std::collections::HashMap;

use super::tensor::{matmul_acc, matmul_at_acc, matmul_bt_acc, Tensor};
use super::NumericsError;

type Result<T> = std::result::Result<T, NumericsError>;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    Transpose(Var),
    Reshape(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows {
        x: Var,
        index: Vec<usize>,
    },
    MeanRows(Var),
    Sum(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Mse(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Ordered record of primitive applications. Single-threaded; build one per
/// forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every leaf that requires grad.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: HashMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(&v)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.remove(&v)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

fn mismatch(op: &'static str, left: &Tensor, right: &Tensor) -> NumericsError {
    NumericsError::ShapeMismatch {
        op,
        left: left.shape().to_vec(),
        right: right.shape().to_vec(),
    }
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
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

    fn push(&mut self, value: Tensor, op: Op, operands: &[Var]) -> Var {
        let requires_grad = operands.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
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

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (p, q) = ta.dims2()?;
        let (q2, r) = tb.dims2()?;
        if q != q2 {
            return Err(mismatch("matmul", ta, tb));
        }
        let mut out = vec![0.0; p * r];
        matmul_acc(ta.data(), tb.data(), &mut out, p, q, r);
        let value = Tensor::new(vec![p, r], out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    fn zip_same(&self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(op, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("add", a, b, |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("sub", a, b, |x, y| x - y)?;
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("mul", a, b, |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|x| x * factor);
        self.push(value, Op::Scale(a, factor), &[a])
    }

    /// Adds a length-`D` vector to every row of `x[..., D]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let d = tx.last_dim();
        if tb.len() != d {
            return Err(mismatch("add_bias", tx, tb));
        }
        let data = tx
            .data()
            .chunks(d)
            .flat_map(|row| row.iter().zip(tb.data()).map(|(a, b)| a + b))
            .collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(value, Op::AddBias(x, bias), &[x, bias]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = tx.dims2()?;
        let src = tx.data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let value = Tensor::new(vec![c, r], data)?;
        Ok(self.push(value, Op::Transpose(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// Columns `start..start + width` of a rank-2 tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = tx.dims2()?;
        if width == 0 || start + width > c {
            return Err(NumericsError::Slice {
                start,
                width,
                cols: c,
            });
        }
        let data = (0..r)
            .flat_map(|i| tx.row(i)[start..start + width].iter().copied())
            .collect();
        let value = Tensor::new(vec![r, width], data)?;
        Ok(self.push(value, Op::SliceCols { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(NumericsError::EmptyConcat)?;
        let (rows, _) = self.value(*first).dims2()?;
        let mut total = 0;
        for &p in parts {
            let tp = self.value(p);
            let (r, c) = tp.dims2()?;
            if r != rows {
                return Err(mismatch("concat_cols", self.value(*first), tp));
            }
            total += c;
        }
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let value = Tensor::new(vec![rows, total], data)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(NumericsError::EmptyConcat)?;
        let (_, cols) = self.value(*first).dims2()?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let tp = self.value(p);
            let (r, c) = tp.dims2()?;
            if c != cols {
                return Err(mismatch("concat_rows", self.value(*first), tp));
            }
            rows += r;
            data.extend_from_slice(tp.data());
        }
        let value = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Row `i` of the result is row `index[i]` of `x`. Indices may repeat.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = tx.dims2()?;
        if let Some(&bad) = index.iter().find(|&&i| i >= r) {
            return Err(NumericsError::IndexOutOfRange { index: bad, len: r });
        }
        let data = index.iter().flat_map(|&i| tx.row(i).iter().copied()).collect();
        let value = Tensor::new(vec![index.len(), c], data)?;
        Ok(self.push(
            value,
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
            &[x],
        ))
    }

    /// Mean over rows: `[s × D] -> [1 × D]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = tx.dims2()?;
        let mut data = vec![0.0; c];
        for i in 0..r {
            for (acc, v) in data.iter_mut().zip(tx.row(i)) {
                *acc += v;
            }
        }
        data.iter_mut().for_each(|v| *v /= r as f64);
        let value = Tensor::new(vec![1, c], data)?;
        Ok(self.push(value, Op::MeanRows(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum(x), &[x])
    }

    /// Standardizes over the last axis with population variance, then applies
    /// `gain * xhat + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let d = tx.last_dim();
        if tg.len() != d {
            return Err(mismatch("layer_norm", tx, tg));
        }
        if tb.len() != d {
            return Err(mismatch("layer_norm", tx, tb));
        }
        let rows = tx.len() / d;
        let mut xhat = Vec::with_capacity(tx.len());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(tx.len());
        for row in tx.data().chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(inv);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * inv;
                xhat.push(h);
                out.push(h * tg.data()[j] + tb.data()[j]);
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        ))
    }

    /// Exact GELU, `x * Phi(x)`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * std_normal_cdf(v));
        self.push(value, Op::Gelu(x), &[x])
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let tx = self.value(x);
        let shape = tx.shape();
        if axis >= shape.len() {
            return Err(NumericsError::Axis {
                axis,
                shape: shape.to_vec(),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = tx.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for j in 0..inner {
                let at = |k: usize| (o * len + k) * inner + j;
                let max = (0..len).map(|k| src[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for k in 0..len {
                    let e = (src[at(k)] - max).exp();
                    out[at(k)] = e;
                    total += e;
                }
                for k in 0..len {
                    out[at(k)] /= total;
                }
            }
        }
        let value = Tensor::new(shape.to_vec(), out)?;
        Ok(self.push(value, Op::Softmax { x, outer, len, inner }, &[x]))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        let (b, k) = tl.dims2()?;
        if labels.len() != b {
            return Err(NumericsError::LabelCount {
                expected: b,
                got: labels.len(),
            });
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= k) {
            return Err(NumericsError::Label {
                index,
                label,
                classes: k,
            });
        }
        let mut probs = Vec::with_capacity(b * k);
        let mut loss = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            let row = tl.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let log_z = max + total.ln();
            loss += log_z - row[label];
            probs.extend(row.iter().map(|v| (v - log_z).exp()));
        }
        let value = Tensor::scalar(loss / b as f64);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Mean of squared elementwise differences.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("mse", ta, tb));
        }
        let total: f64 = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let value = Tensor::scalar(total / ta.len() as f64);
        Ok(self.push(value, Op::Mse(a, b), &[a, b]))
    }

    /// Propagates d(loss)/d(leaf) to every leaf that requires grad and
    /// consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes;
        if !nodes[loss.0].value.is_scalar() {
            return Err(NumericsError::NonScalarLoss {
                shape: nodes[loss.0].value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                if matches!(node.op, Op::Leaf) {
                    out.grads.insert(Var(i), Tensor::zeros(node.value.shape()));
                }
                continue;
            };
            let mut acc = Accumulator {
                nodes: &nodes,
                grads: &mut grads,
            };
            match &node.op {
                Op::Leaf => {
                    let t = Tensor::new(node.value.shape().to_vec(), g)?;
                    out.grads.insert(Var(i), t);
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                    let (p, q) = ta.dims2()?;
                    let r = tb.last_dim();
                    acc.with(*a, |ga| matmul_bt_acc(&g, tb.data(), ga, p, q, r));
                    acc.with(*b, |gb| matmul_at_acc(ta.data(), &g, gb, p, q, r));
                }
                Op::Add(a, b) => {
                    acc.add(*a, &g, 1.0);
                    acc.add(*b, &g, 1.0);
                }
                Op::Sub(a, b) => {
                    acc.add(*a, &g, 1.0);
                    acc.add(*b, &g, -1.0);
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                    acc.with(*a, |ga| {
                        for ((o, gv), bv) in ga.iter_mut().zip(&g).zip(tb.data()) {
                            *o += gv * bv;
                        }
                    });
                    acc.with(*b, |gb| {
                        for ((o, gv), av) in gb.iter_mut().zip(&g).zip(ta.data()) {
                            *o += gv * av;
                        }
                    });
                }
                Op::Scale(a, f) => acc.add(*a, &g, *f),
                Op::AddBias(x, bias) => {
                    acc.add(*x, &g, 1.0);
                    let d = nodes[bias.0].value.len();
                    acc.with(*bias, |gb| {
                        for row in g.chunks(d) {
                            for (o, v) in gb.iter_mut().zip(row) {
                                *o += v;
                            }
                        }
                    });
                }
                Op::Transpose(x) => {
                    let (r, c) = nodes[x.0].value.dims2()?;
                    acc.with(*x, |gx| {
                        for i in 0..r {
                            for j in 0..c {
                                gx[i * c + j] += g[j * r + i];
                            }
                        }
                    });
                }
                Op::Reshape(x) => acc.add(*x, &g, 1.0),
                Op::SliceCols { x, start } => {
                    let (r, c) = nodes[x.0].value.dims2()?;
                    let w = node.value.last_dim();
                    acc.with(*x, |gx| {
                        for i in 0..r {
                            for j in 0..w {
                                gx[i * c + start + j] += g[i * w + j];
                            }
                        }
                    });
                }
                Op::ConcatCols(parts) => {
                    let total = node.value.last_dim();
                    let rows = node.value.len() / total;
                    let mut offset = 0;
                    for p in parts {
                        let w = nodes[p.0].value.last_dim();
                        acc.with(*p, |gp| {
                            for i in 0..rows {
                                for j in 0..w {
                                    gp[i * w + j] += g[i * total + offset + j];
                                }
                            }
                        });
                        offset += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let n = nodes[p.0].value.len();
                        acc.add(*p, &g[offset..offset + n], 1.0);
                        offset += n;
                    }
                }
                Op::GatherRows { x, index } => {
                    let c = node.value.last_dim();
                    acc.with(*x, |gx| {
                        for (row, &src) in index.iter().enumerate() {
                            for j in 0..c {
                                gx[src * c + j] += g[row * c + j];
                            }
                        }
                    });
                }
                Op::MeanRows(x) => {
                    let (r, c) = nodes[x.0].value.dims2()?;
                    let inv = 1.0 / r as f64;
                    acc.with(*x, |gx| {
                        for i in 0..r {
                            for j in 0..c {
                                gx[i * c + j] += g[j] * inv;
                            }
                        }
                    });
                }
                Op::Sum(x) => {
                    let g0 = g[0];
                    acc.with(*x, |gx| gx.iter_mut().for_each(|o| *o += g0));
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let tg = &nodes[gain.0].value;
                    let d = tg.len();
                    acc.with(*gain, |gg| {
                        for (row_g, row_h) in g.chunks(d).zip(xhat.chunks(d)) {
                            for j in 0..d {
                                gg[j] += row_g[j] * row_h[j];
                            }
                        }
                    });
                    acc.with(*bias, |gb| {
                        for row_g in g.chunks(d) {
                            for j in 0..d {
                                gb[j] += row_g[j];
                            }
                        }
                    });
                    acc.with(*x, |gx| {
                        let mut dh = vec![0.0; d];
                        for (r, ((row_g, row_h), out)) in
                            g.chunks(d).zip(xhat.chunks(d)).zip(gx.chunks_mut(d)).enumerate()
                        {
                            for j in 0..d {
                                dh[j] = row_g[j] * tg.data()[j];
                            }
                            let mean_dh = dh.iter().sum::<f64>() / d as f64;
                            let mean_dh_h =
                                dh.iter().zip(row_h).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                            for j in 0..d {
                                out[j] += inv_std[r] * (dh[j] - mean_dh - row_h[j] * mean_dh_h);
                            }
                        }
                    });
                }
                Op::Gelu(x) => {
                    let tx = &nodes[x.0].value;
                    acc.with(*x, |gx| {
                        for ((o, gv), &v) in gx.iter_mut().zip(&g).zip(tx.data()) {
                            *o += gv * (std_normal_cdf(v) + v * std_normal_pdf(v));
                        }
                    });
                }
                Op::Softmax { x, outer, len, inner } => {
                    let y = node.value.data();
                    let (outer, len, inner) = (*outer, *len, *inner);
                    acc.with(*x, |gx| {
                        for o in 0..outer {
                            for j in 0..inner {
                                let at = |k: usize| (o * len + k) * inner + j;
                                let dot: f64 = (0..len).map(|k| g[at(k)] * y[at(k)]).sum();
                                for k in 0..len {
                                    gx[at(k)] += y[at(k)] * (g[at(k)] - dot);
                                }
                            }
                        }
                    });
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let k = nodes[logits.0].value.last_dim();
                    let scale = g[0] / labels.len() as f64;
                    acc.with(*logits, |gl| {
                        for (i, &label) in labels.iter().enumerate() {
                            for j in 0..k {
                                let onehot = if j == label { 1.0 } else { 0.0 };
                                gl[i * k + j] += scale * (probs[i * k + j] - onehot);
                            }
                        }
                    });
                }
                Op::Mse(a, b) => {
                    let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                    let scale = 2.0 * g[0] / ta.len() as f64;
                    let diff: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(x, y)| scale * (x - y)).collect();
                    acc.add(*a, &diff, 1.0);
                    acc.add(*b, &diff, -1.0);
                }
            }
        }
        // Leaves created after the loss never influence it.
        for (i, node) in nodes.iter().enumerate().skip(loss.0 + 1) {
            if node.requires_grad && matches!(node.op, Op::Leaf) {
                out.grads.insert(Var(i), Tensor::zeros(node.value.shape()));
            }
        }
        Ok(out)
    }
}

struct Accumulator<'a> {
    nodes: &'a [Node],
    grads: &'a mut [Option<Vec<f64>>],
}

impl Accumulator<'_> {
    fn with(&mut self, v: Var, f: impl FnOnce(&mut [f64])) {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        let slot = self.grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]);
        f(slot);
    }

    fn add(&mut self, v: Var, g: &[f64], factor: f64) {
        self.with(v, |slot| {
            for (o, gv) in slot.iter_mut().zip(g) {
                *o += factor * gv;
            }
        });
    }
}
