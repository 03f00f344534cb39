use std::collections::{BTreeMap, HashMap};

use rand::Rng;

use super::linalg::gemm;
use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`] tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Splits a shape around `axis` into (outer, axis length, inner) extents.
fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulNT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// `[n, d] + [d]` broadcast over rows.
    AddRow(Var, Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var, axis: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Dropout { x: Var, mask: Vec<f64> },
    GatherRows { table: Var, ids: Vec<usize> },
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only computation tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Gradients produced by [`Graph::backward`] for every leaf that requires them.
#[derive(Debug, Default)]
pub struct Gradients {
    leaves: HashMap<usize, Tensor>,
    params: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn wrt(&self, var: Var) -> Option<&Tensor> {
        self.leaves.get(&var.0)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(id, t)| (*id, t))
    }

    pub fn into_params(self) -> BTreeMap<ParamId, Tensor> {
        self.params
    }
}

impl Graph {
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
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Adds an input tensor; its `requires_grad` flag decides whether
    /// [`Gradients::wrt`] reports a gradient for it.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let requires_grad = tensor.requires_grad();
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    /// Leaf for a stored parameter. Repeated calls return the same node, so
    /// a parameter used many times accumulates one gradient.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.leaf(store.get(id).clone().with_requires_grad(true));
        self.params.insert(id, v);
        v
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let shape = self.shape(v);
        match shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::shape(op, shape, &[0, 0])),
        }
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ` for `a: [m, k]`, `b: [n, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul_nt")?;
        let (n, k2) = self.dims2(b, "matmul_nt")?;
        if k != k2 {
            return Err(Error::shape("matmul_nt", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), true, &mut out, false);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMulNT(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a, "transpose")?;
        let src = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        Ok(self.push(Tensor::from_parts(vec![c, r], out), Op::Transpose(a), &[a]))
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::from_parts(x.shape().to_vec(), data)
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let x = self.value(a);
        Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let t = self.zip_with(a, b, |p, q| p + q);
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let t = self.zip_with(a, b, |p, q| p - q);
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let t = self.zip_with(a, b, |p, q| p * q);
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let t = self.map(a, |v| v * factor);
        self.push(t, Op::Scale(a, factor), &[a])
    }

    /// Adds a length-`d` vector to every row of an `[n, d]` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (n, d) = self.dims2(a, "add_row")?;
        if self.value(row).numel() != d {
            return Err(Error::shape("add_row", self.shape(a), self.shape(row)));
        }
        let r = self.value(row).data();
        let mut out = self.value(a).data().to_vec();
        for chunk in out.chunks_exact_mut(d) {
            for (o, &b) in chunk.iter_mut().zip(r) {
                *o += b;
            }
        }
        Ok(self.push(Tensor::from_parts(vec![n, d], out), Op::AddRow(a, row), &[a, row]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.map(a, |v| v.max(0.0));
        self.push(t, Op::Relu(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.map(a, f64::tanh);
        self.push(t, Op::Tanh(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.map(a, |v| 1.0 / (1.0 + (-v).exp()));
        self.push(t, Op::Sigmoid(a), &[a])
    }

    fn check_axis(&self, x: Var, axis: usize, op: &'static str) -> Result<()> {
        if axis >= self.shape(x).len() {
            return Err(Error::shape(op, self.shape(x), &[axis]));
        }
        Ok(())
    }

    /// Softmax along `axis`, stabilized by subtracting each slice's maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.masked_softmax(x, axis, None)
    }

    /// Softmax where entries with `keep[i] == false` get probability zero.
    /// A slice with every entry masked yields all zeros.
    pub fn masked_softmax(&mut self, x: Var, axis: usize, keep: Option<&[bool]>) -> Result<Var> {
        self.check_axis(x, axis, "softmax")?;
        let value = self.value(x);
        if let Some(keep) = keep {
            if keep.len() != value.numel() {
                return Err(Error::shape("softmax mask", value.shape(), &[keep.len()]));
            }
        }
        let (outer, n, inner) = axis_extents(value.shape(), axis);
        let src = value.data();
        let mut out = vec![0.0; src.len()];
        let kept = |idx: usize| keep.is_none_or(|k| k[idx]);
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let max = (0..n)
                    .filter(|&j| kept(at(j)))
                    .map(|j| src[at(j)])
                    .fold(f64::NEG_INFINITY, f64::max);
                if max == f64::NEG_INFINITY {
                    continue;
                }
                let mut total = 0.0;
                for j in 0..n {
                    if kept(at(j)) {
                        let e = (src[at(j)] - max).exp();
                        out[at(j)] = e;
                        total += e;
                    }
                }
                for j in 0..n {
                    out[at(j)] /= total;
                }
            }
        }
        let t = Tensor::from_parts(value.shape().to_vec(), out);
        Ok(self.push(t, Op::Softmax { x, axis }, &[x]))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis, "log_softmax")?;
        let value = self.value(x);
        let (outer, n, inner) = axis_extents(value.shape(), axis);
        let src = value.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let max = (0..n).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + (0..n).map(|j| (src[at(j)] - max).exp()).sum::<f64>().ln();
                for j in 0..n {
                    out[at(j)] = src[at(j)] - lse;
                }
            }
        }
        let t = Tensor::from_parts(value.shape().to_vec(), out);
        Ok(self.push(t, Op::LogSoftmax { x, axis }, &[x]))
    }

    /// Standardizes each vector along the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Param(format!("layer norm eps must be positive, got {eps}")));
        }
        let shape = self.shape(x).to_vec();
        let d = *shape.last().expect("nonempty shape");
        for p in [gain, bias] {
            if self.value(p).numel() != d {
                return Err(Error::shape("layer_norm", &shape, self.shape(p)));
            }
        }
        let src = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = src.len() / d;
        let mut xhat = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let v = &src[r * d..(r + 1) * d];
            let mean = v.iter().sum::<f64>() / d as f64;
            let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let h = (v[j] - mean) * inv;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::from_parts(shape, out);
        Ok(self.push(t, Op::LayerNorm { x, gain, bias, xhat, inv_std }, &[x, gain, bias]))
    }

    /// Inverted dropout: in training mode each element is zeroed with
    /// probability `p` and survivors are scaled by `1 / (1 - p)`. Identity
    /// otherwise.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, training: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Param(format!("dropout probability must be in [0, 1), got {p}")));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let n = self.value(x).numel();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let value = self.value(x);
        let data = value.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let t = Tensor::from_parts(value.shape().to_vec(), data);
        Ok(self.push(t, Op::Dropout { x, mask }, &[x]))
    }

    /// Selects rows of a `[vocab, d]` table.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, d) = self.dims2(table, "gather_rows")?;
        if ids.is_empty() {
            return Err(Error::Input("gather_rows with no ids".into()));
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(Error::Vocab { id: id as u32, size: rows });
            }
            out.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let t = Tensor::from_parts(vec![ids.len(), d], out);
        Ok(self.push(t, Op::GatherRows { table, ids: ids.to_vec() }, &[table]))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, d) = self.dims2(x, "slice_cols")?;
        if len == 0 || start + len > d {
            return Err(Error::shape("slice_cols", self.shape(x), &[start, len]));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * len);
        for r in 0..n {
            out.extend_from_slice(&src[r * d + start..r * d + start + len]);
        }
        let t = Tensor::from_parts(vec![n, len], out);
        Ok(self.push(t, Op::SliceCols { x, start }, &[x]))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, d) = self.dims2(x, "slice_rows")?;
        if len == 0 || start + len > n {
            return Err(Error::shape("slice_rows", self.shape(x), &[start, len]));
        }
        let out = self.value(x).data()[start * d..(start + len) * d].to_vec();
        let t = Tensor::from_parts(vec![len, d], out);
        Ok(self.push(t, Op::SliceRows { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Input("concat of nothing".into()))?;
        let (n, _) = self.dims2(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pn, pd) = self.dims2(p, "concat_cols")?;
            if pn != n {
                return Err(Error::shape("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(pd);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for r in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let t = Tensor::from_parts(vec![n, total], out);
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Input("concat of nothing".into()))?;
        let (_, d) = self.dims2(first, "concat_rows")?;
        let mut rows = 0;
        for &p in parts {
            let (pn, pd) = self.dims2(p, "concat_rows")?;
            if pd != d {
                return Err(Error::shape("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += pn;
        }
        let mut out = Vec::with_capacity(rows * d);
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        let t = Tensor::from_parts(vec![rows, d], out);
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Reverse-mode pass from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_value = self.value(loss);
        if loss_value.numel() != 1 {
            return Err(Error::shape("backward", loss_value.shape(), &[1]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(upstream) = grads[idx].take() else { continue };
            if let Op::Leaf = node.op {
                grads[idx] = Some(upstream);
                continue;
            }
            self.propagate(node, &upstream, &mut grads);
        }

        let mut out = Gradients::default();
        for (idx, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                let data = grads[idx].take().unwrap_or_else(|| vec![0.0; node.value.numel()]);
                out.leaves.insert(idx, Tensor::from_parts(node.value.shape().to_vec(), data));
            }
        }
        for (&id, &var) in &self.params {
            if let Some(g) = out.leaves.get(&var.0) {
                out.params.insert(id, g.clone());
            }
        }
        Ok(out)
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, g: Vec<f64>| accumulate(grads, v, g);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().expect("rank 2");
                let n = node.value.shape()[1];
                if self.wants(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, dy, false, self.value(*b).data(), true, &mut da, false);
                    acc(*a, da);
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, self.value(*a).data(), true, dy, false, &mut db, false);
                    acc(*b, db);
                }
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = self.value(*a).dims2().expect("rank 2");
                let n = node.value.shape()[1];
                if self.wants(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, dy, false, self.value(*b).data(), false, &mut da, false);
                    acc(*a, da);
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; n * k];
                    gemm(n, m, k, dy, true, self.value(*a).data(), false, &mut db, false);
                    acc(*b, db);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = self.value(*a).dims2().expect("rank 2");
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        da[i * c + j] = dy[j * r + i];
                    }
                }
                acc(*a, da);
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    acc(*a, dy.to_vec());
                }
                if self.wants(*b) {
                    acc(*b, dy.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    acc(*a, dy.to_vec());
                }
                if self.wants(*b) {
                    acc(*b, dy.iter().map(|g| -g).collect());
                }
            }
            Op::Mul(a, b) => {
                let (x, y) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    acc(*a, dy.iter().zip(y).map(|(g, v)| g * v).collect());
                }
                if self.wants(*b) {
                    acc(*b, dy.iter().zip(x).map(|(g, v)| g * v).collect());
                }
            }
            Op::Scale(a, f) => acc(*a, dy.iter().map(|g| g * f).collect()),
            Op::AddRow(a, row) => {
                if self.wants(*a) {
                    acc(*a, dy.to_vec());
                }
                if self.wants(*row) {
                    let d = self.value(*row).numel();
                    let mut dr = vec![0.0; d];
                    for chunk in dy.chunks_exact(d) {
                        for (o, g) in dr.iter_mut().zip(chunk) {
                            *o += g;
                        }
                    }
                    acc(*row, dr);
                }
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                acc(*a, dy.iter().zip(x).map(|(g, &v)| if v > 0.0 { *g } else { 0.0 }).collect());
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                acc(*a, dy.iter().zip(y).map(|(g, t)| g * (1.0 - t * t)).collect());
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                acc(*a, dy.iter().zip(y).map(|(g, s)| g * s * (1.0 - s)).collect());
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, n, inner) = axis_extents(node.value.shape(), *axis);
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * n + j) * inner + i;
                        let dot: f64 = (0..n).map(|j| dy[at(j)] * y[at(j)]).sum();
                        for j in 0..n {
                            dx[at(j)] = y[at(j)] * (dy[at(j)] - dot);
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::LogSoftmax { x, axis } => {
                let y = node.value.data();
                let (outer, n, inner) = axis_extents(node.value.shape(), *axis);
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * n + j) * inner + i;
                        let total: f64 = (0..n).map(|j| dy[at(j)]).sum();
                        for j in 0..n {
                            dx[at(j)] = dy[at(j)] - y[at(j)].exp() * total;
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let g = self.value(*gain).data();
                let d = g.len();
                if self.wants(*x) {
                    let mut dx = vec![0.0; xhat.len()];
                    for (r, &inv) in inv_std.iter().enumerate() {
                        let span = r * d..(r + 1) * d;
                        let dyr = &dy[span.clone()];
                        let xh = &xhat[span.clone()];
                        let dxhat: Vec<f64> = dyr.iter().zip(g).map(|(a, b)| a * b).collect();
                        let sum_dxhat: f64 = dxhat.iter().sum();
                        let sum_dxhat_xhat: f64 = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            dx[r * d + j] = inv / d as f64
                                * (d as f64 * dxhat[j] - sum_dxhat - xh[j] * sum_dxhat_xhat);
                        }
                    }
                    acc(*x, dx);
                }
                if self.wants(*gain) {
                    let mut dg = vec![0.0; d];
                    for (chunk, xh) in dy.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            dg[j] += chunk[j] * xh[j];
                        }
                    }
                    acc(*gain, dg);
                }
                if self.wants(*bias) {
                    let mut db = vec![0.0; d];
                    for chunk in dy.chunks_exact(d) {
                        for (o, v) in db.iter_mut().zip(chunk) {
                            *o += v;
                        }
                    }
                    acc(*bias, db);
                }
            }
            Op::Dropout { x, mask } => acc(*x, dy.iter().zip(mask).map(|(g, m)| g * m).collect()),
            Op::GatherRows { table, ids } => {
                let t = self.value(*table);
                let d = t.shape()[1];
                let mut dt = vec![0.0; t.numel()];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += dy[r * d + j];
                    }
                }
                acc(*table, dt);
            }
            Op::SliceCols { x, start } => {
                let (n, d) = self.value(*x).dims2().expect("rank 2");
                let len = node.value.shape()[1];
                let mut dx = vec![0.0; n * d];
                for r in 0..n {
                    dx[r * d + start..r * d + start + len].copy_from_slice(&dy[r * len..(r + 1) * len]);
                }
                acc(*x, dx);
            }
            Op::SliceRows { x, start } => {
                let (n, d) = self.value(*x).dims2().expect("rank 2");
                let mut dx = vec![0.0; n * d];
                dx[start * d..start * d + dy.len()].copy_from_slice(dy);
                acc(*x, dx);
            }
            Op::ConcatCols(parts) => {
                let n = node.value.shape()[0];
                let total = node.value.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).shape()[1];
                    if self.wants(p) {
                        let mut dp = Vec::with_capacity(n * w);
                        for r in 0..n {
                            dp.extend_from_slice(&dy[r * total + offset..r * total + offset + w]);
                        }
                        acc(p, dp);
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    if self.wants(p) {
                        acc(p, dy[offset..offset + len].to_vec());
                    }
                    offset += len;
                }
            }
            Op::Sum(a) => {
                let n = self.value(*a).numel();
                acc(*a, vec![dy[0]; n]);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.iter_mut().zip(&g) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        t(shape, &(0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>())
    }

    #[test]
    fn matmul_examples() {
        let mut g = Graph::new();
        let id = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = g.constant(t(&[2, 2], &[2.0, 3.0, 5.0, 7.0]));
        let p = g.matmul(id, m).unwrap();
        assert_eq!(g.value(p).data(), &[2.0, 3.0, 5.0, 7.0]);

        let a = g.constant(t(&[1, 2], &[1.0, 2.0]));
        let b = g.constant(t(&[2, 1], &[3.0, 4.0]));
        let p = g.matmul(a, b).unwrap();
        assert_eq!(g.value(p).data(), &[11.0]);

        let z = g.constant(Tensor::zeros(&[1, 1]));
        let any = g.constant(t(&[1, 3], &[4.0, -5.0, 6.0]));
        let p = g.matmul(z, any).unwrap();
        assert!(g.value(p).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[0.0, 0.0]));
        let y = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);

        let x = g.constant(t(&[2], &[1000.0, 1000.0]));
        let y = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);

        let x = g.constant(t(&[2], &[0.0, 3f64.ln()]));
        let y = g.softmax(x, 0).unwrap();
        assert!((g.value(y).data()[0] - 0.25).abs() < 1e-15);
        assert!((g.value(y).data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_over_middle_axis() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::new();
        let x = g.constant(random(&[2, 3, 4], &mut rng));
        let y = g.softmax(x, 1).unwrap();
        let v = g.value(y).data();
        for o in 0..2 {
            for i in 0..4 {
                let s: f64 = (0..3).map(|j| v[(o * 3 + j) * 4 + i]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fully_masked_softmax_row_is_zero() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = g.masked_softmax(x, 1, Some(&[false, false, true, false])).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::new();
        let ones = g.constant(Tensor::full(&[2], 1.0));
        let zeros = g.constant(Tensor::zeros(&[2]));

        let c = g.constant(t(&[1, 2], &[4.0, 4.0]));
        let y = g.layer_norm(c, ones, zeros, 1e-6).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0]);

        let x = g.constant(t(&[1, 2], &[1.0, 3.0]));
        let y = g.layer_norm(x, ones, zeros, 1e-12).unwrap();
        for (got, want) in g.value(y).data().iter().zip([-1.0, 1.0]) {
            assert!((got - want).abs() < 1e-9);
        }

        let bias = g.constant(t(&[2], &[0.25, -2.0]));
        let gain0 = g.constant(Tensor::zeros(&[2]));
        let x = g.constant(t(&[3, 2], &[1.0, 9.0, -4.0, 2.0, 0.5, 0.5]));
        let y = g.layer_norm(x, gain0, bias, 1e-6).unwrap();
        for row in g.value(y).data().chunks(2) {
            assert_eq!(row, &[0.25, -2.0]);
        }
    }

    #[test]
    fn dropout_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let y = g.dropout(x, 0.3, false, &mut rng).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0]);
        let y = g.dropout(x, 0.0, true, &mut rng).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0]);
        assert!(matches!(g.dropout(x, 1.0, true, &mut rng), Err(Error::Param(_))));
    }

    #[test]
    fn dropout_mean_concentrates() {
        let n = 100_000;
        let p = 0.3;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[n], 1.0));
        let y = g.dropout(x, p, true, &mut rng).unwrap();
        let mean = g.value(y).data().iter().sum::<f64>() / n as f64;
        // each element is 0 or 1/(1-p): variance p / (1-p)
        let sigma = (p / (1.0 - p) / n as f64).sqrt();
        assert!((mean - 1.0).abs() < 3.0 * sigma, "mean {mean}, sigma {sigma}");
    }

    #[test]
    fn backward_examples() {
        let mut g = Graph::new();
        let w = g.leaf(t(&[3], &[0.5, -1.0, 2.0]).with_requires_grad(true));
        let s = g.sum(w);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(w).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::new();
        let w = g.leaf(t(&[3], &[0.5, -1.0, 2.0]).with_requires_grad(true));
        let sq = g.mul(w, w).unwrap();
        let s = g.sum(sq);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(w).unwrap().data(), &[1.0, -2.0, 4.0]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut g = Graph::new();
        let w = g.leaf(Tensor::zeros(&[2]).with_requires_grad(true));
        assert!(matches!(g.backward(w), Err(Error::Shape { .. })));
    }

    #[test]
    fn diamond_accumulates_both_paths() {
        // y = sum(tanh(w) * w): dy/dw = (1 - tanh²w) w + tanh w
        let data = [0.3, -0.7];
        let mut g = Graph::new();
        let w = g.leaf(t(&[2], &data).with_requires_grad(true));
        let th = g.tanh(w);
        let prod = g.mul(th, w).unwrap();
        let y = g.sum(prod);
        let grads = g.backward(y).unwrap();
        for (got, &x) in grads.wrt(w).unwrap().data().iter().zip(&data) {
            let want = (1.0 - x.tanh().powi(2)) * x + x.tanh();
            assert!((got - want).abs() < 1e-14);
        }
    }

    #[test]
    fn repeated_param_lookup_shares_node() {
        let mut store = ParamStore::new();
        let id = store.add("w", t(&[2], &[1.0, 2.0]));
        let mut g = Graph::new();
        let a = g.param(&store, id);
        let b = g.param(&store, id);
        assert_eq!(a, b);
        let s = g.add(a, b).unwrap();
        let y = g.sum(s);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.param(id).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        type Build = fn(&mut Graph, &[Var]) -> Result<Var>;
        let cases: Vec<(&str, Vec<Vec<usize>>, Build)> = vec![
            ("matmul", vec![vec![3, 4], vec![4, 2]], |g, v| g.matmul(v[0], v[1])),
            ("matmul_nt", vec![vec![3, 4], vec![5, 4]], |g, v| g.matmul_nt(v[0], v[1])),
            ("transpose", vec![vec![3, 4]], |g, v| g.transpose(v[0])),
            ("add", vec![vec![2, 3], vec![2, 3]], |g, v| g.add(v[0], v[1])),
            ("sub", vec![vec![2, 3], vec![2, 3]], |g, v| g.sub(v[0], v[1])),
            ("mul", vec![vec![2, 3], vec![2, 3]], |g, v| g.mul(v[0], v[1])),
            ("scale", vec![vec![5]], |g, v| Ok(g.scale(v[0], -1.7))),
            ("add_row", vec![vec![3, 4], vec![4]], |g, v| g.add_row(v[0], v[1])),
            ("relu", vec![vec![3, 4]], |g, v| Ok(g.relu(v[0]))),
            ("tanh", vec![vec![3, 4]], |g, v| Ok(g.tanh(v[0]))),
            ("sigmoid", vec![vec![3, 4]], |g, v| Ok(g.sigmoid(v[0]))),
            ("softmax_last", vec![vec![3, 4]], |g, v| g.softmax(v[0], 1)),
            ("softmax_first", vec![vec![3, 4]], |g, v| g.softmax(v[0], 0)),
            ("masked_softmax", vec![vec![2, 3]], |g, v| {
                g.masked_softmax(v[0], 1, Some(&[true, false, true, false, false, false]))
            }),
            ("log_softmax", vec![vec![2, 2, 3]], |g, v| g.log_softmax(v[0], 2)),
            ("layer_norm", vec![vec![3, 4], vec![4], vec![4]], |g, v| {
                g.layer_norm(v[0], v[1], v[2], 1e-6)
            }),
            ("gather_rows", vec![vec![4, 3]], |g, v| g.gather_rows(v[0], &[2, 0, 2, 3])),
            ("slice_cols", vec![vec![3, 5]], |g, v| g.slice_cols(v[0], 1, 3)),
            ("slice_rows", vec![vec![4, 2]], |g, v| g.slice_rows(v[0], 1, 2)),
            ("concat_cols", vec![vec![2, 2], vec![2, 3]], |g, v| g.concat_cols(v)),
            ("concat_rows", vec![vec![2, 3], vec![1, 3]], |g, v| g.concat_rows(v)),
            ("sum", vec![vec![2, 3]], |g, v| Ok(g.sum(v[0]))),
            ("mean", vec![vec![2, 3]], |g, v| Ok(g.mean(v[0]))),
        ];
        for (name, shapes, build) in cases {
            let inputs: Vec<Tensor> = shapes.iter().map(|s| random(s, &mut rng)).collect();
            // random projection so every output element carries a distinct weight
            let out_weights = {
                let mut g = Graph::new();
                let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
                let out = build(&mut g, &vars).unwrap();
                random(g.shape(out), &mut rng)
            };
            let report = check_gradients(&inputs, 1e-5, |g, vars| {
                let out = build(g, vars)?;
                let w = g.constant(out_weights.clone());
                let prod = g.mul(out, w)?;
                Ok(g.sum(prod))
            })
            .unwrap();
            assert!(
                report.max_rel_error < 1e-4,
                "{name}: relative error {}",
                report.max_rel_error
            );
        }
    }

    #[test]
    fn dropout_gradient_uses_saved_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(&[50], 2.0).with_requires_grad(true));
        let y = g.dropout(x, 0.5, true, &mut rng).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        for (gx, yv) in grads.wrt(x).unwrap().data().iter().zip(g.value(y).data()) {
            assert_eq!(*gx, yv / 2.0);
        }
    }
}
