//! Reverse-mode automatic differentiation over a recorded op graph.
//!
//! A [`Graph`] records primitive ops in execution order; node values are
//! computed eagerly on recording. [`Graph::backward`] walks the recording
//! in reverse and returns gradients for every parameter leaf, keyed by
//! parameter name. Recording order is the topological order by
//! construction: an op may only reference nodes recorded before it.
//!
//! The op set is the minimum needed to express the streaming transformer:
//! matrix product, elementwise arithmetic, softmax, layer norm, GELU,
//! row gather / column slice / column concat (multi-head plumbing), and
//! cross-entropy against a class index.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Reference to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    /// Constant input; receives no gradient.
    Leaf,
    /// Differentiable leaf bound to a named parameter.
    Param(String),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    /// Elementwise sum of two same-shape tensors.
    Add(NodeId, NodeId),
    /// `[n x d]` plus a rank-1 `[d]` added to every row.
    AddRow(NodeId, NodeId),
    /// Elementwise (Hadamard) product.
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Softmax(NodeId, usize),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: f64,
    },
    Gelu(NodeId),
    GatherRows(NodeId, Vec<usize>),
    SliceCols {
        input: NodeId,
        start: usize,
        end: usize,
    },
    ConcatCols(Vec<NodeId>),
    SumAll(NodeId),
    CrossEntropy {
        logits: NodeId,
        label: usize,
    },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// An append-only recording of ops with eagerly computed values.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    /// Records a constant input.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value)
    }

    /// Records a named differentiable parameter leaf.
    pub fn param(&mut self, name: &str, value: Tensor) -> NodeId {
        self.push(Op::Param(name.to_string()), value)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::shapes("matmul", ta.shape(), tb.shape()));
        }
        let value = matmul(ta, tb);
        Ok(self.push(Op::MatMul(a, b), value))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.value(a);
        if t.rank() != 2 {
            return Err(Error::shapes("transpose", t.shape(), &[]));
        }
        let value = transpose(t);
        Ok(self.push(Op::Transpose(a), value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shapes("add", ta.shape(), tb.shape()));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(Op::Add(a, b), value))
    }

    /// Adds a rank-1 `[d]` to every row of `[n x d]`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (ta, tr) = (self.value(a), self.value(row));
        if ta.rank() != 2 || tr.rank() != 1 || ta.cols() != tr.cols() {
            return Err(Error::shapes("add_row", ta.shape(), tr.shape()));
        }
        let w = ta.cols();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + tr.data()[i % w])
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(Op::AddRow(a, row), value))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shapes("mul", ta.shape(), tb.shape()));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(Op::Mul(a, b), value))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x * c).collect();
        let value = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        self.push(Op::Scale(a, c), value)
    }

    /// Softmax along `axis`; each slice sums to one, stable under large inputs.
    pub fn softmax(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let t = self.value(a);
        if t.rank() > 2 || axis >= t.rank() {
            return Err(Error::InvalidArgument(format!(
                "softmax axis {axis} out of range for shape {:?}",
                t.shape()
            )));
        }
        let value = softmax(t, axis);
        Ok(self.push(Op::Softmax(a, axis), value))
    }

    /// Per last-axis slice: `(x - mean)/sqrt(var + eps) * gain + bias`.
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        if tx.rank() > 2 {
            return Err(Error::shapes("layer_norm", tx.shape(), &[]));
        }
        let d = tx.cols();
        if tg.rank() != 1 || tg.cols() != d {
            return Err(Error::shapes("layer_norm gain", tx.shape(), tg.shape()));
        }
        if tb.rank() != 1 || tb.cols() != d {
            return Err(Error::shapes("layer_norm bias", tx.shape(), tb.shape()));
        }
        let value = layer_norm(tx, tg, tb, eps);
        Ok(self.push(Op::LayerNorm { x, gain, bias, eps }, value))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| gelu(x)).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(Op::Gelu(a), value)
    }

    /// Copies the given rows (repeats allowed) into a new matrix.
    pub fn gather_rows(&mut self, a: NodeId, indices: &[usize]) -> Result<NodeId> {
        let t = self.value(a);
        if t.rank() != 2 {
            return Err(Error::shapes("gather_rows", t.shape(), &[]));
        }
        if indices.is_empty() {
            return Err(Error::Empty("gather_rows indices"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= t.rows()) {
            return Err(Error::InvalidArgument(format!(
                "gather_rows index {bad} out of {} rows",
                t.rows()
            )));
        }
        let mut data = Vec::with_capacity(indices.len() * t.cols());
        for &i in indices {
            data.extend_from_slice(t.row(i));
        }
        let value = Tensor::new(vec![indices.len(), t.cols()], data)?;
        Ok(self.push(Op::GatherRows(a, indices.to_vec()), value))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let t = self.value(a);
        if t.rank() != 2 || start >= end || end > t.cols() {
            return Err(Error::InvalidArgument(format!(
                "slice_cols {start}..{end} of shape {:?}",
                t.shape()
            )));
        }
        let mut data = Vec::with_capacity(t.rows() * (end - start));
        for r in 0..t.rows() {
            data.extend_from_slice(&t.row(r)[start..end]);
        }
        let value = Tensor::new(vec![t.rows(), end - start], data)?;
        Ok(self.push(
            Op::SliceCols {
                input: a,
                start,
                end,
            },
            value,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Empty("concat_cols parts"));
        }
        let rows = self.value(parts[0]).rows();
        if parts.iter().any(|&p| {
            let t = self.value(p);
            t.rank() != 2 || t.rows() != rows
        }) {
            return Err(Error::InvalidArgument(
                "concat_cols: row counts differ".into(),
            ));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let value = Tensor::new(vec![rows, total], data)?;
        Ok(self.push(Op::ConcatCols(parts.to_vec()), value))
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data().iter().sum();
        self.push(Op::SumAll(a), Tensor::scalar(s))
    }

    /// `-log softmax(logits)[label]` for rank-1 `[c]` or single-row `[1 x c]` logits.
    pub fn cross_entropy(&mut self, logits: NodeId, label: usize) -> Result<NodeId> {
        let t = self.value(logits);
        let classes = t.cols();
        if t.rank() > 2 || t.numel() != classes {
            return Err(Error::shapes("cross_entropy", t.shape(), &[classes]));
        }
        if label >= classes {
            return Err(Error::InvalidArgument(format!(
                "label {label} out of range for {classes} classes"
            )));
        }
        let row = t.data();
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        let loss = lse - row[label];
        Ok(self.push(Op::CrossEntropy { logits, label }, Tensor::scalar(loss)))
    }

    /// Gradients of the scalar `loss` node with respect to every parameter
    /// leaf in the recording, keyed by name. Parameters the loss does not
    /// depend on get zero gradients. Errors if `loss` is not scalar.
    pub fn backward(&self, loss: NodeId) -> Result<BTreeMap<String, Tensor>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(go) = grads[idx].take() else {
                continue;
            };
            self.accumulate(idx, &go, &mut grads);
            grads[idx] = Some(go);
        }

        let mut out = BTreeMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Param(name) = &node.op {
                let g = grads[idx]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape().to_vec()));
                // The same parameter may be bound as several leaves; sum them.
                match out.remove(name.as_str()) {
                    None => {
                        out.insert(name.clone(), g);
                    }
                    Some(prev) => {
                        let data = prev
                            .data()
                            .iter()
                            .zip(g.data())
                            .map(|(a, b)| a + b)
                            .collect();
                        out.insert(name.clone(), Tensor::new(prev.shape().to_vec(), data)?);
                    }
                }
            }
        }
        Ok(out)
    }

    fn accumulate(&self, idx: usize, go: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut bump = |id: NodeId, delta: Tensor| {
            let slot = &mut grads[id.0];
            match slot {
                None => *slot = Some(delta),
                Some(g) => {
                    for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                        *a += b;
                    }
                }
            }
        };

        match &self.nodes[idx].op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                bump(*a, matmul(go, &transpose(tb)));
                bump(*b, matmul(&transpose(ta), go));
            }
            Op::Transpose(a) => bump(*a, transpose(go)),
            Op::Add(a, b) => {
                bump(*a, go.clone());
                bump(*b, go.clone());
            }
            Op::AddRow(a, row) => {
                bump(*a, go.clone());
                let w = self.value(*row).cols();
                let mut acc = vec![0.0; w];
                for (i, v) in go.data().iter().enumerate() {
                    acc[i % w] += v;
                }
                bump(*row, Tensor::new(vec![w], acc).expect("row grad"));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let da = go
                    .data()
                    .iter()
                    .zip(tb.data())
                    .map(|(g, y)| g * y)
                    .collect();
                let db = go
                    .data()
                    .iter()
                    .zip(ta.data())
                    .map(|(g, x)| g * x)
                    .collect();
                bump(*a, Tensor::new(ta.shape().to_vec(), da).expect("mul grad"));
                bump(*b, Tensor::new(tb.shape().to_vec(), db).expect("mul grad"));
            }
            Op::Scale(a, c) => {
                let da = go.data().iter().map(|g| g * c).collect();
                bump(
                    *a,
                    Tensor::new(go.shape().to_vec(), da).expect("scale grad"),
                );
            }
            Op::Softmax(a, axis) => {
                let y = &self.nodes[idx].value;
                bump(*a, softmax_backward(y, go, *axis));
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let (tx, tg) = (self.value(*x), self.value(*gain));
                let (dx, dg, db) = layer_norm_backward(tx, tg, go, *eps);
                bump(*x, dx);
                bump(*gain, dg);
                bump(*bias, db);
            }
            Op::Gelu(a) => {
                let ta = self.value(*a);
                let da = go
                    .data()
                    .iter()
                    .zip(ta.data())
                    .map(|(g, &x)| g * gelu_grad(x))
                    .collect();
                bump(*a, Tensor::new(ta.shape().to_vec(), da).expect("gelu grad"));
            }
            Op::GatherRows(a, indices) => {
                let ta = self.value(*a);
                let w = ta.cols();
                let mut acc = Tensor::zeros(ta.shape().to_vec());
                for (k, &i) in indices.iter().enumerate() {
                    let src = go.row(k).to_vec();
                    for (j, v) in src.iter().enumerate() {
                        acc.data_mut()[i * w + j] += v;
                    }
                }
                bump(*a, acc);
            }
            Op::SliceCols { input, start, end } => {
                let ta = self.value(*input);
                let w = ta.cols();
                let sw = end - start;
                let mut acc = Tensor::zeros(ta.shape().to_vec());
                for r in 0..go.rows() {
                    for j in 0..sw {
                        acc.data_mut()[r * w + start + j] += go.at(r, j);
                    }
                }
                bump(*input, acc);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    let mut part = Tensor::zeros(self.value(p).shape().to_vec());
                    for r in 0..go.rows() {
                        for j in 0..w {
                            part.data_mut()[r * w + j] = go.at(r, offset + j);
                        }
                    }
                    offset += w;
                    bump(p, part);
                }
            }
            Op::SumAll(a) => {
                let g = go.item();
                let ta = self.value(*a);
                bump(
                    *a,
                    Tensor::new(ta.shape().to_vec(), vec![g; ta.numel()]).expect("sum grad"),
                );
            }
            Op::CrossEntropy { logits, label } => {
                let t = self.value(*logits);
                let g = go.item();
                let p = softmax(t, t.rank() - 1);
                let mut data: Vec<f64> = p.data().iter().map(|&v| v * g).collect();
                data[*label] -= g;
                bump(
                    *logits,
                    Tensor::new(t.shape().to_vec(), data).expect("ce grad"),
                );
            }
        }
    }
}

fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a.data()[i * k + p];
            let brow = &b.data()[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out).expect("matmul result")
}

fn transpose(a: &Tensor) -> Tensor {
    let (m, n) = (a.shape()[0], a.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data()[i * n + j];
        }
    }
    Tensor::new(vec![n, m], out).expect("transpose result")
}

fn softmax(t: &Tensor, axis: usize) -> Tensor {
    let mut out = t.data().to_vec();
    for_each_slice(t, axis, |stride, base, len| {
        let max = (0..len)
            .map(|i| out[base + i * stride])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for i in 0..len {
            let e = (out[base + i * stride] - max).exp();
            out[base + i * stride] = e;
            sum += e;
        }
        for i in 0..len {
            out[base + i * stride] /= sum;
        }
    });
    Tensor::new(t.shape().to_vec(), out).expect("softmax result")
}

fn softmax_backward(y: &Tensor, go: &Tensor, axis: usize) -> Tensor {
    let mut out = vec![0.0; y.numel()];
    for_each_slice(y, axis, |stride, base, len| {
        let mut dot = 0.0;
        for i in 0..len {
            dot += go.data()[base + i * stride] * y.data()[base + i * stride];
        }
        for i in 0..len {
            let p = base + i * stride;
            out[p] = y.data()[p] * (go.data()[p] - dot);
        }
    });
    Tensor::new(y.shape().to_vec(), out).expect("softmax grad")
}

/// Visits every 1-D slice of a rank-1/2 tensor along `axis` as
/// `(stride, base offset, length)`.
fn for_each_slice(t: &Tensor, axis: usize, mut f: impl FnMut(usize, usize, usize)) {
    match (t.rank(), axis) {
        (1, 0) => f(1, 0, t.cols()),
        (2, 1) => {
            let (rows, cols) = (t.shape()[0], t.shape()[1]);
            for r in 0..rows {
                f(1, r * cols, cols);
            }
        }
        (2, 0) => {
            let (rows, cols) = (t.shape()[0], t.shape()[1]);
            for c in 0..cols {
                f(cols, c, rows);
            }
        }
        _ => unreachable!("axis validated at recording"),
    }
}

fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Tensor {
    let d = x.cols();
    let mut out = Vec::with_capacity(x.numel());
    for r in 0..x.rows() {
        let row = &x.data()[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for ((x, g), b) in row.iter().zip(gain.data()).zip(bias.data()) {
            out.push((x - mean) * inv * g + b);
        }
    }
    Tensor::new(x.shape().to_vec(), out).expect("layer_norm result")
}

fn layer_norm_backward(
    x: &Tensor,
    gain: &Tensor,
    go: &Tensor,
    eps: f64,
) -> (Tensor, Tensor, Tensor) {
    let d = x.cols();
    let mut dx = vec![0.0; x.numel()];
    let mut dg = vec![0.0; d];
    let mut db = vec![0.0; d];
    for r in 0..x.rows() {
        let row = &x.data()[r * d..(r + 1) * d];
        let grow = &go.data()[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();

        let dxhat: Vec<f64> = grow.iter().zip(gain.data()).map(|(g, w)| g * w).collect();
        let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dxhat_xhat = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        for j in 0..d {
            dx[r * d + j] = inv * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
            dg[j] += grow[j] * xhat[j];
            db[j] += grow[j];
        }
    }
    (
        Tensor::new(x.shape().to_vec(), dx).expect("ln dx"),
        Tensor::new(vec![d], dg).expect("ln dg"),
        Tensor::new(vec![d], db).expect("ln db"),
    )
}

// Tanh-form GELU; the backward differentiates the same expression so the
// pair stays consistent under finite-difference checks.
const GELU_C: f64 = 0.044715;

fn gelu(x: f64) -> f64 {
    let u = (2.0 / std::f64::consts::PI).sqrt() * (x + GELU_C * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let k = (2.0 / std::f64::consts::PI).sqrt();
    let u = k * (x + GELU_C * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * k * (1.0 + 3.0 * GELU_C * x * x)
}
