//! Matrix-level reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! Nodes are appended in evaluation order, so walking them backwards is a
//! valid reverse topological order.

use std::collections::HashMap;

use super::tensor::{matmul_acc, matmul_nt_acc, matmul_tn_acc};
use super::{Gradients, NumericsError, ParameterStore, Tensor};

/// Variance floor of batch normalization.
pub const BN_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(usize),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Relu(NodeId),
    Transpose(NodeId),
    SliceCols(NodeId, usize),
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    Row(NodeId, usize),
    MeanRows(NodeId),
    SoftmaxRows(NodeId),
    MaskedSoftmax(NodeId),
    MaskedLogSoftmax(NodeId, Vec<bool>),
    Gather(NodeId, usize),
    PadCols(NodeId),
    DotConst(NodeId, Vec<f64>),
    SmoothL1Sum(NodeId, Vec<f64>),
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Computation tape over a read-only parameter snapshot.
pub struct Graph<'p> {
    params: &'p ParameterStore,
    nodes: Vec<Node>,
    param_nodes: HashMap<usize, NodeId>,
}

fn mismatch(op: &'static str, a: (usize, usize), b: (usize, usize)) -> NumericsError {
    NumericsError::ShapeMismatch { op, left: a, right: b }
}

/// Stable log-sum-exp over the unmasked entries. Errors when none is.
fn masked_lse(scores: &[f64], mask: &[bool]) -> Result<(f64, f64), NumericsError> {
    let max = scores
        .iter()
        .zip(mask)
        .filter(|(_, &ok)| ok)
        .map(|(&s, _)| s)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(NumericsError::NoFeasibleAction);
    }
    let sum: f64 = scores
        .iter()
        .zip(mask)
        .filter(|(_, &ok)| ok)
        .map(|(&s, _)| (s - max).exp())
        .sum();
    Ok((max, sum))
}

/// Softmax over the unmasked entries; masked entries get exactly zero.
pub fn masked_softmax(scores: &[f64], mask: &[bool]) -> Result<Vec<f64>, NumericsError> {
    if scores.len() != mask.len() {
        return Err(mismatch("masked_softmax", (1, scores.len()), (1, mask.len())));
    }
    let (max, sum) = masked_lse(scores, mask)?;
    Ok(scores
        .iter()
        .zip(mask)
        .map(|(&s, &ok)| if ok { (s - max).exp() / sum } else { 0.0 })
        .collect())
}

/// Robust regression loss: quadratic below 1, linear above.
pub fn smooth_l1(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParameterStore) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(256),
            param_nodes: HashMap::new(),
        }
    }

    pub fn params(&self) -> &'p ParameterStore {
        self.params
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

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].value.shape()
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value.data[0]
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    /// A constant input; receives no gradient.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// A copy of `a`'s value that blocks gradient flow.
    pub fn detach(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).clone();
        self.push(v, Op::Leaf)
    }

    /// The named parameter as a node. Repeated lookups share one node.
    pub fn param(&mut self, name: &str) -> Result<NodeId, NumericsError> {
        let idx = self
            .params
            .index_of(name)
            .ok_or_else(|| NumericsError::UnknownParameter(name.to_string()))?;
        if let Some(&id) = self.param_nodes.get(&idx) {
            return Ok(id);
        }
        let value = self.params.by_index(idx).1.as_tensor();
        let id = self.push(value, Op::Param(idx));
        self.param_nodes.insert(idx, id);
        Ok(id)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.0 {
            return Err(mismatch("matmul", sa, sb));
        }
        let mut out = Tensor::zeros(sa.0, sb.1);
        matmul_acc(self.value(a), self.value(b), &mut out.data);
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    fn zip_same(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId, NumericsError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(mismatch(name, sa, sb));
        }
        let data = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(self.push(Tensor::from_vec(sa.0, sa.1, data), op))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds the `1 x c` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.0 != 1 || sa.1 != sb.1 {
            return Err(mismatch("add_row", sa, sb));
        }
        let mut out = self.value(a).clone();
        let row = &self.value(b).data;
        for r in out.data.chunks_mut(sa.1) {
            for (o, &v) in r.iter_mut().zip(row) {
                *o += v;
            }
        }
        Ok(self.push(out, Op::AddRow(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let mut out = Tensor::zeros(t.cols, t.rows);
        for r in 0..t.rows {
            for c in 0..t.cols {
                out.data[c * t.rows + r] = t.data[r * t.cols + c];
            }
        }
        self.push(out, Op::Transpose(a))
    }

    /// Columns `start..start + len`.
    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId, NumericsError> {
        let t = self.value(a);
        if start + len > t.cols {
            return Err(mismatch("slice_cols", t.shape(), (t.rows, start + len)));
        }
        let mut out = Tensor::zeros(t.rows, len);
        for r in 0..t.rows {
            out.data[r * len..(r + 1) * len]
                .copy_from_slice(&t.data[r * t.cols + start..r * t.cols + start + len]);
        }
        Ok(self.push(out, Op::SliceCols(a, start)))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, NumericsError> {
        let rows = self.shape(parts[0]).0;
        let mut cols = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.0 != rows {
                return Err(mismatch("concat_cols", self.shape(parts[0]), s));
            }
            cols += s.1;
        }
        let mut out = Tensor::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let t = self.value(p);
            for r in 0..rows {
                out.data[r * cols + off..r * cols + off + t.cols].copy_from_slice(t.row(r));
            }
            off += t.cols;
        }
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId, NumericsError> {
        let cols = self.shape(parts[0]).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols != cols {
                return Err(mismatch("concat_rows", self.shape(parts[0]), t.shape()));
            }
            data.extend_from_slice(&t.data);
            rows += t.rows;
        }
        Ok(self.push(Tensor::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec())))
    }

    pub fn row(&mut self, a: NodeId, r: usize) -> Result<NodeId, NumericsError> {
        let t = self.value(a);
        if r >= t.rows {
            return Err(mismatch("row", t.shape(), (r + 1, t.cols)));
        }
        let v = Tensor::row_vector(t.row(r).to_vec());
        Ok(self.push(v, Op::Row(a, r)))
    }

    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let mut out = vec![0.0; t.cols];
        for r in 0..t.rows {
            for (o, v) in out.iter_mut().zip(t.row(r)) {
                *o += v;
            }
        }
        let inv = 1.0 / t.rows as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        self.push(Tensor::row_vector(out), Op::MeanRows(a))
    }

    /// Row-wise softmax.
    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let mut out = t.clone();
        for row in out.data.chunks_mut(t.cols) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            row.iter_mut().for_each(|v| *v /= sum);
        }
        self.push(out, Op::SoftmaxRows(a))
    }

    /// Softmax over all entries of `a`, restricted to `mask`.
    pub fn masked_softmax(&mut self, a: NodeId, mask: &[bool]) -> Result<NodeId, NumericsError> {
        let t = self.value(a);
        let probs = masked_softmax(&t.data, mask)?;
        let v = Tensor::from_vec(t.rows, t.cols, probs);
        Ok(self.push(v, Op::MaskedSoftmax(a)))
    }

    /// Log-softmax over the unmasked entries. Masked entries hold `-inf`
    /// and never receive gradient.
    pub fn masked_log_softmax(&mut self, a: NodeId, mask: &[bool]) -> Result<NodeId, NumericsError> {
        let t = self.value(a);
        if t.len() != mask.len() {
            return Err(mismatch("masked_log_softmax", t.shape(), (1, mask.len())));
        }
        let (max, sum) = masked_lse(&t.data, mask)?;
        let lse = max + sum.ln();
        let data = t
            .data
            .iter()
            .zip(mask)
            .map(|(&s, &ok)| if ok { s - lse } else { f64::NEG_INFINITY })
            .collect();
        let v = Tensor::from_vec(t.rows, t.cols, data);
        Ok(self.push(v, Op::MaskedLogSoftmax(a, mask.to_vec())))
    }

    /// Flat entry `i` as a scalar.
    pub fn gather(&mut self, a: NodeId, i: usize) -> Result<NodeId, NumericsError> {
        let t = self.value(a);
        if i >= t.len() {
            return Err(mismatch("gather", t.shape(), (1, i + 1)));
        }
        let v = Tensor::scalar(t.data[i]);
        Ok(self.push(v, Op::Gather(a, i)))
    }

    /// Right-pads a row vector with zeros to `width` columns.
    pub fn pad_cols(&mut self, a: NodeId, width: usize) -> Result<NodeId, NumericsError> {
        let t = self.value(a);
        if t.rows != 1 || t.cols > width {
            return Err(mismatch("pad_cols", t.shape(), (1, width)));
        }
        let mut data = t.data.clone();
        data.resize(width, 0.0);
        Ok(self.push(Tensor::row_vector(data), Op::PadCols(a)))
    }

    /// Scalar `sum_i a_i * w_i` with constant weights.
    pub fn dot_const(&mut self, a: NodeId, w: Vec<f64>) -> Result<NodeId, NumericsError> {
        let t = self.value(a);
        if t.len() != w.len() {
            return Err(mismatch("dot_const", t.shape(), (1, w.len())));
        }
        let v: f64 = t.data.iter().zip(&w).map(|(x, y)| x * y).sum();
        Ok(self.push(Tensor::scalar(v), Op::DotConst(a, w)))
    }

    /// Sum of all entries.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let w = vec![1.0; self.value(a).len()];
        self.dot_const(a, w).expect("matching length")
    }

    /// Scalar `sum_i smooth_l1(a_i - target_i)`.
    pub fn smooth_l1_sum(&mut self, a: NodeId, targets: Vec<f64>) -> Result<NodeId, NumericsError> {
        let t = self.value(a);
        if t.len() != targets.len() {
            return Err(mismatch("smooth_l1_sum", t.shape(), (1, targets.len())));
        }
        let v: f64 = t
            .data
            .iter()
            .zip(&targets)
            .map(|(x, y)| smooth_l1(x - y))
            .sum();
        Ok(self.push(Tensor::scalar(v), Op::SmoothL1Sum(a, targets)))
    }

    /// Linear combination of scalar nodes with constant coefficients.
    pub fn combine(&mut self, terms: &[(NodeId, f64)]) -> Result<NodeId, NumericsError> {
        let nodes: Vec<_> = terms.iter().map(|t| t.0).collect();
        let cat = self.concat_cols(&nodes)?;
        self.dot_const(cat, terms.iter().map(|t| t.1).collect())
    }

    /// Normalizes every column of `x` over its rows, then applies the
    /// per-column scale `gamma` and shift `beta` (both `1 x c`).
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
    ) -> Result<NodeId, NumericsError> {
        let (sx, sg, sb) = (self.shape(x), self.shape(gamma), self.shape(beta));
        if sg != (1, sx.1) {
            return Err(mismatch("batch_norm", sx, sg));
        }
        if sb != (1, sx.1) {
            return Err(mismatch("batch_norm", sx, sb));
        }
        let (xhat, inv_std) = normalize_columns(self.value(x));
        let g = &self.value(gamma).data;
        let b = &self.value(beta).data;
        let mut out = xhat.clone();
        for row in out.data.chunks_mut(sx.1) {
            for ((o, &gv), &bv) in row.iter_mut().zip(g).zip(b) {
                *o = *o * gv + bv;
            }
        }
        Ok(self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    /// Reverse pass from the scalar `loss`. Returns gradients for every
    /// parameter the loss depends on.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients, NumericsError> {
        let shape = self.shape(loss);
        if shape != (1, 1) {
            return Err(NumericsError::NotScalar(shape));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut out = Gradients::new(self.params.len());

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let mut acc = |id: NodeId, d: Tensor| match &mut grads[id.0] {
                Some(t) => t.add_assign(&d),
                slot @ None => *slot = Some(d),
            };
            match &node.op {
                Op::Leaf => {}
                Op::Param(p) => out.add(*p, &g.data),
                Op::MatMul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let mut da = Tensor::zeros(va.rows, va.cols);
                    matmul_nt_acc(&g, vb, &mut da.data);
                    let mut db = Tensor::zeros(vb.rows, vb.cols);
                    matmul_tn_acc(va, &g, &mut db.data);
                    acc(*a, da);
                    acc(*b, db);
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::Sub(a, b) => {
                    acc(*b, g.map(|v| -v));
                    acc(*a, g);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let da = zip_map(&g, vb, |x, y| x * y);
                    let db = zip_map(&g, va, |x, y| x * y);
                    acc(*a, da);
                    acc(*b, db);
                }
                Op::AddRow(a, b) => {
                    let mut db = Tensor::zeros(1, g.cols);
                    for r in g.data.chunks(g.cols) {
                        for (d, v) in db.data.iter_mut().zip(r) {
                            *d += v;
                        }
                    }
                    acc(*a, g);
                    acc(*b, db);
                }
                Op::Scale(a, s) => acc(*a, g.map(|v| v * s)),
                Op::Tanh(a) => acc(*a, zip_map(&g, &node.value, |d, y| d * (1.0 - y * y))),
                Op::Sigmoid(a) => acc(*a, zip_map(&g, &node.value, |d, y| d * y * (1.0 - y))),
                Op::Relu(a) => acc(
                    *a,
                    zip_map(&g, self.value(*a), |d, x| if x > 0.0 { d } else { 0.0 }),
                ),
                Op::Transpose(a) => {
                    let mut d = Tensor::zeros(g.cols, g.rows);
                    for r in 0..g.rows {
                        for c in 0..g.cols {
                            d.data[c * g.rows + r] = g.data[r * g.cols + c];
                        }
                    }
                    acc(*a, d);
                }
                Op::SliceCols(a, start) => {
                    let (rows, cols) = self.shape(*a);
                    let mut d = Tensor::zeros(rows, cols);
                    for r in 0..rows {
                        d.data[r * cols + start..r * cols + start + g.cols].copy_from_slice(g.row(r));
                    }
                    acc(*a, d);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let (rows, cols) = self.shape(p);
                        let mut d = Tensor::zeros(rows, cols);
                        for r in 0..rows {
                            d.data[r * cols..(r + 1) * cols]
                                .copy_from_slice(&g.data[r * g.cols + off..r * g.cols + off + cols]);
                        }
                        off += cols;
                        acc(p, d);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let (rows, cols) = self.shape(p);
                        let n = rows * cols;
                        acc(p, Tensor::from_vec(rows, cols, g.data[off..off + n].to_vec()));
                        off += n;
                    }
                }
                Op::Row(a, r) => {
                    let (rows, cols) = self.shape(*a);
                    let mut d = Tensor::zeros(rows, cols);
                    d.data[r * cols..(r + 1) * cols].copy_from_slice(&g.data);
                    acc(*a, d);
                }
                Op::MeanRows(a) => {
                    let (rows, cols) = self.shape(*a);
                    let inv = 1.0 / rows as f64;
                    let mut d = Tensor::zeros(rows, cols);
                    for r in d.data.chunks_mut(cols) {
                        for (o, v) in r.iter_mut().zip(&g.data) {
                            *o = v * inv;
                        }
                    }
                    acc(*a, d);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut d = Tensor::zeros(y.rows, y.cols);
                    for r in 0..y.rows {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for c in 0..y.cols {
                            d.data[r * y.cols + c] = yr[c] * (gr[c] - dot);
                        }
                    }
                    acc(*a, d);
                }
                Op::MaskedSoftmax(a) => {
                    // Masked entries have y = 0, so their gradient vanishes.
                    let y = &node.value;
                    let dot: f64 = y.data.iter().zip(&g.data).map(|(p, q)| p * q).sum();
                    acc(*a, zip_map(&g, y, |d, p| p * (d - dot)));
                }
                Op::MaskedLogSoftmax(a, mask) => {
                    let y = &node.value;
                    let total: f64 = g
                        .data
                        .iter()
                        .zip(mask)
                        .filter(|(_, &ok)| ok)
                        .map(|(d, _)| d)
                        .sum();
                    let data = y
                        .data
                        .iter()
                        .zip(&g.data)
                        .zip(mask)
                        .map(|((&l, &d), &ok)| if ok { d - l.exp() * total } else { 0.0 })
                        .collect();
                    acc(*a, Tensor::from_vec(y.rows, y.cols, data));
                }
                Op::Gather(a, i) => {
                    let (rows, cols) = self.shape(*a);
                    let mut d = Tensor::zeros(rows, cols);
                    d.data[*i] = g.data[0];
                    acc(*a, d);
                }
                Op::PadCols(a) => {
                    let (rows, cols) = self.shape(*a);
                    acc(*a, Tensor::from_vec(rows, cols, g.data[..cols].to_vec()));
                }
                Op::DotConst(a, w) => {
                    let (rows, cols) = self.shape(*a);
                    let s = g.data[0];
                    acc(*a, Tensor::from_vec(rows, cols, w.iter().map(|v| v * s).collect()));
                }
                Op::SmoothL1Sum(a, targets) => {
                    let t = self.value(*a);
                    let s = g.data[0];
                    let data = t
                        .data
                        .iter()
                        .zip(targets)
                        .map(|(x, y)| s * smooth_l1_grad(x - y))
                        .collect();
                    acc(*a, Tensor::from_vec(t.rows, t.cols, data));
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let (rows, cols) = xhat.shape();
                    let gv = &self.value(*gamma).data;
                    let mut dgamma = Tensor::zeros(1, cols);
                    let mut dbeta = Tensor::zeros(1, cols);
                    let mut dx = Tensor::zeros(rows, cols);
                    let n = rows as f64;
                    for c in 0..cols {
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for r in 0..rows {
                            let dy = g.data[r * cols + c];
                            let xh = xhat.data[r * cols + c];
                            dgamma.data[c] += dy * xh;
                            dbeta.data[c] += dy;
                            let dxh = dy * gv[c];
                            sum_d += dxh;
                            sum_dx += dxh * xh;
                        }
                        for r in 0..rows {
                            let dxh = g.data[r * cols + c] * gv[c];
                            let xh = xhat.data[r * cols + c];
                            dx.data[r * cols + c] =
                                inv_std[c] / n * (n * dxh - sum_d - xh * sum_dx);
                        }
                    }
                    acc(*x, dx);
                    acc(*gamma, dgamma);
                    acc(*beta, dbeta);
                }
            }
        }
        Ok(out)
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::from_vec(
        a.rows,
        a.cols,
        a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    )
}

/// Column standardization over rows: `(xhat, 1 / sqrt(var + eps))`.
pub fn normalize_columns(x: &Tensor) -> (Tensor, Vec<f64>) {
    let (rows, cols) = x.shape();
    let n = rows as f64;
    let mut mean = vec![0.0; cols];
    for r in x.data.chunks(cols) {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; cols];
    for r in x.data.chunks(cols) {
        for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let inv_std: Vec<f64> = var.iter().map(|s| 1.0 / (s / n + BN_EPS).sqrt()).collect();
    let mut xhat = x.clone();
    for r in xhat.data.chunks_mut(cols) {
        for ((v, m), is) in r.iter_mut().zip(&mean).zip(&inv_std) {
            *v = (*v - m) * is;
        }
    }
    (xhat, inv_std)
}
