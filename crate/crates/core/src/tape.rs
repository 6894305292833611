//! Reverse-mode automatic differentiation over [`Mat`] values.
//!
//! A [`Tape`] records operations eagerly: every builder method computes the
//! forward value immediately and pushes a node, so intermediate values can
//! be inspected while a graph is under construction (the trainer uses this
//! to turn sequence probabilities into detached loss weights without a
//! second forward pass). [`Tape::backward`] then sweeps the recorded ops in
//! reverse and accumulates gradients for every node.

use alloc::vec;
use alloc::vec::Vec;

use crate::mat::{log_softmax_in_place, softmax_in_place, Mat};
use crate::num;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

const LAYER_NORM_EPS: f64 = 1e-5;

enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    /// a (n x k) times b^T (b is m x k); attention scores use this.
    MatMulT(NodeId, NodeId),
    Add(NodeId, NodeId),
    /// rhs is a 1 x m row broadcast over the rows of lhs.
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    SoftmaxRows(NodeId),
    LogSoftmaxRows(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
    },
    GatherRows {
        table: NodeId,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    SliceRows {
        src: NodeId,
        start: usize,
    },
    /// Sum of src[r][c] over the pick list; output is 1 x 1.
    PickSum {
        src: NodeId,
        picks: Vec<(usize, usize)>,
    },
    /// Weighted sum of 1 x 1 nodes; output is 1 x 1.
    WeightedSum {
        terms: Vec<NodeId>,
        weights: Vec<f64>,
    },
    /// log(sum(exp(t))) over 1 x 1 nodes; output is 1 x 1.
    LogSumExp(Vec<NodeId>),
}

pub struct Tape {
    values: Vec<Mat>,
    ops: Vec<Op>,
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            values: Vec::new(),
            ops: Vec::new(),
        }
    }

    fn push(&mut self, value: Mat, op: Op) -> NodeId {
        self.values.push(value);
        self.ops.push(op);
        NodeId(self.values.len() - 1)
    }

    /// A leaf node. Gradients accumulate for leaves like for any other
    /// node; callers that registered constants simply never read them.
    pub fn leaf(&mut self, value: Mat) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &Mat {
        &self.values[id.0]
    }

    /// Convenience for 1 x 1 nodes.
    pub fn scalar_value(&self, id: NodeId) -> f64 {
        self.values[id.0].get(0, 0)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.values[a.0].matmul(&self.values[b.0])?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    /// a * b^T without materializing the transpose.
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.values[a.0].matmul_t(&self.values[b.0])?;
        Ok(self.push(value, Op::MatMulT(a, b)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if !self.values[a.0].same_shape(&self.values[b.0]) {
            return Err(Error::ShapeMismatch("tape add"));
        }
        let mut value = self.values[a.0].clone();
        value.add_assign(&self.values[b.0]);
        Ok(self.push(value, Op::Add(a, b)))
    }

    /// `a` (n x m) plus a broadcast row `row` (1 x m).
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let r = &self.values[row.0];
        if r.rows() != 1 || r.cols() != self.values[a.0].cols() {
            return Err(Error::ShapeMismatch("tape add_row"));
        }
        let mut value = self.values[a.0].clone();
        let row_vals = self.values[row.0].row(0).to_vec();
        for i in 0..value.rows() {
            for (v, &b) in value.row_mut(i).iter_mut().zip(row_vals.iter()) {
                *v += b;
            }
        }
        Ok(self.push(value, Op::AddRow(a, row)))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = self.values[a.0].scaled(c);
        self.push(value, Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let mut value = self.values[a.0].clone();
        for v in value.data_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        self.push(value, Op::Relu(a))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let mut value = self.values[a.0].clone();
        for r in 0..value.rows() {
            softmax_in_place(value.row_mut(r));
        }
        self.push(value, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: NodeId) -> NodeId {
        let mut value = self.values[a.0].clone();
        for r in 0..value.rows() {
            log_softmax_in_place(value.row_mut(r));
        }
        self.push(value, Op::LogSoftmaxRows(a))
    }

    /// Row-wise layer normalization with learned gain and bias (both 1 x m).
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let cols = self.values[x.0].cols();
        for p in [gain, bias] {
            let m = &self.values[p.0];
            if m.rows() != 1 || m.cols() != cols {
                return Err(Error::ShapeMismatch("layer_norm gain/bias"));
            }
        }
        let mut value = self.values[x.0].clone();
        for r in 0..value.rows() {
            let (mean, rstd) = row_moments(self.values[x.0].row(r));
            let g = self.values[gain.0].row(0).to_vec();
            let b = self.values[bias.0].row(0).to_vec();
            for (c, v) in value.row_mut(r).iter_mut().enumerate() {
                *v = (*v - mean) * rstd * g[c] + b[c];
            }
        }
        Ok(self.push(value, Op::LayerNorm { x, gain, bias }))
    }

    /// Selects rows `ids` from `table` (an embedding lookup).
    pub fn gather_rows(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let t = &self.values[table.0];
        let mut value = Mat::zeros(ids.len(), t.cols());
        for (r, &id) in ids.iter().enumerate() {
            if id >= t.rows() {
                return Err(Error::TokenIdOutOfRange {
                    id,
                    vocab_size: t.rows(),
                });
            }
            value.row_mut(r).copy_from_slice(t.row(id));
        }
        Ok(self.push(
            value,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::EmptySequence("concat_rows"));
        }
        let cols = self.values[parts[0].0].cols();
        let rows: usize = parts.iter().map(|p| self.values[p.0].rows()).sum();
        let mut value = Mat::zeros(rows, cols);
        let mut at = 0;
        for p in parts {
            let m = &self.values[p.0];
            if m.cols() != cols {
                return Err(Error::ShapeMismatch("concat_rows column widths"));
            }
            for r in 0..m.rows() {
                value.row_mut(at).copy_from_slice(m.row(r));
                at += 1;
            }
        }
        Ok(self.push(value, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::EmptySequence("concat_cols"));
        }
        let rows = self.values[parts[0].0].rows();
        let cols: usize = parts.iter().map(|p| self.values[p.0].cols()).sum();
        let mut value = Mat::zeros(rows, cols);
        let mut at = 0;
        for p in parts {
            let m = &self.values[p.0];
            if m.rows() != rows {
                return Err(Error::ShapeMismatch("concat_cols row counts"));
            }
            for r in 0..rows {
                value.row_mut(r)[at..at + m.cols()].copy_from_slice(m.row(r));
            }
            at += m.cols();
        }
        Ok(self.push(value, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, src: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let m = &self.values[src.0];
        if start + len > m.rows() {
            return Err(Error::ShapeMismatch("slice_rows out of range"));
        }
        let mut value = Mat::zeros(len, m.cols());
        for r in 0..len {
            value.row_mut(r).copy_from_slice(m.row(start + r));
        }
        Ok(self.push(value, Op::SliceRows { src, start }))
    }

    /// Sum of the picked entries; duplicates accumulate.
    pub fn pick_sum(&mut self, src: NodeId, picks: &[(usize, usize)]) -> Result<NodeId> {
        let m = &self.values[src.0];
        let mut total = 0.0;
        for &(r, c) in picks {
            if r >= m.rows() || c >= m.cols() {
                return Err(Error::ShapeMismatch("pick_sum index out of range"));
            }
            total += m.get(r, c);
        }
        Ok(self.push(
            Mat::from_vec(1, 1, vec![total]),
            Op::PickSum {
                src,
                picks: picks.to_vec(),
            },
        ))
    }

    /// Weighted sum of scalar (1 x 1) nodes.
    pub fn weighted_sum(&mut self, terms: &[NodeId], weights: &[f64]) -> Result<NodeId> {
        if terms.is_empty() || terms.len() != weights.len() {
            return Err(Error::ShapeMismatch("weighted_sum arity"));
        }
        let mut total = 0.0;
        for (t, w) in terms.iter().zip(weights) {
            total += self.scalar_value(*t) * w;
        }
        Ok(self.push(
            Mat::from_vec(1, 1, vec![total]),
            Op::WeightedSum {
                terms: terms.to_vec(),
                weights: weights.to_vec(),
            },
        ))
    }

    /// log-sum-exp over scalar (1 x 1) nodes, computed stably.
    pub fn log_sum_exp(&mut self, terms: &[NodeId]) -> Result<NodeId> {
        if terms.is_empty() {
            return Err(Error::EmptySequence("log_sum_exp"));
        }
        let vals: Vec<f64> = terms.iter().map(|t| self.scalar_value(*t)).collect();
        let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = vals.iter().map(|&v| num::exp(v - max)).sum();
        let value = max + num::ln(sum);
        Ok(self.push(
            Mat::from_vec(1, 1, vec![value]),
            Op::LogSumExp(terms.to_vec()),
        ))
    }

    /// Backpropagates from a scalar node, seeding d(loss)/d(loss) = 1.
    /// Returns the per-node gradients; entries are `None` for nodes the
    /// loss does not depend on.
    pub fn backward(&self, loss: NodeId) -> Gradients {
        let mut grads: Vec<Option<Mat>> = vec![None; self.values.len()];
        debug_assert_eq!(self.values[loss.0].rows(), 1);
        debug_assert_eq!(self.values[loss.0].cols(), 1);
        grads[loss.0] = Some(Mat::from_vec(1, 1, vec![1.0]));

        for idx in (0..self.ops.len()).rev() {
            let Some(out_grad) = grads[idx].take() else {
                continue;
            };
            self.apply_backward(idx, &out_grad, &mut grads);
            grads[idx] = Some(out_grad);
        }
        Gradients { grads }
    }

    fn apply_backward(&self, idx: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        let acc = |grads: &mut [Option<Mat>], node: NodeId, delta: Mat| {
            match &mut grads[node.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        match &self.ops[idx] {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let da = g.matmul_t(&self.values[b.0]).expect("shape checked");
                let db = self.values[a.0].t_matmul(g).expect("shape checked");
                acc(grads, *a, da);
                acc(grads, *b, db);
            }
            Op::MatMulT(a, b) => {
                // C = A B^T: dA = dC B, dB = dC^T A
                let da = g.matmul(&self.values[b.0]).expect("shape checked");
                let db = g.t_matmul(&self.values[a.0]).expect("shape checked");
                acc(grads, *a, da);
                acc(grads, *b, db);
            }
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::AddRow(a, row) => {
                acc(grads, *a, g.clone());
                let mut dr = Mat::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (d, &v) in dr.row_mut(0).iter_mut().zip(g.row(r)) {
                        *d += v;
                    }
                }
                acc(grads, *row, dr);
            }
            Op::Scale(a, c) => {
                acc(grads, *a, g.scaled(*c));
            }
            Op::Relu(a) => {
                let mut da = g.clone();
                for (d, &x) in da.data_mut().iter_mut().zip(self.values[a.0].data()) {
                    if x <= 0.0 {
                        *d = 0.0;
                    }
                }
                acc(grads, *a, da);
            }
            Op::SoftmaxRows(a) => {
                let y = &self.values[idx];
                let mut da = Mat::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(gv, yv)| gv * yv).sum();
                    for (c, d) in da.row_mut(r).iter_mut().enumerate() {
                        *d = y.get(r, c) * (g.get(r, c) - dot);
                    }
                }
                acc(grads, *a, da);
            }
            Op::LogSoftmaxRows(a) => {
                let y = &self.values[idx];
                let mut da = Mat::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let gsum: f64 = g.row(r).iter().sum();
                    for (c, d) in da.row_mut(r).iter_mut().enumerate() {
                        *d = g.get(r, c) - num::exp(y.get(r, c)) * gsum;
                    }
                }
                acc(grads, *a, da);
            }
            Op::LayerNorm { x, gain, bias } => {
                let xm = &self.values[x.0];
                let gm = &self.values[gain.0];
                let m = xm.cols() as f64;
                let mut dx = Mat::zeros(xm.rows(), xm.cols());
                let mut dg = Mat::zeros(1, xm.cols());
                let mut db = Mat::zeros(1, xm.cols());
                for r in 0..xm.rows() {
                    let (mean, rstd) = row_moments(xm.row(r));
                    // dxhat, and the two reductions the row formula needs
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    let mut dxhat = vec![0.0; xm.cols()];
                    for (c, slot) in dxhat.iter_mut().enumerate() {
                        let xhat = (xm.get(r, c) - mean) * rstd;
                        let gv = g.get(r, c);
                        dg.row_mut(0)[c] += gv * xhat;
                        db.row_mut(0)[c] += gv;
                        let d = gv * gm.get(0, c);
                        *slot = d;
                        sum_dxhat += d;
                        sum_dxhat_xhat += d * xhat;
                    }
                    for (c, &d) in dxhat.iter().enumerate() {
                        let xhat = (xm.get(r, c) - mean) * rstd;
                        dx.set(r, c, rstd * (d - sum_dxhat / m - xhat * sum_dxhat_xhat / m));
                    }
                }
                acc(grads, *x, dx);
                acc(grads, *gain, dg);
                acc(grads, *bias, db);
            }
            Op::GatherRows { table, ids } => {
                let t = &self.values[table.0];
                let mut dt = Mat::zeros(t.rows(), t.cols());
                for (r, &id) in ids.iter().enumerate() {
                    for (d, &v) in dt.row_mut(id).iter_mut().zip(g.row(r)) {
                        *d += v;
                    }
                }
                acc(grads, *table, dt);
            }
            Op::ConcatRows(parts) => {
                let mut at = 0;
                for p in parts {
                    let rows = self.values[p.0].rows();
                    let mut dp = Mat::zeros(rows, g.cols());
                    for r in 0..rows {
                        dp.row_mut(r).copy_from_slice(g.row(at + r));
                    }
                    at += rows;
                    acc(grads, *p, dp);
                }
            }
            Op::ConcatCols(parts) => {
                let mut at = 0;
                for p in parts {
                    let cols = self.values[p.0].cols();
                    let mut dp = Mat::zeros(g.rows(), cols);
                    for r in 0..g.rows() {
                        dp.row_mut(r).copy_from_slice(&g.row(r)[at..at + cols]);
                    }
                    at += cols;
                    acc(grads, *p, dp);
                }
            }
            Op::SliceRows { src, start } => {
                let s = &self.values[src.0];
                let mut ds = Mat::zeros(s.rows(), s.cols());
                for r in 0..g.rows() {
                    ds.row_mut(start + r).copy_from_slice(g.row(r));
                }
                acc(grads, *src, ds);
            }
            Op::PickSum { src, picks } => {
                let s = &self.values[src.0];
                let gv = g.get(0, 0);
                let mut ds = Mat::zeros(s.rows(), s.cols());
                for &(r, c) in picks {
                    let cur = ds.get(r, c);
                    ds.set(r, c, cur + gv);
                }
                acc(grads, *src, ds);
            }
            Op::WeightedSum { terms, weights } => {
                let gv = g.get(0, 0);
                for (t, w) in terms.iter().zip(weights) {
                    acc(grads, *t, Mat::from_vec(1, 1, vec![gv * w]));
                }
            }
            Op::LogSumExp(terms) => {
                let gv = g.get(0, 0);
                let out = self.values[idx].get(0, 0);
                for t in terms {
                    let p = num::exp(self.scalar_value(*t) - out);
                    acc(grads, *t, Mat::from_vec(1, 1, vec![gv * p]));
                }
            }
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Mat> {
        self.grads[id.0].as_ref()
    }
}

fn row_moments(row: &[f64]) -> (f64, f64) {
    let m = row.len() as f64;
    let mean = row.iter().sum::<f64>() / m;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / m;
    (mean, 1.0 / num::sqrt(var + LAYER_NORM_EPS))
}
