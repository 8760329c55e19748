//! Reverse-mode differentiation over a recorded value graph.
//!
//! Ops are evaluated eagerly as they are recorded, so a freshly built graph
//! is already forward-complete. [`ValueGraph::forward`] re-evaluates every
//! non-leaf node in recording order, which is what finite-difference checks
//! and "change a leaf, recompute" workflows use.
//!
//! Node ids are handed out in recording order, and every op only refers to
//! earlier ids, so recording order is a topological order.
//!
//! [`ValueGraph::backward`] accumulates into the stored gradients: running it
//! twice without [`ValueGraph::zero_grad`] doubles every gradient.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numeric::tensor::{gemm, Tensor};

pub const LEAKY_SLOPE: f64 = 0.01;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;
const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchNormMode {
    Train,
    Eval,
}

/// Frozen statistics consumed by eval-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(width: usize) -> Self {
        Self {
            mean: vec![0.0; width],
            var: vec![1.0; width],
        }
    }

    /// `running = momentum * running + (1 - momentum) * batch`.
    pub fn update(&mut self, batch: &RunningStats) {
        for (r, b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
        }
        for (r, b) in self.var.iter_mut().zip(&batch.var) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
        }
    }
}

type Indices = Arc<[usize]>;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId, f64),
    LeakyRelu(NodeId),
    Sigmoid(NodeId),
    SoftmaxRows(NodeId),
    Log(NodeId),
    Exp(NodeId),
    Clamp(NodeId, f64, f64),
    Mean(NodeId, Option<usize>),
    Sum(NodeId),
    Concat(Vec<NodeId>, usize),
    L2Normalize(NodeId),
    RowDot(NodeId, NodeId),
    Similarity(NodeId, NodeId),
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mode: BatchNormMode,
        running: RunningStats,
    },
    Gather(NodeId, Indices),
    SegmentSum(NodeId, Indices, usize),
    SegmentMean(NodeId, Indices, usize),
    SegmentSoftmax(NodeId, Indices, usize),
    Transpose(NodeId),
    SliceCols(NodeId, usize, usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::Log(..) => "log",
            Op::Exp(..) => "exp",
            Op::Clamp(..) => "clamp",
            Op::Mean(..) => "mean",
            Op::Sum(..) => "sum",
            Op::Concat(..) => "concat",
            Op::L2Normalize(..) => "l2_normalize",
            Op::RowDot(..) => "row_dot",
            Op::Similarity(..) => "similarity",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Gather(..) => "gather",
            Op::SegmentSum(..) => "segment_sum",
            Op::SegmentMean(..) => "segment_mean",
            Op::SegmentSoftmax(..) => "segment_softmax",
            Op::Transpose(..) => "transpose",
            Op::SliceCols(..) => "slice_cols",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
    grad: Option<Tensor>,
    /// Batch statistics from the last train-mode batch-norm evaluation.
    batch_stats: Option<RunningStats>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    Row,
    Col,
    Scalar,
}

fn broadcast_kind(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Bcast> {
    if a.shape() == b.shape() {
        return Ok(Bcast::Same);
    }
    if b.len() == 1 {
        return Ok(Bcast::Scalar);
    }
    let (ar, ac) = a.dims2();
    let (br, bc) = b.dims2();
    if br == 1 && bc == ac && b.len() == ac {
        return Ok(Bcast::Row);
    }
    if b.rank() == 2 && bc == 1 && br == ar {
        return Ok(Bcast::Col);
    }
    Err(Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    })
}

fn broadcast_apply(a: &Tensor, b: &Tensor, kind: Bcast, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let (_, cols) = a.dims2();
    let bd = b.data();
    let data = a
        .data()
        .iter()
        .enumerate()
        .map(|(idx, &x)| {
            let y = match kind {
                Bcast::Same => bd[idx],
                Bcast::Row => bd[idx % cols],
                Bcast::Col => bd[idx / cols],
                Bcast::Scalar => bd[0],
            };
            f(x, y)
        })
        .collect();
    Tensor::new(a.shape().to_vec(), data).expect("broadcast keeps lhs shape")
}

/// Reduce a gradient shaped like the lhs back onto the rhs broadcast shape.
fn unbroadcast(g: &Tensor, b: &Tensor, kind: Bcast) -> Tensor {
    match kind {
        Bcast::Same => g.clone(),
        Bcast::Scalar => Tensor::new(b.shape().to_vec(), vec![g.sum()]).unwrap(),
        Bcast::Row => {
            let cols = g.cols();
            let mut out = vec![0.0; cols];
            for (idx, v) in g.data().iter().enumerate() {
                out[idx % cols] += v;
            }
            Tensor::new(b.shape().to_vec(), out).unwrap()
        }
        Bcast::Col => {
            let cols = g.cols();
            let mut out = vec![0.0; b.len()];
            for (idx, v) in g.data().iter().enumerate() {
                out[idx / cols] += v;
            }
            Tensor::new(b.shape().to_vec(), out).unwrap()
        }
    }
}

fn require_rank2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(Error::Shape {
            op,
            lhs: t.shape().to_vec(),
            rhs: vec![],
        });
    }
    Ok(t.dims2())
}

fn check_segments(op: &'static str, rows: usize, seg: &[usize], n: usize) -> Result<()> {
    if seg.len() != rows {
        return Err(Error::Shape {
            op,
            lhs: vec![rows],
            rhs: vec![seg.len()],
        });
    }
    if let Some(&bad) = seg.iter().find(|&&s| s >= n) {
        return Err(Error::invalid(format!(
            "{op}: segment id {bad} out of range for {n} segments"
        )));
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// A recorded computation with values and accumulated gradients.
#[derive(Clone, Debug, Default)]
pub struct ValueGraph {
    nodes: Vec<Node>,
    params: Vec<(String, NodeId)>,
}

impl ValueGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant leaf (no gradient is reported for it).
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push_leaf(value)
    }

    /// Trainable leaf registered under `name`.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor) -> NodeId {
        let id = self.push_leaf(value);
        self.params.push((name.into(), id));
        id
    }

    fn push_leaf(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            grad: None,
            batch_stats: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn params(&self) -> &[(String, NodeId)] {
        &self.params
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    /// Batch statistics seen by a train-mode batch-norm node.
    pub fn batch_stats(&self, id: NodeId) -> Option<&RunningStats> {
        self.nodes[id.0].batch_stats.as_ref()
    }

    /// Replace a leaf value. Dependent nodes are stale until [`Self::forward`].
    pub fn set_value(&mut self, id: NodeId, value: Tensor) -> Result<()> {
        let node = &mut self.nodes[id.0];
        if !matches!(node.op, Op::Leaf) {
            return Err(Error::invalid("only leaf values can be assigned"));
        }
        if node.value.shape() != value.shape() {
            return Err(Error::Shape {
                op: "set_value",
                lhs: node.value.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        node.value = value;
        Ok(())
    }

    /// Gradients of all registered parameters, keyed by name. Parameters
    /// the loss does not depend on get a zero tensor.
    pub fn param_grads(&self) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .map(|(name, id)| {
                let node = &self.nodes[id.0];
                let g = node
                    .grad
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                (name.clone(), g)
            })
            .collect()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Re-evaluate every non-leaf node in recording order.
    /// Which side of each non-differentiable point every piecewise op input
    /// currently sits on: one byte per element of every leaky-ReLU and clamp
    /// input. Two evaluations with equal signatures lie in the same smooth
    /// piece of the loss.
    pub fn branch_signature(&self) -> Vec<u8> {
        let mut sig = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::LeakyRelu(a) => sig.extend(self.nodes[a.0].value.data().iter().map(|&x| u8::from(x > 0.0))),
                Op::Clamp(a, lo, hi) => sig.extend(self.nodes[a.0].value.data().iter().map(|&x| {
                    if x < *lo {
                        0
                    } else if x > *hi {
                        2
                    } else {
                        1
                    }
                })),
                _ => {}
            }
        }
        sig
    }

    pub fn forward(&mut self) -> Result<()> {
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let (value, stats) = self.eval(&self.nodes[i].op)?;
            self.nodes[i].value = value;
            self.nodes[i].batch_stats = stats;
        }
        Ok(())
    }

    fn record(&mut self, op: Op) -> Result<NodeId> {
        let (value, stats) = self.eval(&op)?;
        self.nodes.push(Node {
            op,
            value,
            grad: None,
            batch_stats: stats,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::MatMul(a, b))
    }
    /// Elementwise sum; `b` may broadcast as a row, a column or a scalar.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::Add(a, b))
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::Sub(a, b))
    }
    /// Hadamard product with the same broadcasting rules as [`Self::add`].
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::Mul(a, b))
    }
    pub fn scale(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        self.record(Op::Scale(a, s))
    }
    pub fn add_scalar(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        self.record(Op::AddScalar(a, s))
    }
    pub fn leaky_relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::LeakyRelu(a))
    }
    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::Sigmoid(a))
    }
    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::SoftmaxRows(a))
    }
    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::Log(a))
    }
    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::Exp(a))
    }
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        self.record(Op::Clamp(a, lo, hi))
    }
    /// Mean over `axis` of a matrix (kept as a 1×k or n×1 matrix), or over
    /// every element when `axis` is `None`.
    pub fn mean(&mut self, a: NodeId, axis: Option<usize>) -> Result<NodeId> {
        self.record(Op::Mean(a, axis))
    }
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::Sum(a))
    }
    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        self.record(Op::Concat(parts.to_vec(), axis))
    }
    pub fn l2_normalize(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::L2Normalize(a))
    }
    /// Dot product of paired rows: n×k, n×k → n×1.
    pub fn row_dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::RowDot(a, b))
    }
    /// All-pairs dot-product similarity: n×k, m×k → n×m.
    pub fn similarity(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::Similarity(a, b))
    }
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mode: BatchNormMode,
        running: RunningStats,
    ) -> Result<NodeId> {
        self.record(Op::BatchNorm {
            x,
            gamma,
            beta,
            mode,
            running,
        })
    }
    /// Table lookup: row `i` of the output is row `idx[i]` of `table`.
    pub fn gather_rows(&mut self, table: NodeId, idx: impl Into<Arc<[usize]>>) -> Result<NodeId> {
        self.record(Op::Gather(table, idx.into()))
    }
    /// Sum rows of `x` into `n` buckets given by `seg`.
    pub fn segment_sum(&mut self, x: NodeId, seg: impl Into<Arc<[usize]>>, n: usize) -> Result<NodeId> {
        self.record(Op::SegmentSum(x, seg.into(), n))
    }
    /// Like [`Self::segment_sum`] divided by bucket size; empty buckets are zero.
    pub fn segment_mean(&mut self, x: NodeId, seg: impl Into<Arc<[usize]>>, n: usize) -> Result<NodeId> {
        self.record(Op::SegmentMean(x, seg.into(), n))
    }
    /// Column-wise softmax within each bucket of rows.
    pub fn segment_softmax(
        &mut self,
        x: NodeId,
        seg: impl Into<Arc<[usize]>>,
        n: usize,
    ) -> Result<NodeId> {
        self.record(Op::SegmentSoftmax(x, seg.into(), n))
    }
    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::Transpose(a))
    }
    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        self.record(Op::SliceCols(a, start, end))
    }

    fn val(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn eval(&self, op: &Op) -> Result<(Tensor, Option<RunningStats>)> {
        let name = op.name();
        let mut stats = None;
        let out = match op {
            Op::Leaf => unreachable!("leaves are not evaluated"),
            Op::MatMul(a, b) => {
                let (a, b) = (self.val(*a), self.val(*b));
                require_rank2(name, a)?;
                a.matmul(b)?
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                let (a, b) = (self.val(*a), self.val(*b));
                let kind = broadcast_kind(name, a, b)?;
                match op {
                    Op::Add(..) => broadcast_apply(a, b, kind, |x, y| x + y),
                    Op::Sub(..) => broadcast_apply(a, b, kind, |x, y| x - y),
                    _ => broadcast_apply(a, b, kind, |x, y| x * y),
                }
            }
            Op::Scale(a, s) => self.val(*a).map(|x| x * s),
            Op::AddScalar(a, s) => self.val(*a).map(|x| x + s),
            Op::LeakyRelu(a) => self
                .val(*a)
                .map(|x| if x > 0.0 { x } else { LEAKY_SLOPE * x }),
            Op::Sigmoid(a) => self.val(*a).map(sigmoid),
            Op::SoftmaxRows(a) => {
                let a = self.val(*a);
                let (r, c) = require_rank2(name, a)?;
                let mut out = a.data().to_vec();
                for i in 0..r {
                    let row = &mut out[i * c..(i + 1) * c];
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for v in row.iter_mut() {
                        *v = (*v - max).exp();
                        z += *v;
                    }
                    for v in row.iter_mut() {
                        *v /= z;
                    }
                }
                Tensor::new(a.shape().to_vec(), out)?
            }
            Op::Log(a) => self.val(*a).map(f64::ln),
            Op::Exp(a) => self.val(*a).map(f64::exp),
            Op::Clamp(a, lo, hi) => self.val(*a).map(|x| x.clamp(*lo, *hi)),
            Op::Mean(a, axis) => {
                let a = self.val(*a);
                match axis {
                    None => Tensor::scalar(a.sum() / a.len().max(1) as f64),
                    Some(ax) => {
                        let (r, c) = require_rank2(name, a)?;
                        match ax {
                            0 => {
                                let mut out = vec![0.0; c];
                                for i in 0..r {
                                    for j in 0..c {
                                        out[j] += a.get(i, j);
                                    }
                                }
                                out.iter_mut().for_each(|v| *v /= r.max(1) as f64);
                                Tensor::matrix(1, c, out)?
                            }
                            1 => {
                                let out =
                                    (0..r).map(|i| a.row(i).iter().sum::<f64>() / c.max(1) as f64);
                                Tensor::matrix(r, 1, out.collect())?
                            }
                            _ => return Err(Error::invalid(format!("mean: bad axis {ax}"))),
                        }
                    }
                }
            }
            Op::Sum(a) => Tensor::scalar(self.val(*a).sum()),
            Op::Concat(parts, axis) => self.concat_values(parts, *axis)?,
            Op::L2Normalize(a) => {
                let a = self.val(*a);
                let (r, c) = a.dims2();
                let mut out = a.data().to_vec();
                for i in 0..r {
                    let row = &mut out[i * c..(i + 1) * c];
                    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_EPS);
                    row.iter_mut().for_each(|v| *v /= norm);
                }
                Tensor::new(a.shape().to_vec(), out)?
            }
            Op::RowDot(a, b) => {
                let (a, b) = (self.val(*a), self.val(*b));
                if a.shape() != b.shape() || a.rank() != 2 {
                    return Err(Error::Shape {
                        op: name,
                        lhs: a.shape().to_vec(),
                        rhs: b.shape().to_vec(),
                    });
                }
                let (r, _) = a.dims2();
                let out = (0..r)
                    .map(|i| a.row(i).iter().zip(b.row(i)).map(|(x, y)| x * y).sum())
                    .collect();
                Tensor::matrix(r, 1, out)?
            }
            Op::Similarity(a, b) => {
                let (a, b) = (self.val(*a), self.val(*b));
                let (n, k) = require_rank2(name, a)?;
                let (m, k2) = require_rank2(name, b)?;
                if k != k2 {
                    return Err(Error::Shape {
                        op: name,
                        lhs: a.shape().to_vec(),
                        rhs: b.shape().to_vec(),
                    });
                }
                let mut out = vec![0.0; n * m];
                gemm(n, k, m, a.data(), false, b.data(), true, &mut out);
                Tensor::matrix(n, m, out)?
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mode,
                running,
            } => {
                let (x, gamma, beta) = (self.val(*x), self.val(*gamma), self.val(*beta));
                let (r, c) = require_rank2(name, x)?;
                if gamma.len() != c || beta.len() != c || running.mean.len() != c {
                    return Err(Error::Shape {
                        op: name,
                        lhs: x.shape().to_vec(),
                        rhs: gamma.shape().to_vec(),
                    });
                }
                let (mean, var) = match mode {
                    BatchNormMode::Eval => (running.mean.clone(), running.var.clone()),
                    BatchNormMode::Train => {
                        if r == 0 {
                            return Err(Error::invalid("batch_norm: empty batch in train mode"));
                        }
                        let (m, v) = column_moments(x);
                        stats = Some(RunningStats {
                            mean: m.clone(),
                            var: v.clone(),
                        });
                        (m, v)
                    }
                };
                let mut out = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        let xhat = (x.get(i, j) - mean[j]) / (var[j] + BN_EPS).sqrt();
                        out[i * c + j] = gamma.data()[j] * xhat + beta.data()[j];
                    }
                }
                Tensor::matrix(r, c, out)?
            }
            Op::Gather(table, idx) => {
                let t = self.val(*table);
                let (rows, c) = require_rank2(name, t)?;
                let mut out = Vec::with_capacity(idx.len() * c);
                for &i in idx.iter() {
                    if i >= rows {
                        return Err(Error::invalid(format!(
                            "gather: index {i} out of range for {rows} rows"
                        )));
                    }
                    out.extend_from_slice(t.row(i));
                }
                Tensor::matrix(idx.len(), c, out)?
            }
            Op::SegmentSum(x, seg, n) | Op::SegmentMean(x, seg, n) => {
                let x = self.val(*x);
                let (r, c) = require_rank2(name, x)?;
                check_segments(name, r, seg, *n)?;
                let mut out = vec![0.0; n * c];
                for (i, &s) in seg.iter().enumerate() {
                    for (o, v) in out[s * c..(s + 1) * c].iter_mut().zip(x.row(i)) {
                        *o += v;
                    }
                }
                if matches!(op, Op::SegmentMean(..)) {
                    let counts = segment_counts(seg, *n);
                    for (s, &cnt) in counts.iter().enumerate() {
                        if cnt > 0 {
                            out[s * c..(s + 1) * c]
                                .iter_mut()
                                .for_each(|v| *v /= cnt as f64);
                        }
                    }
                }
                Tensor::matrix(*n, c, out)?
            }
            Op::SegmentSoftmax(x, seg, n) => {
                let x = self.val(*x);
                let (r, c) = require_rank2(name, x)?;
                check_segments(name, r, seg, *n)?;
                let mut max = vec![f64::NEG_INFINITY; n * c];
                for (i, &s) in seg.iter().enumerate() {
                    for j in 0..c {
                        let m = &mut max[s * c + j];
                        *m = m.max(x.get(i, j));
                    }
                }
                let mut out = vec![0.0; r * c];
                let mut z = vec![0.0; n * c];
                for (i, &s) in seg.iter().enumerate() {
                    for j in 0..c {
                        let e = (x.get(i, j) - max[s * c + j]).exp();
                        out[i * c + j] = e;
                        z[s * c + j] += e;
                    }
                }
                for (i, &s) in seg.iter().enumerate() {
                    for j in 0..c {
                        out[i * c + j] /= z[s * c + j];
                    }
                }
                Tensor::matrix(r, c, out)?
            }
            Op::Transpose(a) => {
                let a = self.val(*a);
                require_rank2(name, a)?;
                a.transpose()
            }
            Op::SliceCols(a, start, end) => {
                let a = self.val(*a);
                let (r, c) = require_rank2(name, a)?;
                if start >= end || *end > c {
                    return Err(Error::invalid(format!(
                        "slice_cols: range {start}..{end} invalid for {c} columns"
                    )));
                }
                let w = end - start;
                let mut out = Vec::with_capacity(r * w);
                for i in 0..r {
                    out.extend_from_slice(&a.row(i)[*start..*end]);
                }
                Tensor::matrix(r, w, out)?
            }
        };
        if !out.is_finite() {
            return Err(Error::NonFinite(name));
        }
        Ok((out, stats))
    }

    fn concat_values(&self, parts: &[NodeId], axis: usize) -> Result<Tensor> {
        let first = parts
            .first()
            .map(|p| self.val(*p))
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let (r0, c0) = require_rank2("concat", first)?;
        match axis {
            0 => {
                let mut data = Vec::new();
                let mut rows = 0;
                for p in parts {
                    let t = self.val(*p);
                    let (r, c) = require_rank2("concat", t)?;
                    if c != c0 {
                        return Err(Error::Shape {
                            op: "concat",
                            lhs: first.shape().to_vec(),
                            rhs: t.shape().to_vec(),
                        });
                    }
                    rows += r;
                    data.extend_from_slice(t.data());
                }
                Tensor::matrix(rows, c0, data)
            }
            1 => {
                let mut widths = Vec::with_capacity(parts.len());
                for p in parts {
                    let t = self.val(*p);
                    let (r, c) = require_rank2("concat", t)?;
                    if r != r0 {
                        return Err(Error::Shape {
                            op: "concat",
                            lhs: first.shape().to_vec(),
                            rhs: t.shape().to_vec(),
                        });
                    }
                    widths.push(c);
                }
                let total: usize = widths.iter().sum();
                let mut data = Vec::with_capacity(r0 * total);
                for i in 0..r0 {
                    for p in parts {
                        data.extend_from_slice(self.val(*p).row(i));
                    }
                }
                Tensor::matrix(r0, total, data)
            }
            _ => Err(Error::invalid(format!("concat: bad axis {axis}"))),
        }
    }

    /// Accumulate d(loss)/d(node) into every node's gradient.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::filled(lv.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => acc.add_assign(&g),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let y = &node.value;
        let mut push = |id: NodeId, t: Tensor| match &mut grads[id.0] {
            Some(acc) => acc.add_assign(&t),
            slot @ None => *slot = Some(t),
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let (m, k) = av.dims2();
                let n = bv.cols();
                let mut ga = vec![0.0; m * k];
                gemm(m, n, k, g.data(), false, bv.data(), true, &mut ga);
                let mut gb = vec![0.0; k * n];
                gemm(k, m, n, av.data(), true, g.data(), false, &mut gb);
                push(*a, Tensor::new(av.shape().to_vec(), ga)?);
                push(*b, Tensor::new(bv.shape().to_vec(), gb)?);
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let kind = broadcast_kind("add", av, bv)?;
                push(*a, g.clone());
                let mut gb = unbroadcast(g, bv, kind);
                if matches!(node.op, Op::Sub(..)) {
                    gb.scale_in_place(-1.0);
                }
                push(*b, gb);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let kind = broadcast_kind("mul", av, bv)?;
                push(*a, broadcast_apply(g, bv, kind, |x, y| x * y));
                let full = g.zip_map(av, |x, y| x * y);
                push(*b, unbroadcast(&full, bv, kind));
            }
            Op::Scale(a, s) => push(*a, g.map(|x| x * s)),
            Op::AddScalar(a, _) => push(*a, g.clone()),
            Op::LeakyRelu(a) => {
                let x = self.val(*a);
                push(
                    *a,
                    g.zip_map(x, |gv, xv| if xv > 0.0 { gv } else { LEAKY_SLOPE * gv }),
                );
            }
            Op::Sigmoid(a) => push(*a, g.zip_map(y, |gv, s| gv * s * (1.0 - s))),
            Op::SoftmaxRows(a) => {
                let (r, c) = y.dims2();
                let mut out = vec![0.0; r * c];
                for i in 0..r {
                    let yr = y.row(i);
                    let gr = g.row(i);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        out[i * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                push(*a, Tensor::new(y.shape().to_vec(), out)?);
            }
            Op::Log(a) => push(*a, g.zip_map(self.val(*a), |gv, x| gv / x)),
            Op::Exp(a) => push(*a, g.zip_map(y, |gv, e| gv * e)),
            Op::Clamp(a, lo, hi) => {
                let x = self.val(*a);
                push(
                    *a,
                    g.zip_map(x, |gv, xv| if xv > *lo && xv < *hi { gv } else { 0.0 }),
                );
            }
            Op::Mean(a, axis) => {
                let x = self.val(*a);
                let t = match axis {
                    None => Tensor::filled(x.shape(), g.data()[0] / x.len().max(1) as f64),
                    Some(0) => {
                        let (r, c) = x.dims2();
                        let mut out = vec![0.0; r * c];
                        for i in 0..r {
                            for j in 0..c {
                                out[i * c + j] = g.data()[j] / r as f64;
                            }
                        }
                        Tensor::new(x.shape().to_vec(), out)?
                    }
                    Some(_) => {
                        let (r, c) = x.dims2();
                        let mut out = vec![0.0; r * c];
                        for i in 0..r {
                            for j in 0..c {
                                out[i * c + j] = g.data()[i] / c as f64;
                            }
                        }
                        Tensor::new(x.shape().to_vec(), out)?
                    }
                };
                push(*a, t);
            }
            Op::Sum(a) => push(*a, Tensor::filled(self.val(*a).shape(), g.data()[0])),
            Op::Concat(parts, axis) => {
                let (r, total) = g.dims2();
                let mut offset = 0;
                for p in parts {
                    let pv = self.val(*p);
                    let (pr, pc) = pv.dims2();
                    let mut out = Vec::with_capacity(pv.len());
                    if *axis == 0 {
                        out.extend_from_slice(&g.data()[offset * total..(offset + pr) * total]);
                        offset += pr;
                    } else {
                        for i in 0..r {
                            out.extend_from_slice(&g.row(i)[offset..offset + pc]);
                        }
                        offset += pc;
                    }
                    push(*p, Tensor::new(pv.shape().to_vec(), out)?);
                }
            }
            Op::L2Normalize(a) => {
                let x = self.val(*a);
                let (r, c) = x.dims2();
                let mut out = vec![0.0; r * c];
                for i in 0..r {
                    let xr = x.row(i);
                    let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let yr = y.row(i);
                    let gr = g.row(i);
                    if norm <= NORM_EPS {
                        for j in 0..c {
                            out[i * c + j] = gr[j] / NORM_EPS;
                        }
                        continue;
                    }
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        out[i * c + j] = (gr[j] - yr[j] * dot) / norm;
                    }
                }
                push(*a, Tensor::new(x.shape().to_vec(), out)?);
            }
            Op::RowDot(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let gcol = g.data();
                let c = av.cols();
                let ga = bv
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(idx, v)| v * gcol[idx / c])
                    .collect();
                let gb = av
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(idx, v)| v * gcol[idx / c])
                    .collect();
                push(*a, Tensor::new(av.shape().to_vec(), ga)?);
                push(*b, Tensor::new(bv.shape().to_vec(), gb)?);
            }
            Op::Similarity(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let (n, k) = av.dims2();
                let m = bv.rows();
                let mut ga = vec![0.0; n * k];
                gemm(n, m, k, g.data(), false, bv.data(), false, &mut ga);
                let mut gb = vec![0.0; m * k];
                gemm(m, n, k, g.data(), true, av.data(), false, &mut gb);
                push(*a, Tensor::new(av.shape().to_vec(), ga)?);
                push(*b, Tensor::new(bv.shape().to_vec(), gb)?);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mode,
                running,
            } => {
                let xv = self.val(*x);
                let gam = self.val(*gamma).data();
                let (r, c) = xv.dims2();
                let (mean, var) = match mode {
                    BatchNormMode::Eval => (running.mean.as_slice(), running.var.as_slice()),
                    BatchNormMode::Train => {
                        let s = node.batch_stats.as_ref().expect("train-mode stats");
                        (s.mean.as_slice(), s.var.as_slice())
                    }
                };
                let mut ggamma = vec![0.0; c];
                let mut gbeta = vec![0.0; c];
                let mut xhat = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        let h = (xv.get(i, j) - mean[j]) / (var[j] + BN_EPS).sqrt();
                        xhat[i * c + j] = h;
                        ggamma[j] += g.get(i, j) * h;
                        gbeta[j] += g.get(i, j);
                    }
                }
                let mut gx = vec![0.0; r * c];
                for j in 0..c {
                    let inv_std = 1.0 / (var[j] + BN_EPS).sqrt();
                    for i in 0..r {
                        gx[i * c + j] = match mode {
                            BatchNormMode::Eval => g.get(i, j) * gam[j] * inv_std,
                            BatchNormMode::Train => {
                                gam[j] * inv_std / r as f64
                                    * (r as f64 * g.get(i, j)
                                        - gbeta[j]
                                        - xhat[i * c + j] * ggamma[j])
                            }
                        };
                    }
                }
                push(*x, Tensor::new(xv.shape().to_vec(), gx)?);
                let gshape = self.val(*gamma).shape().to_vec();
                push(*gamma, Tensor::new(gshape, ggamma)?);
                let bshape = self.val(*beta).shape().to_vec();
                push(*beta, Tensor::new(bshape, gbeta)?);
            }
            Op::Gather(table, idx) => {
                let t = self.val(*table);
                let c = t.cols();
                let mut out = vec![0.0; t.len()];
                for (row, &src) in idx.iter().enumerate() {
                    for (o, v) in out[src * c..(src + 1) * c].iter_mut().zip(g.row(row)) {
                        *o += v;
                    }
                }
                push(*table, Tensor::new(t.shape().to_vec(), out)?);
            }
            Op::SegmentSum(x, seg, n) | Op::SegmentMean(x, seg, n) => {
                let xv = self.val(*x);
                let counts = segment_counts(seg, *n);
                let mean = matches!(node.op, Op::SegmentMean(..));
                let mut out = Vec::with_capacity(xv.len());
                for &s in seg.iter() {
                    let scale = if mean { 1.0 / counts[s] as f64 } else { 1.0 };
                    out.extend(g.row(s).iter().map(|v| v * scale));
                }
                push(*x, Tensor::new(xv.shape().to_vec(), out)?);
            }
            Op::SegmentSoftmax(x, seg, n) => {
                let (r, c) = y.dims2();
                let mut dots = vec![0.0; n * c];
                for (i, &s) in seg.iter().enumerate() {
                    for j in 0..c {
                        dots[s * c + j] += g.get(i, j) * y.get(i, j);
                    }
                }
                let mut out = vec![0.0; r * c];
                for (i, &s) in seg.iter().enumerate() {
                    for j in 0..c {
                        out[i * c + j] = y.get(i, j) * (g.get(i, j) - dots[s * c + j]);
                    }
                }
                push(*x, Tensor::new(y.shape().to_vec(), out)?);
            }
            Op::Transpose(a) => push(*a, g.transpose()),
            Op::SliceCols(a, start, end) => {
                let xv = self.val(*a);
                let (r, c) = xv.dims2();
                let w = end - start;
                let mut out = vec![0.0; r * c];
                for i in 0..r {
                    out[i * c + start..i * c + end].copy_from_slice(&g.data()[i * w..(i + 1) * w]);
                }
                push(*a, Tensor::new(xv.shape().to_vec(), out)?);
            }
        }
        Ok(())
    }
}

fn segment_counts(seg: &[usize], n: usize) -> Vec<usize> {
    let mut counts = vec![0usize; n];
    for &s in seg {
        counts[s] += 1;
    }
    counts
}

/// Per-column mean and biased variance.
fn column_moments(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (r, c) = x.dims2();
    let mut mean = vec![0.0; c];
    for i in 0..r {
        for (m, v) in mean.iter_mut().zip(x.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= r as f64);
    let mut var = vec![0.0; c];
    for i in 0..r {
        for j in 0..c {
            let d = x.get(i, j) - mean[j];
            var[j] += d * d;
        }
    }
    var.iter_mut().for_each(|v| *v /= r as f64);
    (mean, var)
}
