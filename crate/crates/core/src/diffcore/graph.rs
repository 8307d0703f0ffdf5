//! Computation graph with deferred forward evaluation and reverse-mode
//! gradient accumulation.
//!
//! Nodes are appended in topological order by the builder methods. Values
//! are produced by [`Graph::forward`], which evaluates every node added
//! since the previous call (or all nodes after a leaf was rebound), so a
//! graph can be grown incrementally during autoregressive generation.

use crate::diffcore::rng::{label_hash, StreamKey};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LeafKind {
    Parameter,
    Constant,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf(LeafKind),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    MatMul(NodeId, NodeId),
    Concat { parts: Vec<NodeId>, axis: usize },
    Slice { x: NodeId, axis: usize, start: usize },
    Gather { table: NodeId, ids: Vec<usize> },
    Sigmoid(NodeId),
    Tanh(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    SumAxis { x: NodeId, axis: usize },
    Broadcast(NodeId),
    Clamp { x: NodeId, lo: f64, hi: f64 },
    Transpose(NodeId),
    Reshape(NodeId),
    ReverseGrad(NodeId),
    StraightThrough { hard: NodeId, soft: NodeId },
    Normal { stream: StreamKey },
    TopKKeep { scores: NodeId, k: Vec<usize>, eligible: Vec<bool> },
    RelaxedTopK { scores: NodeId, k: Vec<usize>, eligible: Vec<bool>, tau: f64 },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf(_) => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::MatMul(..) => "matmul",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Gather { .. } => "gather",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SumAxis { .. } => "sum_axis",
            Op::Broadcast(_) => "broadcast",
            Op::Clamp { .. } => "clamp",
            Op::Transpose(_) => "transpose",
            Op::Reshape(_) => "reshape",
            Op::ReverseGrad(_) => "reverse_grad",
            Op::StraightThrough { .. } => "straight_through",
            Op::Normal { .. } => "normal",
            Op::TopKKeep { .. } => "topk_keep",
            Op::RelaxedTopK { .. } => "relaxed_topk",
        }
    }
}

struct Node<S> {
    op: Op,
    dims: Vec<usize>,
    value: Option<Tensor<S>>,
    requires_grad: bool,
    /// Per-op forward cache needed by the backward pass.
    aux: Vec<f64>,
}

/// Computation graph over tensors of element type `S`.
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Tensor<S>>>,
    evaluated: usize,
    seed: u64,
}

fn outer_axis_inner(dims: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = dims[..axis].iter().product();
    let inner = dims[axis + 1..].iter().product();
    (outer, dims[axis], inner)
}

impl<S: Scalar> Graph<S> {
    /// Creates an empty graph; `seed` keys every stochastic node's stream.
    pub fn new(seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            evaluated: 0,
            seed,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn dims(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].dims
    }

    pub fn value(&self, id: NodeId) -> Result<&Tensor<S>> {
        self.nodes[id.0].value.as_ref().ok_or(Error::ForwardNotRun(id.0))
    }

    /// Gradient accumulated at `id` by the last backward pass.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor<S>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn leaf_kind(&self, id: NodeId) -> Option<LeafKind> {
        match self.nodes[id.0].op {
            Op::Leaf(k) => Some(k),
            _ => None,
        }
    }

    /// Stream consumed by a stochastic node.
    pub fn noise_stream(&self, id: NodeId) -> Option<StreamKey> {
        match self.nodes[id.0].op {
            Op::Normal { stream } => Some(stream),
            _ => None,
        }
    }

    fn push(&mut self, op: Op, dims: Vec<usize>, value: Option<Tensor<S>>) -> NodeId {
        let requires_grad = match &op {
            Op::Leaf(LeafKind::Parameter) => true,
            Op::Leaf(LeafKind::Constant) | Op::Normal { .. } | Op::TopKKeep { .. } => false,
            Op::StraightThrough { soft, .. } => self.nodes[soft.0].requires_grad,
            _ => self.parents(&op).iter().any(|p| self.nodes[p.0].requires_grad),
        };
        self.nodes.push(Node {
            op,
            dims,
            value,
            requires_grad,
            aux: Vec::new(),
        });
        NodeId(self.nodes.len() - 1)
    }

    fn parents(&self, op: &Op) -> Vec<NodeId> {
        match op {
            Op::Leaf(_) | Op::Normal { .. } => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::Concat { parts, .. } => parts.clone(),
            Op::Gather { table, .. } => vec![*table],
            Op::StraightThrough { hard, soft } => vec![*hard, *soft],
            Op::Scale(x, _)
            | Op::Slice { x, .. }
            | Op::Sigmoid(x)
            | Op::Tanh(x)
            | Op::Exp(x)
            | Op::Log(x)
            | Op::Softmax(x)
            | Op::LogSoftmax(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::SumAxis { x, .. }
            | Op::Broadcast(x)
            | Op::Clamp { x, .. }
            | Op::Transpose(x)
            | Op::Reshape(x)
            | Op::ReverseGrad(x) => vec![*x],
            Op::TopKKeep { scores, .. } | Op::RelaxedTopK { scores, .. } => vec![*scores],
        }
    }

    // ---- leaves ----

    pub fn parameter(&mut self, value: Tensor<S>) -> NodeId {
        let dims = value.dims().to_vec();
        self.push(Op::Leaf(LeafKind::Parameter), dims, Some(value))
    }

    pub fn constant(&mut self, value: Tensor<S>) -> NodeId {
        let dims = value.dims().to_vec();
        self.push(Op::Leaf(LeafKind::Constant), dims, Some(value))
    }

    /// Declares a leaf whose value is supplied later through [`Graph::bind`].
    pub fn leaf(&mut self, kind: LeafKind, dims: &[usize]) -> NodeId {
        self.push(Op::Leaf(kind), dims.to_vec(), None)
    }

    /// Binds a value to a leaf. Every non-leaf node is re-evaluated by the
    /// next forward pass.
    pub fn bind(&mut self, id: NodeId, value: Tensor<S>) -> Result<()> {
        let node = &mut self.nodes[id.0];
        if !matches!(node.op, Op::Leaf(_)) {
            return Err(Error::InvalidArgument(format!("node {} is not a leaf", id.0)));
        }
        if node.dims != value.dims() {
            return Err(Error::DimMismatch {
                op: "bind",
                left: node.dims.clone(),
                right: value.dims().to_vec(),
            });
        }
        node.value = Some(value);
        self.evaluated = 0;
        Ok(())
    }

    // ---- primitive builders ----

    fn same_dims(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<Vec<usize>> {
        let (da, db) = (self.dims(a), self.dims(b));
        if da != db {
            return Err(Error::DimMismatch {
                op,
                left: da.to_vec(),
                right: db.to_vec(),
            });
        }
        Ok(da.to_vec())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let d = self.same_dims("add", a, b)?;
        Ok(self.push(Op::Add(a, b), d, None))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let d = self.same_dims("sub", a, b)?;
        Ok(self.push(Op::Sub(a, b), d, None))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let d = self.same_dims("mul", a, b)?;
        Ok(self.push(Op::Mul(a, b), d, None))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let d = self.dims(x).to_vec();
        self.push(Op::Scale(x, factor), d, None)
    }

    /// Matrix product of `(m, k)` and `(k, n)`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (da, db) = (self.dims(a), self.dims(b));
        if da.len() != 2 || db.len() != 2 || da[1] != db[0] {
            return Err(Error::DimMismatch {
                op: "matmul",
                left: da.to_vec(),
                right: db.to_vec(),
            });
        }
        let d = vec![da[0], db[1]];
        Ok(self.push(Op::MatMul(a, b), d, None))
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let mut dims = self.dims(*first).to_vec();
        if axis >= dims.len() {
            return Err(Error::InvalidArgument(format!("concat axis {axis} out of range")));
        }
        dims[axis] = 0;
        for p in parts {
            let dp = self.dims(*p);
            let compatible = dp.len() == dims.len()
                && dp.iter().enumerate().all(|(i, &v)| i == axis || v == dims[i]);
            if !compatible {
                return Err(Error::DimMismatch {
                    op: "concat",
                    left: self.dims(*first).to_vec(),
                    right: dp.to_vec(),
                });
            }
            dims[axis] += dp[axis];
        }
        Ok(self.push(
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            dims,
            None,
        ))
    }

    /// `len` entries of `x` along `axis`, starting at `start`.
    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let mut dims = self.dims(x).to_vec();
        if axis >= dims.len() || len == 0 || start + len > dims[axis] {
            return Err(Error::InvalidArgument(format!(
                "slice [{start}, {}) on axis {axis} of {dims:?}",
                start + len
            )));
        }
        dims[axis] = len;
        Ok(self.push(Op::Slice { x, axis, start }, dims, None))
    }

    /// Rows of a `(V, E)` table selected by `ids`, giving `(ids.len(), E)`.
    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let d = self.dims(table).to_vec();
        if d.len() != 2 || ids.is_empty() {
            return Err(Error::InvalidArgument(format!("gather from {d:?}")));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= d[0]) {
            return Err(Error::InvalidArgument(format!("gather id {bad} out of range {}", d[0])));
        }
        Ok(self.push(
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            vec![ids.len(), d[1]],
            None,
        ))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let d = self.dims(x).to_vec();
        self.push(Op::Sigmoid(x), d, None)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let d = self.dims(x).to_vec();
        self.push(Op::Tanh(x), d, None)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let d = self.dims(x).to_vec();
        self.push(Op::Exp(x), d, None)
    }

    pub fn log(&mut self, x: NodeId) -> NodeId {
        let d = self.dims(x).to_vec();
        self.push(Op::Log(x), d, None)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let d = self.dims(x).to_vec();
        self.push(Op::Softmax(x), d, None)
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: NodeId) -> NodeId {
        let d = self.dims(x).to_vec();
        self.push(Op::LogSoftmax(x), d, None)
    }

    /// Sum of all entries (accumulated in f64), as a `[1]` tensor.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sum(x), vec![1], None)
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Mean(x), vec![1], None)
    }

    /// Sum along `axis`, keeping it with size 1.
    pub fn sum_axis(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let mut dims = self.dims(x).to_vec();
        if axis >= dims.len() {
            return Err(Error::InvalidArgument(format!("sum axis {axis} of {dims:?}")));
        }
        dims[axis] = 1;
        Ok(self.push(Op::SumAxis { x, axis }, dims, None))
    }

    /// Expands size-1 axes of `x` to `dims` (ranks must agree).
    pub fn broadcast(&mut self, x: NodeId, dims: &[usize]) -> Result<NodeId> {
        let d = self.dims(x);
        let ok = d.len() == dims.len() && d.iter().zip(dims).all(|(&a, &b)| a == b || a == 1);
        if !ok {
            return Err(Error::DimMismatch {
                op: "broadcast",
                left: d.to_vec(),
                right: dims.to_vec(),
            });
        }
        Ok(self.push(Op::Broadcast(x), dims.to_vec(), None))
    }

    /// Elementwise clamp; gradient passes only where `lo <= x <= hi`.
    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> NodeId {
        let d = self.dims(x).to_vec();
        self.push(Op::Clamp { x, lo, hi }, d, None)
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let d = self.dims(x);
        if d.len() != 2 {
            return Err(Error::InvalidArgument(format!("transpose of rank-{} tensor", d.len())));
        }
        let nd = vec![d[1], d[0]];
        Ok(self.push(Op::Transpose(x), nd, None))
    }

    pub fn reshape(&mut self, x: NodeId, dims: &[usize]) -> Result<NodeId> {
        let d = self.dims(x);
        if d.iter().product::<usize>() != dims.iter().product::<usize>() || dims.contains(&0) {
            return Err(Error::DimMismatch {
                op: "reshape",
                left: d.to_vec(),
                right: dims.to_vec(),
            });
        }
        Ok(self.push(Op::Reshape(x), dims.to_vec(), None))
    }

    /// Identity in the forward pass; negates the gradient in the backward pass.
    pub fn reverse_grad(&mut self, x: NodeId) -> NodeId {
        let d = self.dims(x).to_vec();
        self.push(Op::ReverseGrad(x), d, None)
    }

    /// Takes the value of `hard` and routes the gradient to `soft` as if
    /// the node's value were `soft`. `hard` receives no gradient.
    pub fn straight_through(&mut self, hard: NodeId, soft: NodeId) -> Result<NodeId> {
        let d = self.same_dims("straight_through", hard, soft)?;
        Ok(self.push(Op::StraightThrough { hard, soft }, d, None))
    }

    /// Standard-normal noise drawn from the stream named `label`.
    pub fn normal(&mut self, dims: &[usize], label: &str) -> NodeId {
        let stream = StreamKey {
            seed: self.seed,
            stream: label_hash(label),
        };
        self.push(Op::Normal { stream }, dims.to_vec(), None)
    }

    /// Per-row keep mask of a `(B, L)` score matrix: the `k[b]` eligible
    /// positions with the smallest scores get 0, everything else 1. Ties
    /// go to the lowest index. Not differentiable.
    pub fn topk_keep(&mut self, scores: NodeId, k: &[usize], eligible: &[bool]) -> Result<NodeId> {
        let k = self.check_topk_args("topk_keep", scores, k, eligible)?;
        let d = self.dims(scores).to_vec();
        Ok(self.push(
            Op::TopKKeep {
                scores,
                k,
                eligible: eligible.to_vec(),
            },
            d,
            None,
        ))
    }

    /// Relaxed drop weights for the same selection as [`Graph::topk_keep`].
    ///
    /// Runs `k[b]` rounds of a softmax over `-s / tau` restricted to eligible
    /// positions; after each round the selected probability mass is removed
    /// by adding `ln(1 - p)` to the logits. Each row sums to `k[b]`.
    pub fn relaxed_topk(
        &mut self,
        scores: NodeId,
        k: &[usize],
        eligible: &[bool],
        tau: f64,
    ) -> Result<NodeId> {
        if !(tau > 0.0) {
            return Err(Error::InvalidArgument(format!("temperature {tau} must be positive")));
        }
        let k = self.check_topk_args("relaxed_topk", scores, k, eligible)?;
        let d = self.dims(scores).to_vec();
        Ok(self.push(
            Op::RelaxedTopK {
                scores,
                k,
                eligible: eligible.to_vec(),
                tau,
            },
            d,
            None,
        ))
    }

    fn check_topk_args(
        &self,
        op: &'static str,
        scores: NodeId,
        k: &[usize],
        eligible: &[bool],
    ) -> Result<Vec<usize>> {
        let d = self.dims(scores);
        if d.len() != 2 || d[0] != k.len() || d[0] * d[1] != eligible.len() {
            return Err(Error::DimMismatch {
                op,
                left: d.to_vec(),
                right: vec![k.len(), eligible.len()],
            });
        }
        let cols = d[1];
        Ok(k.iter()
            .enumerate()
            .map(|(b, &kb)| {
                let avail = eligible[b * cols..(b + 1) * cols].iter().filter(|&&e| e).count();
                if kb > avail {
                    log::warn!("{op}: K={kb} exceeds {avail} eligible positions in row {b}; clamped");
                    avail
                } else {
                    kb
                }
            })
            .collect())
    }

    // ---- evaluation ----

    /// Evaluates all nodes not yet evaluated.
    pub fn forward(&mut self) -> Result<()> {
        for i in self.evaluated..self.nodes.len() {
            self.eval_node(i)?;
            self.evaluated = i + 1;
        }
        Ok(())
    }

    /// Binds the given leaves, then runs a full forward pass.
    pub fn forward_with(&mut self, bindings: Vec<(NodeId, Tensor<S>)>) -> Result<()> {
        for (id, t) in bindings {
            self.bind(id, t)?;
        }
        self.forward()
    }

    fn eval_node(&mut self, i: usize) -> Result<()> {
        let (before, rest) = self.nodes.split_at_mut(i);
        let node = &mut rest[0];
        let val = |id: &NodeId| -> &Tensor<S> {
            before[id.0].value.as_ref().expect("parents are evaluated before children")
        };
        let dims = node.dims.clone();
        let mut aux = Vec::new();
        let out: Tensor<S> = match &node.op {
            Op::Leaf(_) => {
                if node.value.is_none() {
                    return Err(Error::UnboundLeaf(i));
                }
                return Ok(());
            }
            Op::Add(a, b) => zip_map(val(a), val(b), |x, y| x + y),
            Op::Sub(a, b) => zip_map(val(a), val(b), |x, y| x - y),
            Op::Mul(a, b) => zip_map(val(a), val(b), |x, y| x * y),
            Op::Scale(x, f) => {
                let f = S::from_f64_lossy(*f);
                val(x).map(|v| v * f)
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (val(a), val(b));
                let (m, k, n) = (va.dims()[0], va.dims()[1], vb.dims()[1]);
                let mut out = vec![S::zero(); m * n];
                S::gemm(
                    m,
                    k,
                    n,
                    S::one(),
                    va.data(),
                    (k as isize, 1),
                    vb.data(),
                    (n as isize, 1),
                    S::zero(),
                    &mut out,
                    (n as isize, 1),
                );
                Tensor::new(dims.clone(), out)?
            }
            Op::Concat { parts, axis } => {
                let (outer, _, inner) = outer_axis_inner(&dims, *axis);
                let mut out = Vec::with_capacity(dims.iter().product());
                for o in 0..outer {
                    for p in parts {
                        let v = val(p);
                        let chunk = v.dims()[*axis] * inner;
                        out.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
                    }
                }
                Tensor::new(dims.clone(), out)?
            }
            Op::Slice { x, axis, start } => {
                let v = val(x);
                let (outer, full, inner) = outer_axis_inner(v.dims(), *axis);
                let len = dims[*axis];
                let mut out = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    let base = o * full * inner + start * inner;
                    out.extend_from_slice(&v.data()[base..base + len * inner]);
                }
                Tensor::new(dims.clone(), out)?
            }
            Op::Gather { table, ids } => {
                let t = val(table);
                let e = t.dims()[1];
                let mut out = Vec::with_capacity(ids.len() * e);
                for &id in ids {
                    out.extend_from_slice(&t.data()[id * e..(id + 1) * e]);
                }
                Tensor::new(dims.clone(), out)?
            }
            Op::Sigmoid(x) => val(x).map(sigmoid),
            Op::Tanh(x) => val(x).map(|v| v.tanh()),
            Op::Exp(x) => val(x).map(|v| v.exp()),
            Op::Log(x) => val(x).map(|v| v.ln()),
            Op::Softmax(x) => {
                let mut t = val(x).clone();
                let (_, cols) = t.rows_cols();
                for row in t.data_mut().chunks_mut(cols) {
                    softmax_in_place(row);
                }
                t
            }
            Op::LogSoftmax(x) => {
                let mut t = val(x).clone();
                let (_, cols) = t.rows_cols();
                for row in t.data_mut().chunks_mut(cols) {
                    let m = row.iter().fold(S::neg_infinity(), |a, &b| a.max(b));
                    let lse = row.iter().map(|&v| (v - m).as_f64().exp()).sum::<f64>().ln();
                    let shift = m + S::from_f64_lossy(lse);
                    for v in row.iter_mut() {
                        *v -= shift;
                    }
                }
                t
            }
            Op::Sum(x) => Tensor::scalar(S::from_f64_lossy(val(x).sum_f64())),
            Op::Mean(x) => {
                let v = val(x);
                Tensor::scalar(S::from_f64_lossy(v.sum_f64() / v.len() as f64))
            }
            Op::SumAxis { x, axis } => {
                let v = val(x);
                let (outer, n, inner) = outer_axis_inner(v.dims(), *axis);
                let mut acc = vec![0.0f64; outer * inner];
                for o in 0..outer {
                    for a in 0..n {
                        let src = &v.data()[(o * n + a) * inner..(o * n + a + 1) * inner];
                        for (dst, s) in acc[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                            *dst += s.as_f64();
                        }
                    }
                }
                Tensor::new(dims.clone(), acc.into_iter().map(S::from_f64_lossy).collect())?
            }
            Op::Broadcast(x) => broadcast_forward(val(x), &dims),
            Op::Clamp { x, lo, hi } => {
                let (lo, hi) = (S::from_f64_lossy(*lo), S::from_f64_lossy(*hi));
                val(x).map(|v| v.max(lo).min(hi))
            }
            Op::Transpose(x) => {
                let v = val(x);
                let (r, c) = (v.dims()[0], v.dims()[1]);
                let mut out = vec![S::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        out[j * r + i] = v.data()[i * c + j];
                    }
                }
                Tensor::new(dims.clone(), out)?
            }
            Op::Reshape(x) => val(x).clone().reshape(dims.clone())?,
            Op::ReverseGrad(x) => val(x).clone(),
            Op::StraightThrough { hard, .. } => val(hard).clone(),
            Op::Normal { stream } => {
                let n = dims.iter().product();
                Tensor::from_f64(&dims, &stream.normals(n))?
            }
            Op::TopKKeep { scores, k, eligible } => topk_keep_forward(val(scores), k, eligible),
            Op::RelaxedTopK {
                scores,
                k,
                eligible,
                tau,
            } => {
                let (out, rounds) = relaxed_topk_forward(val(scores), k, eligible, *tau);
                aux = rounds;
                out
            }
        };
        if !out.is_finite() {
            return Err(Error::NonFinite {
                node: i,
                op: node.op.name(),
            });
        }
        node.value = Some(out);
        node.aux = aux;
        Ok(())
    }

    /// Reverse-mode sweep from a scalar node. Gradients of every node that
    /// depends on a parameter are available through [`Graph::grad`]
    /// afterwards; constants never receive gradients.
    pub fn backward(&mut self, seed: NodeId) -> Result<()> {
        let seed_val = self.value(seed)?;
        if seed_val.len() != 1 {
            return Err(Error::SeedNotScalar(seed_val.dims().to_vec()));
        }
        if self.evaluated <= seed.0 {
            return Err(Error::ForwardNotRun(seed.0));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[seed.0] = Some(Tensor::ones(&self.nodes[seed.0].dims));
        for i in (0..=seed.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            if self.nodes[i].requires_grad {
                self.backprop_node(i, &g);
            }
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    /// Parameter leaves paired with their gradient (zeros when unreached).
    pub fn parameter_grads(&self) -> Vec<(NodeId, Tensor<S>)> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::Leaf(LeafKind::Parameter)))
            .map(|(i, n)| {
                let g = self.grads.get(i).and_then(|g| g.clone()).unwrap_or_else(|| Tensor::zeros(&n.dims));
                (NodeId(i), g)
            })
            .collect()
    }

    fn accumulate(&mut self, id: NodeId, contribution: Tensor<S>) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut self.grads[id.0] {
            Some(g) => g.add_assign(&contribution),
            slot @ None => *slot = Some(contribution),
        }
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn backprop_node(&mut self, i: usize, g: &Tensor<S>) {
        let op = self.nodes[i].op.clone();
        let val = |id: NodeId| self.nodes[id.0].value.as_ref().expect("forward ran");
        let out = self.nodes[i].value.as_ref().expect("forward ran");
        let mut contributions: Vec<(NodeId, Tensor<S>)> = Vec::with_capacity(2);
        match op {
            Op::Leaf(_) | Op::Normal { .. } | Op::TopKKeep { .. } => {}
            Op::Add(a, b) => {
                contributions.push((a, g.clone()));
                contributions.push((b, g.clone()));
            }
            Op::Sub(a, b) => {
                contributions.push((a, g.clone()));
                contributions.push((b, g.map(|v| -v)));
            }
            Op::Mul(a, b) => {
                if self.wants(a) {
                    contributions.push((a, zip_map(g, val(b), |x, y| x * y)));
                }
                if self.wants(b) {
                    contributions.push((b, zip_map(g, val(a), |x, y| x * y)));
                }
            }
            Op::Scale(x, f) => {
                let f = S::from_f64_lossy(f);
                contributions.push((x, g.map(|v| v * f)));
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (val(a), val(b));
                let (m, k, n) = (va.dims()[0], va.dims()[1], vb.dims()[1]);
                if self.wants(a) {
                    // dA = G · Bᵀ
                    let mut da = vec![S::zero(); m * k];
                    S::gemm(
                        m,
                        n,
                        k,
                        S::one(),
                        g.data(),
                        (n as isize, 1),
                        vb.data(),
                        (1, n as isize),
                        S::zero(),
                        &mut da,
                        (k as isize, 1),
                    );
                    contributions.push((a, Tensor::new(vec![m, k], da).expect("dims")));
                }
                if self.wants(b) {
                    // dB = Aᵀ · G
                    let mut db = vec![S::zero(); k * n];
                    S::gemm(
                        k,
                        m,
                        n,
                        S::one(),
                        va.data(),
                        (1, k as isize),
                        g.data(),
                        (n as isize, 1),
                        S::zero(),
                        &mut db,
                        (n as isize, 1),
                    );
                    contributions.push((b, Tensor::new(vec![k, n], db).expect("dims")));
                }
            }
            Op::Concat { parts, axis } => {
                let (outer, _, inner) = outer_axis_inner(g.dims(), axis);
                let total = g.dims()[axis] * inner;
                let mut offset = 0;
                for p in parts {
                    let pd = val(p).dims().to_vec();
                    let chunk = pd[axis] * inner;
                    if self.wants(p) {
                        let mut d = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            let base = o * total + offset;
                            d.extend_from_slice(&g.data()[base..base + chunk]);
                        }
                        contributions.push((p, Tensor::new(pd, d).expect("dims")));
                    }
                    offset += chunk;
                }
            }
            Op::Slice { x, axis, start } => {
                let xd = val(x).dims().to_vec();
                let (outer, full, inner) = outer_axis_inner(&xd, axis);
                let len = g.dims()[axis];
                let mut d = Tensor::zeros(&xd);
                for o in 0..outer {
                    let base = o * full * inner + start * inner;
                    let src = &g.data()[o * len * inner..(o + 1) * len * inner];
                    d.data_mut()[base..base + len * inner].copy_from_slice(src);
                }
                contributions.push((x, d));
            }
            Op::Gather { table, ids } => {
                let td = val(table).dims().to_vec();
                let e = td[1];
                let mut d = Tensor::zeros(&td);
                for (r, &id) in ids.iter().enumerate() {
                    let dst = &mut d.data_mut()[id * e..(id + 1) * e];
                    for (a, &b) in dst.iter_mut().zip(&g.data()[r * e..(r + 1) * e]) {
                        *a += b;
                    }
                }
                contributions.push((table, d));
            }
            Op::Sigmoid(x) => {
                contributions.push((x, zip_map(g, out, |g, y| g * y * (S::one() - y))));
            }
            Op::Tanh(x) => {
                contributions.push((x, zip_map(g, out, |g, y| g * (S::one() - y * y))));
            }
            Op::Exp(x) => contributions.push((x, zip_map(g, out, |g, y| g * y))),
            Op::Log(x) => contributions.push((x, zip_map(g, val(x), |g, v| g / v))),
            Op::Softmax(x) => {
                let (_, cols) = out.rows_cols();
                let mut d = g.clone();
                for (drow, yrow) in d.data_mut().chunks_mut(cols).zip(out.data().chunks(cols)) {
                    let dot: f64 = drow.iter().zip(yrow).map(|(a, b)| (*a * *b).as_f64()).sum();
                    let dot = S::from_f64_lossy(dot);
                    for (dv, &y) in drow.iter_mut().zip(yrow) {
                        *dv = y * (*dv - dot);
                    }
                }
                contributions.push((x, d));
            }
            Op::LogSoftmax(x) => {
                let (_, cols) = out.rows_cols();
                let mut d = g.clone();
                for (drow, yrow) in d.data_mut().chunks_mut(cols).zip(out.data().chunks(cols)) {
                    let gs = S::from_f64_lossy(drow.iter().map(|v| v.as_f64()).sum::<f64>());
                    for (dv, &y) in drow.iter_mut().zip(yrow) {
                        *dv -= y.exp() * gs;
                    }
                }
                contributions.push((x, d));
            }
            Op::Sum(x) => {
                let xd = val(x).dims().to_vec();
                contributions.push((x, Tensor::full(&xd, g.item())));
            }
            Op::Mean(x) => {
                let v = val(x);
                let n = S::from_usize(v.len()).expect("count fits");
                contributions.push((x, Tensor::full(v.dims(), g.item() / n)));
            }
            Op::SumAxis { x, .. } => {
                let xd = val(x).dims().to_vec();
                contributions.push((x, broadcast_forward(g, &xd)));
            }
            Op::Broadcast(x) => {
                let xd = val(x).dims().to_vec();
                contributions.push((x, broadcast_reduce(g, &xd)));
            }
            Op::Clamp { x, lo, hi } => {
                let (lo, hi) = (S::from_f64_lossy(lo), S::from_f64_lossy(hi));
                contributions.push((
                    x,
                    zip_map(g, val(x), |g, v| if v >= lo && v <= hi { g } else { S::zero() }),
                ));
            }
            Op::Transpose(x) => {
                let (r, c) = (g.dims()[0], g.dims()[1]);
                let mut d = vec![S::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        d[j * r + i] = g.data()[i * c + j];
                    }
                }
                contributions.push((x, Tensor::new(vec![c, r], d).expect("dims")));
            }
            Op::Reshape(x) => {
                let xd = val(x).dims().to_vec();
                contributions.push((x, g.clone().reshape(xd).expect("dims")));
            }
            Op::ReverseGrad(x) => contributions.push((x, g.map(|v| -v))),
            Op::StraightThrough { soft, .. } => contributions.push((soft, g.clone())),
            Op::RelaxedTopK {
                scores,
                k,
                eligible,
                tau,
            } => {
                let d = relaxed_topk_backward(g, &self.nodes[i].aux, &k, &eligible, tau);
                contributions.push((scores, d));
            }
        }
        for (id, c) in contributions {
            self.accumulate(id, c);
        }
    }
}

#[inline]
fn sigmoid<S: Scalar>(v: S) -> S {
    if v >= S::zero() {
        S::one() / (S::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (S::one() + e)
    }
}

pub(crate) fn softmax_in_place<S: Scalar>(row: &mut [S]) {
    let m = row.iter().fold(S::neg_infinity(), |a, &b| a.max(b));
    let mut total = 0.0f64;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        total += v.as_f64();
    }
    let inv = S::from_f64_lossy(1.0 / total);
    for v in row.iter_mut() {
        *v *= inv;
    }
}

fn zip_map<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, f: impl Fn(S, S) -> S) -> Tensor<S> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.dims().to_vec(), data).expect("operands share dims")
}

fn strides(dims: &[usize]) -> Vec<usize> {
    let mut s = vec![1; dims.len()];
    for i in (0..dims.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * dims[i + 1];
    }
    s
}

/// Maps every output index of a broadcast to its source offset.
fn broadcast_source_offsets(src: &[usize], dst: &[usize]) -> Vec<usize> {
    let ss = strides(src);
    let n: usize = dst.iter().product();
    let mut offsets = Vec::with_capacity(n);
    let mut idx = vec![0usize; dst.len()];
    for _ in 0..n {
        let off: usize = idx
            .iter()
            .zip(src)
            .zip(&ss)
            .map(|((&i, &s), &st)| if s == 1 { 0 } else { i * st })
            .sum();
        offsets.push(off);
        for ax in (0..dst.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < dst[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    offsets
}

fn broadcast_forward<S: Scalar>(x: &Tensor<S>, dims: &[usize]) -> Tensor<S> {
    let src = x.dims();
    let data = if src.len() == 2 && src[0] == 1 && src[1] == dims[1] {
        let mut v = Vec::with_capacity(dims[0] * dims[1]);
        for _ in 0..dims[0] {
            v.extend_from_slice(x.data());
        }
        v
    } else if src.len() == 2 && src[1] == 1 && src[0] == dims[0] {
        x.data()
            .iter()
            .flat_map(|&v| std::iter::repeat_n(v, dims[1]))
            .collect()
    } else {
        broadcast_source_offsets(src, dims)
            .into_iter()
            .map(|o| x.data()[o])
            .collect()
    };
    Tensor::new(dims.to_vec(), data).expect("broadcast dims")
}

fn broadcast_reduce<S: Scalar>(g: &Tensor<S>, src: &[usize]) -> Tensor<S> {
    let mut acc = vec![0.0f64; src.iter().product()];
    for (o, &v) in broadcast_source_offsets(src, g.dims()).iter().zip(g.data()) {
        acc[*o] += v.as_f64();
    }
    Tensor::new(src.to_vec(), acc.into_iter().map(S::from_f64_lossy).collect()).expect("dims")
}

/// Indices of the `k` smallest eligible entries of one row, ties to the
/// lowest index.
pub(crate) fn smallest_k(row: &[f64], eligible: &[bool], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).filter(|&i| eligible[i]).collect();
    idx.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

fn topk_keep_forward<S: Scalar>(scores: &Tensor<S>, k: &[usize], eligible: &[bool]) -> Tensor<S> {
    let (rows, cols) = scores.rows_cols();
    let mut keep = Tensor::ones(scores.dims());
    for b in 0..rows {
        let row: Vec<f64> = scores.data()[b * cols..(b + 1) * cols].iter().map(|v| v.as_f64()).collect();
        for j in smallest_k(&row, &eligible[b * cols..(b + 1) * cols], k[b]) {
            keep.data_mut()[b * cols + j] = S::zero();
        }
    }
    keep
}

const RELAX_FLOOR: f64 = 1e-12;

/// `1 - p[i]` for every eligible `i`, computed as the sum of the other
/// probabilities so that it stays accurate when `p[i]` is close to one.
fn remaining_mass(p: &[f64], eligible: &[bool]) -> Vec<f64> {
    let total: f64 = p.iter().zip(eligible).filter(|(_, &e)| e).map(|(v, _)| v).sum();
    let max_i = (0..p.len()).filter(|&i| eligible[i]).max_by(|&a, &b| p[a].total_cmp(&p[b]));
    p.iter()
        .enumerate()
        .map(|(i, &v)| {
            if Some(i) == max_i {
                (0..p.len()).filter(|&j| j != i && eligible[j]).map(|j| p[j]).sum()
            } else {
                total - v
            }
        })
        .collect()
}

/// Returns the soft drop weights and, per row, the per-round probability
/// vectors (row-major `[round][col]`, ineligible columns zero).
///
/// Logits live in score units (`-s`); each round takes a softmax of
/// `logits / tau` and adds `ln(1 - p)` to the unscaled logits, which drives
/// already-selected positions out as `tau -> 0`.
fn relaxed_topk_forward<S: Scalar>(
    scores: &Tensor<S>,
    k: &[usize],
    eligible: &[bool],
    tau: f64,
) -> (Tensor<S>, Vec<f64>) {
    let (rows, cols) = scores.rows_cols();
    let mut soft = vec![0.0f64; rows * cols];
    let mut rounds = Vec::new();
    for b in 0..rows {
        let el = &eligible[b * cols..(b + 1) * cols];
        let mut logits: Vec<f64> = scores.data()[b * cols..(b + 1) * cols]
            .iter()
            .map(|v| -v.as_f64())
            .collect();
        for _ in 0..k[b] {
            let scaled: Vec<f64> = logits.iter().map(|v| v / tau).collect();
            let p = masked_softmax(&scaled, el);
            let rest = remaining_mass(&p, el);
            for j in 0..cols {
                if el[j] {
                    soft[b * cols + j] += p[j];
                    logits[j] += rest[j].max(RELAX_FLOOR).ln();
                }
            }
            rounds.extend_from_slice(&p);
        }
    }
    let t = Tensor::new(scores.dims().to_vec(), soft.into_iter().map(S::from_f64_lossy).collect())
        .expect("dims");
    (t, rounds)
}

fn masked_softmax(logits: &[f64], eligible: &[bool]) -> Vec<f64> {
    let m = logits
        .iter()
        .zip(eligible)
        .filter(|(_, &e)| e)
        .map(|(&v, _)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = logits
        .iter()
        .zip(eligible)
        .map(|(&v, &e)| if e { (v - m).exp() } else { 0.0 })
        .collect();
    let total: f64 = p.iter().sum();
    for v in &mut p {
        *v /= total;
    }
    p
}

fn relaxed_topk_backward<S: Scalar>(
    g: &Tensor<S>,
    rounds: &[f64],
    k: &[usize],
    eligible: &[bool],
    tau: f64,
) -> Tensor<S> {
    let (rows, cols) = g.rows_cols();
    let mut out = vec![0.0f64; rows * cols];
    let mut offset = 0;
    for b in 0..rows {
        let el = &eligible[b * cols..(b + 1) * cols];
        let gs: Vec<f64> = g.data()[b * cols..(b + 1) * cols].iter().map(|v| v.as_f64()).collect();
        let row_rounds = &rounds[offset..offset + k[b] * cols];
        offset += k[b] * cols;
        // adjoint of the unscaled logits entering round j+1
        let mut a_next = vec![0.0f64; cols];
        for j in (0..k[b]).rev() {
            let p = &row_rounds[j * cols..(j + 1) * cols];
            let rest = remaining_mass(p, el);
            let mut p_bar = vec![0.0f64; cols];
            for c in 0..cols {
                if !el[c] {
                    continue;
                }
                p_bar[c] = gs[c];
                if rest[c] > RELAX_FLOOR {
                    p_bar[c] -= a_next[c] / rest[c];
                }
            }
            let dot: f64 = (0..cols).filter(|&c| el[c]).map(|c| p_bar[c] * p[c]).sum();
            for c in 0..cols {
                if el[c] {
                    a_next[c] += p[c] * (p_bar[c] - dot) / tau;
                }
            }
        }
        for c in 0..cols {
            if el[c] {
                out[b * cols + c] = -a_next[c];
            }
        }
    }
    Tensor::new(g.dims().to_vec(), out.into_iter().map(S::from_f64_lossy).collect()).expect("dims")
}
