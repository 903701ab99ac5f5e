use std::collections::HashMap;
use std::sync::Arc;

use super::{ParamId, ParamStore, Tensor, TensorError};

/// Index of a node inside a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param(ParamId),
    Constant,
    MatMul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Sigmoid(NodeId),
    Relu(NodeId),
    Softmax(NodeId),
    MaskedSoftmax {
        logits: NodeId,
        lengths: Arc<[usize]>,
    },
    Gather {
        src: NodeId,
        index: Arc<[usize]>,
    },
    Concat(Vec<NodeId>),
    Slice {
        src: NodeId,
        start: usize,
        end: usize,
    },
    Reshape {
        src: NodeId,
        shape: Vec<usize>,
    },
    RowSum(NodeId),
    WeightedPool {
        weights: NodeId,
        values: NodeId,
        lengths: Arc<[usize]>,
    },
    MeanPool {
        values: NodeId,
        lengths: Arc<[usize]>,
    },
    Mean(NodeId),
    Sum(NodeId),
    SumSquares(NodeId),
    Detach(NodeId),
    Bce {
        prob: NodeId,
        target: NodeId,
        weights: Option<Arc<[f64]>>,
    },
    PairwiseMlpMean {
        left: NodeId,
        right: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::Constant => "constant",
            Op::MatMul(..) => "matmul",
            Op::AddBias(..) => "add_bias",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Sigmoid(_) => "sigmoid",
            Op::Relu(_) => "relu",
            Op::Softmax(_) => "softmax",
            Op::MaskedSoftmax { .. } => "masked_softmax",
            Op::Gather { .. } => "gather",
            Op::Concat(_) => "concat",
            Op::Slice { .. } => "slice",
            Op::Reshape { .. } => "reshape",
            Op::RowSum(_) => "row_sum",
            Op::WeightedPool { .. } => "weighted_pool",
            Op::MeanPool { .. } => "mean_pool",
            Op::Mean(_) => "mean",
            Op::Sum(_) => "sum",
            Op::SumSquares(_) => "sum_squares",
            Op::Detach(_) => "detach",
            Op::Bce { .. } => "bce",
            Op::PairwiseMlpMean { .. } => "pairwise_mlp_mean",
        }
    }

    fn parents(&self) -> Vec<NodeId> {
        match self {
            Op::Input | Op::Param(_) | Op::Constant => vec![],
            Op::MatMul(a, b) | Op::AddBias(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(a, _)
            | Op::Sigmoid(a)
            | Op::Relu(a)
            | Op::Softmax(a)
            | Op::RowSum(a)
            | Op::Mean(a)
            | Op::Sum(a)
            | Op::SumSquares(a)
            | Op::Detach(a) => vec![*a],
            Op::MaskedSoftmax { logits, .. } => vec![*logits],
            Op::Gather { src, .. } | Op::Slice { src, .. } | Op::Reshape { src, .. } => vec![*src],
            Op::Concat(parts) => parts.clone(),
            Op::WeightedPool {
                weights, values, ..
            } => vec![*weights, *values],
            Op::MeanPool { values, .. } => vec![*values],
            Op::Bce { prob, target, .. } => vec![*prob, *target],
            Op::PairwiseMlpMean {
                left,
                right,
                weight,
                bias,
            } => vec![*left, *right, *weight, *bias],
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// A computation graph whose topological order is its insertion order.
///
/// Nodes are evaluated eagerly when added. Leaves are inputs (rebindable by
/// name), parameters (copied from a [`ParamStore`]) and constants.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    names: HashMap<String, NodeId>,
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const BCE_CLAMP: f64 = 1e-12;

fn clamp_prob(p: f64) -> f64 {
    p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP)
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

    pub fn value(&self, node: NodeId) -> &Tensor {
        &self.nodes[node.0].value
    }

    /// Looks up a node registered with [`Graph::set_name`] or an input.
    pub fn named(&self, name: &str) -> Option<NodeId> {
        self.names.get(name).copied()
    }

    pub fn set_name(&mut self, node: NodeId, name: impl Into<String>) {
        self.names.insert(name.into(), node);
    }

    fn push_leaf(&mut self, op: Op, value: Tensor, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op) -> Result<NodeId, TensorError> {
        let id = self.nodes.len();
        let value = self.compute(id, &op)?;
        let needs_grad = match op {
            Op::Detach(_) => false,
            _ => op.parents().iter().any(|p| self.nodes[p.0].needs_grad),
        };
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Ok(NodeId(id))
    }

    /// A named input; `requires_grad` makes it a differentiation target.
    pub fn input(&mut self, name: &str, value: Tensor, requires_grad: bool) -> NodeId {
        let id = self.push_leaf(Op::Input, value, requires_grad);
        self.names.insert(name.to_string(), id);
        id
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push_leaf(Op::Constant, value, false)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        self.push_leaf(Op::Param(id), store.get(id).clone(), true)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.push(Op::MatMul(a, b))
    }

    /// Adds a `[m]` bias to every row of an `[n, m]` matrix.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId, TensorError> {
        self.push(Op::AddBias(a, bias))
    }

    /// `x W + b` for a `[n, in]` input, `[in, out]` weight and `[out]` bias.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let xw = self.matmul(x, w)?;
        self.add_bias(xw, b)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId, TensorError> {
        self.push(Op::Scale(a, factor))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        self.push(Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        self.push(Op::Relu(a))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        self.push(Op::Softmax(a))
    }

    /// Row-wise softmax over the first `lengths[r]` entries of each row of a
    /// `[B, L]` matrix; the remaining positions get exactly zero weight and a
    /// row of length zero is all zeros.
    pub fn masked_softmax(
        &mut self,
        logits: NodeId,
        lengths: Arc<[usize]>,
    ) -> Result<NodeId, TensorError> {
        self.push(Op::MaskedSoftmax { logits, lengths })
    }

    /// Selects rows of a `[n, d]` matrix.
    pub fn gather(&mut self, src: NodeId, index: Arc<[usize]>) -> Result<NodeId, TensorError> {
        self.push(Op::Gather { src, index })
    }

    /// Concatenates matrices with equal row counts along the last axis.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId, TensorError> {
        self.push(Op::Concat(parts.to_vec()))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(
        &mut self,
        src: NodeId,
        start: usize,
        end: usize,
    ) -> Result<NodeId, TensorError> {
        self.push(Op::Slice { src, start, end })
    }

    pub fn reshape(&mut self, src: NodeId, shape: &[usize]) -> Result<NodeId, TensorError> {
        self.push(Op::Reshape {
            src,
            shape: shape.to_vec(),
        })
    }

    /// `[n, d] -> [n, 1]` sum over the last axis.
    pub fn row_sum(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        self.push(Op::RowSum(a))
    }

    /// For `[B, L]` weights and `[B*L, d]` values, `out[b] = sum_{l < len_b}
    /// w[b, l] * v[b*L + l]`.
    pub fn weighted_pool(
        &mut self,
        weights: NodeId,
        values: NodeId,
        lengths: Arc<[usize]>,
    ) -> Result<NodeId, TensorError> {
        self.push(Op::WeightedPool {
            weights,
            values,
            lengths,
        })
    }

    /// Mean of the first `len_b` rows of each block of a `[B*L, d]` matrix.
    pub fn mean_pool(
        &mut self,
        values: NodeId,
        lengths: Arc<[usize]>,
    ) -> Result<NodeId, TensorError> {
        self.push(Op::MeanPool { values, lengths })
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        self.push(Op::Mean(a))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        self.push(Op::Sum(a))
    }

    pub fn sum_squares(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        self.push(Op::SumSquares(a))
    }

    /// Passes values forward and blocks gradients backward.
    pub fn detach(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        self.push(Op::Detach(a))
    }

    /// Mean binary cross-entropy of probabilities against targets, with
    /// optional per-row weights. Probabilities are clamped to
    /// `[1e-12, 1 - 1e-12]` before the logarithm.
    pub fn bce(
        &mut self,
        prob: NodeId,
        target: NodeId,
        weights: Option<Arc<[f64]>>,
    ) -> Result<NodeId, TensorError> {
        self.push(Op::Bce {
            prob,
            target,
            weights,
        })
    }

    /// Fused in-batch expectation of a one-hidden-layer scorer.
    ///
    /// With `left: [N, H]`, `right: [R, H]`, `weight: [H, 1]`, `bias: [1]`,
    /// returns `[R, 1]` where
    /// `out[r] = 1/N * sum_j sigmoid(relu(left[j] + right[r]) . weight + bias)`.
    pub fn pairwise_mlp_mean(
        &mut self,
        left: NodeId,
        right: NodeId,
        weight: NodeId,
        bias: NodeId,
    ) -> Result<NodeId, TensorError> {
        self.push(Op::PairwiseMlpMean {
            left,
            right,
            weight,
            bias,
        })
    }

    /// Rebinds named inputs, recomputes every derived node and returns the
    /// values of `outputs`.
    pub fn evaluate(
        &mut self,
        bindings: &[(&str, Tensor)],
        outputs: &[NodeId],
    ) -> Result<Vec<Tensor>, TensorError> {
        for (name, value) in bindings {
            let id = self
                .names
                .get(*name)
                .copied()
                .filter(|id| matches!(self.nodes[id.0].op, Op::Input))
                .ok_or_else(|| TensorError::UnknownInput(name.to_string()))?;
            self.nodes[id.0].value = value.clone();
        }
        self.recompute()?;
        Ok(outputs.iter().map(|&o| self.value(o).clone()).collect())
    }

    /// Overwrites a leaf value (input, parameter or constant) without
    /// recomputing.
    pub fn set_leaf(&mut self, node: NodeId, value: Tensor) {
        debug_assert!(self.nodes[node.0].op.parents().is_empty());
        self.nodes[node.0].value = value;
    }

    /// Recomputes every non-leaf node in insertion order.
    pub fn recompute(&mut self) -> Result<(), TensorError> {
        for i in 0..self.nodes.len() {
            if self.nodes[i].op.parents().is_empty() {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let value = self.compute(i, &op)?;
            self.nodes[i].value = value;
        }
        Ok(())
    }

    fn compute(&self, id: usize, op: &Op) -> Result<Tensor, TensorError> {
        let out = self.compute_unchecked(id, op)?;
        if !out.is_finite() {
            return Err(TensorError::NonFinite {
                node: id,
                op: op.name(),
            });
        }
        Ok(out)
    }

    fn compute_unchecked(&self, id: usize, op: &Op) -> Result<Tensor, TensorError> {
        let err = |detail: String| TensorError::Shape {
            node: id,
            op: op.name(),
            detail,
        };
        let v = |n: &NodeId| &self.nodes[n.0].value;
        match op {
            Op::Input | Op::Param(_) | Op::Constant => unreachable!("leaves are not computed"),
            Op::MatMul(a, b) => {
                let (a, b) = (v(a), v(b));
                if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0] {
                    return Err(err(format!("{:?} x {:?}", a.shape, b.shape)));
                }
                let (n, k, m) = (a.shape[0], a.shape[1], b.shape[1]);
                let mut out = vec![0.0; n * m];
                // no zero-skipping: forward cost depends on shapes only
                for i in 0..n {
                    let row = &mut out[i * m..(i + 1) * m];
                    for p in 0..k {
                        let aip = a.data[i * k + p];
                        let brow = &b.data[p * m..(p + 1) * m];
                        for (o, &bv) in row.iter_mut().zip(brow) {
                            *o += aip * bv;
                        }
                    }
                }
                Ok(Tensor {
                    shape: vec![n, m],
                    data: out,
                })
            }
            Op::AddBias(a, b) => {
                let (a, b) = (v(a), v(b));
                let m = a.cols();
                if a.rank() != 2 || b.len() != m {
                    return Err(err(format!("{:?} + bias {:?}", a.shape, b.shape)));
                }
                let mut out = a.clone();
                for row in out.data.chunks_mut(m) {
                    for (o, &bv) in row.iter_mut().zip(&b.data) {
                        *o += bv;
                    }
                }
                Ok(out)
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                let (a, b) = (v(a), v(b));
                if a.shape != b.shape {
                    return Err(err(format!("{:?} vs {:?}", a.shape, b.shape)));
                }
                let data = a
                    .data
                    .iter()
                    .zip(&b.data)
                    .map(|(&x, &y)| match op {
                        Op::Add(..) => x + y,
                        Op::Sub(..) => x - y,
                        _ => x * y,
                    })
                    .collect();
                Ok(Tensor {
                    shape: a.shape.clone(),
                    data,
                })
            }
            Op::Scale(a, c) => Ok(map(v(a), |x| x * c)),
            Op::Sigmoid(a) => Ok(map(v(a), stable_sigmoid)),
            Op::Relu(a) => Ok(map(v(a), |x| x.max(0.0))),
            Op::Softmax(a) => {
                let a = v(a);
                let c = a.cols();
                let mut out = a.clone();
                if c > 0 {
                    for row in out.data.chunks_mut(c) {
                        softmax_in_place(row);
                    }
                }
                Ok(out)
            }
            Op::MaskedSoftmax { logits, lengths } => {
                let a = v(logits);
                if a.rank() != 2 || a.shape[0] != lengths.len() {
                    return Err(err(format!(
                        "logits {:?} with {} lengths",
                        a.shape,
                        lengths.len()
                    )));
                }
                let l = a.shape[1];
                let mut out = vec![0.0; a.len()];
                for (b, &len) in lengths.iter().enumerate() {
                    if len > l {
                        return Err(err(format!("length {len} exceeds width {l}")));
                    }
                    let row = &mut out[b * l..b * l + len];
                    row.copy_from_slice(&a.data[b * l..b * l + len]);
                    softmax_in_place(row);
                }
                Ok(Tensor {
                    shape: a.shape.clone(),
                    data: out,
                })
            }
            Op::Gather { src, index } => {
                let s = v(src);
                if s.rank() != 2 {
                    return Err(err(format!("gather from rank-{} tensor", s.rank())));
                }
                let (n, d) = (s.shape[0], s.shape[1]);
                let mut out = Vec::with_capacity(index.len() * d);
                for &i in index.iter() {
                    if i >= n {
                        return Err(err(format!("row {i} out of range for {n} rows")));
                    }
                    out.extend_from_slice(&s.data[i * d..(i + 1) * d]);
                }
                Ok(Tensor {
                    shape: vec![index.len(), d],
                    data: out,
                })
            }
            Op::Concat(parts) => {
                if parts.is_empty() {
                    return Err(err("nothing to concatenate".into()));
                }
                let rows = v(&parts[0]).rows();
                for p in parts {
                    if v(p).rank() != 2 || v(p).rows() != rows {
                        return Err(err(format!("part {:?} vs {rows} rows", v(p).shape)));
                    }
                }
                let total: usize = parts.iter().map(|p| v(p).cols()).sum();
                let mut out = Vec::with_capacity(rows * total);
                for r in 0..rows {
                    for p in parts {
                        out.extend_from_slice(v(p).row(r));
                    }
                }
                Ok(Tensor {
                    shape: vec![rows, total],
                    data: out,
                })
            }
            Op::Slice { src, start, end } => {
                let s = v(src);
                if s.rank() != 2 || start >= end || *end > s.cols() {
                    return Err(err(format!("cols {start}..{end} of {:?}", s.shape)));
                }
                let mut out = Vec::with_capacity(s.rows() * (end - start));
                for r in 0..s.rows() {
                    out.extend_from_slice(&s.row(r)[*start..*end]);
                }
                Ok(Tensor {
                    shape: vec![s.rows(), end - start],
                    data: out,
                })
            }
            Op::Reshape { src, shape } => {
                let s = v(src);
                if shape.iter().product::<usize>() != s.len() {
                    return Err(err(format!("{:?} to {:?}", s.shape, shape)));
                }
                Ok(Tensor {
                    shape: shape.clone(),
                    data: s.data.clone(),
                })
            }
            Op::RowSum(a) => {
                let a = v(a);
                let c = a.cols().max(1);
                let data: Vec<f64> = a.data.chunks(c).map(|r| r.iter().sum()).collect();
                Ok(Tensor {
                    shape: vec![data.len(), 1],
                    data,
                })
            }
            Op::WeightedPool {
                weights,
                values,
                lengths,
            } => {
                let (w, x) = (v(weights), v(values));
                if w.rank() != 2 || w.shape[0] != lengths.len() || x.rank() != 2 {
                    return Err(err(format!("weights {:?}, values {:?}", w.shape, x.shape)));
                }
                let (b, l, d) = (w.shape[0], w.shape[1], x.shape[1]);
                if x.shape[0] != b * l {
                    return Err(err(format!("values {:?} for {b}x{l} weights", x.shape)));
                }
                let mut out = vec![0.0; b * d];
                for (bi, &len) in lengths.iter().enumerate() {
                    let o = &mut out[bi * d..(bi + 1) * d];
                    for li in 0..len.min(l) {
                        let wv = w.data[bi * l + li];
                        for (oj, &xv) in o.iter_mut().zip(x.row(bi * l + li)) {
                            *oj += wv * xv;
                        }
                    }
                }
                Ok(Tensor {
                    shape: vec![b, d],
                    data: out,
                })
            }
            Op::MeanPool { values, lengths } => {
                let x = v(values);
                let b = lengths.len();
                if x.rank() != 2 || b == 0 || x.shape[0] % b != 0 {
                    return Err(err(format!("values {:?} for {b} rows", x.shape)));
                }
                let (l, d) = (x.shape[0] / b, x.shape[1]);
                let mut out = vec![0.0; b * d];
                for (bi, &len) in lengths.iter().enumerate() {
                    if len > l {
                        return Err(err(format!("length {len} exceeds width {l}")));
                    }
                    if len == 0 {
                        continue;
                    }
                    let o = &mut out[bi * d..(bi + 1) * d];
                    for li in 0..len {
                        for (oj, &xv) in o.iter_mut().zip(x.row(bi * l + li)) {
                            *oj += xv;
                        }
                    }
                    let inv = 1.0 / len as f64;
                    o.iter_mut().for_each(|z| *z *= inv);
                }
                Ok(Tensor {
                    shape: vec![b, d],
                    data: out,
                })
            }
            Op::Mean(a) => {
                let a = v(a);
                if a.is_empty() {
                    return Err(err("mean of empty tensor".into()));
                }
                Ok(Tensor::scalar(a.data.iter().sum::<f64>() / a.len() as f64))
            }
            Op::Sum(a) => Ok(Tensor::scalar(v(a).data.iter().sum())),
            Op::SumSquares(a) => Ok(Tensor::scalar(v(a).data.iter().map(|x| x * x).sum())),
            Op::Detach(a) => Ok(v(a).clone()),
            Op::Bce {
                prob,
                target,
                weights,
            } => {
                let (p, t) = (v(prob), v(target));
                if p.len() != t.len() || p.is_empty() {
                    return Err(err(format!("prob {:?} vs target {:?}", p.shape, t.shape)));
                }
                if let Some(w) = weights {
                    if w.len() != p.len() {
                        return Err(err(format!("{} weights for {} rows", w.len(), p.len())));
                    }
                }
                let mut total = 0.0;
                for i in 0..p.len() {
                    let q = clamp_prob(p.data[i]);
                    let y = t.data[i];
                    let l = -(y * q.ln() + (1.0 - y) * (1.0 - q).ln());
                    total += weights.as_ref().map_or(1.0, |w| w[i]) * l;
                }
                Ok(Tensor::scalar(total / p.len() as f64))
            }
            Op::PairwiseMlpMean {
                left,
                right,
                weight,
                bias,
            } => {
                let (a, r, w, c) = (v(left), v(right), v(weight), v(bias));
                let h = a.cols();
                if a.rank() != 2 || r.rank() != 2 || r.cols() != h || w.len() != h || c.len() != 1
                {
                    return Err(err(format!(
                        "left {:?}, right {:?}, weight {:?}, bias {:?}",
                        a.shape, r.shape, w.shape, c.shape
                    )));
                }
                let n = a.rows();
                if n == 0 {
                    return Err(err("empty left operand".into()));
                }
                let inv = 1.0 / n as f64;
                let data = (0..r.rows())
                    .map(|ri| {
                        let rr = r.row(ri);
                        let mut acc = 0.0;
                        for j in 0..n {
                            acc += stable_sigmoid(pair_logit(a.row(j), rr, &w.data, c.data[0]));
                        }
                        acc * inv
                    })
                    .collect::<Vec<_>>();
                Ok(Tensor {
                    shape: vec![r.rows(), 1],
                    data,
                })
            }
        }
    }

    /// Reverse-mode differentiation of a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients, TensorError> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TensorError::NonScalarLoss {
                node: loss.0,
                shape: lv.shape.clone(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(Tensor::full(&lv.shape, 1.0));
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[i] = Some(g);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(p) => Some((p, NodeId(i))),
                _ => None,
            })
            .collect();
        let shapes = self.nodes.iter().map(|n| n.value.shape.clone()).collect();
        Ok(Gradients {
            grads,
            params,
            shapes,
        })
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let v = |n: &NodeId| &self.nodes[n.0].value;
        let needs = |n: &NodeId| self.nodes[n.0].needs_grad;
        match op {
            Op::Input | Op::Param(_) | Op::Constant | Op::Detach(_) => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (v(a), v(b));
                let (n, k, m) = (av.shape[0], av.shape[1], bv.shape[1]);
                if needs(a) {
                    let mut ga = vec![0.0; n * k];
                    for i in 0..n {
                        let grow = &g.data[i * m..(i + 1) * m];
                        for p in 0..k {
                            let brow = &bv.data[p * m..(p + 1) * m];
                            ga[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        }
                    }
                    accumulate(grads, *a, &av.shape, ga);
                }
                if needs(b) {
                    let mut gb = vec![0.0; k * m];
                    for i in 0..n {
                        let grow = &g.data[i * m..(i + 1) * m];
                        for p in 0..k {
                            let aip = av.data[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            for (o, &gv) in gb[p * m..(p + 1) * m].iter_mut().zip(grow) {
                                *o += aip * gv;
                            }
                        }
                    }
                    accumulate(grads, *b, &bv.shape, gb);
                }
            }
            Op::AddBias(a, b) => {
                if needs(a) {
                    accumulate(grads, *a, &g.shape, g.data.clone());
                }
                if needs(b) {
                    let m = v(b).len();
                    let mut gb = vec![0.0; m];
                    for row in g.data.chunks(m) {
                        for (o, &x) in gb.iter_mut().zip(row) {
                            *o += x;
                        }
                    }
                    accumulate(grads, *b, &v(b).shape, gb);
                }
            }
            Op::Add(a, b) => {
                if needs(a) {
                    accumulate(grads, *a, &g.shape, g.data.clone());
                }
                if needs(b) {
                    accumulate(grads, *b, &g.shape, g.data.clone());
                }
            }
            Op::Sub(a, b) => {
                if needs(a) {
                    accumulate(grads, *a, &g.shape, g.data.clone());
                }
                if needs(b) {
                    accumulate(grads, *b, &g.shape, g.data.iter().map(|x| -x).collect());
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (v(a), v(b));
                if needs(a) {
                    let d = g.data.iter().zip(&bv.data).map(|(x, y)| x * y).collect();
                    accumulate(grads, *a, &g.shape, d);
                }
                if needs(b) {
                    let d = g.data.iter().zip(&av.data).map(|(x, y)| x * y).collect();
                    accumulate(grads, *b, &g.shape, d);
                }
            }
            Op::Scale(a, c) => {
                if needs(a) {
                    accumulate(grads, *a, &g.shape, g.data.iter().map(|x| x * c).collect());
                }
            }
            Op::Sigmoid(a) => {
                if needs(a) {
                    let d = g
                        .data
                        .iter()
                        .zip(&out.data)
                        .map(|(gv, y)| gv * y * (1.0 - y))
                        .collect();
                    accumulate(grads, *a, &g.shape, d);
                }
            }
            Op::Relu(a) => {
                if needs(a) {
                    let d = g
                        .data
                        .iter()
                        .zip(&v(a).data)
                        .map(|(gv, x)| if *x > 0.0 { *gv } else { 0.0 })
                        .collect();
                    accumulate(grads, *a, &g.shape, d);
                }
            }
            Op::Softmax(a) => {
                if needs(a) {
                    let c = out.cols();
                    let mut d = vec![0.0; out.len()];
                    for ((dr, yr), gr) in d.chunks_mut(c).zip(out.data.chunks(c)).zip(g.data.chunks(c)) {
                        softmax_backward(dr, yr, gr);
                    }
                    accumulate(grads, *a, &g.shape, d);
                }
            }
            Op::MaskedSoftmax { logits, lengths } => {
                if needs(logits) {
                    let l = out.shape[1];
                    let mut d = vec![0.0; out.len()];
                    for (b, &len) in lengths.iter().enumerate() {
                        let r = b * l..b * l + len;
                        softmax_backward(&mut d[r.clone()], &out.data[r.clone()], &g.data[r]);
                    }
                    accumulate(grads, *logits, &g.shape, d);
                }
            }
            Op::Gather { src, index } => {
                if needs(src) {
                    let s = v(src);
                    let d = s.shape[1];
                    let mut gs = vec![0.0; s.len()];
                    for (r, &i) in index.iter().enumerate() {
                        for (o, &x) in gs[i * d..(i + 1) * d].iter_mut().zip(&g.data[r * d..(r + 1) * d]) {
                            *o += x;
                        }
                    }
                    accumulate(grads, *src, &s.shape, gs);
                }
            }
            Op::Concat(parts) => {
                let rows = out.rows();
                let total = out.cols();
                let mut offset = 0;
                for p in parts {
                    let c = v(p).cols();
                    if needs(p) {
                        let mut gp = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            gp.extend_from_slice(&g.data[r * total + offset..r * total + offset + c]);
                        }
                        accumulate(grads, *p, &v(p).shape, gp);
                    }
                    offset += c;
                }
            }
            Op::Slice { src, start, end } => {
                if needs(src) {
                    let s = v(src);
                    let (c, w) = (s.cols(), end - start);
                    let mut gs = vec![0.0; s.len()];
                    for r in 0..s.rows() {
                        gs[r * c + start..r * c + end].copy_from_slice(&g.data[r * w..(r + 1) * w]);
                    }
                    accumulate(grads, *src, &s.shape, gs);
                }
            }
            Op::Reshape { src, .. } => {
                if needs(src) {
                    accumulate(grads, *src, &v(src).shape, g.data.clone());
                }
            }
            Op::RowSum(a) => {
                if needs(a) {
                    let av = v(a);
                    let c = av.cols();
                    let mut d = Vec::with_capacity(av.len());
                    for &gv in &g.data {
                        d.extend(std::iter::repeat_n(gv, c));
                    }
                    accumulate(grads, *a, &av.shape, d);
                }
            }
            Op::WeightedPool {
                weights,
                values,
                lengths,
            } => {
                let (w, x) = (v(weights), v(values));
                let (l, d) = (w.shape[1], x.shape[1]);
                if needs(weights) {
                    let mut gw = vec![0.0; w.len()];
                    for (b, &len) in lengths.iter().enumerate() {
                        let gb = &g.data[b * d..(b + 1) * d];
                        for li in 0..len.min(l) {
                            gw[b * l + li] = gb.iter().zip(x.row(b * l + li)).map(|(p, q)| p * q).sum();
                        }
                    }
                    accumulate(grads, *weights, &w.shape, gw);
                }
                if needs(values) {
                    let mut gx = vec![0.0; x.len()];
                    for (b, &len) in lengths.iter().enumerate() {
                        let gb = &g.data[b * d..(b + 1) * d];
                        for li in 0..len.min(l) {
                            let wv = w.data[b * l + li];
                            let row = (b * l + li) * d;
                            for (o, &gv) in gx[row..row + d].iter_mut().zip(gb) {
                                *o = wv * gv;
                            }
                        }
                    }
                    accumulate(grads, *values, &x.shape, gx);
                }
            }
            Op::MeanPool { values, lengths } => {
                if needs(values) {
                    let x = v(values);
                    let b = lengths.len();
                    let (l, d) = (x.shape[0] / b, x.shape[1]);
                    let mut gx = vec![0.0; x.len()];
                    for (bi, &len) in lengths.iter().enumerate() {
                        if len == 0 {
                            continue;
                        }
                        let inv = 1.0 / len as f64;
                        let gb = &g.data[bi * d..(bi + 1) * d];
                        for li in 0..len {
                            let row = (bi * l + li) * d;
                            for (o, &gv) in gx[row..row + d].iter_mut().zip(gb) {
                                *o = gv * inv;
                            }
                        }
                    }
                    accumulate(grads, *values, &x.shape, gx);
                }
            }
            Op::Mean(a) => {
                if needs(a) {
                    let av = v(a);
                    let s = g.data[0] / av.len() as f64;
                    accumulate(grads, *a, &av.shape, vec![s; av.len()]);
                }
            }
            Op::Sum(a) => {
                if needs(a) {
                    let av = v(a);
                    accumulate(grads, *a, &av.shape, vec![g.data[0]; av.len()]);
                }
            }
            Op::SumSquares(a) => {
                if needs(a) {
                    let av = v(a);
                    let d = av.data.iter().map(|x| 2.0 * x * g.data[0]).collect();
                    accumulate(grads, *a, &av.shape, d);
                }
            }
            Op::Bce {
                prob,
                target,
                weights,
            } => {
                let (p, t) = (v(prob), v(target));
                let n = p.len() as f64;
                let w = |i: usize| weights.as_ref().map_or(1.0, |w| w[i]);
                if needs(prob) {
                    let d = (0..p.len())
                        .map(|i| {
                            let q = clamp_prob(p.data[i]);
                            let y = t.data[i];
                            g.data[0] * w(i) * (-y / q + (1.0 - y) / (1.0 - q)) / n
                        })
                        .collect();
                    accumulate(grads, *prob, &p.shape, d);
                }
                if needs(target) {
                    let d = (0..p.len())
                        .map(|i| {
                            let q = clamp_prob(p.data[i]);
                            g.data[0] * w(i) * ((1.0 - q).ln() - q.ln()) / n
                        })
                        .collect();
                    accumulate(grads, *target, &t.shape, d);
                }
            }
            Op::PairwiseMlpMean {
                left,
                right,
                weight,
                bias,
            } => {
                let (a, r, w, c) = (v(left), v(right), v(weight), v(bias));
                let (n, h) = (a.rows(), a.cols());
                let inv = 1.0 / n as f64;
                let mut ga = vec![0.0; a.len()];
                let mut gr = vec![0.0; r.len()];
                let mut gw = vec![0.0; h];
                let mut gc = 0.0;
                for ri in 0..r.rows() {
                    let rr = r.row(ri);
                    let go = g.data[ri] * inv;
                    if go == 0.0 {
                        continue;
                    }
                    let grr = &mut gr[ri * h..(ri + 1) * h];
                    for j in 0..n {
                        let aj = a.row(j);
                        let s = stable_sigmoid(pair_logit(aj, rr, &w.data, c.data[0]));
                        let dz = go * s * (1.0 - s);
                        gc += dz;
                        let gaj = &mut ga[j * h..(j + 1) * h];
                        for k in 0..h {
                            let pre = aj[k] + rr[k];
                            let dm = if pre > 0.0 { dz } else { 0.0 };
                            gw[k] += dm * pre;
                            let dp = dm * w.data[k];
                            gaj[k] += dp;
                            grr[k] += dp;
                        }
                    }
                }
                if needs(left) {
                    accumulate(grads, *left, &a.shape, ga);
                }
                if needs(right) {
                    accumulate(grads, *right, &r.shape, gr);
                }
                if needs(weight) {
                    accumulate(grads, *weight, &w.shape, gw);
                }
                if needs(bias) {
                    accumulate(grads, *bias, &c.shape, vec![gc]);
                }
            }
        }
    }
}

fn pair_logit(a: &[f64], r: &[f64], w: &[f64], bias: f64) -> f64 {
    let mut lanes = [0.0; 4];
    let mut k = 0;
    while k + 4 <= a.len() {
        for l in 0..4 {
            lanes[l] += (a[k + l] + r[k + l]).max(0.0) * w[k + l];
        }
        k += 4;
    }
    let mut z = bias + (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]);
    for k in k..a.len() {
        z += (a[k] + r[k]).max(0.0) * w[k];
    }
    z
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor {
        shape: t.shape.clone(),
        data: t.data.iter().map(|&x| f(x)).collect(),
    }
}

fn softmax_in_place(row: &mut [f64]) {
    if row.is_empty() {
        return;
    }
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

fn softmax_backward(out: &mut [f64], y: &[f64], g: &[f64]) {
    let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
    for ((o, &yv), &gv) in out.iter_mut().zip(y).zip(g) {
        *o = yv * (gv - dot);
    }
}

fn accumulate(grads: &mut [Option<Tensor>], node: NodeId, shape: &[usize], delta: Vec<f64>) {
    match &mut grads[node.0] {
        Some(existing) => {
            for (e, d) in existing.data.iter_mut().zip(delta) {
                *e += d;
            }
        }
        slot @ None => {
            *slot = Some(Tensor {
                shape: shape.to_vec(),
                data: delta,
            })
        }
    }
}

/// Gradients of one scalar loss with respect to every node of a graph.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, NodeId)>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to a node; zero when the loss does not depend on
    /// it through a differentiable path.
    pub fn wrt(&self, node: NodeId) -> Tensor {
        self.grads[node.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[node.0]))
    }

    /// Sum of gradients over every graph node bound to `id`, or `None` when
    /// the parameter does not appear in the graph.
    pub fn param(&self, id: ParamId) -> Option<Tensor> {
        let mut out: Option<Tensor> = None;
        for &(p, node) in &self.params {
            if p != id {
                continue;
            }
            let g = self.wrt(node);
            match &mut out {
                Some(acc) => acc.data.iter_mut().zip(&g.data).for_each(|(a, b)| *a += b),
                None => out = Some(g),
            }
        }
        out
    }

    /// One gradient per parameter of `store`, zero for parameters the loss
    /// does not reach.
    pub fn for_store(&self, store: &ParamStore) -> Vec<Tensor> {
        store
            .ids()
            .map(|id| {
                self.param(id)
                    .unwrap_or_else(|| Tensor::zeros(store.get(id).shape()))
            })
            .collect()
    }
}

/// Denominator floor for [`grad_check`]; below it the error is effectively
/// absolute, so exact-zero gradients are not judged by roundoff alone.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Largest entrywise relative error between the analytic gradient of `loss`
/// with respect to `node` and central finite differences with step `eps`.
///
/// Relative error is `|a - n| / max(1e-6, |a| + |n|)`. The graph is restored
/// to its original values afterwards.
pub fn grad_check(graph: &mut Graph, loss: NodeId, node: NodeId, eps: f64) -> Result<f64, TensorError> {
    let all: Vec<usize> = (0..graph.value(node).len()).collect();
    grad_check_entries(graph, loss, node, &all, eps)
}

/// [`grad_check`] restricted to the listed flat entries of `node`.
pub fn grad_check_entries(
    graph: &mut Graph,
    loss: NodeId,
    node: NodeId,
    entries: &[usize],
    eps: f64,
) -> Result<f64, TensorError> {
    let analytic = graph.backward(loss)?.wrt(node);
    let original = graph.value(node).clone();
    let mut worst: f64 = 0.0;
    for &e in entries {
        let mut plus = original.clone();
        plus.data[e] += eps;
        graph.set_leaf(node, plus);
        graph.recompute()?;
        let fp = graph.value(loss).item();
        let mut minus = original.clone();
        minus.data[e] -= eps;
        graph.set_leaf(node, minus);
        graph.recompute()?;
        let fm = graph.value(loss).item();
        let numeric = (fp - fm) / (2.0 * eps);
        let a = analytic.data[e];
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(GRAD_CHECK_FLOOR);
        worst = worst.max(rel);
    }
    graph.set_leaf(node, original);
    graph.recompute()?;
    Ok(worst)
}
