//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation evaluates eagerly and appends a node to the [`Graph`];
//! node ids are therefore already a topological order and [`Graph::backward`]
//! walks them in reverse. Binary element-wise ops broadcast numpy-style
//! (shapes right-aligned, size-1 axes stretch).

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation tag of a node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    Scale,
    Neg,
    Concat,
    GatherRows,
    Sigmoid,
    Softplus,
    Relu,
    Tanh,
    Log,
    Clamp,
    Sum,
    Mean,
    SumAxis,
    MaxAxis,
    MinAxis,
    Softmax,
    Reshape,
    SliceLast,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Neg(NodeId),
    Concat(Vec<NodeId>),
    GatherRows(NodeId, Vec<usize>),
    Sigmoid(NodeId),
    Softplus(NodeId),
    Relu(NodeId),
    Tanh(NodeId),
    Log(NodeId),
    Clamp(NodeId, f64, f64),
    Sum(NodeId),
    Mean(NodeId),
    SumAxis(NodeId, usize),
    /// Flat input index selected for every output element.
    MaxAxis(NodeId, Vec<usize>),
    MinAxis(NodeId, Vec<usize>),
    Softmax(NodeId),
    Reshape(NodeId),
    SliceLast(NodeId, usize),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::Neg(..) => OpKind::Neg,
            Op::Concat(..) => OpKind::Concat,
            Op::GatherRows(..) => OpKind::GatherRows,
            Op::Sigmoid(..) => OpKind::Sigmoid,
            Op::Softplus(..) => OpKind::Softplus,
            Op::Relu(..) => OpKind::Relu,
            Op::Tanh(..) => OpKind::Tanh,
            Op::Log(..) => OpKind::Log,
            Op::Clamp(..) => OpKind::Clamp,
            Op::Sum(..) => OpKind::Sum,
            Op::Mean(..) => OpKind::Mean,
            Op::SumAxis(..) => OpKind::SumAxis,
            Op::MaxAxis(..) => OpKind::MaxAxis,
            Op::MinAxis(..) => OpKind::MinAxis,
            Op::Softmax(..) => OpKind::Softmax,
            Op::Reshape(..) => OpKind::Reshape,
            Op::SliceLast(..) => OpKind::SliceLast,
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Concat(xs) => xs.clone(),
            Op::Scale(a, _)
            | Op::Neg(a)
            | Op::GatherRows(a, _)
            | Op::Sigmoid(a)
            | Op::Softplus(a)
            | Op::Relu(a)
            | Op::Tanh(a)
            | Op::Log(a)
            | Op::Clamp(a, ..)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SumAxis(a, _)
            | Op::MaxAxis(a, _)
            | Op::MinAxis(a, _)
            | Op::Softmax(a)
            | Op::Reshape(a)
            | Op::SliceLast(a, _) => vec![*a],
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Append-only computation tape.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    parameters: Vec<NodeId>,
}

/// Gradients of a scalar loss with respect to every node that requires one.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn op(&self, id: NodeId) -> OpKind {
        self.nodes[id.0].op.kind()
    }

    pub fn inputs(&self, id: NodeId) -> Vec<NodeId> {
        self.nodes[id.0].op.inputs()
    }

    /// Trainable leaves in insertion order.
    pub fn parameters(&self) -> &[NodeId] {
        &self.parameters
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        let requires_grad = op
            .inputs()
            .iter()
            .any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    /// Trainable leaf.
    pub fn parameter(&mut self, value: Tensor) -> NodeId {
        let id = self.leaf(value, true);
        self.parameters.push(id);
        id
    }

    /// Leaf that receives a gradient without being registered as trainable
    /// (e.g. inputs whose sensitivities are inspected).
    pub fn watched(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, true)
    }

    // ---- linear algebra -------------------------------------------------

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", &[sa, sb]));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            (k, 1),
            self.value(b).data(),
            (n, 1),
            &mut out,
            false,
        );
        Ok(self.push(Op::MatMul(a, b), Tensor::from_parts(vec![m, n], out)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = broadcast_binary("add", self.value(a), self.value(b), |x, y| x + y)?;
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = broadcast_binary("sub", self.value(a), self.value(b), |x, y| x - y)?;
        Ok(self.push(Op::Sub(a, b), v))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = broadcast_binary("mul", self.value(a), self.value(b), |x, y| x * y)?;
        Ok(self.push(Op::Mul(a, b), v))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).map(|x| x * c);
        self.push(Op::Scale(a, c), v)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| -x);
        self.push(Op::Neg(a), v)
    }

    /// Concatenate along the last axis; all leading axes must agree.
    pub fn concat(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(Error::InvalidArgument("concat of zero tensors".into()));
        }
        let lead = self.shape(xs[0])[..self.shape(xs[0]).len() - 1].to_vec();
        for &x in xs {
            let s = self.shape(x);
            if s.len() != lead.len() + 1 || s[..lead.len()] != lead[..] {
                let shapes: Vec<&[usize]> = xs.iter().map(|&x| self.shape(x)).collect();
                return Err(Error::shape("concat", &shapes));
            }
        }
        let rows: usize = lead.iter().product();
        let widths: Vec<usize> = xs.iter().map(|&x| self.value(x).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&x, &w) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(x).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        Ok(self.push(Op::Concat(xs.to_vec()), Tensor::from_parts(shape, out)))
    }

    /// Select rows of a 2-D tensor: `[v, d]` gathered by `indices` gives `[n, d]`.
    pub fn gather_rows(&mut self, src: NodeId, indices: &[usize]) -> Result<NodeId> {
        let s = self.shape(src);
        if s.len() != 2 {
            return Err(Error::shape("gather_rows", &[s]));
        }
        if indices.is_empty() {
            return Err(Error::InvalidArgument("gather_rows with no indices".into()));
        }
        let (v, d) = (s[0], s[1]);
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= v {
                return Err(Error::IndexOutOfRange {
                    what: "gather_rows source".into(),
                    index: i,
                    size: v,
                });
            }
            out.extend_from_slice(self.value(src).row(i));
        }
        let t = Tensor::from_parts(vec![indices.len(), d], out);
        Ok(self.push(Op::GatherRows(src, indices.to_vec()), t))
    }

    // ---- element-wise nonlinearities -------------------------------------

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(sigmoid);
        self.push(Op::Sigmoid(a), v)
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(softplus);
        self.push(Op::Softplus(a), v)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(Op::Relu(a), v)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::tanh);
        self.push(Op::Tanh(a), v)
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::ln);
        self.push(Op::Log(a), v)
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(Op::Clamp(a, lo, hi), v)
    }

    // ---- reductions -------------------------------------------------------

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = pairwise_sum(self.value(a).data());
        self.push(Op::Sum(a), Tensor::scalar(s))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let m = pairwise_sum(v.data()) / v.len() as f64;
        self.push(Op::Mean(a), Tensor::scalar(m))
    }

    /// Sum over `axis`, keeping it with size 1.
    pub fn sum_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let (outer, len, inner, shape) = axis_layout("sum_axis", self.shape(a), axis)?;
        let x = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                let base = (o * len + k) * inner;
                for i in 0..inner {
                    out[o * inner + i] += x[base + i];
                }
            }
        }
        Ok(self.push(Op::SumAxis(a, axis), Tensor::from_parts(shape, out)))
    }

    /// Maximum over `axis`, keeping it with size 1. Ties pick the first index.
    pub fn max_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let (t, arg) = self.select_axis("max_axis", a, axis, |c, best| c > best)?;
        Ok(self.push(Op::MaxAxis(a, arg), t))
    }

    /// Minimum over `axis`, keeping it with size 1. Ties pick the first index.
    pub fn min_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let (t, arg) = self.select_axis("min_axis", a, axis, |c, best| c < best)?;
        Ok(self.push(Op::MinAxis(a, arg), t))
    }

    fn select_axis(
        &self,
        op: &'static str,
        a: NodeId,
        axis: usize,
        better: impl Fn(f64, f64) -> bool,
    ) -> Result<(Tensor, Vec<usize>)> {
        let (outer, len, inner, shape) = axis_layout(op, self.shape(a), axis)?;
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(outer * inner);
        let mut arg = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best_idx = o * len * inner + i;
                for k in 1..len {
                    let idx = (o * len + k) * inner + i;
                    if better(x[idx], x[best_idx]) {
                        best_idx = idx;
                    }
                }
                out.push(x[best_idx]);
                arg.push(best_idx);
            }
        }
        Ok((Tensor::from_parts(shape, out), arg))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let c = v.cols();
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(c) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                z += *x;
            }
            for x in row.iter_mut() {
                *x /= z;
            }
        }
        let t = Tensor::from_parts(v.shape().to_vec(), out);
        self.push(Op::Softmax(a), t)
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(a);
        if shape.iter().product::<usize>() != v.len() {
            return Err(Error::shape("reshape", &[v.shape(), shape]));
        }
        let t = v.reshaped(shape.to_vec())?;
        Ok(self.push(Op::Reshape(a), t))
    }

    /// Columns `start..start + len` of the last axis.
    pub fn slice_last(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let v = self.value(a);
        let c = v.cols();
        if len == 0 || start + len > c {
            return Err(Error::shape("slice_last", &[v.shape(), &[start, len]]));
        }
        let mut out = Vec::with_capacity(v.len() / c * len);
        for row in v.data().chunks(c) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let mut shape = v.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        Ok(self.push(Op::SliceLast(a, start), Tensor::from_parts(shape, out)))
    }

    // ---- reverse pass -------------------------------------------------------

    /// Gradients of the scalar `loss` with respect to every node on a path
    /// from a trainable or watched leaf. Fan-out accumulates.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        for (g, n) in grads.iter_mut().zip(&self.nodes) {
            if !n.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                if self.wants(*a) {
                    // dA = G · Bᵀ
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), (n, 1), vb.data(), (1, n), &mut da, false);
                    accumulate(grads, *a, Tensor::from_parts(vec![m, k], da));
                }
                if self.wants(*b) {
                    // dB = Aᵀ · G
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, va.data(), (1, k), g.data(), (n, 1), &mut db, false);
                    accumulate(grads, *b, Tensor::from_parts(vec![k, n], db));
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, reduce_to(g, self.shape(*a)));
                }
                if self.wants(*b) {
                    accumulate(grads, *b, reduce_to(g, self.shape(*b)));
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, reduce_to(g, self.shape(*a)));
                }
                if self.wants(*b) {
                    accumulate(grads, *b, reduce_to(g, self.shape(*b)).map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let t = broadcast_binary("mul", g, vb, |x, y| x * y)?;
                    accumulate(grads, *a, reduce_to(&t, va.shape()));
                }
                if self.wants(*b) {
                    let t = broadcast_binary("mul", g, va, |x, y| x * y)?;
                    accumulate(grads, *b, reduce_to(&t, vb.shape()));
                }
            }
            Op::Scale(a, c) => accumulate(grads, *a, g.map(|x| x * c)),
            Op::Neg(a) => accumulate(grads, *a, g.map(|x| -x)),
            Op::Concat(xs) => {
                let total = g.cols();
                let rows = g.len() / total;
                let mut offset = 0;
                for &x in xs {
                    let vx = self.value(x);
                    let w = vx.cols();
                    if self.wants(x) {
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                        }
                        accumulate(grads, x, Tensor::from_parts(vx.shape().to_vec(), d));
                    }
                    offset += w;
                }
            }
            Op::GatherRows(src, indices) => {
                let vs = self.value(*src);
                let d = vs.cols();
                let mut out = vec![0.0; vs.len()];
                for (r, &i) in indices.iter().enumerate() {
                    let dst = &mut out[i * d..(i + 1) * d];
                    for (o, v) in dst.iter_mut().zip(&g.data()[r * d..(r + 1) * d]) {
                        *o += v;
                    }
                }
                accumulate(grads, *src, Tensor::from_parts(vs.shape().to_vec(), out));
            }
            Op::Sigmoid(a) => {
                let d = zip_map(g, y, |g, s| g * s * (1.0 - s));
                accumulate(grads, *a, d);
            }
            Op::Softplus(a) => {
                let d = zip_map(g, self.value(*a), |g, x| g * sigmoid(x));
                accumulate(grads, *a, d);
            }
            Op::Relu(a) => {
                let d = zip_map(g, self.value(*a), |g, x| if x > 0.0 { g } else { 0.0 });
                accumulate(grads, *a, d);
            }
            Op::Tanh(a) => {
                let d = zip_map(g, y, |g, t| g * (1.0 - t * t));
                accumulate(grads, *a, d);
            }
            Op::Log(a) => {
                let d = zip_map(g, self.value(*a), |g, x| g / x);
                accumulate(grads, *a, d);
            }
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                let d = zip_map(g, self.value(*a), |g, x| {
                    if x >= lo && x <= hi {
                        g
                    } else {
                        0.0
                    }
                });
                accumulate(grads, *a, d);
            }
            Op::Sum(a) => {
                let s = self.shape(*a).to_vec();
                accumulate(grads, *a, Tensor::full(&s, g.item()));
            }
            Op::Mean(a) => {
                let va = self.value(*a);
                let v = g.item() / va.len() as f64;
                accumulate(grads, *a, Tensor::full(va.shape(), v));
            }
            Op::SumAxis(a, axis) => {
                let va = self.value(*a);
                let (outer, len, inner, _) = axis_layout("sum_axis", va.shape(), *axis)?;
                let mut out = vec![0.0; va.len()];
                for o in 0..outer {
                    for k in 0..len {
                        let base = (o * len + k) * inner;
                        out[base..base + inner]
                            .copy_from_slice(&g.data()[o * inner..(o + 1) * inner]);
                    }
                }
                accumulate(grads, *a, Tensor::from_parts(va.shape().to_vec(), out));
            }
            Op::MaxAxis(a, arg) | Op::MinAxis(a, arg) => {
                let va = self.value(*a);
                let mut out = vec![0.0; va.len()];
                for (gv, &i) in g.data().iter().zip(arg) {
                    out[i] += gv;
                }
                accumulate(grads, *a, Tensor::from_parts(va.shape().to_vec(), out));
            }
            Op::Softmax(a) => {
                let c = y.cols();
                let mut out = vec![0.0; y.len()];
                for ((o, yr), gr) in out
                    .chunks_mut(c)
                    .zip(y.data().chunks(c))
                    .zip(g.data().chunks(c))
                {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, &yi), &gi) in o.iter_mut().zip(yr).zip(gr) {
                        *o = yi * (gi - dot);
                    }
                }
                accumulate(grads, *a, Tensor::from_parts(y.shape().to_vec(), out));
            }
            Op::Reshape(a) => {
                let s = self.shape(*a).to_vec();
                accumulate(grads, *a, Tensor::from_parts(s, g.data().to_vec()));
            }
            Op::SliceLast(a, start) => {
                let va = self.value(*a);
                let c = va.cols();
                let len = g.cols();
                let mut out = vec![0.0; va.len()];
                for (o, gr) in out.chunks_mut(c).zip(g.data().chunks(len)) {
                    o[*start..*start + len].copy_from_slice(gr);
                }
                accumulate(grads, *a, Tensor::from_parts(va.shape().to_vec(), out));
            }
        }
        Ok(())
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, d: Tensor) {
    match &mut grads[id.0] {
        Some(existing) => {
            for (e, v) in existing.data_mut().iter_mut().zip(d.data()) {
                *e += v;
            }
        }
        slot @ None => *slot = Some(d),
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Fixed-shape pairwise summation; the result depends only on the input
/// order, never on thread count.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    const LEAF: usize = 32;
    if xs.len() <= LEAF {
        xs.iter().sum()
    } else {
        let mid = xs.len() / 2;
        pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
    }
}

/// `c = a · b` (or `c += a · b`) with explicit (row, col) strides for a and b.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: the strides above address exactly the m*k, k*n and m*n
    // elements of the slices passed in.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            if accumulate { 1.0 } else { 0.0 },
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn axis_layout(
    op: &'static str,
    shape: &[usize],
    axis: usize,
) -> Result<(usize, usize, usize, Vec<usize>)> {
    if axis >= shape.len() {
        return Err(Error::shape(op, &[shape, &[axis]]));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    let mut out = shape.to_vec();
    out[axis] = 1;
    Ok((outer, shape[axis], inner, out))
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(Error::shape(op, &[a, b])),
        };
    }
    Ok(out)
}

/// Strides of `shape` viewed inside the broadcast shape `out` (0 on stretched axes).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let off = out.len() - shape.len();
    let mut strides = vec![0; out.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[off + i] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Visit every element of the broadcast shape `out` in row-major order,
/// passing (out index, index into a, index into b).
fn for_each_broadcast(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let rank = out.len();
    let last = out[rank - 1];
    let (la, lb) = (sa[rank - 1], sb[rank - 1]);
    let outer: usize = out[..rank - 1].iter().product();
    let mut counter = vec![0usize; rank - 1];
    let (mut base_a, mut base_b) = (0usize, 0usize);
    let mut o = 0;
    for _ in 0..outer {
        for j in 0..last {
            f(o, base_a + j * la, base_b + j * lb);
            o += 1;
        }
        // odometer over the leading axes
        for ax in (0..rank - 1).rev() {
            counter[ax] += 1;
            base_a += sa[ax];
            base_b += sb[ax];
            if counter[ax] < out[ax] {
                break;
            }
            base_a -= sa[ax] * out[ax];
            base_b -= sb[ax] * out[ax];
            counter[ax] = 0;
        }
    }
}

fn broadcast_binary(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.shape() == b.shape() {
        return Ok(zip_map(a, b, f));
    }
    let out = broadcast_shape(op, a.shape(), b.shape())?;
    let sa = broadcast_strides(a.shape(), &out);
    let sb = broadcast_strides(b.shape(), &out);
    let n: usize = out.iter().product();
    let mut data = vec![0.0; n];
    let (da, db) = (a.data(), b.data());
    for_each_broadcast(&out, &sa, &sb, |o, i, j| data[o] = f(da[i], db[j]));
    Ok(Tensor::from_parts(out, data))
}

/// Sum `g` down to `shape` over the axes that were broadcast.
fn reduce_to(g: &Tensor, shape: &[usize]) -> Tensor {
    if g.shape() == shape {
        return g.clone();
    }
    let out = g.shape();
    let st = broadcast_strides(shape, out);
    let ident = broadcast_strides(out, out);
    let mut data = vec![0.0; shape.iter().product()];
    let gd = g.data();
    for_each_broadcast(out, &ident, &st, |_, i, t| data[t] += gd[i]);
    Tensor::from_parts(shape.to_vec(), data)
}

/// Maximum relative error between `backward` and central finite differences
/// for a scalar function of one tensor. `build` receives a fresh graph and
/// the parameter node and must return the scalar loss node.
pub fn grad_check<F>(build: F, x0: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step {eps} outside [1e-7, 1e-3]"
        )));
    }
    let eval = |x: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let p = g.parameter(x.clone());
        let loss = build(&mut g, p)?;
        let v = g.value(loss);
        if v.len() != 1 {
            return Err(Error::NonScalarLoss(v.shape().to_vec()));
        }
        if !v.item().is_finite() {
            return Err(Error::NonFinite("grad_check loss".into()));
        }
        Ok(v.item())
    };

    let mut g = Graph::new();
    let p = g.parameter(x0.clone());
    let loss = build(&mut g, p)?;
    if !g.value(loss).all_finite() {
        return Err(Error::NonFinite("grad_check loss".into()));
    }
    let grads = g.backward(loss)?;
    let analytic = grads
        .get(p)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x0.shape()));

    let mut worst: f64 = 0.0;
    let mut x = x0.clone();
    for i in 0..x0.len() {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + eps;
        let up = eval(&x)?;
        x.data_mut()[i] = orig - eps;
        let down = eval(&x)?;
        x.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic.data()[i];
        let denom = a.abs().max(numeric.abs()).max(1e-12);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(g: &mut Graph, v: f64) -> NodeId {
        g.parameter(Tensor::scalar(v))
    }

    #[test]
    fn sigmoid_and_softplus_at_zero() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(0.0));
        let s = g.sigmoid(x);
        let p = g.softplus(x);
        assert_eq!(g.value(s).item(), 0.5);
        assert!((g.value(p).item() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn concat_shape() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 5]));
        let c = g.concat(&[a, b]).unwrap();
        assert_eq!(g.shape(c), &[2, 8]);
    }

    #[test]
    fn concat_rejects_mismatched_rows() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[3, 5]));
        let err = g.concat(&[a, b]).unwrap_err();
        assert!(matches!(err, Error::Shape { op: "concat", .. }));
    }

    #[test]
    fn matmul_shape_error_names_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[4, 5]));
        match g.matmul(a, b) {
            Err(Error::Shape { op, shapes }) => {
                assert_eq!(op, "matmul");
                assert_eq!(shapes, vec![vec![2, 3], vec![4, 5]]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn product_rule() {
        let mut g = Graph::new();
        let x = scalar(&mut g, 2.0);
        let y = scalar(&mut g, 3.0);
        let l = g.mul(x, y).unwrap();
        let gr = g.backward(l).unwrap();
        assert_eq!(gr.get(x).unwrap().item(), 3.0);
        assert_eq!(gr.get(y).unwrap().item(), 2.0);
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let mut g = Graph::new();
        let x = scalar(&mut g, 0.0);
        let l = g.sigmoid(x);
        let gr = g.backward(l).unwrap();
        assert_eq!(gr.get(x).unwrap().item(), 0.25);
    }

    #[test]
    fn relu_subgradient() {
        let mut g = Graph::new();
        let x = g.parameter(Tensor::new(vec![2], vec![-1.0, 2.0]).unwrap());
        let r = g.relu(x);
        let l = g.sum(r);
        let gr = g.backward(l).unwrap();
        assert_eq!(gr.get(x).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.parameter(Tensor::zeros(&[2, 2]));
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn fan_out_accumulates() {
        // l = x*x + x  => dl/dx = 2x + 1
        let mut g = Graph::new();
        let x = scalar(&mut g, 1.5);
        let sq = g.mul(x, x).unwrap();
        let l = g.add(sq, x).unwrap();
        let gr = g.backward(l).unwrap();
        assert_eq!(gr.get(x).unwrap().item(), 4.0);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let x = scalar(&mut g, 1.0);
        let c = g.constant(Tensor::scalar(2.0));
        let l = g.mul(x, c).unwrap();
        let gr = g.backward(l).unwrap();
        assert!(gr.get(c).is_none());
    }

    #[test]
    fn broadcast_row_and_column() {
        let mut g = Graph::new();
        let a = g.parameter(Tensor::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let row = g.parameter(Tensor::new(vec![3], vec![10., 20., 30.]).unwrap());
        let col = g.parameter(Tensor::matrix(2, 1, vec![2., 3.]).unwrap());
        let s = g.add(a, row).unwrap();
        assert_eq!(g.value(s).data(), &[11., 22., 33., 14., 25., 36.]);
        let m = g.mul(s, col).unwrap();
        assert_eq!(g.value(m).data(), &[22., 44., 66., 42., 75., 108.]);
        let l = g.sum(m);
        let gr = g.backward(l).unwrap();
        assert_eq!(gr.get(row).unwrap().data(), &[5., 5., 5.]);
        assert_eq!(gr.get(col).unwrap().data(), &[66., 75.]);
    }

    #[test]
    fn broadcast_three_dims() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::new(vec![2, 1, 2], vec![1., 2., 3., 4.]).unwrap());
        let b = g.constant(Tensor::new(vec![1, 3, 2], vec![1., 1., 2., 2., 3., 3.]).unwrap());
        let c = g.mul(a, b).unwrap();
        assert_eq!(g.shape(c), &[2, 3, 2]);
        assert_eq!(
            g.value(c).data(),
            &[1., 2., 2., 4., 3., 6., 3., 4., 6., 8., 9., 12.]
        );
    }

    #[test]
    fn max_min_axis_and_gradient_routing() {
        let mut g = Graph::new();
        let x = g.parameter(Tensor::matrix(2, 3, vec![1., 5., 2., 7., 0., 3.]).unwrap());
        let mx = g.max_axis(x, 1).unwrap();
        let mn = g.min_axis(x, 1).unwrap();
        assert_eq!(g.value(mx).data(), &[5., 7.]);
        assert_eq!(g.value(mn).data(), &[1., 0.]);
        let both = g.add(mx, mn).unwrap();
        let l = g.sum(both);
        let gr = g.backward(l).unwrap();
        assert_eq!(gr.get(x).unwrap().data(), &[1., 1., 0., 1., 1., 0.]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(2, 3, vec![1., 2., 3., -5., 0., 5.]).unwrap());
        let s = g.softmax(x);
        for r in 0..2 {
            let t: f64 = g.value(s).row(r).iter().sum();
            assert!((t - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn quadratic_grad_check_is_tight() {
        let x0 = Tensor::scalar(1.5);
        let err = grad_check(|g, x| g.mul(x, x), &x0, 1e-5).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn grad_check_rejects_bad_eps() {
        let x0 = Tensor::scalar(1.0);
        assert!(grad_check(|g, x| Ok(g.sigmoid(x)), &x0, 1e-2).is_err());
    }

    #[test]
    fn grad_check_rejects_non_finite_loss() {
        let x0 = Tensor::scalar(-1.0);
        let r = grad_check(|g, x| Ok(g.log(x)), &x0, 1e-5);
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }

    #[test]
    fn gather_rows_out_of_range() {
        let mut g = Graph::new();
        let t = g.parameter(Tensor::zeros(&[3, 2]));
        assert!(matches!(
            g.gather_rows(t, &[0, 3]),
            Err(Error::IndexOutOfRange { index: 3, .. })
        ));
    }
}
