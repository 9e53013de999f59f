//! Define-by-run reverse-mode autodiff.
//!
//! A [`Graph`] is rebuilt for every forward pass. Nodes are appended in
//! evaluation order, so the node vector is already a topological order and
//! `backward` simply walks it in reverse.

use std::collections::HashMap;
use std::fmt;

use super::kernels::{gemm_acc, gemm_nt_acc, gemm_tn_acc, ConvGeometry};
use super::tensor::Tensor;
use crate::error::{QuantError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A differentiable operation implemented outside the core op set.
pub trait CustomOp: fmt::Debug {
    fn name(&self) -> &'static str;

    /// Gradients for each input, `None` for inputs without a gradient path.
    fn backward(&self, upstream: &Tensor, inputs: &[&Tensor], output: &Tensor) -> Vec<Option<Tensor>>;
}

#[derive(Debug)]
pub enum Op {
    Constant,
    Parameter(String),
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale(f64),
    AddScalar(f64),
    Exp,
    Log,
    /// Active mask per element, decided through the rounding policy's branches.
    Relu(Vec<bool>),
    Pow2,
    SumAll,
    SumAxis(usize),
    MeanAll,
    MeanAxis(usize),
    Softmax,
    CrossEntropy { labels: Vec<usize>, probs: Tensor },
    MatMul,
    Transpose,
    Conv2d(ConvGeometry),
    /// Discrete forward map with identity backward.
    Ste(&'static str),
    Clamp,
    BroadcastScalar,
    BroadcastAxis(usize),
    Reshape,
    GlobalAvgPool,
    Custom(Box<dyn CustomOp>),
}

impl Op {
    pub fn tag(&self) -> &str {
        match self {
            Op::Constant => "constant",
            Op::Parameter(_) => "parameter",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Neg => "neg",
            Op::Scale(_) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Relu(_) => "relu",
            Op::Pow2 => "pow2",
            Op::SumAll => "sum",
            Op::SumAxis(_) => "sum_axis",
            Op::MeanAll => "mean",
            Op::MeanAxis(_) => "mean_axis",
            Op::Softmax => "softmax",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::MatMul => "matmul",
            Op::Transpose => "transpose",
            Op::Conv2d(_) => "conv2d",
            Op::Ste(name) => name,
            Op::Clamp => "clamp",
            Op::BroadcastScalar => "broadcast_scalar",
            Op::BroadcastAxis(_) => "broadcast_axis",
            Op::Reshape => "reshape",
            Op::GlobalAvgPool => "global_avg_pool",
            Op::Custom(c) => c.name(),
        }
    }
}

#[derive(Debug)]
pub struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
}

impl Node {
    pub fn op(&self) -> &Op {
        &self.op
    }

    pub fn inputs(&self) -> &[NodeId] {
        &self.inputs
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn grad(&self) -> Option<&Tensor> {
        self.grad.as_ref()
    }
}

/// How straight-through discretizations (rounding, bit projection) and the
/// saturation branches around them evaluate.
///
/// `Record` and `Replay` exist for gradient checking: a recorded pass stores
/// the offset `d(v) - v` of every discretization and every branch decision,
/// and a replayed pass evaluates `v + offset` with the branches frozen. That
/// replay is the smooth surrogate whose derivative the straight-through
/// estimator reports, so it can be finite-differenced.
#[derive(Debug, Clone, Default)]
pub enum RoundPolicy {
    #[default]
    Exact,
    Record(Trace),
    Replay { trace: Trace, offset_cursor: usize, branch_cursor: usize },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trace {
    pub offsets: Vec<f64>,
    pub branches: Vec<i8>,
}

impl RoundPolicy {
    pub fn record() -> Self {
        RoundPolicy::Record(Trace::default())
    }

    pub fn replay(trace: Trace) -> Self {
        RoundPolicy::Replay {
            trace,
            offset_cursor: 0,
            branch_cursor: 0,
        }
    }

    pub fn discretize(&mut self, v: f64, f: impl Fn(f64) -> f64) -> f64 {
        match self {
            RoundPolicy::Exact => f(v),
            RoundPolicy::Record(trace) => {
                let d = f(v);
                trace.offsets.push(d - v);
                d
            }
            RoundPolicy::Replay { trace, offset_cursor, .. } => {
                let off = trace.offsets[*offset_cursor];
                *offset_cursor += 1;
                v + off
            }
        }
    }

    pub fn round(&mut self, v: f64) -> f64 {
        self.discretize(v, f64::round)
    }

    /// A piecewise branch choice; frozen to the recorded choice on replay.
    pub fn branch(&mut self, decide: impl FnOnce() -> i8) -> i8 {
        match self {
            RoundPolicy::Exact => decide(),
            RoundPolicy::Record(trace) => {
                let b = decide();
                trace.branches.push(b);
                b
            }
            RoundPolicy::Replay { trace, branch_cursor, .. } => {
                let b = trace.branches[*branch_cursor];
                *branch_cursor += 1;
                b
            }
        }
    }

    pub fn into_trace(self) -> Trace {
        match self {
            RoundPolicy::Record(t) | RoundPolicy::Replay { trace: t, .. } => t,
            RoundPolicy::Exact => Trace::default(),
        }
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, NodeId>,
    rounding: RoundPolicy,
}

fn dim_err(op: &'static str, a: &Tensor, b: &Tensor) -> QuantError {
    QuantError::Dimension {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_rounding(rounding: RoundPolicy) -> Self {
        Graph {
            rounding,
            ..Self::default()
        }
    }

    pub fn rounding(&mut self) -> &mut RoundPolicy {
        &mut self.rounding
    }

    pub fn take_rounding(&mut self) -> RoundPolicy {
        std::mem::take(&mut self.rounding)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn param_id(&self, name: &str) -> Option<NodeId> {
        self.params.get(name).copied()
    }

    /// Gradients of every named parameter, sorted by name.
    pub fn param_grads(&self) -> Vec<(String, Option<Tensor>)> {
        let mut out: Vec<_> = self
            .params
            .iter()
            .map(|(name, id)| (name.clone(), self.grad(*id).cloned()))
            .collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor) -> NodeId {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            op,
            inputs,
            value,
            grad: None,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            op: Op::Constant,
            inputs: vec![],
            value,
            grad: None,
            requires_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.constant(Tensor::scalar(v))
    }

    /// Registers a trainable leaf. Names must be unique within a graph.
    pub fn param(&mut self, name: &str, value: Tensor) -> Result<NodeId> {
        if self.params.contains_key(name) {
            return Err(QuantError::Contract(format!("duplicate parameter `{name}`")));
        }
        self.nodes.push(Node {
            op: Op::Parameter(name.to_string()),
            inputs: vec![],
            value,
            grad: None,
            requires_grad: true,
        });
        let id = NodeId(self.nodes.len() - 1);
        self.params.insert(name.to_string(), id);
        Ok(id)
    }

    fn binary(&mut self, op: Op, a: NodeId, b: NodeId, tag: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), tag, f)?;
        Ok(self.push(op, vec![a, b], v))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Add, a, b, "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Sub, a, b, "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Mul, a, b, "mul", |x, y| x * y)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Div, a, b, "div", |x, y| x / y)
    }

    fn unary(&mut self, op: Op, a: NodeId, f: impl Fn(f64) -> f64) -> NodeId {
        let v = self.value(a).map(f);
        self.push(op, vec![a], v)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Neg, a, |x| -x)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        self.unary(Op::Scale(c), a, |x| x * c)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        self.unary(Op::AddScalar(c), a, |x| x + c)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Exp, a, f64::exp)
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Log, a, f64::ln)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        let mut active = Vec::with_capacity(v.numel());
        for x in v.data_mut() {
            let on = self.rounding.branch(|| i8::from(*x > 0.0)) == 1;
            if !on {
                *x = 0.0;
            }
            active.push(on);
        }
        self.push(Op::Relu(active), vec![a], v)
    }

    /// Elementwise `2^x`.
    pub fn pow2(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Pow2, a, f64::exp2)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(Op::SumAll, vec![a], v)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).mean());
        self.push(Op::MeanAll, vec![a], v)
    }

    fn reduce_axis(&self, a: NodeId, axis: usize, op: &'static str) -> Result<(Tensor, usize)> {
        let t = self.value(a);
        if axis >= t.ndim() {
            return Err(QuantError::Dimension {
                op,
                lhs: t.shape().to_vec(),
                rhs: vec![axis],
            });
        }
        let shape = t.shape();
        let outer: usize = shape[..axis].iter().product();
        let extent = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for e in 0..extent {
                let src = &t.data()[(o * extent + e) * inner..(o * extent + e + 1) * inner];
                for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut out_shape = shape.to_vec();
        out_shape.remove(axis);
        Ok((Tensor::new(out_shape, out)?, extent))
    }

    pub fn sum_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let (v, _) = self.reduce_axis(a, axis, "sum_axis")?;
        Ok(self.push(Op::SumAxis(axis), vec![a], v))
    }

    pub fn mean_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let (v, extent) = self.reduce_axis(a, axis, "mean_axis")?;
        let v = v.map(|x| x / extent as f64);
        Ok(self.push(Op::MeanAxis(axis), vec![a], v))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.value(a);
        let cols = *t.shape().last().ok_or_else(|| {
            QuantError::Contract("softmax of a scalar".into())
        })?;
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(cols) {
            softmax_in_place(row);
        }
        let v = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(Op::Softmax, vec![a], v))
    }

    /// Mean negative log-likelihood of `labels` under softmax(`logits`).
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let t = self.value(logits);
        if t.ndim() != 2 || t.shape()[0] != labels.len() {
            return Err(QuantError::Dimension {
                op: "cross_entropy",
                lhs: t.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        let classes = t.shape()[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(QuantError::Contract(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        let mut probs = t.data().to_vec();
        let mut nll = 0.0;
        for (row, &y) in probs.chunks_mut(classes).zip(labels) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            nll += lse - row[y];
            softmax_in_place(row);
        }
        let probs = Tensor::new(t.shape().to_vec(), probs)?;
        let v = Tensor::scalar(nll / labels.len() as f64);
        Ok(self.push(
            Op::CrossEntropy {
                labels: labels.to_vec(),
                probs,
            },
            vec![logits],
            v,
        ))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.ndim() != 2 || tb.ndim() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(dim_err("matmul", ta, tb));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm_acc(ta.data(), tb.data(), &mut out, m, k, n);
        let v = Tensor::new(vec![m, n], out)?;
        Ok(self.push(Op::MatMul, vec![a, b], v))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).transpose2()?;
        Ok(self.push(Op::Transpose, vec![a], v))
    }

    pub fn conv2d(&mut self, input: NodeId, weight: NodeId, stride: usize, padding: usize) -> Result<NodeId> {
        let (x, w) = (self.value(input), self.value(weight));
        if x.ndim() != 4 || w.ndim() != 4 || x.shape()[1] != w.shape()[1] {
            return Err(dim_err("conv2d", x, w));
        }
        if stride == 0 {
            return Err(QuantError::Contract("conv2d stride must be >= 1".into()));
        }
        let geo = ConvGeometry {
            batch: x.shape()[0],
            in_ch: x.shape()[1],
            height: x.shape()[2],
            width: x.shape()[3],
            out_ch: w.shape()[0],
            kh: w.shape()[2],
            kw: w.shape()[3],
            stride,
            padding,
        };
        if geo.kh > geo.height + 2 * padding || geo.kw > geo.width + 2 * padding {
            return Err(dim_err("conv2d", x, w));
        }
        let out = geo.forward(x.data(), w.data());
        let v = Tensor::new(vec![geo.batch, geo.out_ch, geo.out_h(), geo.out_w()], out)?;
        Ok(self.push(Op::Conv2d(geo), vec![input, weight], v))
    }

    /// Round half away from zero, identity gradient.
    pub fn round_ste(&mut self, a: NodeId) -> NodeId {
        self.discretize_ste(a, "round_ste", f64::round)
    }

    /// Applies a discrete elementwise map in the forward pass with an
    /// identity Jacobian in the backward pass. Honors the graph's [`RoundPolicy`].
    pub fn discretize_ste(&mut self, a: NodeId, tag: &'static str, f: impl Fn(f64) -> f64) -> NodeId {
        let src = self.value(a).clone();
        let mut v = src;
        for x in v.data_mut() {
            *x = self.rounding.discretize(*x, &f);
        }
        self.push(Op::Ste(tag), vec![a], v)
    }

    /// Elementwise clamp. `lo` and `hi` must have the shape of `x` (use the
    /// broadcast ops for scalar or per-channel bounds).
    pub fn clamp(&mut self, x: NodeId, lo: NodeId, hi: NodeId) -> Result<NodeId> {
        let (tx, tl, th) = (self.value(x), self.value(lo), self.value(hi));
        tx.expect_same_shape(tl, "clamp")?;
        tx.expect_same_shape(th, "clamp")?;
        if let Some((l, h)) = tl.data().iter().zip(th.data()).find(|(l, h)| l > h) {
            return Err(QuantError::InvalidRange(format!("clamp lo {l} > hi {h}")));
        }
        let data = tx
            .data()
            .iter()
            .zip(tl.data().iter().zip(th.data()))
            .map(|(&v, (&l, &h))| v.max(l).min(h))
            .collect();
        let v = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(Op::Clamp, vec![x, lo, hi], v))
    }

    pub fn broadcast_scalar(&mut self, s: NodeId, shape: &[usize]) -> Result<NodeId> {
        let t = self.value(s);
        if t.numel() != 1 {
            return Err(QuantError::Dimension {
                op: "broadcast_scalar",
                lhs: t.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let v = Tensor::full(shape, t.item());
        Ok(self.push(Op::BroadcastScalar, vec![s], v))
    }

    /// Repeats a vector of length `shape[axis]` along every other axis.
    pub fn broadcast_axis(&mut self, v: NodeId, shape: &[usize], axis: usize) -> Result<NodeId> {
        let t = self.value(v);
        if t.ndim() != 1 || axis >= shape.len() || shape[axis] != t.numel() {
            return Err(QuantError::Dimension {
                op: "broadcast_axis",
                lhs: t.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|i| t.data()[Tensor::channel_of(shape, axis, i)])
            .collect();
        let out = Tensor::new(shape.to_vec(), data)?;
        Ok(self.push(Op::BroadcastAxis(axis), vec![v], out))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(a).reshape(shape)?;
        Ok(self.push(Op::Reshape, vec![a], v))
    }

    /// `[n,c,h,w] -> [n,c]` mean over spatial positions.
    pub fn global_avg_pool(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.value(a);
        if t.ndim() != 4 {
            return Err(QuantError::Dimension {
                op: "global_avg_pool",
                lhs: t.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (n, c) = (t.shape()[0], t.shape()[1]);
        let hw = t.shape()[2] * t.shape()[3];
        let data = t
            .data()
            .chunks(hw)
            .map(|s| s.iter().sum::<f64>() / hw as f64)
            .collect();
        let v = Tensor::new(vec![n, c], data)?;
        Ok(self.push(Op::GlobalAvgPool, vec![a], v))
    }

    /// Appends a node computed outside the core op set.
    pub fn custom(&mut self, op: Box<dyn CustomOp>, inputs: Vec<NodeId>, value: Tensor) -> NodeId {
        self.push(Op::Custom(op), inputs, value)
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Reverse-mode accumulation from a scalar loss.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(QuantError::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.zero_grad();
        let shape = self.value(loss).shape().to_vec();
        self.nodes[loss.0].grad = Some(Tensor::ones(&shape));
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(up) = self.nodes[idx].grad.take() else {
                continue;
            };
            let input_grads = self.local_backward(idx, &up)?;
            self.nodes[idx].grad = Some(up);
            let inputs = self.nodes[idx].inputs.clone();
            for (inp, g) in inputs.into_iter().zip(input_grads) {
                let Some(g) = g else { continue };
                let node = &mut self.nodes[inp.0];
                if !node.requires_grad {
                    continue;
                }
                match &mut node.grad {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    fn local_backward(&self, idx: usize, up: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let node = &self.nodes[idx];
        let inp = |i: usize| &self.nodes[node.inputs[i].0].value;
        let out = &node.value;
        let grads = match &node.op {
            Op::Constant | Op::Parameter(_) => vec![],
            Op::Add => vec![Some(up.clone()), Some(up.clone())],
            Op::Sub => vec![Some(up.clone()), Some(up.map(|g| -g))],
            Op::Mul => vec![
                Some(up.zip_map(inp(1), "mul", |g, b| g * b)?),
                Some(up.zip_map(inp(0), "mul", |g, a| g * a)?),
            ],
            Op::Div => {
                let (a, b) = (inp(0), inp(1));
                let da = up.zip_map(b, "div", |g, b| g / b)?;
                let mut db = up.zip_map(a, "div", |g, a| -g * a)?;
                for (d, &bv) in db.data_mut().iter_mut().zip(b.data()) {
                    *d /= bv * bv;
                }
                vec![Some(da), Some(db)]
            }
            Op::Neg => vec![Some(up.map(|g| -g))],
            Op::Scale(c) => vec![Some(up.map(|g| g * c))],
            Op::AddScalar(_) => vec![Some(up.clone())],
            Op::Exp => vec![Some(up.zip_map(out, "exp", |g, y| g * y)?)],
            Op::Log => vec![Some(up.zip_map(inp(0), "log", |g, x| g / x)?)],
            Op::Relu(active) => {
                let d = up.data().iter().zip(active).map(|(&g, &on)| if on { g } else { 0.0 }).collect();
                vec![Some(Tensor::new(up.shape().to_vec(), d)?)]
            }
            Op::Pow2 => vec![Some(up.zip_map(out, "pow2", |g, y| g * y * std::f64::consts::LN_2)?)],
            Op::SumAll => vec![Some(Tensor::full(inp(0).shape(), up.item()))],
            Op::MeanAll => {
                let n = inp(0).numel() as f64;
                vec![Some(Tensor::full(inp(0).shape(), up.item() / n))]
            }
            Op::SumAxis(axis) | Op::MeanAxis(axis) => {
                let shape = inp(0).shape();
                let extent = shape[*axis];
                let inner: usize = shape[axis + 1..].iter().product();
                let div = if matches!(node.op, Op::MeanAxis(_)) { extent as f64 } else { 1.0 };
                let data = (0..inp(0).numel())
                    .map(|i| {
                        let o = i / (extent * inner);
                        let r = i % inner;
                        up.data()[o * inner + r] / div
                    })
                    .collect();
                vec![Some(Tensor::new(shape.to_vec(), data)?)]
            }
            Op::Softmax => {
                let cols = *out.shape().last().unwrap();
                let mut d = vec![0.0; out.numel()];
                for ((drow, yrow), grow) in d
                    .chunks_mut(cols)
                    .zip(out.data().chunks(cols))
                    .zip(up.data().chunks(cols))
                {
                    let dot: f64 = yrow.iter().zip(grow).map(|(y, g)| y * g).sum();
                    for j in 0..cols {
                        drow[j] = yrow[j] * (grow[j] - dot);
                    }
                }
                vec![Some(Tensor::new(out.shape().to_vec(), d)?)]
            }
            Op::CrossEntropy { labels, probs } => {
                let classes = probs.shape()[1];
                let scale = up.item() / labels.len() as f64;
                let mut d = probs.data().to_vec();
                for (row, &y) in d.chunks_mut(classes).zip(labels) {
                    row[y] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= scale);
                }
                vec![Some(Tensor::new(probs.shape().to_vec(), d)?)]
            }
            Op::MatMul => {
                let (a, b) = (inp(0), inp(1));
                let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                let mut da = vec![0.0; m * k];
                gemm_nt_acc(up.data(), b.data(), &mut da, m, n, k);
                let mut db = vec![0.0; k * n];
                gemm_tn_acc(a.data(), up.data(), &mut db, k, m, n);
                vec![
                    Some(Tensor::new(vec![m, k], da)?),
                    Some(Tensor::new(vec![k, n], db)?),
                ]
            }
            Op::Transpose => vec![Some(up.transpose2()?)],
            Op::Conv2d(geo) => {
                let (dx, dw) = geo.backward(inp(0).data(), inp(1).data(), up.data());
                vec![
                    Some(Tensor::new(inp(0).shape().to_vec(), dx)?),
                    Some(Tensor::new(inp(1).shape().to_vec(), dw)?),
                ]
            }
            Op::Ste(_) => vec![Some(up.clone())],
            Op::Clamp => {
                let (x, lo, hi) = (inp(0), inp(1), inp(2));
                let n = x.numel();
                let (mut dx, mut dlo, mut dhi) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
                for i in 0..n {
                    let (v, l, h, g) = (x.data()[i], lo.data()[i], hi.data()[i], up.data()[i]);
                    if v > h {
                        dhi[i] = g;
                    } else if v < l {
                        dlo[i] = g;
                    } else {
                        dx[i] = g;
                    }
                }
                let shape = x.shape().to_vec();
                vec![
                    Some(Tensor::new(shape.clone(), dx)?),
                    Some(Tensor::new(shape.clone(), dlo)?),
                    Some(Tensor::new(shape, dhi)?),
                ]
            }
            Op::BroadcastScalar => vec![Some(Tensor::new(inp(0).shape().to_vec(), vec![up.sum()])?)],
            Op::BroadcastAxis(axis) => {
                let mut d = vec![0.0; inp(0).numel()];
                for (i, g) in up.data().iter().enumerate() {
                    d[Tensor::channel_of(up.shape(), *axis, i)] += g;
                }
                vec![Some(Tensor::vector(d))]
            }
            Op::Reshape => vec![Some(up.reshape(inp(0).shape())?)],
            Op::GlobalAvgPool => {
                let s = inp(0).shape();
                let hw = s[2] * s[3];
                let data = (0..inp(0).numel())
                    .map(|i| up.data()[i / hw] / hw as f64)
                    .collect();
                vec![Some(Tensor::new(s.to_vec(), data)?)]
            }
            Op::Custom(op) => {
                let inputs: Vec<&Tensor> = node.inputs.iter().map(|i| &self.nodes[i.0].value).collect();
                op.backward(up, &inputs, out)
            }
        };
        Ok(grads)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}
