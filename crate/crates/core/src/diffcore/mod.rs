//! Reverse-mode differentiation over a small, fixed set of image operations.
//!
//! A [`Graph`] is an append-only tape. Every operation is evaluated eagerly
//! when it is recorded, so node values are available immediately; calling
//! [`Graph::backward`] replays the tape in reverse and returns gradients for
//! the registered parameters only.
//!
//! Binary elementwise operations accept either identical shapes or a 1x1x1
//! scalar on one side. [`Op::Select`] and [`Op::Gate`] take their masks as
//! plain tensors, so no gradient ever flows into mask construction.

mod gradcheck;
pub(crate) mod kernels;

use std::collections::BTreeMap;
use std::hash::{Hash, Hasher};

pub use gradcheck::{finite_diff_check, GradCheckReport};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation tag together with its operands.
#[derive(Debug, Clone)]
pub enum Op {
    /// Constant input; never receives a gradient.
    Constant,
    /// Differentiable input reported by [`Graph::backward`].
    Parameter,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Neg(NodeId),
    Abs(NodeId),
    Log(NodeId),
    Exp(NodeId),
    Sigmoid(NodeId),
    /// `max(0, x)`, also used as the hinge.
    Relu(NodeId),
    Clamp {
        x: NodeId,
        lo: f64,
        hi: f64,
    },
    /// `scale * x + offset`.
    Affine {
        x: NodeId,
        scale: f64,
        offset: f64,
    },
    /// Elementwise minimum over the operands; ties go to the earliest.
    Min(Vec<NodeId>),
    /// Mean of all elements, producing a scalar.
    Mean(NodeId),
    /// Mean over elements where `mask != 0`. The mask is either the same
    /// shape as `x` or single-channel with the same height and width.
    MaskedMean {
        x: NodeId,
        mask: Tensor,
    },
    /// Mean over channels, producing a single-channel tensor.
    ChannelMean(NodeId),
    /// 3x3 box filter with replicate padding.
    Box3(NodeId),
    /// Bilinear gather of `src` at continuous coordinates `(u, v)`;
    /// coordinates are clamped to the image rectangle.
    Gather {
        src: NodeId,
        u: NodeId,
        v: NodeId,
    },
    /// `mask ? on : off`, per pixel (the mask broadcasts over channels).
    Select {
        mask: Tensor,
        on: NodeId,
        off: NodeId,
    },
    /// `mask ? x : 0`.
    Gate {
        mask: Tensor,
        x: NodeId,
    },
    /// Forward difference along x: `x[.., i+1] - x[.., i]`.
    DiffX(NodeId),
    /// Forward difference along y.
    DiffY(NodeId),
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Parameter => "parameter",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Neg(_) => "neg",
            Op::Abs(_) => "abs",
            Op::Log(_) => "log",
            Op::Exp(_) => "exp",
            Op::Sigmoid(_) => "sigmoid",
            Op::Relu(_) => "relu",
            Op::Clamp { .. } => "clamp",
            Op::Affine { .. } => "affine",
            Op::Min(_) => "min",
            Op::Mean(_) => "mean",
            Op::MaskedMean { .. } => "masked_mean",
            Op::ChannelMean(_) => "channel_mean",
            Op::Box3(_) => "box3",
            Op::Gather { .. } => "gather",
            Op::Select { .. } => "select",
            Op::Gate { .. } => "gate",
            Op::DiffX(_) => "diff_x",
            Op::DiffY(_) => "diff_y",
        }
    }

    pub fn parents(&self) -> Vec<NodeId> {
        match self {
            Op::Constant | Op::Parameter => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => vec![*a, *b],
            Op::Neg(x)
            | Op::Abs(x)
            | Op::Log(x)
            | Op::Exp(x)
            | Op::Sigmoid(x)
            | Op::Relu(x)
            | Op::Mean(x)
            | Op::ChannelMean(x)
            | Op::Box3(x)
            | Op::DiffX(x)
            | Op::DiffY(x) => vec![*x],
            Op::Clamp { x, .. } | Op::Affine { x, .. } | Op::MaskedMean { x, .. } | Op::Gate { x, .. } => vec![*x],
            Op::Min(xs) => xs.clone(),
            Op::Gather { src, u, v } => vec![*src, *u, *v],
            Op::Select { on, off, .. } => vec![*on, *off],
        }
    }
}

#[derive(Debug, Clone)]
pub struct Node {
    pub id: NodeId,
    pub op: Op,
    pub value: Tensor,
    /// True when some parameter is reachable through the parents.
    requires_grad: bool,
}

/// Append-only computation tape.
#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<NodeId>,
}

/// Gradients keyed by parameter node.
pub type Gradients = BTreeMap<NodeId, Tensor>;

fn broadcast_shape(op: &str, a: Shape, b: Shape) -> Result<Shape> {
    if a == b || b.is_scalar() {
        Ok(a)
    } else if a.is_scalar() {
        Ok(b)
    } else {
        Err(Error::Shape(format!("{op}: incompatible operands {a} and {b}")))
    }
}

fn mask_compatible(op: &str, mask: Shape, x: Shape) -> Result<()> {
    if mask == x || (mask == x.with_channels(1)) {
        Ok(())
    } else {
        Err(Error::Shape(format!("{op}: mask {mask} does not cover operand {x}")))
    }
}

#[inline]
fn mask_at(mask: &Tensor, x_shape: Shape, i: usize) -> bool {
    let idx = if mask.channels() == x_shape.channels { i } else { i / x_shape.channels };
    mask.data()[idx] != 0.0
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
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

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> Shape {
        self.nodes[id.0].value.shape()
    }

    pub fn parameters(&self) -> &[NodeId] {
        &self.params
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Constant, value, false)
    }

    pub fn scalar(&mut self, value: f64) -> NodeId {
        self.constant(Tensor::scalar(value))
    }

    pub fn parameter(&mut self, value: Tensor) -> NodeId {
        let id = self.push(Op::Parameter, value, true);
        self.params.push(id);
        id
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { id, op, value, requires_grad });
        id
    }

    fn check_parents(&self, op: &Op) -> Result<()> {
        for p in op.parents() {
            if p.0 >= self.nodes.len() {
                return Err(Error::InvalidArgument(format!("{}: operand {} is not in the graph", op.name(), p.0)));
            }
        }
        Ok(())
    }

    /// Output shape implied by `op` and the shapes of its operands.
    pub fn output_shape(&self, op: &Op) -> Result<Shape> {
        self.check_parents(op)?;
        let s = |id: &NodeId| self.shape(*id);
        let name = op.name();
        Ok(match op {
            Op::Constant | Op::Parameter => {
                return Err(Error::InvalidArgument(format!("{name}: leaves carry their own shape")))
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => broadcast_shape(name, s(a), s(b))?,
            Op::Neg(x) | Op::Abs(x) | Op::Log(x) | Op::Exp(x) | Op::Sigmoid(x) | Op::Relu(x) | Op::Box3(x) => s(x),
            Op::Clamp { x, lo, hi } => {
                if lo > hi {
                    return Err(Error::InvalidArgument(format!("{name}: lo {lo} > hi {hi}")));
                }
                s(x)
            }
            Op::Affine { x, .. } => s(x),
            Op::Min(xs) => {
                let first = xs.first().ok_or_else(|| Error::InvalidArgument(format!("{name}: empty operand list")))?;
                for x in xs {
                    if s(x) != s(first) {
                        return Err(Error::Shape(format!("{name}: operands {} and {}", s(first), s(x))));
                    }
                }
                s(first)
            }
            Op::Mean(_) => Shape::SCALAR,
            Op::MaskedMean { x, mask } => {
                mask_compatible(name, mask.shape(), s(x))?;
                Shape::SCALAR
            }
            Op::ChannelMean(x) => s(x).with_channels(1),
            Op::Gather { src, u, v } => {
                let (ss, us, vs) = (s(src), s(u), s(v));
                if us != vs || us.channels != 1 || ss.is_empty() {
                    return Err(Error::Shape(format!("{name}: source {ss} with coordinate fields {us} and {vs}")));
                }
                us.with_channels(ss.channels)
            }
            Op::Select { mask, on, off } => {
                if s(on) != s(off) {
                    return Err(Error::Shape(format!("{name}: branches {} and {}", s(on), s(off))));
                }
                mask_compatible(name, mask.shape(), s(on))?;
                s(on)
            }
            Op::Gate { mask, x } => {
                mask_compatible(name, mask.shape(), s(x))?;
                s(x)
            }
            Op::DiffX(x) => {
                let sh = s(x);
                if sh.width < 2 {
                    return Err(Error::Shape(format!("{name}: operand {sh} too narrow")));
                }
                Shape { width: sh.width - 1, ..sh }
            }
            Op::DiffY(x) => {
                let sh = s(x);
                if sh.height < 2 {
                    return Err(Error::Shape(format!("{name}: operand {sh} too short")));
                }
                Shape { height: sh.height - 1, ..sh }
            }
        })
    }

    /// Appends a node with an externally computed forward value.
    ///
    /// The value's shape must match what `op` produces from its operands.
    pub fn record(&mut self, op: Op, value: Tensor) -> Result<NodeId> {
        let expected = self.output_shape(&op)?;
        if value.shape() != expected {
            return Err(Error::Shape(format!(
                "{}: value {} but operands imply {}",
                op.name(),
                value.shape(),
                expected
            )));
        }
        if !value.all_finite() {
            return Err(Error::NonFinite(format!("{} produced a non-finite value", op.name())));
        }
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        Ok(self.push(op, value, requires_grad))
    }

    /// Evaluates `op` on the current operand values and records it.
    pub fn apply(&mut self, op: Op) -> Result<NodeId> {
        let value = self.forward(&op)?;
        self.record(op, value)
    }

    fn binary(&self, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() == vb.shape() {
            va.zip_map(vb, f).expect("same shape")
        } else if vb.shape().is_scalar() {
            let s = vb.item();
            va.map(|x| f(x, s))
        } else {
            let s = va.item();
            vb.map(|x| f(s, x))
        }
    }

    fn forward(&self, op: &Op) -> Result<Tensor> {
        let shape = self.output_shape(op)?;
        let v = |id: &NodeId| self.value(*id);
        Ok(match op {
            Op::Constant | Op::Parameter => unreachable!("rejected by output_shape"),
            Op::Add(a, b) => self.binary(*a, *b, |x, y| x + y),
            Op::Sub(a, b) => self.binary(*a, *b, |x, y| x - y),
            Op::Mul(a, b) => self.binary(*a, *b, |x, y| x * y),
            Op::Div(a, b) => self.binary(*a, *b, |x, y| x / y),
            Op::Neg(x) => v(x).map(|a| -a),
            Op::Abs(x) => v(x).map(f64::abs),
            Op::Log(x) => v(x).map(f64::ln),
            Op::Exp(x) => v(x).map(f64::exp),
            Op::Sigmoid(x) => v(x).map(sigmoid),
            Op::Relu(x) => v(x).map(|a| if a > 0.0 { a } else { 0.0 }),
            Op::Clamp { x, lo, hi } => v(x).map(|a| a.clamp(*lo, *hi)),
            Op::Affine { x, scale, offset } => v(x).map(|a| scale * a + offset),
            Op::Min(xs) => {
                let mut out = v(&xs[0]).clone();
                for other in &xs[1..] {
                    for (o, &c) in out.data_mut().iter_mut().zip(v(other).data()) {
                        if c < *o {
                            *o = c;
                        }
                    }
                }
                out
            }
            Op::Mean(x) => Tensor::scalar(v(x).mean()),
            Op::MaskedMean { x, mask } => {
                let xv = v(x);
                let (mut sum, mut count) = (0.0, 0usize);
                for (i, &a) in xv.data().iter().enumerate() {
                    if mask_at(mask, xv.shape(), i) {
                        sum += a;
                        count += 1;
                    }
                }
                Tensor::scalar(if count == 0 { 0.0 } else { sum / count as f64 })
            }
            Op::ChannelMean(x) => {
                let xv = v(x);
                let ch = xv.channels();
                let data = xv.data().chunks(ch).map(|px| px.iter().sum::<f64>() / ch as f64).collect();
                Tensor::from_vec(shape, data)?
            }
            Op::Box3(x) => kernels::box3(v(x)),
            Op::Gather { src, u, v: vv } => kernels::gather(v(src), v(u), v(vv)),
            Op::Select { mask, on, off } => {
                let (a, b) = (v(on), v(off));
                let data =
                    (0..shape.len()).map(|i| if mask_at(mask, shape, i) { a.data()[i] } else { b.data()[i] }).collect();
                Tensor::from_vec(shape, data)?
            }
            Op::Gate { mask, x } => {
                let a = v(x);
                let data = (0..shape.len()).map(|i| if mask_at(mask, shape, i) { a.data()[i] } else { 0.0 }).collect();
                Tensor::from_vec(shape, data)?
            }
            Op::DiffX(x) => {
                let a = v(x);
                Tensor::from_fn(shape, |y, i, c| a.get(y, i + 1, c) - a.get(y, i, c))
            }
            Op::DiffY(x) => {
                let a = v(x);
                Tensor::from_fn(shape, |y, i, c| a.get(y + 1, i, c) - a.get(y, i, c))
            }
        })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Add(a, b))
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Sub(a, b))
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Mul(a, b))
    }
    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Div(a, b))
    }
    pub fn neg(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Neg(x))
    }
    pub fn abs(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Abs(x))
    }
    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Log(x))
    }
    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Exp(x))
    }
    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Sigmoid(x))
    }
    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Relu(x))
    }
    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        self.apply(Op::Clamp { x, lo, hi })
    }
    pub fn affine(&mut self, x: NodeId, scale: f64, offset: f64) -> Result<NodeId> {
        self.apply(Op::Affine { x, scale, offset })
    }
    pub fn scale(&mut self, x: NodeId, scale: f64) -> Result<NodeId> {
        self.affine(x, scale, 0.0)
    }
    pub fn min(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        self.apply(Op::Min(xs.to_vec()))
    }
    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Mean(x))
    }
    pub fn masked_mean(&mut self, x: NodeId, mask: &Tensor) -> Result<NodeId> {
        self.apply(Op::MaskedMean { x, mask: mask.clone() })
    }
    pub fn channel_mean(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::ChannelMean(x))
    }
    pub fn box3(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Box3(x))
    }
    pub fn gather(&mut self, src: NodeId, u: NodeId, v: NodeId) -> Result<NodeId> {
        self.apply(Op::Gather { src, u, v })
    }
    pub fn select(&mut self, mask: &Tensor, on: NodeId, off: NodeId) -> Result<NodeId> {
        self.apply(Op::Select { mask: mask.clone(), on, off })
    }
    pub fn gate(&mut self, mask: &Tensor, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Gate { mask: mask.clone(), x })
    }
    pub fn diff_x(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::DiffX(x))
    }
    pub fn diff_y(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::DiffY(x))
    }

    /// Gradient of the scalar `loss` with respect to every parameter.
    ///
    /// Parameters that do not influence the loss get a zero tensor.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::InvalidArgument(format!("loss node {} is not in the graph", loss.0)));
        }
        let ls = self.shape(loss);
        if !ls.is_scalar() {
            return Err(Error::Shape(format!("backward: loss must be 1x1x1, got {ls}")));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Parameter) {
                adj[i] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut adj);
        }
        let mut grads = Gradients::new();
        for &p in &self.params {
            let g = adj.get_mut(p.0).and_then(Option::take).unwrap_or_else(|| Tensor::zeros(self.shape(p)));
            grads.insert(p, g);
        }
        Ok(grads)
    }

    fn accumulate(&self, adj: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        let target = self.shape(id);
        // Reduce a broadcast contribution back onto a scalar operand.
        let g = if target.is_scalar() && !g.shape().is_scalar() { Tensor::scalar(g.sum()) } else { g };
        match &mut adj[id.0] {
            Some(existing) => {
                for (e, v) in existing.data_mut().iter_mut().zip(g.data()) {
                    *e += v;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn binary_operand(&self, other: NodeId, out: Shape, i: usize) -> f64 {
        let v = self.value(other);
        if v.shape() == out {
            v.data()[i]
        } else {
            v.item()
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, adj: &mut [Option<Tensor>]) {
        let out = node.value.shape();
        let unary = |f: &dyn Fn(usize, f64) -> f64| -> Tensor {
            let data = g.data().iter().enumerate().map(|(i, &gi)| f(i, gi)).collect();
            Tensor::from_vec(g.shape(), data).expect("adjoint shape")
        };
        match &node.op {
            Op::Constant | Op::Parameter => {}
            Op::Add(a, b) => {
                if self.wants(*a) {
                    self.accumulate(adj, *a, g.clone());
                }
                if self.wants(*b) {
                    self.accumulate(adj, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    self.accumulate(adj, *a, g.clone());
                }
                if self.wants(*b) {
                    self.accumulate(adj, *b, g.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    self.accumulate(adj, *a, unary(&|i, gi| gi * self.binary_operand(*b, out, i)));
                }
                if self.wants(*b) {
                    self.accumulate(adj, *b, unary(&|i, gi| gi * self.binary_operand(*a, out, i)));
                }
            }
            Op::Div(a, b) => {
                if self.wants(*a) {
                    self.accumulate(adj, *a, unary(&|i, gi| gi / self.binary_operand(*b, out, i)));
                }
                if self.wants(*b) {
                    let gb = unary(&|i, gi| -gi * node.value.data()[i] / self.binary_operand(*b, out, i));
                    self.accumulate(adj, *b, gb);
                }
            }
            Op::Neg(x) => self.accumulate(adj, *x, g.map(|v| -v)),
            Op::Abs(x) => {
                let xv = self.value(*x);
                let gx = unary(&|i, gi| {
                    let a = xv.data()[i];
                    if a > 0.0 {
                        gi
                    } else if a < 0.0 {
                        -gi
                    } else {
                        0.0
                    }
                });
                self.accumulate(adj, *x, gx);
            }
            Op::Log(x) => {
                let xv = self.value(*x);
                self.accumulate(adj, *x, unary(&|i, gi| gi / xv.data()[i]));
            }
            Op::Exp(_) | Op::Sigmoid(_) => {
                let y = &node.value;
                let x = node.op.parents()[0];
                let gx = if matches!(node.op, Op::Exp(_)) {
                    unary(&|i, gi| gi * y.data()[i])
                } else {
                    unary(&|i, gi| gi * y.data()[i] * (1.0 - y.data()[i]))
                };
                self.accumulate(adj, x, gx);
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                self.accumulate(adj, *x, unary(&|i, gi| if xv.data()[i] > 0.0 { gi } else { 0.0 }));
            }
            Op::Clamp { x, lo, hi } => {
                let xv = self.value(*x);
                let gx = unary(&|i, gi| {
                    let a = xv.data()[i];
                    if a > *lo && a < *hi {
                        gi
                    } else {
                        0.0
                    }
                });
                self.accumulate(adj, *x, gx);
            }
            Op::Affine { x, scale, .. } => self.accumulate(adj, *x, g.map(|v| v * scale)),
            Op::Min(xs) => {
                let mut per: Vec<Tensor> = xs.iter().map(|_| Tensor::zeros(out)).collect();
                for i in 0..out.len() {
                    let mut best = 0;
                    let mut best_v = self.value(xs[0]).data()[i];
                    for (k, x) in xs.iter().enumerate().skip(1) {
                        let c = self.value(*x).data()[i];
                        if c < best_v {
                            best = k;
                            best_v = c;
                        }
                    }
                    per[best].data_mut()[i] = g.data()[i];
                }
                for (x, gx) in xs.iter().zip(per) {
                    self.accumulate(adj, *x, gx);
                }
            }
            Op::Mean(x) => {
                let s = self.shape(*x);
                self.accumulate(adj, *x, Tensor::full(s, g.item() / s.len() as f64));
            }
            Op::MaskedMean { x, mask } => {
                let s = self.shape(*x);
                let count = (0..s.len()).filter(|&i| mask_at(mask, s, i)).count();
                let w = if count == 0 { 0.0 } else { g.item() / count as f64 };
                let data = (0..s.len()).map(|i| if mask_at(mask, s, i) { w } else { 0.0 }).collect();
                self.accumulate(adj, *x, Tensor::from_vec(s, data).expect("mask shape"));
            }
            Op::ChannelMean(x) => {
                let s = self.shape(*x);
                let ch = s.channels;
                let data = (0..s.len()).map(|i| g.data()[i / ch] / ch as f64).collect();
                self.accumulate(adj, *x, Tensor::from_vec(s, data).expect("channel shape"));
            }
            Op::Box3(x) => self.accumulate(adj, *x, kernels::box3_adjoint(g)),
            Op::Gather { src, u, v } => {
                let want_src = self.nodes[src.0].requires_grad;
                let want_coords = self.nodes[u.0].requires_grad || self.nodes[v.0].requires_grad;
                let (gs, gc) =
                    kernels::gather_adjoint(self.value(*src), self.value(*u), self.value(*v), g, want_src, want_coords);
                if let Some(gs) = gs {
                    self.accumulate(adj, *src, gs);
                }
                if let Some((gu, gv)) = gc {
                    self.accumulate(adj, *u, gu);
                    self.accumulate(adj, *v, gv);
                }
            }
            Op::Select { mask, on, off } => {
                if self.wants(*on) {
                    self.accumulate(adj, *on, unary(&|i, gi| if mask_at(mask, out, i) { gi } else { 0.0 }));
                }
                if self.wants(*off) {
                    self.accumulate(adj, *off, unary(&|i, gi| if mask_at(mask, out, i) { 0.0 } else { gi }));
                }
            }
            Op::Gate { mask, x } => {
                self.accumulate(adj, *x, unary(&|i, gi| if mask_at(mask, out, i) { gi } else { 0.0 }));
            }
            Op::DiffX(x) => {
                let s = self.shape(*x);
                let mut gx = Tensor::zeros(s);
                for y in 0..out.height {
                    for i in 0..out.width {
                        for c in 0..out.channels {
                            let gi = g.get(y, i, c);
                            let a = gx.index(y, i + 1, c);
                            gx.data_mut()[a] += gi;
                            let b = gx.index(y, i, c);
                            gx.data_mut()[b] -= gi;
                        }
                    }
                }
                self.accumulate(adj, *x, gx);
            }
            Op::DiffY(x) => {
                let s = self.shape(*x);
                let mut gx = Tensor::zeros(s);
                for y in 0..out.height {
                    for i in 0..out.width {
                        for c in 0..out.channels {
                            let gi = g.get(y, i, c);
                            let a = gx.index(y + 1, i, c);
                            gx.data_mut()[a] += gi;
                            let b = gx.index(y, i, c);
                            gx.data_mut()[b] -= gi;
                        }
                    }
                }
                self.accumulate(adj, *x, gx);
            }
        }
    }

    /// Fingerprint of every discrete branch taken during the forward pass:
    /// signs under `abs`/`relu`, clamp regions, `min` winners, bilinear
    /// cells and the masks of `select`/`gate`/`masked_mean`. Two evaluations with equal fingerprints lie on the same smooth
    /// piece of the function.
    pub fn branch_signature(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for node in &self.nodes {
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Abs(x) | Op::Relu(x) => {
                    for &a in self.value(*x).data() {
                        (a > 0.0, a < 0.0).hash(&mut h);
                    }
                }
                Op::Clamp { x, lo, hi } => {
                    for &a in self.value(*x).data() {
                        (a <= *lo, a >= *hi).hash(&mut h);
                    }
                }
                Op::Min(xs) => {
                    let n = node.value.shape().len();
                    for i in 0..n {
                        let winner =
                            xs.iter().position(|x| self.value(*x).data()[i] == node.value.data()[i]).unwrap_or(0);
                        winner.hash(&mut h);
                    }
                }
                Op::Gather { src, u, v } => {
                    let s = self.shape(*src);
                    for (&a, &b) in self.value(*u).data().iter().zip(self.value(*v).data()) {
                        let (tx, ty) = (kernels::tap(a, s.width), kernels::tap(b, s.height));
                        (tx.lo, tx.clamped, ty.lo, ty.clamped).hash(&mut h);
                        // Integer coordinates sit on a cell boundary.
                        (tx.frac == 0.0, ty.frac == 0.0).hash(&mut h);
                    }
                }
                // Masks are computed from values upstream, so a flip is a branch.
                Op::Select { mask, .. } | Op::Gate { mask, .. } | Op::MaskedMean { mask, .. } => {
                    for &m in mask.data() {
                        (m != 0.0).hash(&mut h);
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }
}
