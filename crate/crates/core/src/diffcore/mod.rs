//! Reverse-mode differentiation over dense `f64` tensors.
//!
//! Every op is evaluated eagerly and recorded in a [`Graph`]. [`Graph::grad`]
//! builds the gradient as new nodes of the same graph, so gradients can be
//! fed into further computation and differentiated again. That is what
//! makes a loss on an input-gradient saliency map trainable.
//!
//! `relu`, `abs` and the channel max are treated as piecewise linear: their
//! backward passes multiply by a constant mask, so their second derivative
//! is zero everywhere (subgradient 0 at the kink).

mod fd;
pub mod kernels;
mod model;
mod tensor;

use thiserror::Error;

pub use fd::{fd_check, fd_check_params, rel_err, FdReport};
pub use kernels::{Pad2d, PadMode};
pub use model::{Architecture, LayerSpec, Model, ParamNodes};
pub use tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("gradient root must hold a single element, has shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("node {0:?} does not influence the gradient root")]
    Unreachable(NodeId),
    #[error("layer {index} ({kind}): {message}")]
    Layer {
        index: usize,
        kind: String,
        message: String,
    },
    #[error("unknown parameter {0:?}")]
    UnknownParam(String),
}

pub type Result<T> = std::result::Result<T, GraphError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone)]
pub enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId, f64),
    Square(NodeId),
    Sqrt(NodeId),
    /// `1/x`, with `1/0 := 0` so that `sqrt` has a zero subgradient at the
    /// origin.
    Recip(NodeId),
    Abs(NodeId),
    Relu(NodeId),
    Sum(NodeId),
    BroadcastTo(NodeId, Vec<usize>),
    ReduceTo(NodeId, Vec<usize>),
    Reshape(NodeId, Vec<usize>),
    MaxAlong(NodeId, usize),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Pad(NodeId, Pad2d),
    PadAdjoint(NodeId, Pad2d, Vec<usize>),
    Conv(NodeId, NodeId, usize),
    ConvBackInput(NodeId, NodeId, usize, Vec<usize>),
    ConvBackWeight(NodeId, NodeId, usize, Vec<usize>),
    Softmax(NodeId),
    /// Mean soft-target cross entropy; the target input is never
    /// differentiated.
    SoftmaxXent(NodeId, NodeId),
}

impl Op {
    fn inputs(&self) -> Vec<NodeId> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | MatMul(a, b) | SoftmaxXent(a, b) => vec![*a, *b],
            Conv(a, b, _) | ConvBackInput(a, b, _, _) | ConvBackWeight(a, b, _, _) => vec![*a, *b],
            Scale(a, _)
            | AddScalar(a, _)
            | Square(a)
            | Sqrt(a)
            | Recip(a)
            | Abs(a)
            | Relu(a)
            | Sum(a)
            | BroadcastTo(a, _)
            | ReduceTo(a, _)
            | Reshape(a, _)
            | MaxAlong(a, _)
            | Transpose(a)
            | Pad(a, _)
            | PadAdjoint(a, _, _)
            | Softmax(a) => vec![*a],
        }
    }

    pub fn tag(&self) -> &'static str {
        use Op::*;
        match self {
            Leaf => "leaf",
            Add(..) => "add",
            Sub(..) => "sub",
            Mul(..) => "mul",
            Scale(..) => "scale",
            AddScalar(..) => "add_scalar",
            Square(..) => "square",
            Sqrt(..) => "sqrt",
            Recip(..) => "recip",
            Abs(..) => "abs",
            Relu(..) => "relu",
            Sum(..) => "sum",
            BroadcastTo(..) => "broadcast_to",
            ReduceTo(..) => "reduce_to",
            Reshape(..) => "reshape",
            MaxAlong(..) => "max_along",
            MatMul(..) => "matmul",
            Transpose(..) => "transpose",
            Pad(..) => "pad",
            PadAdjoint(..) => "pad_adjoint",
            Conv(..) => "conv2d",
            ConvBackInput(..) => "conv2d_back_input",
            ConvBackWeight(..) => "conv2d_back_weight",
            Softmax(..) => "softmax",
            SoftmaxXent(..) => "softmax_xent",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Node {
    pub op: Op,
    pub value: Tensor,
    pub requires_grad: bool,
}

/// Append-only computation graph. Node ids are a topological order.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, id: NodeId) -> f64 {
        self.value(id).values()[0]
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        let requires_grad = op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// A leaf that gradients may be taken with respect to.
    pub fn variable(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad: true,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(GraphError::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "add")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "sub")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(Op::Sub(a, b), v))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "mul")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(Op::Mul(a, b), v))
    }

    /// Elementwise `a / b`, as `a * recip(b)`.
    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let r = self.recip(b);
        self.mul(a, r)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).map(|x| x * c);
        self.push(Op::Scale(a, c), v)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).map(|x| x + c);
        self.push(Op::AddScalar(a, c), v)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x * x);
        self.push(Op::Square(a), v)
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::sqrt);
        self.push(Op::Sqrt(a), v)
    }

    pub fn recip(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| if x == 0.0 { 0.0 } else { 1.0 / x });
        self.push(Op::Recip(a), v)
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::abs);
        self.push(Op::Abs(a), v)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(Op::Relu(a), v)
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(Op::Sum(a), v)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn broadcast_to(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        if self.shape(a) == shape {
            return Ok(a);
        }
        if !kernels::broadcastable(self.shape(a), shape) {
            return Err(GraphError::Shape(format!(
                "cannot broadcast {:?} to {shape:?}",
                self.shape(a)
            )));
        }
        let v = kernels::broadcast_to(self.value(a), shape);
        Ok(self.push(Op::BroadcastTo(a, shape.to_vec()), v))
    }

    /// Sums over the axes where `shape` has extent 1.
    pub fn reduce_to(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        if self.shape(a) == shape {
            return Ok(a);
        }
        if !kernels::broadcastable(shape, self.shape(a)) {
            return Err(GraphError::Shape(format!(
                "cannot reduce {:?} to {shape:?}",
                self.shape(a)
            )));
        }
        let v = kernels::reduce_to(self.value(a), shape);
        Ok(self.push(Op::ReduceTo(a, shape.to_vec()), v))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        if self.shape(a) == shape {
            return Ok(a);
        }
        let v = self.value(a).reshaped(shape.to_vec())?;
        Ok(self.push(Op::Reshape(a, shape.to_vec()), v))
    }

    /// Maximum along `axis`, keeping it with extent 1.
    pub fn max_along(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        if axis >= self.shape(a).len() {
            return Err(GraphError::Shape(format!(
                "max axis {axis} out of range for {:?}",
                self.shape(a)
            )));
        }
        let (v, _) = kernels::max_along(self.value(a), axis);
        Ok(self.push(Op::MaxAlong(a, axis), v))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(GraphError::Shape(format!("matmul {sa:?} x {sb:?}")));
        }
        let v = kernels::matmul(self.value(a), self.value(b));
        Ok(self.push(Op::MatMul(a, b), v))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        if self.shape(a).len() != 2 {
            return Err(GraphError::Shape(format!("transpose of {:?}", self.shape(a))));
        }
        let v = kernels::transpose(self.value(a));
        Ok(self.push(Op::Transpose(a), v))
    }

    pub fn pad2d(&mut self, a: NodeId, pad: Pad2d) -> Result<NodeId> {
        let s = self.shape(a);
        if s.len() < 2 {
            return Err(GraphError::Shape(format!("pad2d needs rank >= 2, got {s:?}")));
        }
        if pad.is_noop() {
            return Ok(a);
        }
        let v = kernels::pad2d(self.value(a), &pad);
        Ok(self.push(Op::Pad(a, pad), v))
    }

    fn pad2d_adjoint(&mut self, g: NodeId, pad: Pad2d, orig: &[usize]) -> NodeId {
        let v = kernels::pad2d_adjoint(self.value(g), &pad, orig);
        self.push(Op::PadAdjoint(g, pad, orig.to_vec()), v)
    }

    /// Valid cross-correlation of NCHW input with OIHW weights.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize) -> Result<NodeId> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(GraphError::Shape(format!("conv2d input {sx:?} weight {sw:?}")));
        }
        if kernels::conv_out_extent(sx[2], sw[2], stride).is_none()
            || kernels::conv_out_extent(sx[3], sw[3], stride).is_none()
        {
            return Err(GraphError::Shape(format!(
                "conv2d kernel {sw:?} stride {stride} does not fit input {sx:?}"
            )));
        }
        let v = kernels::conv2d(self.value(x), self.value(w), stride);
        Ok(self.push(Op::Conv(x, w, stride), v))
    }

    fn conv2d_back_input(&mut self, g: NodeId, w: NodeId, stride: usize, xs: &[usize]) -> NodeId {
        let v = kernels::conv2d_back_input(self.value(g), self.value(w), stride, xs);
        self.push(Op::ConvBackInput(g, w, stride, xs.to_vec()), v)
    }

    fn conv2d_back_weight(&mut self, x: NodeId, g: NodeId, stride: usize, ws: &[usize]) -> NodeId {
        let v = kernels::conv2d_back_weight(self.value(x), self.value(g), stride, ws);
        self.push(Op::ConvBackWeight(x, g, stride, ws.to_vec()), v)
    }

    pub fn softmax(&mut self, z: NodeId) -> Result<NodeId> {
        if self.shape(z).len() != 2 {
            return Err(GraphError::Shape(format!("softmax of {:?}", self.shape(z))));
        }
        let v = kernels::softmax_rows(self.value(z));
        Ok(self.push(Op::Softmax(z), v))
    }

    /// Mean cross entropy between row-softmax of `logits` and soft `targets`
    /// (rows summing to 1; label smoothing and mixup live in the targets).
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, targets: NodeId) -> Result<NodeId> {
        self.same_shape(logits, targets, "softmax_cross_entropy")?;
        if self.shape(logits).len() != 2 {
            return Err(GraphError::Shape(format!(
                "softmax_cross_entropy needs [batch, classes], got {:?}",
                self.shape(logits)
            )));
        }
        let v = Tensor::scalar(kernels::softmax_cross_entropy(self.value(logits), self.value(targets)));
        Ok(self.push(Op::SoftmaxXent(logits, targets), v))
    }

    /// Gradient of the single-element `root` with respect to each node of
    /// `wrt`, in `wrt` order. The returned nodes live in this graph, so they
    /// can be differentiated again.
    pub fn grad(&mut self, root: NodeId, wrt: &[NodeId]) -> Result<Vec<NodeId>> {
        if self.value(root).len() != 1 {
            return Err(GraphError::NotScalar(self.shape(root).to_vec()));
        }
        let n = root.0 + 1;
        let mut needed = vec![false; n];
        needed[root.0] = true;
        for i in (0..n).rev() {
            if needed[i] {
                for j in self.nodes[i].op.inputs() {
                    needed[j.0] = true;
                }
            }
        }
        let mut depends = vec![false; n];
        for w in wrt {
            if w.0 >= n || !needed[w.0] {
                return Err(GraphError::Unreachable(*w));
            }
            depends[w.0] = true;
        }
        for i in 0..n {
            if !depends[i] && self.nodes[i].op.inputs().iter().any(|j| depends[j.0]) {
                depends[i] = true;
            }
        }
        let active: Vec<bool> = (0..n).map(|i| needed[i] && depends[i]).collect();

        let mut grads: Vec<Option<NodeId>> = vec![None; n];
        let seed = Tensor::full(self.shape(root), 1.0);
        grads[root.0] = Some(self.constant(seed));
        for i in (0..n).rev() {
            let Some(g) = grads[i] else { continue };
            if !active[i] {
                continue;
            }
            let op = self.nodes[i].op.clone();
            for (input, contrib) in self.vjp(NodeId(i), &op, g, &active)? {
                grads[input.0] = Some(match grads[input.0] {
                    None => contrib,
                    Some(prev) => self.add(prev, contrib)?,
                });
            }
        }
        Ok(wrt
            .iter()
            .map(|w| match grads[w.0] {
                Some(g) => g,
                None => {
                    let z = Tensor::zeros(self.shape(*w));
                    self.constant(z)
                }
            })
            .collect())
    }

    /// Vector-Jacobian products of node `out` for each active input.
    fn vjp(&mut self, out: NodeId, op: &Op, g: NodeId, active: &[bool]) -> Result<Vec<(NodeId, NodeId)>> {
        let on = |id: &NodeId| active[id.0];
        let mut res = Vec::with_capacity(2);
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if on(a) {
                    res.push((*a, g));
                }
                if on(b) {
                    res.push((*b, g));
                }
            }
            Op::Sub(a, b) => {
                if on(a) {
                    res.push((*a, g));
                }
                if on(b) {
                    res.push((*b, self.neg(g)));
                }
            }
            Op::Mul(a, b) => {
                if on(a) {
                    res.push((*a, self.mul(g, *b)?));
                }
                if on(b) {
                    res.push((*b, self.mul(g, *a)?));
                }
            }
            Op::Scale(a, c) => res.push((*a, self.scale(g, *c))),
            Op::AddScalar(a, _) => res.push((*a, g)),
            Op::Square(a) => {
                let two_a = self.scale(*a, 2.0);
                res.push((*a, self.mul(g, two_a)?));
            }
            Op::Sqrt(a) => {
                let r = self.recip(out);
                let half_r = self.scale(r, 0.5);
                res.push((*a, self.mul(g, half_r)?));
            }
            Op::Recip(a) => {
                let r2 = self.square(out);
                let t = self.mul(g, r2)?;
                res.push((*a, self.neg(t)));
            }
            Op::Abs(a) => {
                let sign = self.value(*a).map(|v| {
                    if v > 0.0 {
                        1.0
                    } else if v < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                let s = self.constant(sign);
                res.push((*a, self.mul(g, s)?));
            }
            Op::Relu(a) => {
                let mask = self.value(*a).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
                let m = self.constant(mask);
                res.push((*a, self.mul(g, m)?));
            }
            Op::Sum(a) => {
                let shape = self.shape(*a).to_vec();
                let ones = vec![1; shape.len()];
                let r = self.reshape(g, &ones)?;
                res.push((*a, self.broadcast_to(r, &shape)?));
            }
            Op::BroadcastTo(a, _) => {
                let shape = self.shape(*a).to_vec();
                res.push((*a, self.reduce_to(g, &shape)?));
            }
            Op::ReduceTo(a, _) => {
                let shape = self.shape(*a).to_vec();
                res.push((*a, self.broadcast_to(g, &shape)?));
            }
            Op::Reshape(a, _) => {
                let shape = self.shape(*a).to_vec();
                res.push((*a, self.reshape(g, &shape)?));
            }
            Op::MaxAlong(a, axis) => {
                let (_, mask) = kernels::max_along(self.value(*a), *axis);
                let shape = self.shape(*a).to_vec();
                let gb = self.broadcast_to(g, &shape)?;
                let m = self.constant(mask);
                res.push((*a, self.mul(gb, m)?));
            }
            Op::MatMul(a, b) => {
                if on(a) {
                    let bt = self.transpose(*b)?;
                    res.push((*a, self.matmul(g, bt)?));
                }
                if on(b) {
                    let at = self.transpose(*a)?;
                    res.push((*b, self.matmul(at, g)?));
                }
            }
            Op::Transpose(a) => res.push((*a, self.transpose(g)?)),
            Op::Pad(a, pad) => {
                let shape = self.shape(*a).to_vec();
                res.push((*a, self.pad2d_adjoint(g, *pad, &shape)));
            }
            Op::PadAdjoint(a, pad, _) => res.push((*a, self.pad2d(g, *pad)?)),
            Op::Conv(x, w, s) => {
                if on(x) {
                    let xs = self.shape(*x).to_vec();
                    res.push((*x, self.conv2d_back_input(g, *w, *s, &xs)));
                }
                if on(w) {
                    let ws = self.shape(*w).to_vec();
                    res.push((*w, self.conv2d_back_weight(*x, g, *s, &ws)));
                }
            }
            Op::ConvBackInput(gy, w, s, _) => {
                if on(gy) {
                    res.push((*gy, self.conv2d(g, *w, *s)?));
                }
                if on(w) {
                    let ws = self.shape(*w).to_vec();
                    res.push((*w, self.conv2d_back_weight(g, *gy, *s, &ws)));
                }
            }
            Op::ConvBackWeight(x, gy, s, _) => {
                if on(x) {
                    let xs = self.shape(*x).to_vec();
                    res.push((*x, self.conv2d_back_input(*gy, g, *s, &xs)));
                }
                if on(gy) {
                    res.push((*gy, self.conv2d(*x, g, *s)?));
                }
            }
            Op::Softmax(z) => {
                let shape = self.shape(*z).to_vec();
                let gy = self.mul(g, out)?;
                let rows = self.reduce_to(gy, &[shape[0], 1])?;
                let rows = self.broadcast_to(rows, &shape)?;
                let centered = self.sub(g, rows)?;
                res.push((*z, self.mul(out, centered)?));
            }
            Op::SoftmaxXent(z, t) => {
                if on(z) {
                    let shape = self.shape(*z).to_vec();
                    let p = self.softmax(*z)?;
                    let diff = self.sub(p, *t)?;
                    let g2 = self.reshape(g, &[1, 1])?;
                    let gb = self.broadcast_to(g2, &shape)?;
                    let prod = self.mul(gb, diff)?;
                    res.push((*z, self.scale(prod, 1.0 / shape[0] as f64)));
                }
            }
        }
        Ok(res)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_t(v: &[f64]) -> Tensor {
        Tensor::vector(v)
    }

    #[test]
    fn square_derivative() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::scalar(3.0));
        let y = g.square(x);
        let dx = g.grad(y, &[x]).unwrap();
        assert_eq!(g.item(dx[0]), 6.0);
        // second derivative
        let d2 = g.grad(dx[0], &[x]).unwrap();
        assert_eq!(g.item(d2[0]), 2.0);
    }

    #[test]
    fn linear_gradient_is_weight() {
        let mut g = Graph::new();
        let w = g.constant(Tensor::new(vec![1, 3], vec![0.5, -2.0, 4.0]).unwrap());
        let x = g.variable(Tensor::new(vec![3, 1], vec![1.0, 2.0, 3.0]).unwrap());
        let y = g.matmul(w, x).unwrap();
        let dx = g.grad(y, &[x]).unwrap();
        assert_eq!(g.value(dx[0]).values(), &[0.5, -2.0, 4.0]);
    }

    #[test]
    fn errors_on_non_scalar_and_unreachable() {
        let mut g = Graph::new();
        let x = g.variable(vec_t(&[1.0, 2.0]));
        let other = g.variable(vec_t(&[1.0]));
        let y = g.square(x);
        assert!(matches!(g.grad(y, &[x]), Err(GraphError::NotScalar(_))));
        let s = g.sum(y);
        assert_eq!(g.grad(s, &[other]), Err(GraphError::Unreachable(other)));
    }

    #[test]
    fn sqrt_at_zero_has_zero_subgradient() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::scalar(0.0));
        let y = g.sqrt(x);
        let d = g.grad(y, &[x]).unwrap();
        assert_eq!(g.item(d[0]), 0.0);
    }

    #[test]
    fn softmax_xent_gradient() {
        let mut g = Graph::new();
        let z = g.variable(Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let t = g.constant(Tensor::new(vec![1, 3], vec![0.0, 0.0, 1.0]).unwrap());
        let l = g.softmax_cross_entropy(z, t).unwrap();
        let d = g.grad(l, &[z]).unwrap();
        let p = kernels::softmax_rows(g.value(z));
        let expect = [p.values()[0], p.values()[1], p.values()[2] - 1.0];
        for (a, b) in g.value(d[0]).values().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn requires_grad_propagates() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::scalar(1.0));
        let v = g.variable(Tensor::scalar(1.0));
        let cc = g.square(c);
        let cv = g.add(cc, v).unwrap();
        assert!(!g.node(cc).requires_grad);
        assert!(g.node(cv).requires_grad);
        assert_eq!(g.node(cv).op.tag(), "add");
    }
}
