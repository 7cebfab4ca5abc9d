//! Reverse-mode automatic differentiation over a flat node arena.
//!
//! Nodes are appended in construction order, so parent ids always precede
//! child ids and backward is a single reverse sweep. Gradient accumulation
//! follows node-id order, which makes repeated runs bit-identical.

use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum OpKind {
    Leaf,
    Conv2d { stride: usize, pad: usize },
    Relu,
    Sigmoid,
    Softmax { axis: usize },
    Mul,
    Add,
    Scale(f64),
    ResizeNearest,
    ConcatChannels,
    Sum,
    Mean,
    /// parents = [q, l]; the gradient flows into l only. Targets built from
    /// frozen or fused distributions stay constant by construction.
    SoftCrossEntropy { axis: usize },
}

struct Node {
    op: OpKind,
    parents: Vec<NodeId>,
    value: Tensor,
    grad: Option<Tensor>,
    needs_grad: bool,
}

/// A single-use computation graph; build forward, call `backward` once.
#[derive(Default)]
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

    fn push(&mut self, op: OpKind, parents: Vec<NodeId>, value: Tensor) -> NodeId {
        debug_assert!(parents.iter().all(|p| p.0 < self.nodes.len()));
        let needs_grad = parents.iter().any(|&p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            op,
            parents,
            value,
            grad: None,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op: OpKind::Leaf,
            parents: Vec::new(),
            value,
            grad: None,
            needs_grad: requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Copy of `id`'s value as a fresh constant leaf (stop-gradient).
    pub fn detach(&mut self, id: NodeId) -> NodeId {
        let v = self.value(id).clone();
        self.leaf(v, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, id: NodeId) -> Option<Tensor> {
        self.nodes[id.0].grad.take()
    }

    pub fn conv2d(&mut self, x: NodeId, k: NodeId, bias: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let out = ops::conv2d(self.value(x), self.value(k), self.value(bias), stride, pad)?;
        Ok(self.push(OpKind::Conv2d { stride, pad }, vec![x, k, bias], out))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out = ops::relu(self.value(x));
        self.push(OpKind::Relu, vec![x], out)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let out = ops::sigmoid(self.value(x));
        self.push(OpKind::Sigmoid, vec![x], out)
    }

    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let out = ops::softmax(self.value(x), axis)?;
        Ok(self.push(OpKind::Softmax { axis }, vec![x], out))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = ops::mul(self.value(a), self.value(b))?;
        Ok(self.push(OpKind::Mul, vec![a, b], out))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = ops::add(self.value(a), self.value(b))?;
        Ok(self.push(OpKind::Add, vec![a, b], out))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let out = self.value(x).map(|v| v * c);
        self.push(OpKind::Scale(c), vec![x], out)
    }

    pub fn resize_nearest(&mut self, x: NodeId, th: usize, tw: usize) -> Result<NodeId> {
        let out = ops::resize_nearest(self.value(x), th, tw)?;
        Ok(self.push(OpKind::ResizeNearest, vec![x], out))
    }

    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = ops::concat_channels(self.value(a), self.value(b))?;
        Ok(self.push(OpKind::ConcatChannels, vec![a, b], out))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.value(x).data().iter().sum();
        self.push(OpKind::Sum, vec![x], Tensor::scalar(s))
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let n = self.value(x).numel() as f64;
        let s: f64 = self.value(x).data().iter().sum();
        self.push(OpKind::Mean, vec![x], Tensor::scalar(s / n))
    }

    /// Scalar -sum(q * log_softmax(l)); gradient flows into l only.
    pub fn soft_cross_entropy(&mut self, q: NodeId, l: NodeId, axis: usize) -> Result<NodeId> {
        let v = ops::soft_cross_entropy(self.value(q), self.value(l), axis)?;
        Ok(self.push(OpKind::SoftCrossEntropy { axis }, vec![q, l], Tensor::scalar(v)))
    }

    fn accumulate(&mut self, id: NodeId, contribution: Tensor) {
        let slot = &mut self.nodes[id.0].grad;
        match slot {
            Some(g) => g.add_assign(&contribution),
            None => *slot = Some(contribution),
        }
    }

    /// Reverse-topological accumulation of vector-Jacobian products from a
    /// scalar loss node. Every node reachable from the loss ends up with a
    /// gradient slot of its output's dims (zero where nothing flows).
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got dims {:?}", self.value(loss).dims()),
            ));
        }
        let mut reachable = vec![false; self.nodes.len()];
        let mut stack = vec![loss.0];
        while let Some(i) = stack.pop() {
            if reachable[i] {
                continue;
            }
            reachable[i] = true;
            stack.extend(self.nodes[i].parents.iter().map(|p| p.0));
        }
        for i in 0..self.nodes.len() {
            if reachable[i] {
                self.nodes[i].grad = Some(Tensor::zeros(self.nodes[i].value.dims()));
            }
        }
        self.nodes[loss.0].grad = Some(Tensor::scalar(1.0));

        for i in (0..self.nodes.len()).rev() {
            if !reachable[i] || !self.nodes[i].needs_grad {
                continue;
            }
            let dy = match &self.nodes[i].grad {
                Some(g) => g.clone(),
                None => continue,
            };
            let parents = self.nodes[i].parents.clone();
            let op = self.nodes[i].op.clone();
            match op {
                OpKind::Leaf => {}
                OpKind::Conv2d { stride, pad } => {
                    let need = [
                        self.nodes[parents[0].0].needs_grad,
                        self.nodes[parents[1].0].needs_grad,
                        self.nodes[parents[2].0].needs_grad,
                    ];
                    let grads = ops::conv2d_vjp(
                        &self.nodes[parents[0].0].value,
                        &self.nodes[parents[1].0].value,
                        &dy,
                        stride,
                        pad,
                        need[0],
                        need[1],
                        need[2],
                    );
                    if let Some(dx) = grads.dx {
                        self.accumulate(parents[0], dx);
                    }
                    if let Some(dk) = grads.dk {
                        self.accumulate(parents[1], dk);
                    }
                    if let Some(db) = grads.db {
                        self.accumulate(parents[2], db);
                    }
                }
                OpKind::Relu => {
                    let dx = ops::relu_vjp(&self.nodes[parents[0].0].value, &dy);
                    self.accumulate(parents[0], dx);
                }
                OpKind::Sigmoid => {
                    let dx = ops::sigmoid_vjp(&self.nodes[i].value, &dy);
                    self.accumulate(parents[0], dx);
                }
                OpKind::Softmax { axis } => {
                    let dx = ops::softmax_vjp(&self.nodes[i].value, &dy, axis);
                    self.accumulate(parents[0], dx);
                }
                OpKind::Mul => {
                    let (da, db) = ops::mul_vjp(
                        &self.nodes[parents[0].0].value,
                        &self.nodes[parents[1].0].value,
                        &dy,
                    );
                    if self.nodes[parents[0].0].needs_grad {
                        self.accumulate(parents[0], da);
                    }
                    if self.nodes[parents[1].0].needs_grad {
                        self.accumulate(parents[1], db);
                    }
                }
                OpKind::Add => {
                    if self.nodes[parents[0].0].needs_grad {
                        self.accumulate(parents[0], dy.clone());
                    }
                    if self.nodes[parents[1].0].needs_grad {
                        self.accumulate(parents[1], dy);
                    }
                }
                OpKind::Scale(c) => {
                    self.accumulate(parents[0], dy.map(|v| v * c));
                }
                OpKind::ResizeNearest => {
                    let dims = self.nodes[parents[0].0].value.dims().to_vec();
                    let dx = ops::resize_nearest_vjp(&dims, &dy);
                    self.accumulate(parents[0], dx);
                }
                OpKind::ConcatChannels => {
                    let ca = self.nodes[parents[0].0].value.dims()[0];
                    let (da, db) = ops::concat_channels_vjp(ca, &dy);
                    if self.nodes[parents[0].0].needs_grad {
                        self.accumulate(parents[0], da);
                    }
                    if self.nodes[parents[1].0].needs_grad {
                        self.accumulate(parents[1], db);
                    }
                }
                OpKind::Sum => {
                    let g = dy.item();
                    let dims = self.nodes[parents[0].0].value.dims();
                    self.accumulate(parents[0], Tensor::full(dims, g));
                }
                OpKind::Mean => {
                    let dims = self.nodes[parents[0].0].value.dims().to_vec();
                    let n: usize = dims.iter().product();
                    let g = dy.item() / n as f64;
                    self.accumulate(parents[0], Tensor::full(&dims, g));
                }
                OpKind::SoftCrossEntropy { axis } => {
                    // q slot gets nothing: the target is a constant.
                    if self.nodes[parents[1].0].needs_grad {
                        let dl = ops::soft_cross_entropy_vjp_l(
                            &self.nodes[parents[0].0].value,
                            &self.nodes[parents[1].0].value,
                            axis,
                            dy.item(),
                        );
                        self.accumulate(parents[1], dl);
                    }
                }
            }
        }
        Ok(())
    }
}
