//! The computation graph: an append-only tape of primitive operations.
//!
//! Nodes are appended in execution order, so the tape is already a topological
//! order; `backward` walks it once in reverse. One graph lives for one
//! training step and is dropped afterwards.

use super::conv::{conv_backward, conv_forward, conv_transpose_backward, conv_transpose_forward};
use super::ops;
use super::{Scalar, Tensor};
use crate::error::TensorError;
use std::collections::HashMap;

pub type NodeId = usize;

/// Recorded operation kind with its input node ids and attributes.
#[derive(Debug, Clone)]
pub enum Op<F: Scalar> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Matmul(NodeId, NodeId),
    Reshape(NodeId),
    Broadcast(NodeId),
    Concat(Vec<NodeId>, usize),
    Slice(NodeId, Vec<(usize, usize)>),
    Pad(NodeId, Vec<(usize, usize)>),
    Sum(NodeId, Vec<usize>),
    Mean(NodeId, Vec<usize>),
    Log(NodeId),
    Exp(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    LeakyRelu(NodeId, f64),
    Softmax(NodeId, usize),
    Clamp(NodeId, f64, f64),
    Dropout(NodeId, Vec<F>),
    Permute(NodeId, Vec<usize>),
    Conv { x: NodeId, w: NodeId, b: Option<NodeId>, stride: usize, pad: usize },
    ConvTranspose { x: NodeId, w: NodeId, b: Option<NodeId>, stride: usize, pad: usize },
    CropResize { src: NodeId, lead: Vec<usize>, bbox: [f64; 4] },
}

struct Node<F: Scalar> {
    op: Op<F>,
    value: Tensor<F>,
    needs_grad: bool,
}

/// Gradients keyed by the node id of each tracked leaf.
#[derive(Debug)]
pub struct GradMap<F: Scalar> {
    grads: HashMap<NodeId, Tensor<F>>,
}

impl<F: Scalar> Default for GradMap<F> {
    fn default() -> Self {
        GradMap { grads: HashMap::new() }
    }
}

impl<F: Scalar> GradMap<F> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<F>> {
        self.grads.get(&id)
    }
    pub fn take(&mut self, id: NodeId) -> Option<Tensor<F>> {
        self.grads.remove(&id)
    }
    pub fn len(&self) -> usize {
        self.grads.len()
    }
    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// Reverse-mode tape over [`Tensor`] values.
pub struct Graph<F: Scalar> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers an input tensor. `requires_grad` marks it as a gradient
    /// target for [`Graph::backward`].
    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> NodeId {
        self.push_unchecked(Op::Leaf, value, requires_grad)
    }

    /// Registers a non-tracked constant.
    pub fn constant(&mut self, value: Tensor<F>) -> NodeId {
        self.leaf(value, false)
    }

    pub fn scalar_const(&mut self, v: f64) -> NodeId {
        self.constant(Tensor::scalar(F::from_f64(v)))
    }

    /// Copies a node's current value into a fresh constant leaf, cutting the
    /// gradient path.
    pub fn detach(&mut self, id: NodeId) -> NodeId {
        let v = self.nodes[id].value.clone();
        self.constant(v)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<F> {
        &self.nodes[id].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id].value.shape()
    }

    pub fn needs_grad(&self, id: NodeId) -> bool {
        self.nodes[id].needs_grad
    }

    fn push_unchecked(&mut self, op: Op<F>, value: Tensor<F>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { op, value, needs_grad });
        self.nodes.len() - 1
    }

    /// Appends a computed node, enforcing the finite-values invariant.
    fn push(&mut self, op: Op<F>, value: Tensor<F>, name: &'static str) -> Result<NodeId, TensorError> {
        if !value.is_all_finite() {
            return Err(TensorError::NonFinite {
                op: name,
                context: format!("output shape {:?}", value.shape()),
            });
        }
        let needs = self.op_inputs(&op).iter().any(|&i| self.nodes[i].needs_grad);
        Ok(self.push_unchecked(op, value, needs))
    }

    fn op_inputs(&self, op: &Op<F>) -> Vec<NodeId> {
        match op {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Matmul(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Reshape(a)
            | Op::Broadcast(a)
            | Op::Slice(a, _)
            | Op::Pad(a, _)
            | Op::Sum(a, _)
            | Op::Mean(a, _)
            | Op::Log(a)
            | Op::Exp(a)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::LeakyRelu(a, _)
            | Op::Softmax(a, _)
            | Op::Clamp(a, _, _)
            | Op::Dropout(a, _)
            | Op::Permute(a, _) => vec![*a],
            Op::Concat(ids, _) => ids.clone(),
            Op::Conv { x, w, b, .. } | Op::ConvTranspose { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                if let Some(b) = b {
                    v.push(*b);
                }
                v
            }
            Op::CropResize { src, .. } => vec![*src],
        }
    }

    // ─── forward primitives ───────────────────────────────────────────────

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let v = ops::binary_broadcast(self.value(a), self.value(b), "add", |x, y| x + y)?;
        self.push(Op::Add(a, b), v, "add")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let v = ops::binary_broadcast(self.value(a), self.value(b), "sub", |x, y| x - y)?;
        self.push(Op::Sub(a, b), v, "sub")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let v = ops::binary_broadcast(self.value(a), self.value(b), "mul", |x, y| x * y)?;
        self.push(Op::Mul(a, b), v, "mul")
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId, TensorError> {
        let k = F::from_f64(c);
        let v = self.value(a).map(|x| x * k);
        self.push(Op::Scale(a, c), v, "scale")
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(TensorError::Dimension {
                op: "matmul",
                msg: format!("{:?} x {:?}", ta.shape(), tb.shape()),
            });
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![F::zero(); m * n];
        super::gemm::gemm_nn(ta.data(), tb.data(), &mut out, m, k, n);
        let v = Tensor::from_vec(&[m, n], out);
        self.push(Op::Matmul(a, b), v, "matmul")
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId, TensorError> {
        let v = self.value(a).reshaped(shape)?;
        self.push(Op::Reshape(a), v, "reshape")
    }

    /// Broadcast-expands `a` to `shape`.
    pub fn broadcast_to(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId, TensorError> {
        let v = ops::broadcast_to(self.value(a), shape)?;
        self.push(Op::Broadcast(a), v, "broadcast")
    }

    pub fn concat(&mut self, ids: &[NodeId], axis: usize) -> Result<NodeId, TensorError> {
        let parts: Vec<&Tensor<F>> = ids.iter().map(|&i| self.value(i)).collect();
        let v = ops::concat(&parts, axis)?;
        self.push(Op::Concat(ids.to_vec(), axis), v, "concat")
    }

    pub fn slice(&mut self, a: NodeId, ranges: &[(usize, usize)]) -> Result<NodeId, TensorError> {
        let v = ops::slice_region(self.value(a), ranges)?;
        self.push(Op::Slice(a, ranges.to_vec()), v, "slice")
    }

    pub fn pad(&mut self, a: NodeId, pads: &[(usize, usize)]) -> Result<NodeId, TensorError> {
        let v = ops::pad(self.value(a), pads)?;
        self.push(Op::Pad(a, pads.to_vec()), v, "pad")
    }

    pub fn sum_axes(&mut self, a: NodeId, axes: &[usize]) -> Result<NodeId, TensorError> {
        let v = ops::sum_axes(self.value(a), axes);
        self.push(Op::Sum(a, axes.to_vec()), v, "sum")
    }

    pub fn mean_axes(&mut self, a: NodeId, axes: &[usize]) -> Result<NodeId, TensorError> {
        let count: usize = axes.iter().map(|&ax| self.shape(a)[ax]).product();
        let v = ops::sum_axes(self.value(a), axes).map(|x| x / F::from_f64(count as f64));
        self.push(Op::Mean(a, axes.to_vec()), v, "mean")
    }

    /// Mean over every axis, yielding a scalar node.
    pub fn mean_all(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let axes: Vec<usize> = (0..self.value(a).rank()).collect();
        self.mean_axes(a, &axes)
    }

    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let axes: Vec<usize> = (0..self.value(a).rank()).collect();
        self.sum_axes(a, &axes)
    }

    /// Natural log. Nonpositive inputs are a domain error; clamp first.
    pub fn log(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        if self.value(a).data().iter().any(|x| *x <= F::zero()) {
            return Err(TensorError::Domain {
                op: "log",
                msg: "nonpositive input; callers must clamp first".into(),
            });
        }
        let v = self.value(a).map(|x| x.ln());
        self.push(Op::Log(a), v, "log")
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let v = self.value(a).map(|x| x.exp());
        self.push(Op::Exp(a), v, "exp")
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let one = F::one();
        let v = self.value(a).map(|x| one / (one + (-x).exp()));
        self.push(Op::Sigmoid(a), v, "sigmoid")
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let v = self.value(a).map(|x| x.tanh());
        self.push(Op::Tanh(a), v, "tanh")
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> Result<NodeId, TensorError> {
        let s = F::from_f64(slope);
        let v = self.value(a).map(|x| if x > F::zero() { x } else { x * s });
        self.push(Op::LeakyRelu(a, slope), v, "leaky_relu")
    }

    pub fn softmax(&mut self, a: NodeId, axis: usize) -> Result<NodeId, TensorError> {
        if axis >= self.value(a).rank() {
            return Err(TensorError::Dimension {
                op: "softmax",
                msg: format!("axis {axis} out of rank {}", self.value(a).rank()),
            });
        }
        let v = ops::softmax(self.value(a), axis);
        self.push(Op::Softmax(a, axis), v, "softmax")
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> Result<NodeId, TensorError> {
        let (l, h) = (F::from_f64(lo), F::from_f64(hi));
        let v = self.value(a).map(|x| x.max(l).min(h));
        self.push(Op::Clamp(a, lo, hi), v, "clamp")
    }

    /// Applies a pre-scaled dropout mask (entries are 0 or 1/(1-p)).
    pub fn dropout_mask(&mut self, a: NodeId, mask: Vec<F>) -> Result<NodeId, TensorError> {
        if mask.len() != self.value(a).numel() {
            return Err(TensorError::Dimension {
                op: "dropout",
                msg: "mask length mismatch".into(),
            });
        }
        let data: Vec<F> = self
            .value(a)
            .data()
            .iter()
            .zip(mask.iter())
            .map(|(&x, &m)| x * m)
            .collect();
        let v = Tensor::from_vec(self.value(a).shape(), data);
        self.push(Op::Dropout(a, mask), v, "dropout")
    }

    /// Axis permutation: output axis `i` takes input axis `perm[i]`.
    pub fn permute(&mut self, a: NodeId, perm: &[usize]) -> Result<NodeId, TensorError> {
        let v = ops::permute(self.value(a), perm)?;
        self.push(Op::Permute(a, perm.to_vec()), v, "permute")
    }

    /// Direct convolution; rank of `x`/`w` selects 2-D or 3-D.
    pub fn conv(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId, TensorError> {
        let bias = b.map(|id| self.value(id));
        let v = conv_forward(self.value(x), self.value(w), bias, stride, pad)?;
        self.push(Op::Conv { x, w, b, stride, pad }, v, "conv")
    }

    /// Transposed convolution; `w` is `[Ci, Co, k...]`.
    pub fn conv_transpose(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId, TensorError> {
        let bias = b.map(|id| self.value(id));
        let v = conv_transpose_forward(self.value(x), self.value(w), bias, stride, pad)?;
        self.push(Op::ConvTranspose { x, w, b, stride, pad }, v, "conv_transpose")
    }

    /// Bilinear resample of a pixel box into `[C, oh, ow]`.
    pub fn crop_resize(
        &mut self,
        src: NodeId,
        lead: &[usize],
        bbox: [f64; 4],
        oh: usize,
        ow: usize,
    ) -> Result<NodeId, TensorError> {
        let v = ops::crop_resize(self.value(src), lead, bbox, oh, ow)?;
        self.push(
            Op::CropResize { src, lead: lead.to_vec(), bbox },
            v,
            "crop_resize",
        )
    }

    // ─── backward ─────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Returns gradients for every tracked
    /// leaf reachable from `loss`; each node is visited exactly once.
    pub fn backward(&self, loss: NodeId) -> Result<GradMap<F>, TensorError> {
        if self.nodes.is_empty() {
            return Err(TensorError::Contract {
                op: "backward",
                msg: "empty graph".into(),
            });
        }
        if self.value(loss).numel() != 1 {
            return Err(TensorError::Contract {
                op: "backward",
                msg: format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            });
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..=loss).map(|_| None).collect();
        grads[loss] = Some(Tensor::ones(self.shape(loss)));

        for id in (0..=loss).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            if !g.is_all_finite() {
                return Err(TensorError::NonFinite {
                    op: "backward",
                    context: format!("gradient at node {id}"),
                });
            }
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g); // keep for collection
                }
                Op::Add(a, b) => {
                    self.acc(&mut grads, *a, ops::reduce_to_shape(&g, self.shape(*a)));
                    self.acc(&mut grads, *b, ops::reduce_to_shape(&g, self.shape(*b)));
                }
                Op::Sub(a, b) => {
                    self.acc(&mut grads, *a, ops::reduce_to_shape(&g, self.shape(*a)));
                    let neg = ops::reduce_to_shape(&g, self.shape(*b)).map(|x| -x);
                    self.acc(&mut grads, *b, neg);
                }
                Op::Mul(a, b) => {
                    if self.nodes[*a].needs_grad {
                        let ga = ops::binary_broadcast(&g, self.value(*b), "mul_bwd", |x, y| x * y)?;
                        self.acc(&mut grads, *a, ops::reduce_to_shape(&ga, self.shape(*a)));
                    }
                    if self.nodes[*b].needs_grad {
                        let gb = ops::binary_broadcast(&g, self.value(*a), "mul_bwd", |x, y| x * y)?;
                        self.acc(&mut grads, *b, ops::reduce_to_shape(&gb, self.shape(*b)));
                    }
                }
                Op::Scale(a, c) => {
                    let k = F::from_f64(*c);
                    self.acc(&mut grads, *a, g.map(|x| x * k));
                }
                Op::Matmul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                    if self.nodes[*a].needs_grad {
                        let mut da = vec![F::zero(); m * k];
                        super::gemm::gemm_nt(g.data(), tb.data(), &mut da, m, n, k);
                        self.acc(&mut grads, *a, Tensor::from_vec(&[m, k], da));
                    }
                    if self.nodes[*b].needs_grad {
                        let mut db = vec![F::zero(); k * n];
                        super::gemm::gemm_tn(ta.data(), g.data(), &mut db, k, m, n);
                        self.acc(&mut grads, *b, Tensor::from_vec(&[k, n], db));
                    }
                }
                Op::Reshape(a) => {
                    self.acc(&mut grads, *a, g.reshaped(self.shape(*a))?);
                }
                Op::Broadcast(a) => {
                    self.acc(&mut grads, *a, ops::reduce_to_shape(&g, self.shape(*a)));
                }
                Op::Concat(ids, axis) => {
                    let mut start = 0usize;
                    for &part in ids {
                        let len = self.shape(part)[*axis];
                        if self.nodes[part].needs_grad {
                            let ranges: Vec<(usize, usize)> = g
                                .shape()
                                .iter()
                                .enumerate()
                                .map(|(d, &sz)| if d == *axis { (start, len) } else { (0, sz) })
                                .collect();
                            let piece = ops::slice_region(&g, &ranges)?;
                            self.acc(&mut grads, part, piece);
                        }
                        start += len;
                    }
                }
                Op::Slice(a, ranges) => {
                    let mut dx = Tensor::zeros(self.shape(*a));
                    ops::scatter_add_region(&mut dx, &g, ranges);
                    self.acc(&mut grads, *a, dx);
                }
                Op::Pad(a, pads) => {
                    let ranges: Vec<(usize, usize)> = self
                        .shape(*a)
                        .iter()
                        .zip(pads.iter())
                        .map(|(&d, &(lo, _))| (lo, d))
                        .collect();
                    self.acc(&mut grads, *a, ops::slice_region(&g, &ranges)?);
                }
                Op::Sum(a, axes) => {
                    self.acc(&mut grads, *a, ops::expand_from_reduced(&g, self.shape(*a), axes));
                }
                Op::Mean(a, axes) => {
                    let count: usize = axes.iter().map(|&ax| self.shape(*a)[ax]).product();
                    let k = F::one() / F::from_f64(count as f64);
                    let e = ops::expand_from_reduced(&g, self.shape(*a), axes).map(|x| x * k);
                    self.acc(&mut grads, *a, e);
                }
                Op::Log(a) => {
                    let dx: Vec<F> = g
                        .data()
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(&gv, &x)| gv / x)
                        .collect();
                    self.acc(&mut grads, *a, Tensor::from_vec(g.shape(), dx));
                }
                Op::Exp(a) => {
                    let dx: Vec<F> = g
                        .data()
                        .iter()
                        .zip(node.value.data())
                        .map(|(&gv, &y)| gv * y)
                        .collect();
                    self.acc(&mut grads, *a, Tensor::from_vec(g.shape(), dx));
                }
                Op::Sigmoid(a) => {
                    let one = F::one();
                    let dx: Vec<F> = g
                        .data()
                        .iter()
                        .zip(node.value.data())
                        .map(|(&gv, &y)| gv * y * (one - y))
                        .collect();
                    self.acc(&mut grads, *a, Tensor::from_vec(g.shape(), dx));
                }
                Op::Tanh(a) => {
                    let one = F::one();
                    let dx: Vec<F> = g
                        .data()
                        .iter()
                        .zip(node.value.data())
                        .map(|(&gv, &y)| gv * (one - y * y))
                        .collect();
                    self.acc(&mut grads, *a, Tensor::from_vec(g.shape(), dx));
                }
                Op::LeakyRelu(a, slope) => {
                    let s = F::from_f64(*slope);
                    let dx: Vec<F> = g
                        .data()
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(&gv, &x)| if x > F::zero() { gv } else { gv * s })
                        .collect();
                    self.acc(&mut grads, *a, Tensor::from_vec(g.shape(), dx));
                }
                Op::Softmax(a, axis) => {
                    self.acc(&mut grads, *a, ops::softmax_backward(&node.value, &g, *axis));
                }
                Op::Clamp(a, lo, hi) => {
                    let (l, h) = (F::from_f64(*lo), F::from_f64(*hi));
                    let dx: Vec<F> = g
                        .data()
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(&gv, &x)| if x > l && x < h { gv } else { F::zero() })
                        .collect();
                    self.acc(&mut grads, *a, Tensor::from_vec(g.shape(), dx));
                }
                Op::Dropout(a, mask) => {
                    let dx: Vec<F> = g
                        .data()
                        .iter()
                        .zip(mask.iter())
                        .map(|(&gv, &m)| gv * m)
                        .collect();
                    self.acc(&mut grads, *a, Tensor::from_vec(g.shape(), dx));
                }
                Op::Conv { x, w, b, stride, pad } => {
                    let need_dx = self.nodes[*x].needs_grad;
                    let need_dw = self.nodes[*w].needs_grad;
                    let need_db = b.map(|id| self.nodes[id].needs_grad).unwrap_or(false);
                    let (dx, dw, db) = conv_backward(
                        self.value(*x),
                        self.value(*w),
                        &g,
                        *stride,
                        *pad,
                        need_dx,
                        need_dw,
                        need_db,
                    )?;
                    if let Some(dx) = dx {
                        self.acc(&mut grads, *x, dx);
                    }
                    if let Some(dw) = dw {
                        self.acc(&mut grads, *w, dw);
                    }
                    if let (Some(db), Some(bid)) = (db, b) {
                        self.acc(&mut grads, *bid, db);
                    }
                }
                Op::ConvTranspose { x, w, b, stride, pad } => {
                    let need_dx = self.nodes[*x].needs_grad;
                    let need_dw = self.nodes[*w].needs_grad;
                    let need_db = b.map(|id| self.nodes[id].needs_grad).unwrap_or(false);
                    let (dx, dw, db) = conv_transpose_backward(
                        self.value(*x),
                        self.value(*w),
                        &g,
                        *stride,
                        *pad,
                        need_dx,
                        need_dw,
                        need_db,
                    )?;
                    if let Some(dx) = dx {
                        self.acc(&mut grads, *x, dx);
                    }
                    if let Some(dw) = dw {
                        self.acc(&mut grads, *w, dw);
                    }
                    if let (Some(db), Some(bid)) = (db, b) {
                        self.acc(&mut grads, *bid, db);
                    }
                }
                Op::Permute(a, perm) => {
                    let inv = ops::inverse_perm(perm);
                    self.acc(&mut grads, *a, ops::permute(&g, &inv)?);
                }
                Op::CropResize { src, lead, bbox } => {
                    let mut dx = Tensor::zeros(self.shape(*src));
                    let oh = node.value.shape()[1];
                    let ow = node.value.shape()[2];
                    ops::crop_resize_backward(&mut dx, &g, lead, *bbox, oh, ow);
                    self.acc(&mut grads, *src, dx);
                }
            }
        }

        let mut out = GradMap::default();
        for (id, slot) in grads.into_iter().enumerate() {
            if let Some(g) = slot {
                if matches!(self.nodes[id].op, Op::Leaf) && self.nodes[id].needs_grad {
                    out.grads.insert(id, g);
                }
            }
        }
        Ok(out)
    }

    fn acc(&self, grads: &mut [Option<Tensor<F>>], id: NodeId, g: Tensor<F>) {
        if !self.nodes[id].needs_grad {
            return;
        }
        match &mut grads[id] {
            Some(t) => {
                debug_assert_eq!(t.shape(), g.shape());
                for (a, b) in t.data_mut().iter_mut().zip(g.data()) {
                    *a += *b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mul_elementwise() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::from_vec(&[3], vec![1., 2., 3.]));
        let b = g.constant(Tensor::from_vec(&[3], vec![4., 5., 6.]));
        let c = g.mul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[4., 10., 18.]);
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::scalar(0.0));
        let y = g.sigmoid(x).unwrap();
        assert_eq!(g.value(y).item(), 0.5);
    }

    #[test]
    fn square_sum_gradient() {
        // loss = sum(x*x), x=[1,2] -> grad [2,4]
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_vec(&[2], vec![1., 2.]), true);
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum_all(sq).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2., 4.]);
    }

    #[test]
    fn sigmoid_chain_gradient() {
        // loss = sigmoid(w) * c, w=0, c=2 -> dw = 0.25 * 2 = 0.5
        let mut g = Graph::<f64>::new();
        let w = g.leaf(Tensor::scalar(0.0), true);
        let c = g.constant(Tensor::scalar(2.0));
        let s = g.sigmoid(w).unwrap();
        let loss = g.mul(s, c).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!((grads.get(w).unwrap().item() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn non_scalar_loss_is_contract_error() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_vec(&[2], vec![1., 2.]), true);
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn log_of_nonpositive_is_domain_error() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_vec(&[2], vec![1.0, 0.0]));
        assert!(matches!(
            g.log(x),
            Err(crate::error::TensorError::Domain { .. })
        ));
    }

    #[test]
    fn detach_stops_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::scalar(3.0), true);
        let y = g.mul(x, x).unwrap();
        let yd = g.detach(y);
        let loss = g.mul(yd, yd).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(x).is_none());
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let mut g = Graph::<f32>::new();
            let x = g.constant(Tensor::randn(&[4, 4], &mut crate::tensor::Rng64::new(1)));
            let y = g.tanh(x).unwrap();
            let z = g.mean_all(y).unwrap();
            g.value(z).item()
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }
}
