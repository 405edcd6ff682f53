use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use super::kernels;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Position of a recorded node on its tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Recorded operation with its parents and whatever the backward rule needs.
#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    AddScalar(NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Sigmoid(NodeId),
    Sqrt(NodeId),
    Softmax(NodeId, f64),
    LogSoftmax(NodeId, f64),
    StopGradient(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    SumAxis(NodeId, usize),
    ExpandLast(NodeId),
    AddBias(NodeId, NodeId),
    Reshape(NodeId),
    Gather(NodeId, Vec<usize>),
    Bce(NodeId, Vec<f64>),
}

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

/// Define-by-run record of tensor operations.
///
/// A tape is built fresh for every forward pass and confined to one thread.
/// Nodes are appended in execution order, so the vector is already a
/// topological order of the graph.
#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: NodeId,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let nodes = self.tape.nodes.borrow();
        let node = &nodes[self.id.0];
        f.debug_struct("Var")
            .field("id", &self.id.0)
            .field("shape", &node.value.shape())
            .field("requires_grad", &node.requires_grad)
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records a trainable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.insert(value, Op::Leaf, true)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.insert(value, Op::Leaf, false)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn insert(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = NodeId(nodes.len());
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var { tape: self, id }
    }

    pub(crate) fn record(&self, name: &'static str, value: Tensor, op: Op) -> Result<Var<'_>> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = {
            let nodes = self.nodes.borrow();
            match &op {
                Op::Leaf | Op::StopGradient(_) => false,
                other => parents(other).iter().any(|p| nodes[p.0].requires_grad),
            }
        };
        Ok(self.insert(value, op, requires_grad))
    }

    pub(crate) fn with_value<R>(&self, id: NodeId, f: impl FnOnce(&Tensor) -> R) -> R {
        let nodes = self.nodes.borrow();
        f(&nodes[id.0].value)
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Returns a gradient for every trainable leaf on the tape. Leaves whose
    /// every path to the loss is cut by a stop-gradient (or that do not feed the
    /// loss at all) get an all-zero gradient and are listed as severed.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::Contract("loss was recorded on a different tape".into()));
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id.0];
        if root.value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id.0 + 1];
        let mut reached = vec![false; loss.id.0 + 1];
        if root.requires_grad {
            grads[loss.id.0] = Some(vec![1.0]);
            reached[loss.id.0] = true;
        }

        let mut leaves = BTreeMap::new();
        let mut severed = BTreeSet::new();
        for i in (0..=loss.id.0).rev() {
            let node = &nodes[i];
            if matches!(node.op, Op::Leaf) {
                if node.requires_grad {
                    let g = grads[i]
                        .take()
                        .unwrap_or_else(|| vec![0.0; node.value.numel()]);
                    if !reached[i] {
                        severed.insert(NodeId(i));
                    }
                    leaves.insert(NodeId(i), g);
                }
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if !node.requires_grad {
                continue;
            }
            backprop(&nodes, node, &g, |parent, contribution| {
                if !nodes[parent.0].requires_grad {
                    return;
                }
                reached[parent.0] = true;
                match &mut grads[parent.0] {
                    Some(acc) => {
                        for (a, c) in acc.iter_mut().zip(contribution) {
                            *a += c;
                        }
                    }
                    slot @ None => *slot = Some(contribution),
                }
            });
        }
        // Trainable leaves recorded after the loss cannot influence it.
        for (i, node) in nodes.iter().enumerate().skip(loss.id.0 + 1) {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                leaves.insert(NodeId(i), vec![0.0; node.value.numel()]);
                severed.insert(NodeId(i));
            }
        }
        Ok(Gradients { leaves, severed })
    }
}

/// Gradients of a scalar loss with respect to every trainable leaf.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    leaves: BTreeMap<NodeId, Vec<f64>>,
    severed: BTreeSet<NodeId>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&[f64]> {
        self.leaves.get(&var.id).map(Vec::as_slice)
    }

    pub fn get_id(&self, id: NodeId) -> Option<&[f64]> {
        self.leaves.get(&id).map(Vec::as_slice)
    }

    /// Gradient of `var` as a tensor shaped like the leaf.
    pub fn wrt(&self, var: Var<'_>) -> Result<Tensor> {
        let data = self
            .get(var)
            .ok_or_else(|| Error::Contract("variable is not a trainable leaf".into()))?
            .to_vec();
        Tensor::new(var.shape(), data)
    }

    /// True when no live path connects the leaf to the loss.
    pub fn is_severed(&self, var: Var<'_>) -> bool {
        self.severed.contains(&var.id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &[f64])> {
        self.leaves.iter().map(|(k, v)| (*k, v.as_slice()))
    }
}

pub(crate) fn parents(op: &Op) -> Vec<NodeId> {
    match op {
        Op::Leaf => vec![],
        Op::MatMul(a, b)
        | Op::Add(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::Div(a, b)
        | Op::AddBias(a, b) => vec![*a, *b],
        Op::AddScalar(a)
        | Op::Scale(a, _)
        | Op::Relu(a)
        | Op::Exp(a)
        | Op::Log(a)
        | Op::Sigmoid(a)
        | Op::Sqrt(a)
        | Op::Softmax(a, _)
        | Op::LogSoftmax(a, _)
        | Op::StopGradient(a)
        | Op::Sum(a)
        | Op::Mean(a)
        | Op::SumAxis(a, _)
        | Op::ExpandLast(a)
        | Op::Reshape(a)
        | Op::Gather(a, _)
        | Op::Bce(a, _) => vec![*a],
    }
}

/// Sums `g` down to the shape of a (possibly scalar-broadcast) operand.
fn reduce_to(g: Vec<f64>, len: usize) -> Vec<f64> {
    if len == 1 && g.len() != 1 {
        vec![g.iter().sum()]
    } else {
        g
    }
}

fn backprop(nodes: &[Node], node: &Node, g: &[f64], mut emit: impl FnMut(NodeId, Vec<f64>)) {
    let val = |id: &NodeId| &nodes[id.0].value;
    let out = node.value.data();
    match &node.op {
        Op::Leaf | Op::StopGradient(_) => {}
        Op::MatMul(a, b) => {
            let (av, bv) = (val(a), val(b));
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            emit(*a, kernels::matmul_nt(g, bv.data(), m, n, k));
            emit(*b, kernels::matmul_tn(av.data(), g, m, k, n));
        }
        Op::Add(a, b) => {
            emit(*a, g.to_vec());
            emit(*b, reduce_to(g.to_vec(), val(b).numel()));
        }
        Op::Sub(a, b) => {
            emit(*a, g.to_vec());
            emit(*b, reduce_to(g.iter().map(|v| -v).collect(), val(b).numel()));
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(a).data(), val(b).data());
            let bs = |i: usize| if bv.len() == 1 { bv[0] } else { bv[i] };
            emit(*a, g.iter().enumerate().map(|(i, gi)| gi * bs(i)).collect());
            let gb = g.iter().zip(av).map(|(gi, ai)| gi * ai).collect();
            emit(*b, reduce_to(gb, bv.len()));
        }
        Op::Div(a, b) => {
            let (av, bv) = (val(a).data(), val(b).data());
            let bs = |i: usize| if bv.len() == 1 { bv[0] } else { bv[i] };
            emit(*a, g.iter().enumerate().map(|(i, gi)| gi / bs(i)).collect());
            let gb = g
                .iter()
                .enumerate()
                .map(|(i, gi)| -gi * av[i] / (bs(i) * bs(i)))
                .collect();
            emit(*b, reduce_to(gb, bv.len()));
        }
        Op::AddScalar(a) | Op::Reshape(a) => emit(*a, g.to_vec()),
        Op::Scale(a, s) => emit(*a, g.iter().map(|gi| gi * s).collect()),
        Op::Relu(a) => {
            let x = val(a).data();
            emit(
                *a,
                g.iter()
                    .zip(x)
                    .map(|(gi, &xi)| if xi > 0.0 { *gi } else { 0.0 })
                    .collect(),
            );
        }
        Op::Exp(a) => emit(*a, g.iter().zip(out).map(|(gi, y)| gi * y).collect()),
        Op::Log(a) => {
            let x = val(a).data();
            emit(*a, g.iter().zip(x).map(|(gi, xi)| gi / xi).collect());
        }
        Op::Sigmoid(a) => emit(
            *a,
            g.iter().zip(out).map(|(gi, y)| gi * y * (1.0 - y)).collect(),
        ),
        Op::Sqrt(a) => emit(*a, g.iter().zip(out).map(|(gi, y)| gi / (2.0 * y)).collect()),
        Op::Softmax(a, t) => {
            let width = node.value.last_dim();
            let mut ga = vec![0.0; g.len()];
            for ((gr, yr), dst) in g.chunks(width).zip(out.chunks(width)).zip(ga.chunks_mut(width)) {
                let dot: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                for ((d, gi), yi) in dst.iter_mut().zip(gr).zip(yr) {
                    *d = yi * (gi - dot) / t;
                }
            }
            emit(*a, ga);
        }
        Op::LogSoftmax(a, t) => {
            let width = node.value.last_dim();
            let mut ga = vec![0.0; g.len()];
            for ((gr, yr), dst) in g.chunks(width).zip(out.chunks(width)).zip(ga.chunks_mut(width)) {
                let total: f64 = gr.iter().sum();
                for ((d, gi), yi) in dst.iter_mut().zip(gr).zip(yr) {
                    *d = (gi - yi.exp() * total) / t;
                }
            }
            emit(*a, ga);
        }
        Op::Sum(a) => emit(*a, vec![g[0]; val(a).numel()]),
        Op::Mean(a) => {
            let n = val(a).numel();
            emit(*a, vec![g[0] / n as f64; n]);
        }
        Op::SumAxis(a, axis) => {
            let shape = val(a).shape();
            let outer: usize = shape[..*axis].iter().product();
            let len = shape[*axis];
            let inner: usize = shape[axis + 1..].iter().product();
            let mut ga = vec![0.0; val(a).numel()];
            for o in 0..outer {
                for l in 0..len {
                    let base = (o * len + l) * inner;
                    ga[base..base + inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
                }
            }
            emit(*a, ga);
        }
        Op::ExpandLast(a) => {
            let k = node.value.last_dim();
            emit(*a, g.chunks(k).map(|c| c.iter().sum()).collect());
        }
        Op::AddBias(a, b) => {
            let k = val(b).numel();
            let mut gb = vec![0.0; k];
            for row in g.chunks(k) {
                for (acc, gi) in gb.iter_mut().zip(row) {
                    *acc += gi;
                }
            }
            emit(*a, g.to_vec());
            emit(*b, gb);
        }
        Op::Gather(a, idx) => {
            let width = val(a).last_dim();
            let mut ga = vec![0.0; val(a).numel()];
            for (row, (&j, gi)) in idx.iter().zip(g).enumerate() {
                ga[row * width + j] = *gi;
            }
            emit(*a, ga);
        }
        Op::Bce(a, target) => {
            let p = val(a).data();
            emit(
                *a,
                g.iter()
                    .zip(p)
                    .zip(target)
                    .map(|((gi, pi), qi)| gi * (pi - qi) / (pi * (1.0 - pi)))
                    .collect(),
            );
        }
    }
}
