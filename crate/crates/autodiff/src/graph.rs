//! Append-only computation graph and the reverse-mode sweep.
//!
//! Every backward rule is written in terms of [`Var`] operations. When the
//! sweep runs with `create_graph = true` those operations are recorded like
//! any forward computation, so the returned gradients are themselves graph
//! nodes and can be differentiated again. With `create_graph = false` the
//! same arithmetic runs with recording switched off.

use std::cell::{Cell, RefCell};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::map::LinearMap;
use crate::tensor::Tensor;

pub(crate) type NodeId = usize;

/// Geometry of a 2-D convolution: spatial input size, kernel size, stride and
/// zero padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub in_h: usize,
    pub in_w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.padding - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.padding - self.kw) / self.stride + 1
    }
}

#[derive(Clone)]
pub(crate) enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale(f64),
    Shift,
    Exp,
    Log,
    Sqrt,
    RecipOrZero,
    Relu,
    /// Sum over the listed axes, keeping them as size-1 dimensions.
    Sum,
    /// Broadcast size-1 dimensions up to the output shape.
    Expand,
    Reshape,
    Transpose,
    MatMul,
    Conv2d(ConvGeom),
    /// Adjoint of `Conv2d` with respect to its input: inputs `(grad_out, kernel)`.
    Conv2dInputGrad(ConvGeom),
    /// Adjoint of `Conv2d` with respect to its kernel: inputs `(input, grad_out)`.
    Conv2dWeightGrad(ConvGeom),
    Map {
        map: Arc<LinearMap>,
        transposed: bool,
    },
    /// Stack of equally shaped inputs along a new leading axis.
    Stack,
    /// The `i`-th slice along the leading axis; `len` is that axis' size.
    Select { index: usize, len: usize },
}

#[derive(Clone)]
pub(crate) struct Input {
    pub value: Tensor,
    pub node: Option<NodeId>,
}

struct Node {
    op: Op,
    inputs: Vec<Input>,
    value: Tensor,
}

/// Owner of the recorded operations for one differentiation scope.
///
/// Nodes are only ever appended, so a parent always has a smaller id than its
/// children. Drop the graph to release everything recorded in it.
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    recording: Cell<bool>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            recording: Cell::new(true),
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf that requires gradient.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            value: value.clone(),
        });
        Var {
            graph: self,
            value,
            node: Some(id),
        }
    }

    /// A value that never receives gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        Var {
            graph: self,
            value,
            node: None,
        }
    }

    pub(crate) fn record<'g>(&'g self, op: Op, inputs: &[&Var<'g>], value: Tensor) -> Var<'g> {
        let tracked = self.recording.get() && inputs.iter().any(|v| v.node.is_some());
        if !tracked {
            return self.constant(value);
        }
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            op,
            inputs: inputs
                .iter()
                .map(|v| Input {
                    value: v.value.clone(),
                    node: v.node,
                })
                .collect(),
            value: value.clone(),
        });
        Var {
            graph: self,
            value,
            node: Some(id),
        }
    }
}

struct RecordingGuard<'a> {
    graph: &'a Graph,
    previous: bool,
}

impl<'a> RecordingGuard<'a> {
    fn set(graph: &'a Graph, recording: bool) -> Self {
        let previous = graph.recording.replace(recording);
        Self { graph, previous }
    }
}

impl Drop for RecordingGuard<'_> {
    fn drop(&mut self) {
        self.graph.recording.set(self.previous);
    }
}

/// A tensor value bound to a [`Graph`], optionally backed by a node.
///
/// A `Var` without a node is a constant: operations on it produce values but
/// no gradient flows into it.
#[derive(Clone)]
pub struct Var<'g> {
    pub(crate) graph: &'g Graph,
    pub(crate) value: Tensor,
    pub(crate) node: Option<NodeId>,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("node", &self.node)
            .field("value", &self.value)
            .finish()
    }
}

impl<'g> Var<'g> {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn into_value(self) -> Tensor {
        self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    pub fn item(&self) -> Result<f64> {
        self.value.item()
    }

    /// Same value, cut off from the graph.
    pub fn detach(&self) -> Var<'g> {
        self.graph.constant(self.value.clone())
    }

    pub(crate) fn constant_like(&self, value: Tensor) -> Var<'g> {
        self.graph.constant(value)
    }

    /// Gradients of this single-element tensor with respect to `wrt`.
    ///
    /// With `create_graph` the results are recorded and may be differentiated
    /// again; otherwise they are constants. Inputs that the output does not
    /// depend on receive zeros.
    pub fn backward(&self, wrt: &[&Var<'g>], create_graph: bool) -> Result<Vec<Var<'g>>> {
        if self.value.len() != 1 {
            return Err(Error::NotScalar(self.value.shape().to_vec()));
        }
        for w in wrt {
            if !std::ptr::eq(w.graph, self.graph) {
                return Err(Error::invalid(
                    "backward",
                    "differentiation target belongs to another graph",
                ));
            }
        }
        let graph = self.graph;
        let zeros = |w: &Var<'g>| graph.constant(Tensor::zeros(w.shape().to_vec()));
        let Some(root) = self.node else {
            return Ok(wrt.iter().map(|w| zeros(w)).collect());
        };

        let _guard = RecordingGuard::set(graph, create_graph && graph.recording.get());

        let count = root + 1;
        let mut is_target = vec![false; count];
        for w in wrt {
            if let Some(id) = w.node {
                if id < count {
                    is_target[id] = true;
                }
            }
        }
        // A node needs a gradient when some target lies at or above it.
        let mut needed = is_target.clone();
        {
            let nodes = graph.nodes.borrow();
            let first = is_target.iter().position(|&t| t).unwrap_or(count);
            for id in first..count {
                if needed[id] {
                    continue;
                }
                needed[id] = nodes[id]
                    .inputs
                    .iter()
                    .any(|inp| inp.node.is_some_and(|p| needed[p]));
            }
        }

        let mut grads: Vec<Option<Var<'g>>> = vec![None; count];
        if needed[root] {
            grads[root] = Some(graph.constant(Tensor::ones(self.shape().to_vec())));
        }

        for id in (0..count).rev() {
            if !needed[id] {
                continue;
            }
            let Some(gy) = (if is_target[id] {
                grads[id].clone()
            } else {
                grads[id].take()
            }) else {
                continue;
            };
            let (op, inputs, value) = {
                let nodes = graph.nodes.borrow();
                let n = &nodes[id];
                (n.op.clone(), n.inputs.clone(), n.value.clone())
            };
            if matches!(op, Op::Leaf) {
                continue;
            }
            let want: Vec<bool> = inputs
                .iter()
                .map(|inp| inp.node.is_some_and(|p| needed[p]))
                .collect();
            if !want.iter().any(|&w| w) {
                continue;
            }
            let in_vars: Vec<Var<'g>> = inputs
                .into_iter()
                .map(|inp| Var {
                    graph,
                    value: inp.value,
                    node: inp.node,
                })
                .collect();
            let out = Var {
                graph,
                value,
                node: Some(id),
            };
            let contributions = crate::backprop::vjp(&op, &in_vars, &out, &gy, &want)?;
            for (inp, contribution) in in_vars.iter().zip(contributions) {
                let (Some(pid), Some(c)) = (inp.node, contribution) else {
                    continue;
                };
                grads[pid] = Some(match grads[pid].take() {
                    Some(acc) => acc.add(&c)?,
                    None => c,
                });
            }
        }

        Ok(wrt
            .iter()
            .map(|w| match w.node.and_then(|id| grads.get(id).cloned().flatten()) {
                Some(g) if create_graph => g,
                Some(g) => g.detach(),
                None => zeros(w),
            })
            .collect())
    }
}
