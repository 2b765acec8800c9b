//! Reverse-mode automatic differentiation over a dynamically recorded tape.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended in
//! evaluation order, so insertion order is a topological order and
//! [`Graph::backward`] simply walks the tape in reverse.

pub mod kernels;
mod ops;

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

pub use ops::{concat, Padding, UnaryKind};
pub(crate) use ops::Op;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub(crate) struct Node {
    pub(crate) value: Rc<Tensor>,
    pub(crate) op: Op,
    /// Whether any gradient can flow into this node.
    pub(crate) tracked: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<BTreeMap<ParamId, usize>>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var(#{}, {:?})", self.id, self.value().shape())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Untracked input; never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_raw(value, Op::Leaf, false)
    }

    /// Tracked input whose gradient is reported by [`Gradients::wrt`].
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push_raw(value, Op::Leaf, true)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    /// Leaf bound to a stored parameter. Repeated calls for the same id return
    /// the same node, so shared weights accumulate a single gradient.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        if let Some(&node) = self.params.borrow().get(&id) {
            return Var {
                graph: self,
                id: node,
            };
        }
        let v = self.leaf(store.value(id).clone());
        self.params.borrow_mut().insert(id, v.id);
        v
    }

    pub(crate) fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let tracked = {
            let nodes = self.nodes.borrow();
            op.inputs().iter().any(|&i| nodes[i].tracked)
        };
        self.push_raw(value, op, tracked)
    }

    fn push_raw(&self, value: Tensor, op: Op, tracked: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            tracked,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// Runs reverse accumulation from a one-element `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        assert!(std::ptr::eq(loss.graph, self), "loss from another graph");
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::InvalidShape {
                op: "backward",
                shape: root.value.shape().to_vec(),
                reason: "loss must have exactly one element".into(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![1.0]);
        let mut leaves = BTreeMap::new();
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.tracked {
                continue;
            }
            if let Op::Leaf = node.op {
                leaves.insert(id, g);
                continue;
            }
            let mut sink = GradSink {
                grads: &mut grads,
                nodes: &nodes,
            };
            node.op.backward(&node.value, &g, &nodes, &mut sink);
        }
        Ok(Gradients { leaves })
    }

    /// Adds gradients of all parameter leaves into `store` (`+=` semantics).
    pub fn accumulate_into(&self, grads: &Gradients, store: &mut ParamStore) {
        for (&pid, &node) in self.params.borrow().iter() {
            if let Some(g) = grads.leaves.get(&node) {
                store.accumulate_grad(pid, g);
            }
        }
    }

    /// `backward` followed by [`Graph::accumulate_into`].
    pub fn backward_into(&self, loss: Var<'_>, store: &mut ParamStore) -> Result<()> {
        let grads = self.backward(loss)?;
        self.accumulate_into(&grads, store);
        Ok(())
    }
}

pub(crate) struct GradSink<'a> {
    grads: &'a mut [Option<Vec<f64>>],
    nodes: &'a [Node],
}

impl GradSink<'_> {
    /// Gradient buffer of node `id`, or `None` when it is not tracked.
    pub(crate) fn slot(&mut self, id: usize) -> Option<&mut [f64]> {
        if !self.nodes[id].tracked {
            return None;
        }
        let n = self.nodes[id].value.len();
        Some(self.grads[id].get_or_insert_with(|| vec![0.0; n]))
    }
}

/// Gradients of the tracked leaves reached by one backward pass.
pub struct Gradients {
    leaves: BTreeMap<usize, Vec<f64>>,
}

impl Gradients {
    /// Gradient with respect to a leaf. Leaves the loss does not depend on
    /// report `None`.
    pub fn wrt(&self, var: Var<'_>) -> Option<Tensor> {
        self.leaves
            .get(&var.id)
            .map(|g| Tensor::new(var.value().shape(), g.clone()).expect("gradient shape"))
    }
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.graph.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].tracked
    }

    fn same_graph(&self, other: &Var<'g>) {
        assert!(
            std::ptr::eq(self.graph, other.graph),
            "operands belong to different graphs"
        );
    }
}
