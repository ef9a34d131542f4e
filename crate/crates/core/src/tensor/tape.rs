//! Wengert-list tape for reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so every node's inputs precede it
//! and a single reverse sweep visits each node once. The tape is `!Sync`; one
//! tape per worker.

use super::ops::Op;
use super::Tensor;
use crate::error::{Error, Result};
use std::cell::{Cell, RefCell};
use std::sync::Arc;

pub(crate) struct Node {
    pub value: Arc<Tensor>,
    pub op: Op,
    pub requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Tensor>>>,
    frozen: Cell<bool>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({}, {:?})", self.id, self.value().shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.leaf_arc(Arc::new(value))
    }

    pub fn leaf_arc(&self, value: Arc<Tensor>) -> Var<'_> {
        self.insert(value, Op::Leaf, true)
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.constant_arc(Arc::new(value))
    }

    pub fn constant_arc(&self, value: Arc<Tensor>) -> Var<'_> {
        self.insert(value, Op::Leaf, false)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen.get()
    }

    fn insert(&self, value: Arc<Tensor>, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, requires_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    /// Record the result of an op. Inputs that do not require gradients make
    /// the result a constant.
    pub(crate) fn record(&self, name: &'static str, value: Tensor, op: Op) -> Result<Var<'_>> {
        if !value.is_finite() {
            return Err(Error::numeric(name, format!("non-finite output of shape {:?}", value.shape())));
        }
        let requires_grad = {
            let nodes = self.nodes.borrow();
            op.inputs().iter().any(|&i| nodes[i].requires_grad)
        };
        let op = if requires_grad { op } else { Op::Leaf };
        Ok(self.insert(Arc::new(value), op, requires_grad))
    }

    pub(crate) fn value(&self, id: usize) -> Arc<Tensor> {
        Arc::clone(&self.nodes.borrow()[id].value)
    }

    pub(crate) fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse sweep from a scalar root. Afterwards every node that depends
    /// on a leaf holds `d root / d node`, and the tape is frozen until
    /// [`Tape::clear_grads`].
    pub fn backward(&self, root: Var<'_>) -> Result<()> {
        if !std::ptr::eq(root.tape, self) {
            return Err(Error::contract("root belongs to a different tape"));
        }
        if self.frozen.get() {
            return Err(Error::contract(
                "tape already ran backward; clear gradients before another pass",
            ));
        }
        let nodes = self.nodes.borrow();
        if nodes.is_empty() {
            return Err(Error::contract("backward on an empty tape"));
        }
        let root_val = &nodes[root.id].value;
        if root_val.len() != 1 {
            return Err(Error::contract(format!(
                "backward root must be scalar, got shape {:?}",
                root_val.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[root.id] = Some(Tensor::full(root_val.shape().to_vec(), 1.0));
        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            for (input, contrib) in node.op.backward(&nodes, &node.value, &g)? {
                if !nodes[input].requires_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => {
                        for (a, c) in acc.data_mut().iter_mut().zip(contrib.data()) {
                            *a += c;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            }
            grads[id] = Some(g);
        }
        *self.grads.borrow_mut() = grads;
        self.frozen.set(true);
        Ok(())
    }

    /// Gradient of the last backward root with respect to `var`.
    pub fn grad(&self, var: Var<'_>) -> Option<Tensor> {
        self.grads.borrow().get(var.id).cloned().flatten()
    }

    pub fn clear_grads(&self) {
        self.grads.borrow_mut().clear();
        self.frozen.set(false);
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> Arc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn grad(&self) -> Option<Tensor> {
        self.tape.grad(*self)
    }

    /// Scalar value of a single-element var.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    /// Same value, cut off from the graph.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant_arc(self.value())
    }
}
