use std::cell::{Cell, Ref, RefCell};

use crate::autograd::ops::{vjp, Op};
use crate::{Error, Result, Tensor};

/// Handle to a value recorded on a [`Tape`]. Only meaningful for the tape
/// that issued it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) requires_grad: bool,
    pub(crate) op: Op,
    pub(crate) grad: Option<Vec<f64>>,
}

/// Ordered operation log. Single-threaded; independent tapes may run on
/// different threads concurrently.
pub struct Tape {
    pub(crate) nodes: RefCell<Vec<Node>>,
    recording: Cell<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            recording: Cell::new(true),
        }
    }

    /// A tape that only evaluates; leaves never require gradients.
    pub fn inference() -> Self {
        let t = Self::new();
        t.recording.set(false);
        t
    }

    pub fn is_recording(&self) -> bool {
        self.recording.get()
    }

    pub fn set_recording(&self, on: bool) {
        self.recording.set(on);
    }

    /// Drops every recorded node. Outstanding [`Var`]s become invalid.
    pub fn reset(&self) {
        self.nodes.borrow_mut().clear();
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var {
        let requires_grad = requires_grad && self.is_recording();
        self.push_node(Node {
            value,
            requires_grad,
            op: Op::Leaf,
            grad: None,
        })
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Gradient accumulated on `v` by previous [`Tape::backward`] calls.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let nodes = self.nodes.borrow();
        let node = &nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape(), g.clone()).expect("grad shape"))
    }

    pub fn zero_grads(&self) {
        for n in self.nodes.borrow_mut().iter_mut() {
            n.grad = None;
        }
    }

    fn push_node(&self, node: Node) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var(nodes.len() - 1)
    }

    /// Records an op result. The op (and its cached intermediates) is kept
    /// only when recording is on and some input needs a gradient.
    pub(crate) fn push(&self, value: Tensor, inputs: &[Var], op: Op) -> Var {
        let requires_grad = self.is_recording() && {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|v| nodes[v.0].requires_grad)
        };
        self.push_node(Node {
            value,
            requires_grad,
            op: if requires_grad { op } else { Op::Leaf },
            grad: None,
        })
    }

    /// Back-propagates from a single-element tensor, seeding its gradient
    /// with 1. Gradients accumulate into any already present.
    pub fn backward(&self, root: Var) -> Result<()> {
        let mut nodes = self.nodes.borrow_mut();
        if nodes[root.0].value.len() != 1 {
            return Err(Error::Rank {
                op: "backward",
                expected: 0,
                got: nodes[root.0].value.shape().to_vec(),
            });
        }
        if !nodes[root.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            for (input, contrib) in vjp(&nodes, &node.op, &node.value, &g) {
                if !nodes[input].requires_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                    slot => *slot = Some(contrib),
                }
            }
            grads[i] = Some(g);
        }
        for (node, g) in nodes.iter_mut().zip(grads) {
            if let Some(g) = g {
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, c)| *a += c),
                    slot => *slot = Some(g),
                }
            }
        }
        Ok(())
    }
}
