//! Reverse-mode autodiff via a linear record of operations.
//!
//! Every operation appends one node holding its output value, the ids of its
//! inputs and a backward rule. Nodes are appended in evaluation order, so the
//! record is always topologically sorted and `backward` walks it in reverse.

use std::cell::RefCell;
use std::fmt;

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Backward rule: `(input values, output value, output gradient)` to one
/// optional gradient per input.
pub(crate) type BackwardFn<T> =
    Box<dyn Fn(&[&Tensor<T>], &Tensor<T>, &Tensor<T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    op: &'static str,
    value: Tensor<T>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    tracked: bool,
}

/// Single-owner operation record.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
    poisoned: RefCell<Option<&'static str>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value on a tape.
pub struct Var<'t, T> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T> Copy for Var<'_, T> {}

impl<T: Real> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let nodes = self.tape.nodes.borrow();
        let node = &nodes[self.id];
        write!(f, "Var#{}({} {:?})", self.id, node.op, node.value.shape())
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            poisoned: RefCell::new(None),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf whose gradient is wanted.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push("leaf", value, Vec::new(), None, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push("constant", value, Vec::new(), None, false)
    }

    /// Append an operation. Gradient tracking propagates from inputs; the
    /// backward rule is dropped when no input is tracked.
    pub(crate) fn record(
        &self,
        op: &'static str,
        inputs: &[Var<'_, T>],
        value: Tensor<T>,
        backward: BackwardFn<T>,
    ) -> Var<'_, T> {
        let tracked = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|v| nodes[v.id].tracked)
        };
        let parents = inputs.iter().map(|v| v.id).collect();
        self.push(op, value, parents, tracked.then_some(backward), tracked)
    }

    fn push(
        &self,
        op: &'static str,
        value: Tensor<T>,
        parents: Vec<usize>,
        backward: Option<BackwardFn<T>>,
        tracked: bool,
    ) -> Var<'_, T> {
        if !value.all_finite() {
            self.poisoned.borrow_mut().get_or_insert(op);
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op,
            value,
            parents,
            backward,
            tracked,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// First operation that produced a non-finite value, if any.
    pub fn check_finite(&self) -> Result<()> {
        match *self.poisoned.borrow() {
            Some(op) => Err(Error::NonFinite(op.to_string())),
            None => Ok(()),
        }
    }

    /// Gradients of the scalar `loss` with respect to every tracked node.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        self.check_finite()?;
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::dim(
                "backward",
                "loss element count",
                1,
                root.value.numel(),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Tensor::ones(root.value.shape()));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(backward) = &node.backward else {
                continue;
            };
            let Some(gout) = grads[id].take() else {
                continue;
            };
            let inputs: Vec<&Tensor<T>> = node.parents.iter().map(|&p| &nodes[p].value).collect();
            let parent_grads = backward(&inputs, &node.value, &gout);
            debug_assert_eq!(parent_grads.len(), node.parents.len(), "{}", node.op);
            for (&p, g) in node.parents.iter().zip(parent_grads) {
                let Some(g) = g else { continue };
                if !nodes[p].tracked {
                    continue;
                }
                debug_assert_eq!(g.shape(), nodes[p].value.shape(), "grad shape of {}", node.op);
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&g)?,
                    slot @ None => *slot = Some(g),
                }
            }
            grads[id] = Some(gout);
        }
        for (id, node) in nodes.iter().enumerate() {
            if node.tracked && grads[id].is_none() && node.parents.is_empty() {
                grads[id] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads })
    }
}

impl<'t, T: Real> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    /// Current value (shares storage with the tape).
    pub fn value(&self) -> Tensor<T> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn is_tracked(&self) -> bool {
        self.tape.nodes.borrow()[self.id].tracked
    }

    /// Same value with gradient flow cut.
    pub fn detach(&self) -> Var<'t, T> {
        self.tape.constant(self.value())
    }
}

/// Result of a backward pass.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `var`, or zeros when it does not influence the loss.
    pub fn wrt(&self, var: Var<'_, T>) -> Tensor<T> {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&var.shape()))
    }
}
