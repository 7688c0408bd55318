//! Reverse-mode tape.
//!
//! Every operation appends a node holding its forward value, the ids of its
//! operands and a pullback closure. Operands always precede the node that
//! consumes them, so a single reverse sweep over the node list visits each
//! node exactly once in a valid topological order.

use std::cell::{Cell, RefCell};
use std::collections::BTreeMap;
use std::fmt;
use std::rc::Rc;

use super::tensor::{Scalar, Tensor};
use crate::error::{Result, SureError};

/// Pullback of one recorded operation.
///
/// Arguments: upstream gradient (same length as the output), operand values,
/// the output value, and a mask telling which operands need a gradient.
/// Returns one optional gradient per operand.
pub(crate) type Pullback<T> =
    Box<dyn Fn(&[T], &[Rc<Tensor<T>>], &Tensor<T>, &[bool]) -> Vec<Option<Vec<T>>>>;

struct Node<T: Scalar> {
    value: Rc<Tensor<T>>,
    parents: Vec<usize>,
    requires_grad: bool,
    is_leaf: bool,
    pullback: Option<Pullback<T>>,
}

/// An append-only computation graph, confined to one thread.
pub struct Tape<T: Scalar = f32> {
    nodes: RefCell<Vec<Node<T>>>,
    consumed: Cell<bool>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> fmt::Debug for Tape<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.borrow().len())
            .field("consumed", &self.consumed.get())
            .finish()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar = f32> {
    pub(crate) tape: &'t Tape<T>,
    pub(crate) id: usize,
}

impl<T: Scalar> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value().shape())
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed.get()
    }

    fn push_leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            parents: Vec::new(),
            requires_grad,
            is_leaf: true,
            pullback: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Trainable leaf; receives a gradient on [`Tape::backward`].
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_leaf(value, true)
    }

    /// Constant leaf; never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_leaf(value, false)
    }

    pub(crate) fn record<'t>(
        &'t self,
        value: Tensor<T>,
        parents: &[Var<'t, T>],
        pullback: Pullback<T>,
    ) -> Var<'t, T> {
        let parent_ids: Vec<usize> = parents.iter().map(|p| p.id).collect();
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parent_ids.iter().any(|&p| nodes[p].requires_grad);
        nodes.push(Node {
            value: Rc::new(value),
            parents: parent_ids,
            requires_grad,
            is_leaf: false,
            pullback: requires_grad.then_some(pullback),
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn value_of(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    pub(crate) fn requires_grad_of(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Propagates d(loss)/d(node) to every trainable leaf.
    ///
    /// A tape can be swept only once; a second call is a state error.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(SureError::invalid("loss was recorded on a different tape"));
        }
        if self.consumed.get() {
            return Err(SureError::State("tape already consumed by backward".into()));
        }
        let nodes = self.nodes.borrow();
        let loss_node = &nodes[loss.id];
        if loss_node.value.numel() != 1 {
            return Err(SureError::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_node.value.shape()
            )));
        }
        self.consumed.set(true);

        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.id).map(|_| None).collect();
        let mut leaf_grads = BTreeMap::new();
        if loss_node.requires_grad {
            grads[loss.id] = Some(vec![T::one()]);
        }
        for id in (0..=loss.id).rev() {
            let Some(upstream) = grads[id].take() else {
                continue;
            };
            let node = &nodes[id];
            if node.is_leaf {
                let shape = node.value.shape().to_vec();
                leaf_grads.insert(id, Tensor::new(shape, upstream)?);
                continue;
            }
            let Some(pullback) = node.pullback.as_ref() else {
                continue;
            };
            let operands: Vec<Rc<Tensor<T>>> = node
                .parents
                .iter()
                .map(|&p| Rc::clone(&nodes[p].value))
                .collect();
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| nodes[p].requires_grad)
                .collect();
            let parent_grads = pullback(&upstream, &operands, &node.value, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for ((&pid, g), &need) in node.parents.iter().zip(parent_grads).zip(&needs) {
                let (Some(g), true) = (g, need) else {
                    continue;
                };
                debug_assert_eq!(g.len(), nodes[pid].value.numel());
                match &mut grads[pid] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a = *a + *b),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(Gradients { leaf_grads })
    }
}

/// Gradients of trainable leaves produced by one backward sweep.
#[derive(Debug)]
pub struct Gradients<T: Scalar> {
    leaf_grads: BTreeMap<usize, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of `var`, or `None` if it is a constant or the loss does not depend on it.
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.leaf_grads.get(&var.id)
    }

    /// Like [`Gradients::get`] but yields zeros for unreachable trainable leaves.
    pub fn get_or_zeros(&self, var: Var<'_, T>) -> Tensor<T> {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.value().shape()))
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad_of(self.id)
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    /// Copy of this value cut off from the graph.
    pub fn detach(&self) -> Var<'t, T> {
        self.tape.constant((*self.value()).clone())
    }
}
