//! Wengert-list recording of forward ops and the reverse sweep over them.

use std::cell::RefCell;
use std::fmt;
use std::sync::Arc;

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// Vector-Jacobian product of one recorded op: maps the output gradient to one
/// optional gradient per input. `needs[i]` tells whether input `i` wants one.
pub type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    value: Arc<Tensor<T>>,
    inputs: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn<T>>,
}

/// Single-owner graph of recorded ops. Node ids are a topological order.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push_node(&self, node: Node<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        self.leaf_shared(Arc::new(value), requires_grad)
    }

    pub fn leaf_shared(&self, value: Arc<Tensor<T>>, requires_grad: bool) -> Var<'_, T> {
        self.push_node(Node {
            value,
            inputs: Vec::new(),
            requires_grad,
            backward: None,
        })
    }

    /// Leaf that receives a gradient.
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    /// Records an op output. The backward closure is retained only when at
    /// least one input takes part in differentiation.
    pub fn record<F>(&self, value: Tensor<T>, inputs: &[Var<'_, T>], backward: F) -> Var<'_, T>
    where
        F: Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>> + 'static,
    {
        for v in inputs {
            debug_assert!(std::ptr::eq(v.tape, self), "vars from a different tape");
        }
        let requires_grad = inputs.iter().any(|v| v.requires_grad());
        self.push_node(Node {
            value: Arc::new(value),
            inputs: inputs.iter().map(|v| v.id).collect(),
            requires_grad,
            backward: if requires_grad {
                Some(Box::new(backward))
            } else {
                None
            },
        })
    }

    fn value_of(&self, id: usize) -> Arc<Tensor<T>> {
        Arc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires_grad_of(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse sweep from a scalar root. Gradients accumulate additively over
    /// fan-out; only leaves created with `requires_grad` are reported.
    pub fn backward(&self, root: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let root_value = &nodes[root.id].value;
        if !root_value.is_scalar() {
            return Err(TensorError::NonScalarRoot(root_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(nodes.len());
        grads.resize_with(nodes.len(), || None);
        grads[root.id] = Some(Tensor::ones(root_value.shape()));

        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            let Some(backward) = &node.backward else {
                continue;
            };
            let Some(grad_out) = grads[id].take() else {
                continue;
            };
            let needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|&i| nodes[i].requires_grad)
                .collect();
            let input_grads = backward(&grad_out, &needs);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for ((&input, g), &need) in node.inputs.iter().zip(input_grads).zip(&needs) {
                let (Some(g), true) = (g, need) else {
                    continue;
                };
                debug_assert_eq!(g.shape(), nodes[input].value.shape());
                match &mut grads[input] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
            }
        }

        for (id, g) in grads.iter_mut().enumerate() {
            let node = &nodes[id];
            if !(node.inputs.is_empty() && node.requires_grad) {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }
}

/// Handle to a node on a [`Tape`].
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

impl<T: Element> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value().shape())
    }
}

impl<'t, T: Element> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Arc<Tensor<T>> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad_of(self.id)
    }

    /// Scalar value of a single-element var.
    pub fn item(&self) -> T {
        self.value().item()
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var<'_, T>) -> Option<Tensor<T>> {
        self.grads.get_mut(var.id).and_then(Option::take)
    }

    /// Gradient of `var`, or zeros of its shape when no path reached it.
    pub fn get_or_zeros(&self, var: Var<'_, T>) -> Tensor<T> {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&var.shape()))
    }
}
