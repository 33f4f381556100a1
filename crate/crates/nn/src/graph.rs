//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its variables together with
//! a closure mapping the output gradient to the gradients of the inputs.
//! Nodes that do not depend on any gradient-requiring leaf carry no closure,
//! so frozen sub-networks cost nothing on the backward pass beyond the
//! input-gradient path actually needed.

use std::sync::Arc;

use crate::tensor::{Scalar, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Maps the gradient of a node's output to the gradients of its parents.
/// The flags tell which parents actually need a gradient.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    value: Arc<Tensor<T>>,
    requires_grad: bool,
    parents: Vec<Var>,
    backward: Option<BackwardFn<T>>,
}

/// Computation tape.
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    params: Vec<(String, Var)>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    fn leaf(&mut self, value: Arc<Tensor<T>>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            parents: Vec::new(),
            backward: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(Arc::new(value), false)
    }

    pub fn constant_shared(&mut self, value: Arc<Tensor<T>>) -> Var {
        self.leaf(value, false)
    }

    /// A leaf whose gradient will be reported by [`Graph::backward`].
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.leaf(Arc::new(value), true)
    }

    /// Binds a named parameter. Frozen parameters are recorded but never
    /// receive gradients.
    pub fn param(&mut self, name: &str, value: &Arc<Tensor<T>>, trainable: bool) -> Var {
        let v = self.leaf(Arc::clone(value), trainable);
        if trainable {
            self.params.push((name.to_string(), v));
        }
        v
    }

    /// Trainable parameters bound so far, in binding order.
    pub fn params(&self) -> &[(String, Var)] {
        &self.params
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn value_arc(&self, v: Var) -> Arc<Tensor<T>> {
        Arc::clone(&self.nodes[v.0].value)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, parents: Vec<Var>, backward: BackwardFn<T>) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value: Arc::new(value),
            requires_grad,
            parents,
            backward: requires_grad.then_some(backward),
        });
        Var(self.nodes.len() - 1)
    }

    /// Gradients of a one-element output with respect to every leaf.
    pub fn backward(&self, loss: Var) -> Grads<T> {
        let shape = self.value(loss).shape();
        assert_eq!(shape, [1, 1, 1, 1], "backward() needs a scalar output, got {shape:?}");
        self.backward_with(loss, Tensor::scalar(T::one()))
    }

    /// Vector-Jacobian product: propagates `cotangent` from `output` to the leaves.
    pub fn backward_with(&self, output: Var, cotangent: Tensor<T>) -> Grads<T> {
        assert_eq!(cotangent.shape(), self.value(output).shape(), "cotangent shape");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(cotangent);
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[i].take() else {
                continue;
            };
            let needs: Vec<bool> = node.parents.iter().map(|p| self.nodes[p.0].requires_grad).collect();
            let parent_grads = backward(&g, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for ((p, pg), need) in node.parents.iter().zip(parent_grads).zip(&needs) {
                let Some(pg) = pg else { continue };
                if !need {
                    continue;
                }
                match grads[p.0].as_mut() {
                    Some(acc) => acc.add_assign(&pg),
                    None => grads[p.0] = Some(pg),
                }
            }
        }
        Grads { grads }
    }
}

/// Result of a backward pass: gradients of leaf variables.
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}
