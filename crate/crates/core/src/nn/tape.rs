//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Nodes are appended in evaluation order, so the tape is acyclic by
//! construction and reverse insertion order is a valid reverse topological
//! order. `backward` visits every node reachable from the root once.

use std::cell::RefCell;
use std::rc::Rc;

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Computes parent gradients from the output gradient. `needs[i]` tells
/// whether parent `i` participates in differentiation; entries for parents
/// that don't may be `None`.
pub type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T: Real> {
    value: Rc<Tensor<T>>,
    requires_grad: bool,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
}

pub struct Tape<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
    named: RefCell<Vec<(String, usize)>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            named: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A constant input; gradients never flow into it.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(Node {
            value: Rc::new(value),
            requires_grad: false,
            parents: Vec::new(),
            backward: None,
        })
    }

    /// A differentiable leaf.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(Node {
            value: Rc::new(value),
            requires_grad: true,
            parents: Vec::new(),
            backward: None,
        })
    }

    /// A named differentiable leaf. Registering the same name twice returns
    /// the existing leaf so shared weights accumulate a single gradient.
    pub fn param(&self, name: &str, value: &Tensor<T>) -> Var<'_, T> {
        if let Some(&(_, id)) = self.named.borrow().iter().find(|(n, _)| n == name) {
            return Var { tape: self, id };
        }
        let v = self.leaf(value.clone());
        self.named.borrow_mut().push((name.to_string(), v.id));
        v
    }

    /// Records the result of an operation. The node requires grad iff any
    /// parent does; otherwise the backward closure is dropped.
    pub fn op(
        &self,
        value: Tensor<T>,
        parents: &[Var<'_, T>],
        backward: BackwardFn<T>,
    ) -> Var<'_, T> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.id].requires_grad)
        };
        self.push(Node {
            value: Rc::new(value),
            requires_grad,
            parents: parents.iter().map(|p| p.id).collect(),
            backward: requires_grad.then_some(backward),
        })
    }

    pub fn backward(&self, root: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let root_val = &nodes[root.id].value;
        if root_val.len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar root, got shape {:?}",
                root_val.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.id] = Some(Tensor::full(root_val.shape(), T::one()));

        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(backward) = &node.backward else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| nodes[p].requires_grad)
                .collect();
            let parent_grads = backward(&g, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for ((&pid, pg), &need) in node.parents.iter().zip(parent_grads).zip(&needs) {
                if !need {
                    continue;
                }
                let Some(pg) = pg else { continue };
                debug_assert_eq!(pg.shape(), nodes[pid].value.shape());
                match &mut grads[pid] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
        }

        Ok(Gradients {
            grads,
            named: self.named.borrow().clone(),
        })
    }
}

/// Handle to a node on a tape.
#[derive(Clone, Copy)]
pub struct Var<'t, T: Real> {
    pub(crate) tape: &'t Tape<T>,
    pub(crate) id: usize,
}

impl<'t, T: Real> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        Rc::clone(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Scalar value of a single-element node.
    pub fn item(&self) -> T {
        self.value().item()
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
    named: Vec<(String, usize)>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.named
            .iter()
            .find(|(n, _)| n == name)
            .and_then(|&(_, id)| self.grads[id].as_ref())
    }

    /// Named parameter gradients in registration order.
    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.named
            .iter()
            .filter_map(|(n, id)| self.grads[*id].as_ref().map(|g| (n.as_str(), g)))
    }

    pub fn take_by_name(&mut self, name: &str) -> Option<Tensor<T>> {
        let id = self.named.iter().find(|(n, _)| n == name)?.1;
        self.grads[id].take()
    }
}
