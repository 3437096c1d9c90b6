//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node holding its output value and, when any
//! input requires a gradient, a closure mapping the output gradient to
//! gradients for each input. Nodes are appended in evaluation order, so
//! walking the tape backwards is a valid reverse topological order.

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub type NodeId = usize;

type BackwardFn = Box<dyn Fn(&Tensor) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    parents: Vec<NodeId>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    id: NodeId,
    graph: &'g Graph,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.value().shape())
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

    fn push(&self, node: Node) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            id: nodes.len() - 1,
            graph: self,
        }
    }

    /// Leaf node. Gradients are reported for it when `requires_grad` is set.
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(Node {
            value: Rc::new(value),
            parents: Vec::new(),
            backward: None,
            requires_grad,
        })
    }

    pub fn input(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    /// Record the result of an operation on `parents`.
    ///
    /// `backward` receives the gradient of the output and returns one entry
    /// per parent, in order; `None` means "no contribution". It is only
    /// retained when some parent needs a gradient.
    pub fn record<'g, F>(&'g self, value: Tensor, parents: &[Var<'g>], backward: F) -> Var<'g>
    where
        F: Fn(&Tensor) -> Vec<Option<Tensor>> + 'static,
    {
        self.record_shared(Rc::new(value), parents, backward)
    }

    /// As [`Graph::record`], for an output the backward closure also holds.
    pub fn record_shared<'g, F>(&'g self, value: Rc<Tensor>, parents: &[Var<'g>], backward: F) -> Var<'g>
    where
        F: Fn(&Tensor) -> Vec<Option<Tensor>> + 'static,
    {
        debug_assert!(parents.iter().all(|p| std::ptr::eq(p.graph, self)));
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.id].requires_grad)
        };
        self.push(Node {
            value,
            parents: parents.iter().map(|p| p.id).collect(),
            backward: requires_grad.then(|| Box::new(backward) as BackwardFn),
            requires_grad,
        })
    }

    pub fn requires_grad(&self, var: Var<'_>) -> bool {
        self.nodes.borrow()[var.id].requires_grad
    }

    /// Reverse-mode accumulation from a one-element `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if !root.value.is_scalar() {
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(Tensor::ones(root.value.shape()));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(backward) = &node.backward else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let parent_grads = backward(&g);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&pid, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !nodes[pid].requires_grad {
                    continue;
                }
                debug_assert_eq!(pg.shape(), nodes[pid].value.shape(), "gradient shape");
                match &mut grads[pid] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        // leaves have no backward closure, so their slots were never taken
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(id, g)| if nodes[id].parents.is_empty() { g } else { None })
            .collect();
        Ok(Gradients { grads })
    }
}

/// Leaf gradients produced by one backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.get_id(var.id)
    }

    pub fn get_id(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    /// Gradient of `var`, or zeros of its shape when it did not influence the loss.
    pub fn get_or_zeros(&self, var: Var<'_>) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.value().shape()))
    }
}

impl<'g> Var<'g> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor> {
        Rc::clone(&self.graph.nodes.borrow()[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_rejects_non_scalar() {
        let g = Graph::new();
        let x = g.input(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let g = Graph::new();
        let c = g.constant(Tensor::scalar(3.0));
        let x = g.input(Tensor::scalar(2.0));
        let y = x.mul(c).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 3.0);
        assert!(grads.get(c).is_none());
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // y = x*x + x at x = 3 -> dy/dx = 2x + 1 = 7
        let g = Graph::new();
        let x = g.input(Tensor::scalar(3.0));
        let y = x.mul(x).unwrap().add(x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 7.0);
    }
}
