//! Reverse-mode recording of tensor operations.
//!
//! Every operation appends a node to a [`Tape`]; node indices are a
//! topological order, so the backward pass is a single reverse sweep.

use std::cell::RefCell;
use std::fmt;
use std::sync::Arc;

use crate::error::{arg_err, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Maps the output gradient to one optional gradient per parent. The
/// `needs` slice tells which parents actually need a gradient.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T: Real> {
    value: Arc<Tensor<T>>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy)]
pub struct Var<'t, T: Real> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf that gradients can be taken with respect to.
    pub fn var(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(Arc::new(value), true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(Arc::new(value), false)
    }

    pub fn leaf(&self, value: Arc<Tensor<T>>, requires_grad: bool) -> Var<'_, T> {
        self.push(Node { value, parents: Vec::new(), backward: None, requires_grad })
    }

    pub(crate) fn op<F>(&self, value: Tensor<T>, parents: &[Var<'_, T>], backward: F) -> Var<'_, T>
    where
        F: Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>> + 'static,
    {
        self.op_arc(Arc::new(value), parents, backward)
    }

    pub(crate) fn op_arc<F>(
        &self,
        value: Arc<Tensor<T>>,
        parents: &[Var<'_, T>],
        backward: F,
    ) -> Var<'_, T>
    where
        F: Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>> + 'static,
    {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.id].requires_grad)
        };
        let (parents, backward): (Vec<usize>, Option<BackwardFn<T>>) = if requires_grad {
            (parents.iter().map(|p| p.id).collect(), Some(Box::new(backward)))
        } else {
            (Vec::new(), None)
        };
        self.push(Node { value, parents, backward, requires_grad })
    }

    fn push(&self, node: Node<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var { tape: self, id: nodes.len() - 1 }
    }

    pub(crate) fn value_of(&self, id: usize) -> Arc<Tensor<T>> {
        Arc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires_grad_of(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Gradients of the one-element `root` with respect to each of `wrt`.
    ///
    /// Leaves that do not influence `root` get a zero gradient. The tape is
    /// left intact, so backward may be run again from another root.
    pub fn backward(&self, root: Var<'_, T>, wrt: &[Var<'_, T>]) -> Result<Vec<Tensor<T>>> {
        let nodes = self.nodes.borrow();
        let root_value = &nodes[root.id].value;
        if root_value.numel() != 1 {
            return Err(arg_err(
                "backward",
                format!("root must hold one element, has shape {:?}", root_value.shape()),
            ));
        }
        let n = root.id + 1;
        let mut wanted = vec![false; n];
        for w in wrt {
            if w.id < n {
                wanted[w.id] = true;
            }
        }
        // A node participates only if some requested leaf lies upstream of it.
        let mut depends = vec![false; n];
        for i in 0..n {
            depends[i] = wanted[i] || nodes[i].parents.iter().any(|&p| depends[p]);
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        let mut found: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        if depends[root.id] {
            grads[root.id] = Some(Tensor::ones(root_value.shape()));
        }
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if let Some(backward) = &node.backward {
                let needs: Vec<bool> = node.parents.iter().map(|&p| depends[p]).collect();
                if needs.iter().any(|&b| b) {
                    let parent_grads = backward(&g, &needs);
                    debug_assert_eq!(parent_grads.len(), node.parents.len());
                    for ((&p, pg), &need) in node.parents.iter().zip(parent_grads).zip(&needs) {
                        let (Some(pg), true) = (pg, need) else { continue };
                        debug_assert_eq!(pg.shape(), nodes[p].value.shape(), "grad shape at node {p}");
                        match &mut grads[p] {
                            Some(acc) => acc.add_assign(&pg),
                            slot @ None => *slot = Some(pg),
                        }
                    }
                }
            }
            if wanted[i] {
                found[i] = Some(g);
            }
        }
        Ok(wrt
            .iter()
            .map(|w| {
                if w.id < n {
                    if let Some(g) = &found[w.id] {
                        return g.clone();
                    }
                }
                Tensor::zeros(nodes[w.id].value.shape())
            })
            .collect())
    }
}

impl<'t, T: Real> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Arc<Tensor<T>> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad_of(self.id)
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var<'t, T> {
        self.tape.leaf(self.value(), false)
    }

    /// Scalar value of a one-element variable.
    pub fn item(&self) -> T {
        self.value().item()
    }
}

impl<T: Real> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.value())
    }
}
