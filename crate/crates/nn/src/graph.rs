//! Define-by-run reverse-mode autodiff tape.
//!
//! Every operation appends a node holding its value and, when any input
//! requires a gradient, a closure mapping the output gradient to input
//! gradients. Node ids are allocated in execution order, so a reverse sweep
//! over ids is a valid topological order.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::tensor::Tensor;

/// Maps the output gradient to one gradient per parent. `needs[i]` is false
/// when parent `i` does not require a gradient; returning `None` there is
/// expected.
pub type BackwardFn = Box<dyn Fn(&Tensor, &[Rc<Tensor>], &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl<'g> std::fmt::Debug for Var<'g> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
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

    /// Leaf that receives a gradient.
    pub fn input(&self, value: Tensor) -> Var<'_> {
        self.push(Rc::new(value), Vec::new(), None, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(Rc::new(value), Vec::new(), None, false)
    }

    /// Record an operation. `backward` is dropped when no parent needs a
    /// gradient.
    pub fn op<'g>(&'g self, parents: &[Var<'g>], value: Tensor, backward: BackwardFn) -> Var<'g> {
        let ids: Vec<usize> = parents.iter().map(|v| v.id).collect();
        let requires_grad = {
            let nodes = self.nodes.borrow();
            ids.iter().any(|&i| nodes[i].requires_grad)
        };
        let backward = requires_grad.then_some(backward);
        self.push(Rc::new(value), ids, backward, requires_grad)
    }

    fn push(
        &self,
        value: Rc<Tensor>,
        parents: Vec<usize>,
        backward: Option<BackwardFn>,
        requires_grad: bool,
    ) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            parents,
            backward,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Gradients of a scalar output with respect to every leaf that
    /// requires one.
    pub fn backward(&self, output: Var<'_>) -> Gradients {
        let shape = output.shape();
        assert_eq!(
            shape.iter().product::<usize>(),
            1,
            "backward() needs a scalar output; use backward_with for tensors"
        );
        self.backward_with(output, Tensor::full(shape, 1.0))
    }

    /// Vector-Jacobian product seeded with `seed` at `output`.
    pub fn backward_with(&self, output: Var<'_>, seed: Tensor) -> Gradients {
        assert_eq!(seed.shape(), output.shape(), "seed shape mismatch");
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = (0..=output.id).map(|_| None).collect();
        grads[output.id] = Some(seed);
        let mut leaves = HashMap::new();
        for id in (0..=output.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(backward) = &node.backward else {
                leaves.insert(id, g);
                continue;
            };
            let parent_values: Vec<Rc<Tensor>> =
                node.parents.iter().map(|&p| Rc::clone(&nodes[p].value)).collect();
            let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let parent_grads = backward(&g, &parent_values, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for ((&p, pg), need) in node.parents.iter().zip(parent_grads).zip(&needs) {
                let (Some(pg), true) = (pg, *need) else { continue };
                debug_assert_eq!(pg.shape(), nodes[p].value.shape());
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Gradients { leaves }
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
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> crate::Shape {
        self.graph.nodes.borrow()[self.id].value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }
}

/// Leaf gradients produced by a backward sweep.
pub struct Gradients {
    leaves: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.leaves.get(&var.id)
    }

    pub fn take(&mut self, var: Var<'_>) -> Option<Tensor> {
        self.leaves.remove(&var.id)
    }
}
