//! A small reverse-mode automatic differentiation graph.
//!
//! Nodes are reference counted. A node only keeps its parents (and with them
//! the activations its backward closure needs) when at least one parent
//! requires a gradient, so inference through constant parameters frees every
//! intermediate as soon as it goes out of scope.

use std::collections::HashMap;
use std::rc::Rc;

use crate::tensor::Tensor;

type BackwardFn = Box<dyn Fn(&Tensor, &[Var]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Tensor,
    requires_grad: bool,
    parents: Vec<Var>,
    backward: Option<BackwardFn>,
}

#[derive(Clone)]
pub struct Var(Rc<Node>);

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({:?}, grad={})", self.0.value, self.0.requires_grad)
    }
}

impl Var {
    pub fn constant(value: Tensor) -> Self {
        Var(Rc::new(Node {
            value,
            requires_grad: false,
            parents: Vec::new(),
            backward: None,
        }))
    }

    pub fn leaf(value: Tensor) -> Self {
        Var(Rc::new(Node {
            value,
            requires_grad: true,
            parents: Vec::new(),
            backward: None,
        }))
    }

    /// Result of an operation. `backward` receives the output gradient and
    /// the parents, and returns one optional gradient per parent.
    pub fn from_op(
        value: Tensor,
        parents: Vec<Var>,
        backward: impl Fn(&Tensor, &[Var]) -> Vec<Option<Tensor>> + 'static,
    ) -> Self {
        if parents.iter().any(Var::requires_grad) {
            Var(Rc::new(Node {
                value,
                requires_grad: true,
                parents,
                backward: Some(Box::new(backward)),
            }))
        } else {
            Var::constant(value)
        }
    }

    pub fn value(&self) -> &Tensor {
        &self.0.value
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn detach(&self) -> Var {
        Var::constant(self.0.value.clone())
    }

    fn key(&self) -> usize {
        Rc::as_ptr(&self.0) as usize
    }

    /// Back-propagates from this scalar and returns gradients of all leaves
    /// reachable through gradient-requiring nodes.
    pub fn backward(&self) -> Grads {
        let mut grads = Grads::default();
        if !self.requires_grad() {
            return grads;
        }
        let order = self.topo_order();
        let mut pending: HashMap<usize, Tensor> = HashMap::new();
        pending.insert(self.key(), Tensor::full(self.value().shape(), 1.0));
        for node in order.iter().rev() {
            let Some(g) = pending.remove(&node.key()) else {
                continue;
            };
            match &node.0.backward {
                None => {
                    grads.0.insert(node.key(), g);
                }
                Some(f) => {
                    let parent_grads = f(&g, &node.0.parents);
                    for (p, pg) in node.0.parents.iter().zip(parent_grads) {
                        let Some(pg) = pg else { continue };
                        if !p.requires_grad() {
                            continue;
                        }
                        match pending.get_mut(&p.key()) {
                            Some(acc) => acc.add_assign(&pg),
                            None => {
                                pending.insert(p.key(), pg);
                            }
                        }
                    }
                }
            }
        }
        grads
    }

    fn topo_order(&self) -> Vec<Var> {
        let mut order = Vec::new();
        let mut seen = std::collections::HashSet::new();
        let mut stack: Vec<(Var, bool)> = vec![(self.clone(), false)];
        while let Some((v, expanded)) = stack.pop() {
            if expanded {
                order.push(v);
                continue;
            }
            if !seen.insert(v.key()) {
                continue;
            }
            stack.push((v.clone(), true));
            for p in &v.0.parents {
                if p.requires_grad() && !seen.contains(&p.key()) {
                    stack.push((p.clone(), false));
                }
            }
        }
        order
    }
}

/// Leaf gradients keyed by node identity. Valid while the leaves are alive.
#[derive(Default)]
pub struct Grads(HashMap<usize, Tensor>);

impl Grads {
    pub fn get(&self, v: &Var) -> Option<&Tensor> {
        self.0.get(&v.key())
    }

    /// Gradient of `v`, or zeros of its shape when it did not influence the
    /// output.
    pub fn get_or_zeros(&self, v: &Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(v.value().shape()))
    }
}
