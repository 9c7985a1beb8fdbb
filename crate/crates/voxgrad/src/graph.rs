//! Tape-free reverse-mode graph.
//!
//! Every [`Var`] owns its parents and a backward closure. Node ids grow
//! monotonically within a thread, so sorting reachable nodes by descending id
//! yields a valid reverse topological order without an explicit tape.

use std::cell::Cell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::param::{Param, ParamId};
use crate::tensor::Tensor;

thread_local! {
    static NEXT_ID: Cell<usize> = const { Cell::new(0) };
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

fn next_id() -> usize {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|c| c.get())
}

/// Runs `f` with graph recording disabled on this thread.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    let prev = GRAD_ENABLED.with(|c| c.replace(false));
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|c| c.set(self.0));
        }
    }
    let _restore = Restore(prev);
    f()
}

pub(crate) type BackwardFn = Box<dyn Fn(&Tensor) -> Vec<Option<Tensor>>>;

struct Node {
    id: usize,
    value: Tensor,
    requires_grad: bool,
    param: Option<ParamId>,
    parents: Vec<Var>,
    backward: Option<BackwardFn>,
}

/// A value in the computation graph.
#[derive(Clone)]
pub struct Var(Rc<Node>);

impl Var {
    /// Constant leaf; gradients never flow into it.
    pub fn constant(value: Tensor) -> Self {
        Self::leaf(value, false)
    }

    pub fn leaf(value: Tensor, requires_grad: bool) -> Self {
        Var(Rc::new(Node {
            id: next_id(),
            value,
            requires_grad,
            param: None,
            parents: Vec::new(),
            backward: None,
        }))
    }

    pub(crate) fn from_param(p: &Param) -> Self {
        let requires_grad = p.trainable() && grad_enabled();
        Var(Rc::new(Node {
            id: next_id(),
            value: p.value(),
            requires_grad,
            param: Some(p.id()),
            parents: Vec::new(),
            backward: None,
        }))
    }

    /// Builds an op node. `backward` receives the output gradient and returns
    /// one optional gradient per parent, in order.
    pub(crate) fn op(
        value: Tensor,
        parents: Vec<Var>,
        backward: impl Fn(&Tensor) -> Vec<Option<Tensor>> + 'static,
    ) -> Self {
        let requires_grad = grad_enabled() && parents.iter().any(Var::requires_grad);
        if !requires_grad {
            return Self::constant(value);
        }
        Var(Rc::new(Node {
            id: next_id(),
            value,
            requires_grad: true,
            param: None,
            parents,
            backward: Some(Box::new(backward)),
        }))
    }

    pub fn value(&self) -> &Tensor {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn id(&self) -> usize {
        self.0.id
    }

    /// Detached copy sharing the value.
    pub fn detach(&self) -> Var {
        Var::constant(self.0.value.clone())
    }

    /// Reverse-mode sweep from this (scalar) node with seed gradient 1.
    pub fn backward(&self) -> Gradients {
        assert_eq!(
            self.0.value.len(),
            1,
            "backward() needs a scalar, got shape {:?}",
            self.shape()
        );
        self.backward_with(Tensor::ones(self.shape()))
    }

    pub fn backward_with(&self, seed: Tensor) -> Gradients {
        let mut grads = Gradients::default();
        if !self.requires_grad() {
            return grads;
        }
        let mut nodes: Vec<Var> = Vec::new();
        let mut seen = std::collections::HashSet::new();
        let mut stack = vec![self.clone()];
        while let Some(v) = stack.pop() {
            if !seen.insert(v.id()) {
                continue;
            }
            for p in &v.0.parents {
                if p.requires_grad() && !seen.contains(&p.id()) {
                    stack.push(p.clone());
                }
            }
            nodes.push(v);
        }
        nodes.sort_unstable_by_key(|v| std::cmp::Reverse(v.id()));

        let mut pending: HashMap<usize, Tensor> = HashMap::new();
        pending.insert(self.id(), seed);
        for node in nodes {
            let Some(g) = pending.remove(&node.id()) else {
                continue;
            };
            if let Some(bw) = &node.0.backward {
                let parent_grads = bw(&g);
                debug_assert_eq!(parent_grads.len(), node.0.parents.len());
                for (p, pg) in node.0.parents.iter().zip(parent_grads) {
                    if let (true, Some(pg)) = (p.requires_grad(), pg) {
                        debug_assert_eq!(pg.shape(), p.shape(), "gradient shape mismatch");
                        accumulate(&mut pending, p.id(), pg);
                    }
                }
            } else if let Some(pid) = node.0.param {
                match grads.params.get_mut(&pid) {
                    Some(acc) => *acc = acc.add(&g),
                    None => {
                        grads.params.insert(pid, g.clone());
                    }
                }
                grads.leaves.insert(node.id(), g);
            } else {
                grads.leaves.insert(node.id(), g);
            }
        }
        grads
    }
}

fn accumulate(map: &mut HashMap<usize, Tensor>, id: usize, g: Tensor) {
    match map.remove(&id) {
        Some(acc) => {
            let mut data = acc.into_data();
            for (a, b) in data.iter_mut().zip(g.data()) {
                *a += b;
            }
            map.insert(id, Tensor::new(g.shape(), data));
        }
        None => {
            map.insert(id, g);
        }
    }
}

/// Gradients produced by [`Var::backward`].
#[derive(Default)]
pub struct Gradients {
    params: HashMap<ParamId, Tensor>,
    leaves: HashMap<usize, Tensor>,
}

impl Gradients {
    /// Gradient with respect to a parameter, summed over every use.
    pub fn param(&self, p: &Param) -> Option<&Tensor> {
        self.params.get(&p.id())
    }

    /// Gradient with respect to a leaf variable.
    pub fn wrt(&self, v: &Var) -> Option<&Tensor> {
        self.leaves.get(&v.id())
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }
}
