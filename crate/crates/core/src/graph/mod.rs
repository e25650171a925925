//! Reverse-mode automatic differentiation on dynamically shaped f32 arrays.
//!
//! A [`Tape`] records one computation as a flat list of nodes; `Var` is a copyable
//! handle into it. Nodes are created in topological order, so the backward sweep
//! is a single reverse pass. Model parameters live outside the tape in a
//! [`nn::ParamStore`]; inserting a parameter into a tape tags the node with its
//! store slot so gradients can be collected per parameter after `backward`.
//!
//! The engine is strictly sequential and allocation-order deterministic:
//! identical inputs produce bitwise-identical values and gradients.

mod conv;
mod ops;

pub mod nn;
pub mod optim;

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use ndarray::ArrayD;

pub type Arr = ArrayD<f32>;

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Backward closure: receives the output gradient and emits contributions to
/// parents by slot index into the node's parent list.
type BackFn = Box<dyn Fn(&Arr, &mut dyn FnMut(usize, Arr))>;

struct Node {
    value: Rc<Arr>,
    parents: Vec<usize>,
    backward: Option<BackFn>,
    param_slot: Option<usize>,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    param_vars: RefCell<BTreeMap<usize, Var>>,
}

/// Per-parameter gradients, indexed by store slot.
pub struct Grads {
    pub slots: Vec<Option<Arr>>,
}

impl Grads {
    pub fn new(n_slots: usize) -> Self {
        Self { slots: vec![None; n_slots] }
    }

    pub fn add_from(&mut self, other: Grads) {
        for (acc, g) in self.slots.iter_mut().zip(other.slots) {
            match (acc.as_mut(), g) {
                (Some(a), Some(b)) => *a += &b,
                (None, Some(b)) => *acc = Some(b),
                _ => {}
            }
        }
    }

    pub fn scale(&mut self, f: f32) {
        for g in self.slots.iter_mut().flatten() {
            g.mapv_inplace(|x| x * f);
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Arr, parents: Vec<usize>, backward: Option<BackFn>) -> Var {
        debug_assert!(value.iter().all(|x| x.is_finite()), "non-finite node value");
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = parents.iter().any(|&p| nodes[p].needs_grad);
        nodes.push(Node {
            value: Rc::new(value),
            parents,
            backward: if needs_grad { backward } else { None },
            param_slot: None,
            needs_grad,
        });
        Var(nodes.len() - 1)
    }

    /// Leaf with no gradient tracking.
    pub fn input(&self, value: Arr) -> Var {
        self.push(value, Vec::new(), None)
    }

    /// Leaf sharing a parameter's storage; gradients are collected under `slot`.
    /// Repeated insertion of the same slot returns the same node so all uses
    /// accumulate into one gradient.
    pub fn param(&self, store: &nn::ParamStore, slot: usize) -> Var {
        if let Some(&v) = self.param_vars.borrow().get(&slot) {
            return v;
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::clone(store.rc_value(slot)),
            parents: Vec::new(),
            backward: None,
            param_slot: Some(slot),
            needs_grad: true,
        });
        let v = Var(nodes.len() - 1);
        self.param_vars.borrow_mut().insert(slot, v);
        v
    }

    pub fn value(&self, v: Var) -> Rc<Arr> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn scalar(&self, v: Var) -> f32 {
        let val = self.value(v);
        debug_assert_eq!(val.len(), 1);
        *val.iter().next().unwrap()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// Reverse sweep from a scalar root; returns per-parameter gradients.
    pub fn backward(&self, root: Var, n_slots: usize) -> Grads {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[root.0].value.len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<Arr>> = vec![None; nodes.len()];
        grads[root.0] = Some(Arr::ones(nodes[root.0].value.raw_dim()));
        for id in (0..=root.0).rev() {
            let node = &nodes[id];
            if node.backward.is_none() {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let backward = node.backward.as_ref().unwrap();
            backward(&g, &mut |slot, contrib| {
                let pid = node.parents[slot];
                if !nodes[pid].needs_grad {
                    return;
                }
                debug_assert_eq!(
                    contrib.shape(),
                    nodes[pid].value.shape(),
                    "gradient shape mismatch into node {pid}"
                );
                match grads[pid].as_mut() {
                    Some(acc) => *acc += &contrib,
                    None => grads[pid] = Some(contrib),
                }
            });
        }
        let mut out = Grads::new(n_slots);
        for (id, node) in nodes.iter().enumerate() {
            if let Some(slot) = node.param_slot {
                if let Some(g) = grads[id].take() {
                    match out.slots[slot].as_mut() {
                        Some(acc) => *acc += &g,
                        None => out.slots[slot] = Some(g),
                    }
                }
            }
        }
        out
    }
}
