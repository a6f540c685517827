//! Tape-based reverse-mode differentiation over whole tensors.
//!
//! A [`Graph`] records one node per differentiable operation. Values live in
//! the [`Var`] handles (reference counted), so a graph built with gradients
//! disabled keeps nothing alive beyond what the caller still holds. Nodes are
//! appended in evaluation order, which is already a topological order, and
//! [`Graph::backward`] walks them in reverse.

use std::cell::{Cell, RefCell};
use std::collections::BTreeMap;
use std::rc::Rc;

use crate::real::Real;
use crate::tensor::Tensor;

/// Backward rule of one recorded op.
///
/// Receives the gradient of the op output and a mask telling which inputs
/// need a gradient; returns one entry per input (in input order). Entries for
/// masked-out inputs may be `None`.
pub type BackwardFn<E> = Box<dyn Fn(&Tensor<E>, &[bool]) -> Vec<Option<Tensor<E>>>>;

struct Node<E: Real> {
    parents: Vec<Option<usize>>,
    backward: Option<BackwardFn<E>>,
}

pub struct Graph<E: Real = f32> {
    nodes: RefCell<Vec<Node<E>>>,
    grad_enabled: bool,
    region: Cell<&'static str>,
    op_counts: RefCell<BTreeMap<&'static str, u64>>,
}

/// Handle to a value produced inside a [`Graph`].
#[derive(Clone)]
pub struct Var<'g, E: Real = f32> {
    graph: &'g Graph<E>,
    value: Rc<Tensor<E>>,
    node: Option<usize>,
}

/// Gradients of a scalar with respect to every leaf that required one.
pub struct Gradients<E: Real> {
    grads: Vec<Option<Tensor<E>>>,
}

/// Restores the previous op-count region when dropped.
pub struct RegionGuard<'g, E: Real> {
    graph: &'g Graph<E>,
    previous: &'static str,
}

impl<E: Real> Drop for RegionGuard<'_, E> {
    fn drop(&mut self) {
        self.graph.region.set(self.previous);
    }
}

pub const DEFAULT_REGION: &str = "main";

impl<E: Real> Graph<E> {
    /// Graph that records backward rules.
    pub fn new() -> Self {
        Self::with_grad(true)
    }

    /// Graph for pure evaluation: no tape, intermediate values are freed as
    /// soon as their handles drop.
    pub fn inference() -> Self {
        Self::with_grad(false)
    }

    fn with_grad(grad_enabled: bool) -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grad_enabled,
            region: Cell::new(DEFAULT_REGION),
            op_counts: RefCell::new(BTreeMap::new()),
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    /// Leaf that receives a gradient (when the graph records one).
    pub fn leaf(&self, value: Tensor<E>) -> Var<'_, E> {
        let node = if self.grad_enabled {
            let mut nodes = self.nodes.borrow_mut();
            nodes.push(Node {
                parents: Vec::new(),
                backward: None,
            });
            Some(nodes.len() - 1)
        } else {
            None
        };
        Var {
            graph: self,
            value: Rc::new(value),
            node,
        }
    }

    /// Value that never receives a gradient.
    pub fn constant(&self, value: Tensor<E>) -> Var<'_, E> {
        Var {
            graph: self,
            value: Rc::new(value),
            node: None,
        }
    }

    /// Attributes subsequently recorded ops to `region` until the guard drops.
    pub fn enter_region(&self, region: &'static str) -> RegionGuard<'_, E> {
        let previous = self.region.replace(region);
        RegionGuard {
            graph: self,
            previous,
        }
    }

    /// Number of ops evaluated while `region` was active.
    pub fn op_count(&self, region: &str) -> u64 {
        self.op_counts.borrow().get(region).copied().unwrap_or(0)
    }

    pub fn total_ops(&self) -> u64 {
        self.op_counts.borrow().values().sum()
    }

    pub fn op_counts(&self) -> BTreeMap<&'static str, u64> {
        self.op_counts.borrow().clone()
    }

    /// Records an op whose output is `value`.
    ///
    /// `backward` is kept only when gradients are enabled and at least one
    /// input is on the tape.
    pub fn record<F>(&self, value: Tensor<E>, inputs: &[&Var<'_, E>], backward: F) -> Var<'_, E>
    where
        F: Fn(&Tensor<E>, &[bool]) -> Vec<Option<Tensor<E>>> + 'static,
    {
        *self
            .op_counts
            .borrow_mut()
            .entry(self.region.get())
            .or_insert(0) += 1;
        let parents: Vec<Option<usize>> = inputs.iter().map(|v| v.node).collect();
        let node = if self.grad_enabled && parents.iter().any(Option::is_some) {
            let mut nodes = self.nodes.borrow_mut();
            nodes.push(Node {
                parents,
                backward: Some(Box::new(backward)),
            });
            Some(nodes.len() - 1)
        } else {
            None
        };
        Var {
            graph: self,
            value: Rc::new(value),
            node,
        }
    }

    /// Reverse pass from a single-element output.
    pub fn backward(&self, output: &Var<'_, E>) -> Gradients<E> {
        assert_eq!(
            output.value.numel(),
            1,
            "backward() needs a scalar output, got shape {:?}",
            output.value.shape()
        );
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor<E>>> = (0..nodes.len()).map(|_| None).collect();
        let Some(root) = output.node else {
            return Gradients { grads };
        };
        grads[root] = Some(Tensor::full(output.value.shape(), E::ONE));

        for id in (0..=root).rev() {
            let node = &nodes[id];
            let Some(backward) = &node.backward else {
                continue;
            };
            let Some(upstream) = grads[id].take() else {
                continue;
            };
            let mask: Vec<bool> = node.parents.iter().map(Option::is_some).collect();
            let parent_grads = backward(&upstream, &mask);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (parent, grad) in node.parents.iter().zip(parent_grads) {
                let (Some(p), Some(g)) = (parent, grad) else {
                    continue;
                };
                match &mut grads[*p] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Gradients { grads }
    }
}

impl<E: Real> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'g, E: Real> Var<'g, E> {
    pub fn value(&self) -> &Tensor<E> {
        &self.value
    }

    pub fn value_rc(&self) -> Rc<Tensor<E>> {
        Rc::clone(&self.value)
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn graph(&self) -> &'g Graph<E> {
        self.graph
    }

    /// Whether this value is on the tape.
    pub fn tracked(&self) -> bool {
        self.node.is_some()
    }

    pub fn item(&self) -> E {
        self.value.item()
    }

    /// Same value, cut from the tape.
    pub fn detach(&self) -> Var<'g, E> {
        Var {
            graph: self.graph,
            value: Rc::clone(&self.value),
            node: None,
        }
    }
}

impl<E: Real> Gradients<E> {
    pub fn get(&self, var: &Var<'_, E>) -> Option<&Tensor<E>> {
        var.node.and_then(|id| self.grads.get(id)?.as_ref())
    }

    /// Gradient of `var`, zeros when it did not influence the output.
    pub fn get_or_zeros(&self, var: &Var<'_, E>) -> Tensor<E> {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.shape()))
    }
}
