use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::{Real, Tensor};
use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

/// Maps the output gradient (plus a "needs gradient" flag per parent) to one
/// optional gradient per parent, in parent order.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>> + Send + Sync>;

struct Node<T: Real> {
    // Creation order; a node's id is always larger than its parents' ids, so
    // descending id order is a valid reverse topological order.
    id: u64,
    parents: Vec<Var<T>>,
    backward: Option<BackwardFn<T>>,
}

/// A tensor value participating in (possibly) differentiable computation.
#[derive(Clone)]
pub struct Var<T: Real> {
    value: Arc<Tensor<T>>,
    node: Option<Arc<Node<T>>>,
}

impl<T: Real> fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var").field("shape", &self.value.shape()).field("requires_grad", &self.requires_grad()).finish()
    }
}

impl<T: Real> Var<T> {
    /// A value that never receives a gradient.
    pub fn constant(value: Tensor<T>) -> Self {
        Var { value: Arc::new(value), node: None }
    }

    /// A leaf that accumulates a gradient on [`Var::backward`].
    pub fn leaf(value: Tensor<T>) -> Self {
        let id = NEXT_ID.fetch_add(1, Ordering::Relaxed);
        Var { value: Arc::new(value), node: Some(Arc::new(Node { id, parents: Vec::new(), backward: None })) }
    }

    pub(crate) fn from_op<F>(value: Tensor<T>, parents: &[&Var<T>], backward: F) -> Self
    where
        F: Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>> + Send + Sync + 'static,
    {
        debug_assert!(value.is_finite() || parents.iter().any(|p| !p.value.is_finite()));
        if !parents.iter().any(|p| p.requires_grad()) {
            return Var::constant(value);
        }
        let id = NEXT_ID.fetch_add(1, Ordering::Relaxed);
        Var {
            value: Arc::new(value),
            node: Some(Arc::new(Node {
                id,
                parents: parents.iter().map(|&p| p.clone()).collect(),
                backward: Some(Box::new(backward)),
            })),
        }
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub(crate) fn value_arc(&self) -> Arc<Tensor<T>> {
        Arc::clone(&self.value)
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Self {
        Var { value: Arc::clone(&self.value), node: None }
    }

    pub(crate) fn id(&self) -> Option<u64> {
        self.node.as_ref().map(|n| n.id)
    }

    /// Reverse-mode sweep from a scalar. Returns the gradient of every leaf
    /// reachable from `self`.
    pub fn backward(&self) -> Result<Gradients<T>> {
        if self.value.len() != 1 {
            return Err(Error::Usage(format!("backward() needs a scalar loss, got shape {:?}", self.value.shape())));
        }
        let root = self
            .node
            .as_ref()
            .ok_or_else(|| Error::Usage("loss is not connected to any leaf that requires a gradient".into()))?;

        let mut tape: BTreeMap<u64, Arc<Node<T>>> = BTreeMap::new();
        let mut stack = vec![Arc::clone(root)];
        while let Some(node) = stack.pop() {
            if tape.contains_key(&node.id) {
                continue;
            }
            for p in &node.parents {
                if let Some(pn) = &p.node {
                    if !tape.contains_key(&pn.id) {
                        stack.push(Arc::clone(pn));
                    }
                }
            }
            tape.insert(node.id, node);
        }

        let mut grads: HashMap<u64, Tensor<T>> = HashMap::new();
        grads.insert(root.id, Tensor::full(self.value.shape(), T::one()));
        let mut leaves = HashMap::new();
        for (id, node) in tape.iter().rev() {
            let Some(backward) = &node.backward else {
                if let Some(g) = grads.remove(id) {
                    leaves.insert(*id, g);
                }
                continue;
            };
            let Some(g) = grads.remove(id) else { continue };
            let needs: Vec<bool> = node.parents.iter().map(Var::requires_grad).collect();
            let parent_grads = backward(&g, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (parent, pg) in node.parents.iter().zip(parent_grads) {
                let (Some(pn), Some(pg)) = (&parent.node, pg) else { continue };
                debug_assert_eq!(pg.shape(), parent.shape());
                match grads.get_mut(&pn.id) {
                    Some(acc) => acc.add_assign(&pg),
                    None => {
                        grads.insert(pn.id, pg);
                    }
                }
            }
        }
        Ok(Gradients { grads: leaves })
    }
}

/// Leaf gradients produced by one backward pass.
#[derive(Debug, Default)]
pub struct Gradients<T> {
    grads: HashMap<u64, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: &Var<T>) -> Option<&Tensor<T>> {
        v.id().and_then(|id| self.grads.get(&id))
    }

    /// Gradient of `v`, or zeros when `v` did not influence the loss.
    pub fn get_or_zeros(&self, v: &Var<T>) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(v.shape()))
    }
}
