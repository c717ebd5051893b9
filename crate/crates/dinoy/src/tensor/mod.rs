//! Reverse-mode automatic differentiation over `ndarray` buffers.
//!
//! A [`Tape`] records one forward computation; [`Tensor`] is a cheap handle
//! into it. Calling [`Tape::backward`] on a scalar node walks the tape in
//! reverse and returns per-node gradients. Tapes are single-threaded and
//! short-lived: one per forward pass.
//!
//! Nodes only record a backward closure when some ancestor requires a
//! gradient, so forwards through frozen parameters cost no tape memory.

mod ops;
mod sampling;

pub mod gradcheck;

pub use sampling::{bilinear_at, resize_bilinear_arr};

use std::cell::RefCell;
use std::sync::Arc;

use ndarray::{ArrayD, IxDyn};

/// Dynamic-rank f32 array, the only element type the engine supports.
pub type Arr = ArrayD<f32>;

pub(crate) type BackwardFn = Box<dyn Fn(&Arr) -> Vec<Arr>>;

pub(crate) struct Node {
    pub value: Arc<Arr>,
    pub requires_grad: bool,
    pub parents: Vec<usize>,
    pub backward: Option<BackwardFn>,
}

/// Wengert list holding one forward pass.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    recording: bool,
}

impl Tape {
    /// A tape that records backward closures for gradient-requiring nodes.
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            recording: true,
        }
    }

    /// A tape that never records backward closures (inference mode).
    pub fn no_grad() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Insert a gradient-requiring leaf (a trainable parameter or test input).
    pub fn leaf(&self, value: Arr) -> Tensor<'_> {
        self.insert(value, self.recording, Vec::new(), None)
    }

    /// Insert a constant; no gradient will flow into or through it alone.
    pub fn constant(&self, value: Arr) -> Tensor<'_> {
        self.insert(value, false, Vec::new(), None)
    }

    /// Convenience scalar constant (0-d).
    pub fn scalar(&self, v: f32) -> Tensor<'_> {
        self.constant(Arr::from_elem(IxDyn(&[]), v))
    }

    pub(crate) fn insert(
        &self,
        value: Arr,
        requires_grad: bool,
        parents: Vec<usize>,
        backward: Option<BackwardFn>,
    ) -> Tensor<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value: Arc::new(value),
            requires_grad,
            parents,
            backward,
        });
        Tensor { tape: self, id }
    }

    /// Record an op. The backward closure is dropped when no parent needs it.
    pub(crate) fn op(&self, value: Arr, parents: Vec<usize>, backward: BackwardFn) -> Tensor<'_> {
        let requires = self.recording && {
            let nodes = self.nodes.borrow();
            parents.iter().any(|&p| nodes[p].requires_grad)
        };
        if requires {
            self.insert(value, true, parents, Some(backward))
        } else {
            self.insert(value, false, Vec::new(), None)
        }
    }

    pub(crate) fn value_of(&self, id: usize) -> Arc<Arr> {
        self.nodes.borrow()[id].value.clone()
    }

    /// Reverse sweep from a scalar root. Returns per-node gradients for every
    /// node on a path between the root and a gradient-requiring leaf.
    pub fn backward(&self, root: Tensor<'_>) -> Grads {
        assert!(
            std::ptr::eq(root.tape, self),
            "backward called with a tensor from another tape"
        );
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[root.id].value.len(),
            1,
            "backward root must be a scalar"
        );
        let mut grads: Vec<Option<Arr>> = vec![None; nodes.len()];
        grads[root.id] = Some(Arr::from_elem(nodes[root.id].value.raw_dim(), 1.0));

        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let contributions = backward(&grad);
            debug_assert_eq!(contributions.len(), node.parents.len());
            for (&pid, contrib) in node.parents.iter().zip(contributions) {
                if !nodes[pid].requires_grad {
                    continue;
                }
                match &mut grads[pid] {
                    Some(acc) => *acc += &contrib,
                    slot => *slot = Some(contrib),
                }
            }
            if node.requires_grad && !node.parents.is_empty() {
                // interior node: gradient no longer needed
                grads[id] = None;
            } else {
                grads[id] = Some(grad);
            }
        }
        Grads { grads }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

/// Gradients produced by one backward sweep.
pub struct Grads {
    grads: Vec<Option<Arr>>,
}

impl Grads {
    pub fn get(&self, t: Tensor<'_>) -> Option<&Arr> {
        self.grads.get(t.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, t: Tensor<'_>) -> Option<Arr> {
        self.grads.get_mut(t.id).and_then(|g| g.take())
    }
}

/// Handle to one tape node.
#[derive(Clone, Copy)]
pub struct Tensor<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
}

impl<'t> Tensor<'t> {
    pub fn value(&self) -> Arc<Arr> {
        self.tape.value_of(self.id)
    }

    /// Clone of the underlying buffer.
    pub fn to_arr(&self) -> Arr {
        (*self.value()).clone()
    }

    pub fn dims(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn len(&self) -> usize {
        self.value().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Extract a scalar value; panics if the tensor has more than one element.
    pub fn scalar(&self) -> f32 {
        let v = self.value();
        assert_eq!(v.len(), 1, "scalar() on non-scalar tensor");
        *v.iter().next().unwrap()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub(crate) fn same_tape(&self, other: &Tensor<'t>) -> bool {
        std::ptr::eq(self.tape, other.tape)
    }

    /// Re-insert the current value as a constant, cutting the gradient path.
    pub fn detach(&self) -> Tensor<'t> {
        self.tape.constant(self.to_arr())
    }
}
