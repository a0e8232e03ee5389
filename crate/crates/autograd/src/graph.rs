use std::cell::{Cell, RefCell};
use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::hash::{Hash, Hasher};
use std::rc::Rc;

use crate::{Mat, Real};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) type BackwardFn<T> = Box<dyn Fn(&Mat<T>, &mut GradSink<T>)>;

struct Node<T> {
    value: Rc<Mat<T>>,
    requires_grad: bool,
    backward: Option<BackwardFn<T>>,
}

/// Reverse-mode tape. One graph per forward pass; it is not `Sync`, so
/// concurrent forwards each build their own graph over shared parameters.
pub struct Graph<T> {
    nodes: RefCell<Vec<Node<T>>>,
    params: RefCell<HashMap<usize, Var>>,
    kink_hash: Cell<u64>,
    kink_events: Cell<usize>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(HashMap::new()),
            kink_hash: Cell::new(0),
            kink_events: Cell::new(0),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Non-differentiable input.
    pub fn constant(&self, value: Mat<T>) -> Var {
        self.push_leaf(value, false)
    }

    /// Differentiable leaf that is not tied to a parameter id.
    pub fn leaf(&self, value: Mat<T>) -> Var {
        self.push_leaf(value, true)
    }

    /// Leaf bound to parameter `id`. Repeated calls with the same id return
    /// the same node so gradients accumulate in one place.
    pub fn param(&self, id: usize, value: &Mat<T>, trainable: bool) -> Var {
        if let Some(&v) = self.params.borrow().get(&id) {
            return v;
        }
        let v = self.push_leaf(value.clone(), trainable);
        self.params.borrow_mut().insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> Rc<Mat<T>> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes.borrow()[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Fingerprint of every piecewise branch taken so far (ReLU signs,
    /// active clamps). Two evaluations with equal fingerprints lie on the
    /// same smooth piece of the function.
    pub fn kink_signature(&self) -> u64 {
        self.kink_hash.get()
    }

    /// Number of elements that sat exactly on a kink (ReLU input of zero,
    /// saturated clamp).
    pub fn kink_events(&self) -> usize {
        self.kink_events.get()
    }

    pub(crate) fn record_branches(&self, pattern: impl Hash, on_kink: usize) {
        let mut h = DefaultHasher::new();
        self.kink_hash.get().hash(&mut h);
        pattern.hash(&mut h);
        self.kink_hash.set(h.finish());
        self.kink_events.set(self.kink_events.get() + on_kink);
    }

    fn push_leaf(&self, value: Mat<T>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            requires_grad,
            backward: None,
        });
        Var(nodes.len() - 1)
    }

    /// Appends an op result. `backward` is dropped when no parent needs
    /// a gradient.
    pub(crate) fn push_op(
        &self,
        value: Mat<T>,
        parents: &[Var],
        backward: impl Fn(&Mat<T>, &mut GradSink<T>) + 'static,
    ) -> Var {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.0].requires_grad)
        };
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            requires_grad,
            backward: if requires_grad {
                Some(Box::new(backward))
            } else {
                None
            },
        });
        Var(nodes.len() - 1)
    }

    /// Backpropagates from a `1 x 1` node.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[loss.0].value.shape(),
            (1, 1),
            "backward() needs a scalar loss"
        );
        let mut sink = GradSink {
            grads: (0..nodes.len()).map(|_| None).collect(),
            shapes: nodes.iter().map(|n| n.value.shape()).collect(),
            requires: nodes.iter().map(|n| n.requires_grad).collect(),
        };
        if nodes[loss.0].requires_grad {
            sink.grads[loss.0] = Some(Mat::scalar(T::one()));
        }
        for i in (0..=loss.0).rev() {
            let Some(grad) = sink.grads[i].take() else {
                continue;
            };
            match &nodes[i].backward {
                Some(f) => f(&grad, &mut sink),
                None => sink.grads[i] = Some(grad),
            }
        }
        let params = self
            .params
            .borrow()
            .iter()
            .filter_map(|(&id, v)| sink.grads[v.0].take().map(|g| (id, g)))
            .collect();
        Gradients { params }
    }
}

/// Gradient accumulator handed to backward closures.
pub struct GradSink<T> {
    grads: Vec<Option<Mat<T>>>,
    shapes: Vec<(usize, usize)>,
    requires: Vec<bool>,
}

impl<T: Real> GradSink<T> {
    /// Zero-initialised gradient buffer for `v`, or `None` when `v` does not
    /// need a gradient.
    pub fn slot(&mut self, v: Var) -> Option<&mut Mat<T>> {
        if !self.requires[v.0] {
            return None;
        }
        let (r, c) = self.shapes[v.0];
        Some(self.grads[v.0].get_or_insert_with(|| Mat::zeros(r, c)))
    }

    pub fn wants(&self, v: Var) -> bool {
        self.requires[v.0]
    }
}

/// Parameter gradients keyed by the id passed to [`Graph::param`].
#[derive(Debug, Default)]
pub struct Gradients<T> {
    params: HashMap<usize, Mat<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, id: usize) -> Option<&Mat<T>> {
        self.params.get(&id)
    }

    pub fn take(&mut self, id: usize) -> Option<Mat<T>> {
        self.params.remove(&id)
    }

    pub fn ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.params.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }
}
