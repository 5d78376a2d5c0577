//! Reverse-mode automatic differentiation over `f64` arrays.
//!
//! Each forward pass builds a fresh DAG of reference-counted nodes; calling
//! [`Tensor::backward`] on a scalar walks it in reverse topological order.
//! Parameters are long-lived leaf tensors whose values the optimizer mutates
//! in place between steps. Everything is single-threaded and evaluated in a
//! fixed order, so repeated runs are bit-identical.

use std::cell::{Cell, RefCell};
use std::collections::HashSet;
use std::rc::Rc;

use ndarray::{ArrayD, IxDyn};

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn fresh_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Gradient contributions for each parent, in parent order. `None` marks a
/// parent that receives no gradient (e.g. constant inputs).
pub type BackwardFn = Box<dyn Fn(&ArrayD<f64>) -> Vec<Option<ArrayD<f64>>>>;

struct Inner {
    id: u64,
    value: RefCell<ArrayD<f64>>,
    grad: RefCell<Option<ArrayD<f64>>>,
    requires_grad: bool,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

/// A node in the autodiff graph.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

impl Tensor {
    /// Trainable leaf.
    pub fn param(value: ArrayD<f64>) -> Self {
        Self::leaf(value, true)
    }

    /// Non-trainable leaf (inputs, targets, masks).
    pub fn constant(value: ArrayD<f64>) -> Self {
        Self::leaf(value, false)
    }

    fn leaf(value: ArrayD<f64>, requires_grad: bool) -> Self {
        Tensor {
            inner: Rc::new(Inner {
                id: fresh_id(),
                value: RefCell::new(value),
                grad: RefCell::new(None),
                requires_grad,
                parents: Vec::new(),
                backward: None,
            }),
        }
    }

    /// Interior node produced by an op.
    pub fn from_op(value: ArrayD<f64>, parents: Vec<Tensor>, backward: BackwardFn) -> Self {
        let requires_grad = parents.iter().any(|p| p.inner.requires_grad);
        Tensor {
            inner: Rc::new(Inner {
                id: fresh_id(),
                value: RefCell::new(value),
                grad: RefCell::new(None),
                requires_grad,
                parents,
                backward: Some(backward),
            }),
        }
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn value(&self) -> std::cell::Ref<'_, ArrayD<f64>> {
        self.inner.value.borrow()
    }

    pub fn to_array(&self) -> ArrayD<f64> {
        self.inner.value.borrow().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.value.borrow().shape().to_vec()
    }

    /// Scalar value of a one-element tensor.
    pub fn scalar(&self) -> f64 {
        let v = self.inner.value.borrow();
        assert_eq!(v.len(), 1, "scalar() on non-scalar tensor");
        *v.iter().next().unwrap()
    }

    /// Replace a leaf's value in place (optimizer updates, checkpoint load).
    pub fn set_value(&self, value: ArrayD<f64>) {
        assert_eq!(
            self.inner.value.borrow().shape(),
            value.shape(),
            "set_value must preserve shape"
        );
        *self.inner.value.borrow_mut() = value;
    }

    /// In-place elementwise update of a leaf value.
    pub fn update_value(&self, f: impl FnMut(&mut f64)) {
        let mut v = self.inner.value.borrow_mut();
        v.iter_mut().for_each(f);
    }

    pub fn grad(&self) -> Option<ArrayD<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    fn accumulate_grad(&self, g: ArrayD<f64>) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => *acc += &g,
            None => *slot = Some(g),
        }
    }

    /// Backpropagate from this scalar; gradients accumulate on every
    /// reachable tensor that requires grad.
    pub fn backward(&self) {
        assert_eq!(
            self.inner.value.borrow().len(),
            1,
            "backward() starts from a scalar loss"
        );
        let order = self.topo_order();
        self.accumulate_grad(ArrayD::ones(IxDyn(&[1])));

        for node in order.iter().rev() {
            let Some(backward) = &node.inner.backward else {
                continue;
            };
            let grad = {
                let slot = node.inner.grad.borrow();
                match slot.as_ref() {
                    Some(g) => g.clone(),
                    None => continue, // no gradient reached this node
                }
            };
            let parent_grads = backward(&grad);
            debug_assert_eq!(parent_grads.len(), node.inner.parents.len());
            for (parent, pg) in node.inner.parents.iter().zip(parent_grads) {
                if let Some(pg) = pg {
                    if parent.inner.requires_grad {
                        debug_assert_eq!(
                            pg.shape(),
                            parent.inner.value.borrow().shape(),
                            "gradient shape mismatch"
                        );
                        parent.accumulate_grad(pg);
                    }
                }
            }
            // Interior gradients are no longer needed.
            *node.inner.grad.borrow_mut() = None;
        }
    }

    /// Post-order DFS over grad-requiring nodes.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        // Iterative DFS; stack entries are (node, child cursor).
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.inner.id);
        while let Some((node, cursor)) = stack.pop() {
            if cursor < node.inner.parents.len() {
                let child = node.inner.parents[cursor].clone();
                stack.push((node, cursor + 1));
                if child.inner.requires_grad && visited.insert(child.inner.id) {
                    stack.push((child, 0));
                }
            } else {
                order.push(node);
            }
        }
        order
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.value.borrow().shape())
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}
