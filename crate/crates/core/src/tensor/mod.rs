//! Reverse-mode automatic differentiation over `f64` ndarrays.
//!
//! The graph is a dynamic tape: every operation produces a new [`Tensor`]
//! holding its result plus a backward closure that scatters the incoming
//! gradient to the operation's parents. Calling [`Tensor::backward`] on a
//! scalar walks the tape in reverse topological order and accumulates
//! gradients into every reachable node that needs them.
//!
//! Everything is `f64` and single-threaded: two identical forward passes
//! produce bit-identical outputs, which the training/eval determinism
//! contracts rely on.

mod conv;
mod ops;

pub use conv::{avg_pool2, conv2d, conv_transpose2d, resize_bilinear};
pub use ops::concat;

use ndarray::{ArrayD, IxDyn};
use std::cell::RefCell;
use std::collections::HashSet;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

type BackwardFn = Box<dyn Fn(&ArrayD<f64>, &[Tensor])>;

pub(crate) struct Inner {
    id: u64,
    pub(crate) data: ArrayD<f64>,
    pub(crate) grad: Option<ArrayD<f64>>,
    needs_grad: bool,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

/// A node in the autodiff tape. Cloning is shallow (shared storage).
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<RefCell<Inner>>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.inner.borrow();
        f.debug_struct("Tensor")
            .field("id", &inner.id)
            .field("shape", &inner.data.shape())
            .field("needs_grad", &inner.needs_grad)
            .finish()
    }
}

impl Tensor {
    fn from_inner(inner: Inner) -> Tensor {
        Tensor {
            inner: Rc::new(RefCell::new(inner)),
        }
    }

    /// Constant leaf: participates in forward math, receives no gradient.
    pub fn constant(data: ArrayD<f64>) -> Tensor {
        Tensor::from_inner(Inner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            data,
            grad: None,
            needs_grad: false,
            parents: Vec::new(),
            backward: None,
        })
    }

    /// Leaf that accumulates gradient (parameters, probe inputs).
    pub fn param(data: ArrayD<f64>) -> Tensor {
        Tensor::from_inner(Inner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            data,
            grad: None,
            needs_grad: true,
            parents: Vec::new(),
            backward: None,
        })
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::constant(ArrayD::zeros(IxDyn(shape)))
    }

    pub(crate) fn from_op(
        data: ArrayD<f64>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Tensor {
        let needs_grad = parents.iter().any(Tensor::needs_grad);
        if !needs_grad {
            return Tensor::constant(data);
        }
        Tensor::from_inner(Inner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            data,
            grad: None,
            needs_grad: true,
            parents,
            backward: Some(backward),
        })
    }

    pub fn id(&self) -> u64 {
        self.inner.borrow().id
    }

    pub fn needs_grad(&self) -> bool {
        self.inner.borrow().needs_grad
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().data.shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().data.len()
    }

    /// Clone of the underlying array.
    pub fn array(&self) -> ArrayD<f64> {
        self.inner.borrow().data.clone()
    }

    /// Scalar value (panics on non-scalar tensors).
    pub fn item(&self) -> f64 {
        let inner = self.inner.borrow();
        assert!(
            inner.data.len() == 1,
            "item() on tensor with {} elements",
            inner.data.len()
        );
        *inner.data.iter().next().unwrap()
    }

    /// Clone of the accumulated gradient, if any.
    pub fn grad(&self) -> Option<ArrayD<f64>> {
        self.inner.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    /// Replace the stored values (optimizer updates, test probes).
    pub fn set_data(&self, data: ArrayD<f64>) {
        let mut inner = self.inner.borrow_mut();
        assert_eq!(
            inner.data.shape(),
            data.shape(),
            "set_data shape mismatch"
        );
        inner.data = data;
    }

    /// Mutate the stored values in place.
    pub fn update_data(&self, f: impl FnOnce(&mut ArrayD<f64>)) {
        f(&mut self.inner.borrow_mut().data)
    }

    /// New constant leaf sharing this tensor's current values; gradient
    /// does not flow through it.
    pub fn detach(&self) -> Tensor {
        Tensor::constant(self.array())
    }

    pub fn all_finite(&self) -> bool {
        self.inner.borrow().data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn accumulate(&self, g: ArrayD<f64>) {
        let mut inner = self.inner.borrow_mut();
        if !inner.needs_grad {
            return;
        }
        debug_assert_eq!(inner.data.shape(), g.shape(), "gradient shape mismatch");
        match inner.grad.as_mut() {
            Some(existing) => *existing += &g,
            None => inner.grad = Some(g),
        }
    }

    fn parent_handles(&self) -> Vec<Tensor> {
        self.inner.borrow().parents.clone()
    }

    /// Reverse-mode sweep from a scalar. Gradients accumulate into every
    /// reachable leaf with `needs_grad`. Consumes the tape (each op's
    /// closure runs once).
    pub fn backward(&self) {
        assert!(
            self.numel() == 1,
            "backward() requires a scalar, got shape {:?}",
            self.shape()
        );
        let order = topo_order(self);
        {
            let mut inner = self.inner.borrow_mut();
            let ones = ArrayD::from_elem(inner.data.raw_dim(), 1.0);
            match inner.grad.as_mut() {
                Some(g) => *g += &ones,
                None => inner.grad = Some(ones),
            }
        }
        for node in order.iter().rev() {
            let (bw, grad, parents) = {
                let mut inner = node.inner.borrow_mut();
                (
                    inner.backward.take(),
                    inner.grad.clone(),
                    std::mem::take(&mut inner.parents),
                )
            };
            if let (Some(bw), Some(g)) = (bw, grad) {
                bw(&g, &parents);
            }
        }
    }
}

fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut visited: HashSet<u64> = HashSet::new();
    let mut order: Vec<Tensor> = Vec::new();
    let mut stack: Vec<(Tensor, bool)> = vec![(root.clone(), false)];
    while let Some((node, processed)) = stack.pop() {
        if processed {
            order.push(node);
            continue;
        }
        if !visited.insert(node.id()) {
            continue;
        }
        stack.push((node.clone(), true));
        for p in node.parent_handles() {
            if !visited.contains(&p.id()) {
                stack.push((p, false));
            }
        }
    }
    order
}

/// Sum a gradient down to `target` shape, undoing numpy-style broadcasting.
pub(crate) fn reduce_to_shape(g: &ArrayD<f64>, target: &[usize]) -> ArrayD<f64> {
    let mut out = g.clone();
    while out.ndim() > target.len() {
        out = out.sum_axis(ndarray::Axis(0));
    }
    for (ax, (&have, &want)) in out
        .shape()
        .to_vec()
        .iter()
        .zip(target.iter())
        .enumerate()
    {
        if want == 1 && have != 1 {
            out = out
                .sum_axis(ndarray::Axis(ax))
                .insert_axis(ndarray::Axis(ax));
        }
    }
    out
}

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    let mut out = vec![0usize; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        assert!(
            da == db || da == 1 || db == 1,
            "incompatible broadcast shapes {a:?} vs {b:?}"
        );
        out[i] = da.max(db);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    #[test]
    fn backward_accumulates_through_shared_node() {
        // y = x * x + x  =>  dy/dx = 2x + 1
        let x = Tensor::param(ArrayD::from_elem(IxDyn(&[]), 3.0));
        let y = x.mul(&x).add(&x);
        y.backward();
        let g = x.grad().unwrap();
        assert_eq!(g[IxDyn(&[])], 7.0);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let x = Tensor::param(ArrayD::from_elem(IxDyn(&[]), 2.0));
        let c = Tensor::scalar(5.0);
        let y = x.mul(&c);
        y.backward();
        assert!(c.grad().is_none());
        assert_eq!(x.grad().unwrap()[IxDyn(&[])], 5.0);
    }

    #[test]
    fn reduce_to_shape_sums_broadcast_axes() {
        let g = ArrayD::from_elem(IxDyn(&[3, 4]), 1.0);
        let r = reduce_to_shape(&g, &[4]);
        assert_eq!(r.shape(), &[4]);
        assert_eq!(r[IxDyn(&[0])], 3.0);
        let r2 = reduce_to_shape(&g, &[3, 1]);
        assert_eq!(r2.shape(), &[3, 1]);
        assert_eq!(r2[IxDyn(&[0, 0])], 4.0);
    }
}
