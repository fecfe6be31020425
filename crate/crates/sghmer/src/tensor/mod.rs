//! Minimal reverse-mode autodiff engine.
//!
//! A [`Tensor`] is a cheap handle (reference-counted) to an n-dimensional
//! array of `R` values plus an optional record of the primitive that
//! produced it. Calling [`Tensor::backward`] on a scalar walks the recorded
//! graph in reverse topological order and accumulates gradients into every
//! tensor that requires them. Gradients accumulate additively across
//! `backward` calls until [`Tensor::zero_grad`] is called.
//!
//! Two numeric profiles are supported through the [`Real`] parameter:
//! `f64` for gradient checking and oracle tests, `f32` for training. A
//! graph is homogeneous in its scalar type; the profile is picked by the
//! caller that builds the graph, never per tensor.

pub mod gradcheck;
pub mod layers;
pub mod ops;
pub mod params;

use std::cell::{Ref, RefCell, RefMut};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

use num_traits::Float;

use crate::error::{Error, Result};

/// Scalar type a graph can be built over. Implemented for `f32` and `f64`.
pub trait Real:
    Float
    + num_traits::NumAssignOps
    + std::iter::Sum
    + fmt::Display
    + fmt::Debug
    + Send
    + Sync
    + 'static
{
}

impl Real for f32 {}
impl Real for f64 {}

/// Shorthand conversion from an `f64` literal into the graph scalar type.
#[inline]
pub fn r<R: Real>(x: f64) -> R {
    R::from(x).expect("f64 -> Real conversion")
}

/// Batch-statistics vs running-statistics switch for normalization layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

thread_local! {
    static NO_GRAD: std::cell::Cell<bool> = const { std::cell::Cell::new(false) };
}

/// Runs `f` without recording backward nodes; inference avoids paying for
/// graph bookkeeping.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    let prev = NO_GRAD.with(|c| c.replace(true));
    let out = f();
    NO_GRAD.with(|c| c.set(prev));
    out
}

fn grad_enabled() -> bool {
    NO_GRAD.with(|c| !c.get())
}

pub(crate) struct InputView<'a, R: Real> {
    pub values: &'a [R],
}

pub(crate) struct BackwardArgs<'a, R: Real> {
    pub out_values: &'a [R],
    pub out_grad: &'a [R],
    pub inputs: &'a [InputView<'a, R>],
}

/// Per-input gradient contributions; `None` marks an input that does not
/// participate in differentiation (e.g. an integer id list baked into the op).
type BackFn<R> = Box<dyn Fn(&BackwardArgs<'_, R>) -> Vec<Option<Vec<R>>>>;

pub(crate) struct Node<R: Real> {
    inputs: Vec<Tensor<R>>,
    backward: BackFn<R>,
}

pub(crate) struct TensorData<R: Real> {
    shape: Vec<usize>,
    values: Vec<R>,
    grad: Option<Vec<R>>,
    requires_grad: bool,
    node: Option<Node<R>>,
}

/// Handle to a node of the differentiation graph. Cloning is cheap and
/// aliases the same storage.
pub struct Tensor<R: Real>(Rc<RefCell<TensorData<R>>>);

impl<R: Real> Clone for Tensor<R> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl<R: Real> fmt::Debug for Tensor<R> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let d = self.0.borrow();
        write!(
            f,
            "Tensor(shape={:?}, requires_grad={}, leaf={})",
            d.shape,
            d.requires_grad,
            d.node.is_none()
        )
    }
}

impl<R: Real> Tensor<R> {
    fn from_data(data: TensorData<R>) -> Self {
        Tensor(Rc::new(RefCell::new(data)))
    }

    /// Leaf tensor from explicit shape and values. Does not require gradients.
    pub fn from_vec(shape: &[usize], values: Vec<R>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::Shape(format!("zero extent in shape {shape:?}")));
        }
        if values.len() != numel {
            return Err(Error::Shape(format!(
                "shape {shape:?} expects {numel} values, got {}",
                values.len()
            )));
        }
        Ok(Tensor::from_data(TensorData {
            shape: shape.to_vec(),
            values,
            grad: None,
            requires_grad: false,
            node: None,
        }))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor::from_vec(shape, vec![R::zero(); numel]).expect("zeros")
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let numel = shape.iter().product();
        Tensor::from_vec(shape, vec![r(v); numel]).expect("full")
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::from_vec(&[1], vec![r(v)]).expect("scalar")
    }

    /// Marks a leaf as requiring gradients (parameters). Panics on non-leaves.
    pub fn requiring_grad(self) -> Self {
        {
            let mut d = self.0.borrow_mut();
            assert!(d.node.is_none(), "only leaves can toggle requires_grad");
            d.requires_grad = true;
        }
        self
    }

    pub(crate) fn data(&self) -> Ref<'_, TensorData<R>> {
        self.0.borrow()
    }

    pub(crate) fn data_mut(&self) -> RefMut<'_, TensorData<R>> {
        self.0.borrow_mut()
    }

    fn ptr_id(&self) -> usize {
        Rc::as_ptr(&self.0) as usize
    }

    pub fn shape(&self) -> Vec<usize> {
        self.0.borrow().shape.clone()
    }

    pub fn rank(&self) -> usize {
        self.0.borrow().shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.borrow().values.len()
    }

    pub fn values(&self) -> Ref<'_, [R]> {
        Ref::map(self.0.borrow(), |d| d.values.as_slice())
    }

    pub fn to_vec(&self) -> Vec<R> {
        self.0.borrow().values.clone()
    }

    /// Scalar extraction; panics if the tensor is not a single element.
    pub fn item(&self) -> R {
        let d = self.0.borrow();
        assert_eq!(d.values.len(), 1, "item() on non-scalar tensor");
        d.values[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.0.borrow().requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.borrow().node.is_none()
    }

    pub fn grad(&self) -> Option<Vec<R>> {
        self.0.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.0.borrow_mut().grad = None;
    }

    pub fn all_finite(&self) -> bool {
        self.0.borrow().values.iter().all(|v| v.is_finite())
    }

    /// Overwrites the stored values in place. Shape stays fixed.
    pub fn set_values(&self, values: &[R]) -> Result<()> {
        let mut d = self.0.borrow_mut();
        if values.len() != d.values.len() {
            return Err(Error::Shape(format!(
                "set_values: expected {} values, got {}",
                d.values.len(),
                values.len()
            )));
        }
        d.values.copy_from_slice(values);
        Ok(())
    }

    /// In-place update of values given the slice, used by optimizers.
    pub fn update_values<F: FnOnce(&mut [R])>(&self, f: F) {
        f(&mut self.0.borrow_mut().values);
    }

    /// Accumulates `dL/dself` into `grad` of every requires-grad tensor
    /// reachable from `self`. Repeated calls add up.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Invalid(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        let order = self.topo_order();
        // In-flight gradients for this pass; folded into persistent `grad`
        // tensor by tensor so earlier passes keep accumulating.
        let mut scratch: HashMap<usize, Vec<R>> = HashMap::new();
        scratch.insert(self.ptr_id(), vec![R::one()]);

        for t in order.iter().rev() {
            let Some(g) = scratch.remove(&t.ptr_id()) else {
                continue;
            };
            let contribs: Option<Vec<(Tensor<R>, Vec<R>)>> = {
                let d = t.data();
                d.node.as_ref().map(|node| {
                    let guards: Vec<Ref<'_, TensorData<R>>> =
                        node.inputs.iter().map(|i| i.data()).collect();
                    let views: Vec<InputView<'_, R>> = guards
                        .iter()
                        .map(|gd| InputView { values: &gd.values })
                        .collect();
                    let args = BackwardArgs {
                        out_values: &d.values,
                        out_grad: &g,
                        inputs: &views,
                    };
                    let per_input = (node.backward)(&args);
                    node.inputs
                        .iter()
                        .zip(per_input)
                        .filter_map(|(inp, c)| c.map(|c| (inp.clone(), c)))
                        .collect()
                })
            };
            // Fold this pass's gradient into the persistent buffer.
            if t.requires_grad() {
                let mut d = t.data_mut();
                let grad = d.grad.get_or_insert_with(|| vec![R::zero(); g.len()]);
                for (a, b) in grad.iter_mut().zip(&g) {
                    *a += *b;
                }
            }
            if let Some(contribs) = contribs {
                for (inp, c) in contribs {
                    if !inp.grad_flows() {
                        continue;
                    }
                    let entry = scratch
                        .entry(inp.ptr_id())
                        .or_insert_with(|| vec![R::zero(); c.len()]);
                    for (a, b) in entry.iter_mut().zip(&c) {
                        *a += *b;
                    }
                }
            }
        }
        Ok(())
    }

    /// True when gradients should flow into this tensor during backward.
    fn grad_flows(&self) -> bool {
        self.0.borrow().requires_grad
    }

    /// Postorder over the producing graph: inputs precede consumers.
    fn topo_order(&self) -> Vec<Tensor<R>> {
        let mut order = Vec::new();
        let mut seen: HashSet<usize> = HashSet::new();
        // (tensor, next child index) — iterative DFS, graphs can be deep.
        let mut stack: Vec<(Tensor<R>, usize)> = Vec::new();
        seen.insert(self.ptr_id());
        stack.push((self.clone(), 0));
        while let Some((t, idx)) = stack.last().cloned() {
            let child = {
                let d = t.data();
                d.node.as_ref().and_then(|n| n.inputs.get(idx).cloned())
            };
            match child {
                Some(c) => {
                    stack.last_mut().unwrap().1 += 1;
                    if seen.insert(c.ptr_id()) {
                        stack.push((c, 0));
                    }
                }
                None => {
                    stack.pop();
                    order.push(t);
                }
            }
        }
        order
    }
}

/// Builds an op output: records the node only when some input feeds the
/// gradient flow, so constant subgraphs cost nothing at backward time.
pub(crate) fn op_output<R: Real>(
    shape: Vec<usize>,
    values: Vec<R>,
    inputs: Vec<Tensor<R>>,
    backward: BackFn<R>,
) -> Tensor<R> {
    debug_assert_eq!(shape.iter().product::<usize>(), values.len());
    let requires = grad_enabled() && inputs.iter().any(|i| i.grad_flows());
    Tensor::from_data(TensorData {
        shape,
        values,
        grad: None,
        requires_grad: requires,
        node: requires.then_some(Node { inputs, backward }),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ops;

    #[test]
    fn leaf_flags() {
        let t = Tensor::<f64>::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!(t.is_leaf());
        assert!(!t.requires_grad());
        let t = t.requiring_grad();
        assert!(t.requires_grad());
    }

    #[test]
    fn shape_value_mismatch_rejected() {
        assert!(Tensor::<f64>::from_vec(&[3], vec![1.0]).is_err());
        assert!(Tensor::<f64>::from_vec(&[0], vec![]).is_err());
    }

    #[test]
    fn backward_sum_gives_ones() {
        let x = Tensor::<f64>::from_vec(&[2, 3], vec![1., 2., 3., 4., 5., 6.])
            .unwrap()
            .requiring_grad();
        let loss = ops::sum_all(&x);
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 6]);
    }

    #[test]
    fn backward_elementwise_square() {
        // loss = sum(x*x) at x=[1,2] -> grad [2,4]
        let x = Tensor::<f64>::from_vec(&[2], vec![1.0, 2.0])
            .unwrap()
            .requiring_grad();
        let y = ops::mul(&x, &x).unwrap();
        let loss = ops::sum_all(&y);
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0]);
    }

    #[test]
    fn backward_twice_doubles_gradients() {
        let x = Tensor::<f64>::from_vec(&[2], vec![3.0, -1.0])
            .unwrap()
            .requiring_grad();
        let y = ops::mul(&x, &x).unwrap();
        let loss = ops::sum_all(&y);
        loss.backward().unwrap();
        let g1 = x.grad().unwrap();
        loss.backward().unwrap();
        let g2 = x.grad().unwrap();
        for (a, b) in g1.iter().zip(&g2) {
            assert_eq!(*b, 2.0 * *a);
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let x = Tensor::<f64>::from_vec(&[2], vec![1.0, 2.0])
            .unwrap()
            .requiring_grad();
        assert!(x.backward().is_err());
    }

    #[test]
    fn no_node_recorded_for_constant_graph() {
        let a = Tensor::<f64>::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::<f64>::from_vec(&[2], vec![3.0, 4.0]).unwrap();
        let c = ops::add(&a, &b).unwrap();
        assert!(c.is_leaf());
    }

    #[test]
    fn diamond_graph_accumulates_both_paths() {
        // loss = sum(x*x + x*x) -> grad 4x
        let x = Tensor::<f64>::from_vec(&[2], vec![1.0, 2.0])
            .unwrap()
            .requiring_grad();
        let y1 = ops::mul(&x, &x).unwrap();
        let y2 = ops::mul(&x, &x).unwrap();
        let s = ops::add(&y1, &y2).unwrap();
        let loss = ops::sum_all(&s);
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![4.0, 8.0]);
    }
}
