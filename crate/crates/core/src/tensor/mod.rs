//! Minimal reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a reference-counted, row-major dense array. Operations on
//! tensors that (transitively) depend on a `requires_grad` leaf record a
//! backward closure; [`Tensor::backward`] walks the recorded graph in reverse
//! topological order, sums gradients into the leaves' `grad` buffers and then
//! frees the graph.
//!
//! Only leaves keep a gradient buffer; intermediate gradients live in the
//! backward pass and are dropped with the graph.

mod conv;
mod loss;
mod norm;
mod ops;
mod optim;

use std::cell::{Cell, Ref, RefCell};
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::scalar::Real;

pub use conv::{conv2d, depthwise_conv2d, depthwise_separable_conv, same_padding};
pub use loss::weighted_cross_entropy;
pub use norm::{batch_norm, BnMode, RunningStats, BN_EPSILON, BN_MOMENTUM};
pub use ops::{
    activation, add, add_channel_bias, bilinear_resize, bilinear_upsample, concat_channels,
    global_average_pool, hadamard, hadamard_broadcast, mean, scale, slice_channels, sum,
    Activation,
};
pub use optim::{AdamConfig, OptimizerKind, ParamStore};

type BackwardFn<T> = Box<dyn Fn(&[T]) -> Vec<Option<Vec<T>>>>;

struct Node<T: Real> {
    parents: Vec<Tensor<T>>,
    backward: BackwardFn<T>,
}

struct Inner<T: Real> {
    shape: Vec<usize>,
    data: RefCell<Vec<T>>,
    grad: RefCell<Option<Vec<T>>>,
    requires_grad: bool,
    node: RefCell<Option<Node<T>>>,
}

/// Dense N-dimensional array with optional gradient tracking.
///
/// Cloning a `Tensor` clones the handle, not the storage.
pub struct Tensor<T: Real>(Rc<Inner<T>>);

impl<T: Real> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl<T: Real> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish_non_exhaustive()
    }
}

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Disables graph recording on this thread until the guard is dropped.
pub struct NoGradGuard {
    previous: bool,
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|g| g.set(self.previous));
    }
}

pub fn no_grad() -> NoGradGuard {
    let previous = GRAD_ENABLED.with(|g| g.replace(false));
    NoGradGuard { previous }
}

fn grad_enabled() -> bool {
    GRAD_ENABLED.with(Cell::get)
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn validate_shape(shape: &[usize], len: usize) -> Result<()> {
    if let Some(axis) = shape.iter().position(|&d| d == 0) {
        return Err(Error::shape("tensor", format!("dimension {axis} of {shape:?} is zero")));
    }
    if numel_of(shape) != len {
        return Err(Error::shape(
            "tensor",
            format!("shape {shape:?} needs {} elements, got {len}", numel_of(shape)),
        ));
    }
    Ok(())
}

impl<T: Real> Tensor<T> {
    fn from_parts(shape: Vec<usize>, data: Vec<T>, requires_grad: bool) -> Self {
        Tensor(Rc::new(Inner {
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad,
            node: RefCell::new(None),
        }))
    }

    /// Constant tensor (no gradient tracking).
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        validate_shape(shape, data.len())?;
        Ok(Self::from_parts(shape.to_vec(), data, false))
    }

    /// Trainable leaf tensor.
    pub fn parameter(shape: &[usize], data: Vec<T>) -> Result<Self> {
        validate_shape(shape, data.len())?;
        Ok(Self::from_parts(shape.to_vec(), data, true))
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Result<Self> {
        let n = numel_of(shape);
        Self::new(shape, vec![value; n])
    }

    pub fn scalar(value: T) -> Self {
        Self::from_parts(Vec::new(), vec![value], false)
    }

    /// Builds the result of an op. Records `backward` only when a parent
    /// tracks gradients and recording is enabled.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<T>,
        parents: Vec<Tensor<T>>,
        backward: impl Fn(&[T]) -> Vec<Option<Vec<T>>> + 'static,
    ) -> Self {
        debug_assert_eq!(numel_of(&shape), data.len());
        let track = grad_enabled() && parents.iter().any(Tensor::requires_grad);
        let out = Self::from_parts(shape, data, track);
        if track {
            *out.0.node.borrow_mut() = Some(Node { parents, backward: Box::new(backward) });
        }
        out
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        numel_of(&self.0.shape)
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn data(&self) -> Ref<'_, Vec<T>> {
        self.0.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.0.data.borrow().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.numel() != 1 {
            return Err(Error::NotScalar(self.0.shape.clone()));
        }
        Ok(self.0.data.borrow()[0])
    }

    /// Overwrites the storage in place (parameters, running statistics).
    pub fn set_data(&self, data: Vec<T>) -> Result<()> {
        if data.len() != self.numel() {
            return Err(Error::shape(
                "set_data",
                format!("expected {} elements, got {}", self.numel(), data.len()),
            ));
        }
        *self.0.data.borrow_mut() = data;
        Ok(())
    }

    pub(crate) fn update_data(&self, f: impl FnOnce(&mut [T])) {
        f(&mut self.0.data.borrow_mut());
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.0.grad.borrow().clone()
    }

    pub(crate) fn grad_ref(&self) -> Ref<'_, Option<Vec<T>>> {
        self.0.grad.borrow()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Same storage, new shape. Element count must match.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        validate_shape(shape, self.numel())?;
        Ok(Tensor::from_op(shape.to_vec(), self.to_vec(), vec![self.clone()], |g| {
            vec![Some(g.to_vec())]
        }))
    }

    /// Copy of the values with no graph history.
    pub fn detach(&self) -> Self {
        Self::from_parts(self.0.shape.clone(), self.to_vec(), false)
    }

    pub fn is_finite(&self) -> bool {
        self.0.data.borrow().iter().all(|v| v.is_finite())
    }

    fn id(&self) -> usize {
        Rc::as_ptr(&self.0) as usize
    }

    fn accumulate_leaf_grad(&self, g: &[T]) {
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Reverse-mode sweep from a scalar. Leaf gradients are summed into their
    /// buffers; the recorded graph is released afterwards.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::NotScalar(self.0.shape.clone()));
        }
        if !self.requires_grad() {
            return Ok(());
        }

        // Iterative post-order DFS gives a topological order.
        let mut order: Vec<Tensor<T>> = Vec::new();
        let mut seen: HashMap<usize, ()> = HashMap::new();
        let mut stack: Vec<(Tensor<T>, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if seen.insert(t.id(), ()).is_some() {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(node) = t.0.node.borrow().as_ref() {
                for p in &node.parents {
                    if p.requires_grad() && !seen.contains_key(&p.id()) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }

        let mut pending: HashMap<usize, Vec<T>> = HashMap::new();
        pending.insert(self.id(), vec![T::one()]);
        for t in order.iter().rev() {
            let Some(g) = pending.remove(&t.id()) else { continue };
            let node = t.0.node.borrow();
            match node.as_ref() {
                None => t.accumulate_leaf_grad(&g),
                Some(node) => {
                    let grads = (node.backward)(&g);
                    debug_assert_eq!(grads.len(), node.parents.len());
                    for (p, pg) in node.parents.iter().zip(grads) {
                        let Some(pg) = pg else { continue };
                        if !p.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(pg.len(), p.numel());
                        match pending.get_mut(&p.id()) {
                            Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, &b)| *a += b),
                            None => {
                                pending.insert(p.id(), pg);
                            }
                        }
                    }
                }
            }
        }

        for t in &order {
            t.0.node.borrow_mut().take();
        }
        Ok(())
    }
}


#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_dimension_is_rejected() {
        assert!(Tensor::<f32>::zeros(&[0, 3, 2, 2]).is_err());
        assert!(Tensor::<f32>::new(&[2, 2], vec![1.0; 3]).is_err());
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let x = Tensor::<f64>::parameter(&[2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 7.0]).unwrap();
        sum(&x).backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 6]);
    }

    #[test]
    fn grad_of_square_sum_at_three_is_six() {
        let x = Tensor::<f64>::parameter(&[1], vec![3.0]).unwrap();
        let y = hadamard(&x, &x).unwrap();
        sum(&y).backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let x = Tensor::<f64>::parameter(&[3], vec![1.0, 2.0, -1.0]).unwrap();
        let run = || {
            let y = hadamard(&x, &x).unwrap();
            sum(&y).backward().unwrap();
        };
        run();
        let once = x.grad().unwrap();
        run();
        let twice = x.grad().unwrap();
        for (a, b) in once.iter().zip(&twice) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn backward_on_non_scalar_fails() {
        let x = Tensor::<f32>::parameter(&[2], vec![1.0, 2.0]).unwrap();
        let y = scale(&x, 2.0);
        assert!(matches!(y.backward(), Err(Error::NotScalar(_))));
    }

    #[test]
    fn graph_is_freed_after_backward() {
        let x = Tensor::<f64>::parameter(&[2], vec![1.0, 2.0]).unwrap();
        let loss = sum(&scale(&x, 3.0));
        loss.backward().unwrap();
        assert!(loss.0.node.borrow().is_none());
    }

    #[test]
    fn no_grad_skips_recording() {
        let x = Tensor::<f32>::parameter(&[2], vec![1.0, 2.0]).unwrap();
        let y = {
            let _g = no_grad();
            scale(&x, 2.0)
        };
        assert!(!y.requires_grad());
        assert!(scale(&x, 2.0).requires_grad());
    }

    #[test]
    fn shared_subexpression_gradients_sum() {
        // loss = sum(x*x + x) -> 2x + 1
        let x = Tensor::<f64>::parameter(&[2], vec![0.5, -3.0]).unwrap();
        let y = add(&hadamard(&x, &x).unwrap(), &x).unwrap();
        sum(&y).backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, -5.0]);
    }
}
