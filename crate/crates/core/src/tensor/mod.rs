//! Dense tensor engine with reverse-mode automatic differentiation.
//!
//! Tensors are row-major, contiguous, and generic over the float element
//! (`f32` for training, `f64` for finite-difference gradient checks). There
//! is no implicit broadcasting: every operation either requires exact shape
//! agreement or states its shape contract explicitly (`add_bias`, `matmul`,
//! `conv2d`, ...). A graph is confined to one thread; parallelism lives
//! inside the op kernels, which write disjoint regions in a fixed order so
//! results are bitwise reproducible regardless of thread count.

mod backward;
mod gradcheck;
mod linalg;
mod ops;

pub use gradcheck::{gradient_check, op_battery, GradCheckReport};
pub use linalg::{parallel_enabled, set_parallel_enabled};
pub use ops::scaled_dot_product_attention;

use std::cell::{Ref, RefCell};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Element type of a tensor. Implemented for `f32` and `f64`.
pub trait Element:
    Float + FromPrimitive + ToPrimitive + Send + Sync + fmt::Debug + fmt::Display + 'static
{
    const DTYPE: Dtype;

    fn to_f64x(self) -> f64 {
        <Self as ToPrimitive>::to_f64(&self).expect("float widens to f64")
    }
}

impl Element for f32 {
    const DTYPE: Dtype = Dtype::F32;
}

impl Element for f64 {
    const DTYPE: Dtype = Dtype::F64;
}

/// On-disk dtype tags shared by the tensor container and checkpoint formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    U8,
    F64,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::U8 => 1,
            Dtype::F64 => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::U8),
            2 => Ok(Dtype::F64),
            other => Err(Error::Data(format!("unknown dtype code {other}"))),
        }
    }
}

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static NO_GRAD_DEPTH: std::cell::Cell<u32> = const { std::cell::Cell::new(0) };
}

/// RAII guard that disables graph recording on the current thread.
pub struct NoGradGuard(());

impl NoGradGuard {
    pub fn new() -> Self {
        NO_GRAD_DEPTH.with(|d| d.set(d.get() + 1));
        NoGradGuard(())
    }
}

impl Default for NoGradGuard {
    fn default() -> Self {
        Self::new()
    }
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        NO_GRAD_DEPTH.with(|d| d.set(d.get() - 1));
    }
}

pub(crate) fn grad_enabled() -> bool {
    NO_GRAD_DEPTH.with(|d| d.get() == 0)
}

pub(crate) struct TensorInner<E: Element> {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<E>>,
    grad: RefCell<Option<Vec<E>>>,
    requires_grad: bool,
    op: ops::Op<E>,
}

/// A node in the autodiff graph. Cloning is cheap (reference counted).
pub struct Tensor<E: Element> {
    inner: Rc<TensorInner<E>>,
}

impl<E: Element> Clone for Tensor<E> {
    fn clone(&self) -> Self {
        Tensor { inner: Rc::clone(&self.inner) }
    }
}

impl<E: Element> fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<E: Element> Tensor<E> {
    pub(crate) fn make(shape: Vec<usize>, data: Vec<E>, op: ops::Op<E>, requires_grad: bool) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        let (op, requires_grad) = if requires_grad && grad_enabled() {
            (op, true)
        } else {
            (ops::Op::Leaf, false)
        };
        Tensor {
            inner: Rc::new(TensorInner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                op,
            }),
        }
    }

    /// Leaf tensor that does not participate in gradients.
    pub fn constant(shape: &[usize], data: Vec<E>) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(Error::Shape(format!(
                "constant: shape {:?} wants {} elements, got {}",
                shape,
                numel(shape),
                data.len()
            )));
        }
        Ok(Tensor::make(shape.to_vec(), data, ops::Op::Leaf, false))
    }

    /// Leaf tensor that accumulates gradients (a parameter or checked input).
    pub fn parameter(shape: &[usize], data: Vec<E>) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(Error::Shape(format!(
                "parameter: shape {:?} wants {} elements, got {}",
                shape,
                numel(shape),
                data.len()
            )));
        }
        let mut t = Tensor::make(shape.to_vec(), data, ops::Op::Leaf, false);
        Rc::get_mut(&mut t.inner).expect("fresh tensor").requires_grad = true;
        Ok(t)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::make(shape.to_vec(), vec![E::zero(); numel(shape)], ops::Op::Leaf, false)
    }

    pub fn full(shape: &[usize], value: E) -> Self {
        Tensor::make(shape.to_vec(), vec![value; numel(shape)], ops::Op::Leaf, false)
    }

    pub fn scalar(value: E) -> Self {
        Tensor::make(vec![], vec![value], ops::Op::Leaf, false)
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        numel(&self.inner.shape)
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn data(&self) -> Ref<'_, Vec<E>> {
        self.inner.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<E> {
        self.inner.data.borrow().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<E> {
        if self.numel() != 1 {
            return Err(Error::Shape(format!(
                "item: tensor of shape {:?} is not a scalar",
                self.shape()
            )));
        }
        Ok(self.inner.data.borrow()[0])
    }

    /// Replace the stored values. Shape must match; used for parameter
    /// updates and checkpoint restore.
    pub fn set_data(&self, values: &[E]) -> Result<()> {
        if values.len() != self.numel() {
            return Err(Error::Shape(format!(
                "set_data: tensor holds {} elements, got {}",
                self.numel(),
                values.len()
            )));
        }
        self.inner.data.borrow_mut().copy_from_slice(values);
        Ok(())
    }

    /// Apply an in-place update to the stored values.
    pub fn update_data(&self, f: impl FnOnce(&mut [E])) {
        f(&mut self.inner.data.borrow_mut());
    }

    pub fn grad(&self) -> Option<Vec<E>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Copy of the values as a leaf outside the graph.
    pub fn detach(&self) -> Tensor<E> {
        Tensor::make(self.inner.shape.clone(), self.to_vec(), ops::Op::Leaf, false)
    }

    /// Cast every element, producing a constant leaf in the target precision.
    pub fn cast<T: Element>(&self) -> Tensor<T> {
        let data = self.data().iter().map(|v| f::<T>(v.to_f64x())).collect();
        Tensor::make(self.inner.shape.clone(), data, ops::Op::Leaf, false)
    }

    pub(crate) fn op(&self) -> &ops::Op<E> {
        &self.inner.op
    }

    pub(crate) fn accumulate_grad(&self, incoming: &[E]) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(existing) => {
                for (g, inc) in existing.iter_mut().zip(incoming) {
                    *g = *g + *inc;
                }
            }
            None => *slot = Some(incoming.to_vec()),
        }
    }

    pub(crate) fn take_node_grad(&self) -> Option<Vec<E>> {
        self.inner.grad.borrow_mut().take()
    }
}

pub(crate) fn f<E: Element>(v: f64) -> E {
    <E as FromPrimitive>::from_f64(v).expect("finite literal")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_rejects_length_mismatch() {
        let err = Tensor::<f32>::constant(&[2, 2], vec![1.0; 3]).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn no_grad_guard_drops_graph() {
        let x = Tensor::<f32>::parameter(&[2], vec![1.0, 2.0]).unwrap();
        let inside = {
            let _g = NoGradGuard::new();
            x.relu().unwrap()
        };
        assert!(!inside.requires_grad());
        let outside = x.relu().unwrap();
        assert!(outside.requires_grad());
    }

    #[test]
    fn scalar_item() {
        let s = Tensor::<f64>::scalar(4.25);
        assert_eq!(s.item().unwrap(), 4.25);
        assert_eq!(s.shape(), &[] as &[usize]);
    }
}
