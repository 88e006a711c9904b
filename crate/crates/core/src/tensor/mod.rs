//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is an immutable node in a computation graph. Operations on
//! tensors that require gradients record a backward closure together with
//! their inputs; [`Tensor::backward`] linearizes the graph into a [`Tape`]
//! and replays it in reverse, accumulating gradients into leaf tensors.
//!
//! Tensors are cheap to clone (reference counted) and `Send + Sync`.

mod conv;
mod elementwise;
pub mod gradcheck;
mod matmul;
mod reduce;
mod sample;
mod shape_ops;
mod tape;

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub use conv::ConvOptions;
pub use tape::Tape;

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

/// Backward closure: `(grad_out, out_data, inputs) -> grad per input`.
pub(crate) type BackwardFn<T> =
    Box<dyn Fn(&[T], &[T], &[Tensor<T>]) -> Vec<Option<Vec<T>>> + Send + Sync>;

pub(crate) struct GradFn<T: Scalar> {
    pub(crate) name: &'static str,
    pub(crate) inputs: Vec<Tensor<T>>,
    pub(crate) backward: BackwardFn<T>,
}

pub(crate) struct Node<T: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<T>>>,
    grad_fn: Option<GradFn<T>>,
}

#[derive(Clone)]
pub struct Tensor<T: Scalar>(Arc<Node<T>>);

/// Boolean validity mask with an explicit shape, produced by sampling
/// operations alongside their values.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    shape: Vec<usize>,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(data: Vec<bool>, shape: &[usize]) -> Result<Self> {
        if data.len() != shape.iter().product::<usize>() {
            return Err(Error::dim("mask", &[data.len()], shape));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn full(shape: &[usize], value: bool) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Elementwise conjunction of two equally shaped masks.
    pub fn and(&self, other: &Mask) -> Result<Mask> {
        if self.shape != other.shape {
            return Err(Error::dim("mask_and", &self.shape, &other.shape));
        }
        Ok(Mask {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| a && b)
                .collect(),
        })
    }
}

impl<T: Scalar> Tensor<T> {
    fn build(
        data: Arc<Vec<T>>,
        shape: Vec<usize>,
        requires_grad: bool,
        grad_fn: Option<GradFn<T>>,
    ) -> Self {
        Tensor(Arc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad,
            grad: Mutex::new(None),
            grad_fn,
        }))
    }

    /// Constant tensor (does not require gradients).
    pub fn new(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::dim("tensor", &[data.len()], shape));
        }
        Ok(Self::build(Arc::new(data), shape.to_vec(), false, None))
    }

    /// Leaf tensor that accumulates gradients during [`Tensor::backward`].
    pub fn parameter(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::dim("parameter", &[data.len()], shape));
        }
        Ok(Self::build(Arc::new(data), shape.to_vec(), true, None))
    }

    pub fn from_f64(data: &[f64], shape: &[usize]) -> Result<Self> {
        Self::new(data.iter().map(|&v| T::lit(v)).collect(), shape)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self::build(Arc::new(vec![value; n]), shape.to_vec(), false, None)
    }

    pub fn scalar(value: T) -> Self {
        Self::build(Arc::new(vec![value]), Vec::new(), false, None)
    }

    /// Records the result of a differentiable operation.
    ///
    /// The backward closure is kept only when at least one input requires
    /// gradients; otherwise the result is a plain constant.
    pub(crate) fn from_op(
        data: Vec<T>,
        shape: Vec<usize>,
        name: &'static str,
        inputs: Vec<Tensor<T>>,
        backward: BackwardFn<T>,
    ) -> Self {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>(), "{name}");
        #[cfg(debug_assertions)]
        {
            let inputs_finite = inputs
                .iter()
                .all(|t| t.data().iter().all(|v| v.is_finite()));
            if inputs_finite {
                debug_assert!(
                    data.iter().all(|v| v.is_finite()),
                    "{name}: non-finite output from finite inputs"
                );
            }
        }
        let requires_grad = inputs.iter().any(Tensor::requires_grad);
        let grad_fn = requires_grad.then(|| GradFn {
            name,
            inputs,
            backward,
        });
        Self::build(Arc::new(data), shape, requires_grad, grad_fn)
    }

    /// Same data, new shape, gradient passes through unchanged.
    pub(crate) fn view_as(&self, shape: Vec<usize>, name: &'static str) -> Self {
        let grad_fn = self.requires_grad().then(|| GradFn {
            name,
            inputs: vec![self.clone()],
            backward: Box::new(|g: &[T], _: &[T], _: &[Tensor<T>]| vec![Some(g.to_vec())]),
        });
        Self::build(self.0.data.clone(), shape, self.requires_grad(), grad_fn)
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.0.data.as_ref().clone()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.0.data.iter().map(|v| v.as_f64()).collect()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.numel() != 1 {
            return Err(Error::dim("item", self.shape(), &[]));
        }
        Ok(self.0.data[0])
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.grad_fn.is_none()
    }

    /// Accumulated gradient of a leaf tensor, if any backward pass reached it.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.0.grad.lock().expect("grad lock").clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock().expect("grad lock") = None;
    }

    /// A constant copy cut off from the graph. Shares the data buffer.
    pub fn detach(&self) -> Self {
        Self::build(self.0.data.clone(), self.0.shape.clone(), false, None)
    }

    pub(crate) fn grad_fn(&self) -> Option<&GradFn<T>> {
        self.0.grad_fn.as_ref()
    }

    pub(crate) fn accumulate_grad(&self, g: &[T]) {
        let mut slot = self.0.grad.lock().expect("grad lock");
        match slot.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Reverse-mode differentiation from a scalar loss.
    ///
    /// Every leaf that requires gradients receives `d loss / d leaf`, added to
    /// whatever it already holds.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        Tape::record(self).run(self)
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let op = self.grad_fn().map(|g| g.name).unwrap_or("leaf");
        write!(
            f,
            "Tensor<{}>(shape={:?}, op={}, requires_grad={})",
            T::NAME,
            self.shape(),
            op,
            self.requires_grad()
        )
    }
}

/// Row-major strides for a shape.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

pub(crate) fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::dim(op, shape, &[axis]));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_checks_length() {
        assert!(Tensor::<f64>::new(vec![1.0, 2.0, 3.0], &[2, 2]).is_err());
        let t = Tensor::<f64>::new(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        assert_eq!(t.numel(), 4);
        assert!(!t.requires_grad());
    }

    #[test]
    fn strides_are_row_major() {
        assert_eq!(strides(&[2, 3, 4]), vec![12, 4, 1]);
        assert_eq!(strides(&[]), Vec::<usize>::new());
    }

    #[test]
    fn constant_ops_drop_graph() {
        let a = Tensor::<f64>::ones(&[3]);
        let b = a.exp();
        assert!(b.is_leaf());
        assert!(!b.requires_grad());
    }

    #[test]
    fn non_scalar_backward_is_contract_error() {
        let x = Tensor::<f64>::parameter(vec![1.0, 2.0], &[2]).unwrap();
        let y = x.exp();
        assert!(matches!(y.backward(), Err(Error::Contract(_))));
    }

    #[test]
    fn tensors_are_send_sync() {
        fn check<S: Send + Sync>() {}
        check::<Tensor<f32>>();
        check::<Tensor<f64>>();
    }
}
