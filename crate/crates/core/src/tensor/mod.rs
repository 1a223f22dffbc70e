//! Dense NCHW tensors and the handful of layers the U-net is built from.
//!
//! Every layer is a forward function plus an explicit backward function that
//! consumes whatever the forward pass cached. There is no general graph; the
//! model wires forward and backward calls itself.

mod activation;
mod adam;
mod batchnorm;
mod concat;
mod conv;
mod gradcheck;
mod io;
mod pool;
mod upconv;

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::Float;
use thiserror::Error;

pub use activation::{relu, relu_backward};
pub use adam::{AdamConfig, AdamState};
pub use batchnorm::{
    batchnorm2d, batchnorm2d_backward, batchnorm2d_eval, BatchNormCache, BatchNormGrads, BatchNormParams, Mode,
    RunningStats, BN_EPSILON, BN_MOMENTUM,
};
pub use concat::{concat_channels, split_channels};
pub use conv::{conv1x1, conv2d_same, conv2d_same_backward, conv3x3, conv3x3_backward, ConvGrads};
pub use gradcheck::{finite_difference, grad_check, max_relative_error};
pub use io::{read_glt, read_glt_from, write_glt, write_glt_to, GLT_MAGIC, GLT_VERSION};
pub use pool::{maxpool2x2, maxpool2x2_backward, PoolIndices};
pub use upconv::{upconv2x2, upconv2x2_backward};

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("invalid tensor file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

/// Scalar element type. Implemented for `f32` (training) and `f64`
/// (gradient checks).
pub trait Real: Float + Default + Debug + Sum + Send + Sync + 'static {
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `c += a * b` for an `m x k` matrix `a` and a `k x n` matrix `b` given
    /// by (row, column) strides, and a row-major `m x n` matrix `c`.
    fn gemm(m: usize, k: usize, n: usize, a: (&[Self], [usize; 2]), b: (&[Self], [usize; 2]), c: &mut [Self]);

    /// `c += a * bᵀ` for row-major `a` (m x k), `b` (n x k) and `c` (m x n).
    fn gemm_acc(m: usize, k: usize, n: usize, a: &[Self], b: &[Self], c: &mut [Self]) {
        Self::gemm(m, k, n, (a, [k, 1]), (b, [1, k]), c);
    }
}

/// Panics unless every element addressed by the strides lies inside the slices.
fn check_gemm_bounds<T>(m: usize, k: usize, n: usize, a: (&[T], [usize; 2]), b: (&[T], [usize; 2]), c: &[T]) {
    let last = |rows: usize, cols: usize, [rs, cs]: [usize; 2]| (rows.max(1) - 1) * rs + (cols.max(1) - 1) * cs;
    assert!(m * k == 0 || last(m, k, a.1) < a.0.len(), "gemm: a too short");
    assert!(k * n == 0 || last(k, n, b.1) < b.0.len(), "gemm: b too short");
    assert!(c.len() >= m * n, "gemm: c too short");
}

impl Real for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn gemm(m: usize, k: usize, n: usize, a: (&[Self], [usize; 2]), b: (&[Self], [usize; 2]), c: &mut [Self]) {
        check_gemm_bounds(m, k, n, a, b, c);
        let (a, [rsa, csa]) = a;
        let (b, [rsb, csb]) = b;
        // SAFETY: check_gemm_bounds covers every element the strides address.
        unsafe {
            matrixmultiply::sgemm(
                m, k, n, 1.0, a.as_ptr(), rsa as isize, csa as isize, b.as_ptr(), rsb as isize, csb as isize, 1.0,
                c.as_mut_ptr(), n as isize, 1,
            );
        }
    }
}

impl Real for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
    fn gemm(m: usize, k: usize, n: usize, a: (&[Self], [usize; 2]), b: (&[Self], [usize; 2]), c: &mut [Self]) {
        check_gemm_bounds(m, k, n, a, b, c);
        let (a, [rsa, csa]) = a;
        let (b, [rsb, csb]) = b;
        // SAFETY: check_gemm_bounds covers every element the strides address.
        unsafe {
            matrixmultiply::dgemm(
                m, k, n, 1.0, a.as_ptr(), rsa as isize, csa as isize, b.as_ptr(), rsb as isize, csb as isize, 1.0,
                c.as_mut_ptr(), n as isize, 1,
            );
        }
    }
}

/// Row-major dense tensor with an optional gradient buffer of the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(TensorError::Shape(format!("zero extent in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::Shape(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data, grad: None })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n], grad: None }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: (0..n).map(&mut f).collect(), grad: None }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Extents of a rank-4 tensor as `(batch, channels, height, width)`.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [b, c, h, w] => Ok((b, c, h, w)),
            _ => Err(TensorError::Shape(format!("expected rank-4 tensor, got {:?}", self.shape))),
        }
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(TensorError::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        if let Some(g) = &self.grad {
            debug_assert_eq!(g.len(), n);
        }
        Ok(self)
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    /// Gradient buffer, allocated as zeros on first use.
    pub fn grad_mut(&mut self) -> &mut [T] {
        let n = self.data.len();
        self.grad.get_or_insert_with(|| vec![T::zero(); n])
    }

    pub fn accumulate_grad(&mut self, g: &[T]) {
        assert_eq!(g.len(), self.data.len(), "gradient length mismatch");
        for (a, &b) in self.grad_mut().iter_mut().zip(g) {
            *a = *a + b;
        }
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
            && self.grad.as_ref().is_none_or(|g| g.iter().all(|v| v.is_finite()))
    }

    /// Element-wise conversion into another precision. The gradient is dropped.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
            grad: None,
        }
    }

    /// Copy of sample `i` along the leading axis, keeping a batch axis of 1.
    pub fn batch_item(&self, i: usize) -> Result<Self> {
        let b = self.shape[0];
        if i >= b {
            return Err(TensorError::Shape(format!("batch index {i} out of range {b}")));
        }
        let stride = self.data.len() / b;
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Ok(Self { shape, data: self.data[i * stride..(i + 1) * stride].to_vec(), grad: None })
    }

    /// Stack equally shaped tensors along a new leading axis.
    pub fn stack(items: &[&Self]) -> Result<Self> {
        let first = items.first().ok_or_else(|| TensorError::Shape("empty stack".into()))?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(TensorError::Shape(format!(
                    "stack of mismatched shapes {:?} and {:?}",
                    first.shape, t.shape
                )));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Self { shape, data, grad: None })
    }
}

pub(crate) fn check_finite<T: Real>(t: &Tensor<T>, what: &str) {
    debug_assert!(t.data().iter().all(|v| v.is_finite()), "non-finite values after {what}");
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn value_count_must_match_extents() {
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f64>::new(vec![2, 0], vec![]).is_err());
        let t = Tensor::<f64>::new(vec![2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(t.len(), 6);
    }

    #[test]
    fn grad_has_parameter_shape() {
        let mut t = Tensor::<f32>::zeros(&[1, 2, 2, 2]);
        assert!(t.grad().is_none());
        t.accumulate_grad(&[1.0; 8]);
        t.accumulate_grad(&[0.5; 8]);
        assert_eq!(t.grad().unwrap(), &[1.5; 8]);
        t.zero_grad();
        assert_eq!(t.grad().unwrap(), &[0.0; 8]);
    }

    #[test]
    fn stack_and_batch_item_are_inverse() {
        let a = Tensor::<f64>::from_fn(&[2, 3, 3], |i| i as f64);
        let b = Tensor::<f64>::from_fn(&[2, 3, 3], |i| -(i as f64));
        let s = Tensor::stack(&[&a, &b]).unwrap();
        assert_eq!(s.shape(), &[2, 2, 3, 3]);
        assert_eq!(s.batch_item(1).unwrap().data(), b.data());
    }
}
