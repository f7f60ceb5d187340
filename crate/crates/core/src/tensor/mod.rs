//! Minimal differentiable tensor core.
//!
//! Layers are plain forward/backward function pairs over row-major
//! `Tensor`s in H×W×C layout. There is no general autograd graph: a network
//! records the caches its layers return and replays them in reverse.

mod adadelta;
mod layers;
mod loss;
mod param;

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::AddAssign;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

pub use adadelta::{Adadelta, AdadeltaConfig};
pub use layers::{
    conv2d, conv2d_backward, conv2d_infer, conv_output_side, dense, dense_backward, dropout,
    dropout_mask, maxpool2d, maxpool2d_backward, relu, relu_backward, ConvCache, DropoutMask,
    DropoutMode, Padding, PoolCache,
};
pub use loss::{l1_distance, softmax, softmax_cross_entropy, ClassLabel};
pub use param::Parameter;

/// Floating point element type. `f32` is the storage type for trained
/// networks; `f64` is used by the gradient checks.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Send + Sync + Sum + AddAssign + 'static
{
    const DTYPE: &'static str;

    /// `c = alpha * a·b + beta * c` over strided row/column views.
    ///
    /// # Safety
    /// Every index reachable through the given extents and strides must be
    /// in bounds of the corresponding buffer.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("representable constant")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {
    const DTYPE: &'static str = "f32";

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Real for f64 {
    const DTYPE: &'static str = "f64";

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Borrowed strided matrix view used to feed GEMM.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a, T> MatRef<'a, T> {
    pub fn row_major(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            row_stride: cols,
            col_stride: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }

    fn fits(&self) -> bool {
        self.rows == 0
            || self.cols == 0
            || (self.rows - 1) * self.row_stride + (self.cols - 1) * self.col_stride
                < self.data.len()
    }
}

/// `c = a·b + beta * c` with `c` row-major contiguous `a.rows × b.cols`.
pub(crate) fn gemm<T: Real>(a: MatRef<'_, T>, b: MatRef<'_, T>, beta: T, c: &mut [T]) {
    assert_eq!(a.cols, b.rows, "gemm inner dimensions");
    assert!(a.fits() && b.fits(), "gemm operand out of bounds");
    assert_eq!(c.len(), a.rows * b.cols, "gemm output size");
    if a.rows == 0 || b.cols == 0 {
        return;
    }
    // SAFETY: extents and strides were checked against the buffers above.
    unsafe {
        T::gemm_raw(
            a.rows,
            a.cols,
            b.cols,
            T::one(),
            a.data.as_ptr(),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr(),
            b.row_stride as isize,
            b.col_stride as isize,
            beta,
            c.as_mut_ptr(),
            b.cols as isize,
            1,
        );
    }
}

/// Dense n-dimensional array in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::shape(
                "tensor",
                format!("extents must be positive, got {shape:?}"),
            ));
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {len} elements, got {}", data.len()),
            ));
        }
        Ok(Self {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let len = shape.iter().product();
        Self::new(shape, vec![T::zero(); len]).expect("zeros: positive extents")
    }

    pub fn filled(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let mut t = Self::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let mut t = Self::zeros(shape);
        for (i, v) in t.data.iter_mut().enumerate() {
            *v = f(i);
        }
        t
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

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    /// Gradient buffer, allocated as zeros on first use.
    pub fn grad_mut(&mut self) -> &mut [T] {
        let len = self.data.len();
        self.grad.get_or_insert_with(|| vec![T::zero(); len])
    }

    pub fn clear_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.fill(T::zero());
        }
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() || shape.contains(&0) {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Extents as (height, width, channels) for rank-3 tensors.
    pub fn hwc(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [h, w, c] => Ok((h, w, c)),
            _ => Err(Error::shape(
                "hwc",
                format!("expected rank 3, got {:?}", self.shape),
            )),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
            grad: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_inconsistent_shape() {
        assert!(Tensor::<f32>::new([2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new([2, 0], vec![]).is_err());
        assert!(Tensor::<f32>::new([2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn grad_buffer_matches_shape() {
        let mut t = Tensor::<f64>::zeros([3, 4]);
        assert!(t.grad().is_none());
        t.grad_mut()[5] = 1.0;
        assert_eq!(t.grad().unwrap().len(), 12);
        t.clear_grad();
        assert!(t.grad().unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn gemm_transposed_views() {
        // a = [[1,2,3],[4,5,6]]
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0];
        let mut c = [0.0f64; 4];
        let m = MatRef::row_major(&a, 2, 3);
        gemm(m, m.t(), 0.0, &mut c);
        assert_eq!(c, [14.0, 32.0, 32.0, 77.0]);
        let mut d = [1.0f64; 9];
        gemm(m.t(), m, 1.0, &mut d);
        assert_eq!(d, [18.0, 23.0, 28.0, 23.0, 30.0, 37.0, 28.0, 37.0, 46.0]);
    }
}
