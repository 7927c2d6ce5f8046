//! Dense rank-1/rank-2 tensors and the reverse-mode tape.
//!
//! Training runs in `f32`; gradient checks instantiate the same code in
//! `f64`. All reductions use a fixed left-to-right pairwise summation so
//! forward outputs are bit-identical across runs.

mod adam;
mod param;
mod tape;

pub use adam::{adam_step, clip_global_norm, AdamHyper, AdamState};
pub use param::{GradMap, ParamStore};
pub use tape::{Tape, Var};

use crate::error::{Error, Result};
use num_traits::Float;
use std::fmt::{Debug, Display};

/// Element type the engine is generic over. `f32` for training, `f64` for
/// finite-difference gradient checks.
pub trait Scalar:
    Float + Debug + Display + Default + Send + Sync + serde::Serialize + 'static
{
    const NAME: &'static str;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;

    /// Strided GEMM `c = a @ b` with caller-chosen strides.
    ///
    /// # Safety
    /// Pointers must cover `m x k`, `k x n`, `m x n` elements under the given
    /// strides.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize, k: usize, n: usize,
        a: *const Self, rsa: isize, csa: isize,
        b: *const Self, rsb: isize, csb: isize,
        c: *mut Self, rsc: isize, csc: isize,
    );

    /// Row-major GEMM `c = a @ b`.
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], b: &[Self], c: &mut [Self]) {
        debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
        unsafe {
            Self::gemm_raw(
                m, k, n,
                a.as_ptr(), k as isize, 1,
                b.as_ptr(), n as isize, 1,
                c.as_mut_ptr(), n as isize, 1,
            );
        }
    }
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }

    unsafe fn gemm_raw(
        m: usize, k: usize, n: usize,
        a: *const f32, rsa: isize, csa: isize,
        b: *const f32, rsb: isize, csb: isize,
        c: *mut f32, rsc: isize, csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, 0.0, c, rsc, csc);
    }
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";

    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }

    unsafe fn gemm_raw(
        m: usize, k: usize, n: usize,
        a: *const f64, rsa: isize, csa: isize,
        b: *const f64, rsb: isize, csb: isize,
        c: *mut f64, rsc: isize, csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, 0.0, c, rsc, csc);
    }
}

/// Fixed-order pairwise summation. Left-to-right recursive halving with a
/// small sequential base case; deterministic and more accurate than a plain
/// running sum.
pub fn pairwise_sum<T: Scalar>(v: &[T]) -> T {
    if v.len() <= 8 {
        let mut acc = T::zero();
        for &x in v {
            acc = acc + x;
        }
        return acc;
    }
    let mid = v.len() / 2;
    pairwise_sum(&v[..mid]) + pairwise_sum(&v[mid..])
}

/// Contiguous row-major tensor of rank 1 or 2.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Scalar> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.is_empty() || shape.len() > 2 || shape.contains(&0) {
            return Err(Error::InvalidArg(format!(
                "tensor shape must be rank 1 or 2 with positive dims, got {shape:?}"
            )));
        }
        if data.len() != numel {
            return Err(Error::InvalidArg(format!(
                "data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Tensor { shape, data, requires_grad: false })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape, data: vec![T::zero(); numel], requires_grad: false }
    }

    pub fn scalar(v: T) -> Self {
        Tensor { shape: vec![1], data: vec![v], requires_grad: false }
    }

    pub fn from_rows(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// (rows, cols) view: rank-1 tensors are treated as a single row.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.len() {
            1 => (1, self.shape[0]),
            _ => (self.shape[0], self.shape[1]),
        }
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape == [1]
    }

    pub fn scalar_value(&self) -> T {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map<U: Scalar>(&self, f: impl Fn(T) -> U) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            requires_grad: self.requires_grad,
        }
    }

    pub fn to_f64(&self) -> Tensor<f64> {
        self.map(|v| v.to_f64())
    }

    pub fn to_f32(&self) -> Tensor<f32> {
        self.map(|v| v.to_f64() as f32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairwise_sum_matches_exact_on_integers() {
        let v: Vec<f64> = (1..=100).map(|i| i as f64).collect();
        assert_eq!(pairwise_sum(&v), 5050.0);
    }

    #[test]
    fn pairwise_sum_of_duplicated_block_doubles_exactly() {
        // mean over a concatenated duplicate must reduce to the same value
        let v: Vec<f32> = (0..13).map(|i| 0.1 + 0.37 * i as f32).collect();
        let mut dup = v.clone();
        dup.extend_from_slice(&v);
        let s = pairwise_sum(&v);
        let s2 = pairwise_sum(&dup);
        assert_eq!(s2, s + s);
        assert_eq!(s2 / dup.len() as f32, s / v.len() as f32);
    }

    #[test]
    fn tensor_shape_validation() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(vec![], vec![]).is_err());
        assert!(Tensor::<f32>::new(vec![0], vec![]).is_err());
        assert!(Tensor::<f32>::new(vec![1, 2, 3], vec![0.0; 6]).is_err());
    }

    #[test]
    fn gemm_small_known_product() {
        // [1 2; 3 4] @ [5 6; 7 8] = [19 22; 43 50]
        let a = [1.0f32, 2.0, 3.0, 4.0];
        let b = [5.0f32, 6.0, 7.0, 8.0];
        let mut c = [0.0f32; 4];
        f32::gemm(2, 2, 2, &a, &b, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
    }
}
