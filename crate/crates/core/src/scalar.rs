//! Scalar abstraction: all model math is generic over `f32`/`f64`.
//!
//! `f32` is the training/inference type; `f64` exists for gradient
//! verification against finite differences.

use num_traits::{Float, FromPrimitive, NumAssign};

/// Floating-point scalar usable by the tensor engine.
pub trait Scalar: Float + FromPrimitive + NumAssign + Send + Sync + std::fmt::Debug + 'static {
    /// Dense row-major matrix multiply-accumulate: `c += a(m,k) * b(k,n)`.
    fn gemm_acc(m: usize, k: usize, n: usize, a: &[Self], b: &[Self], c: &mut [Self]);

    fn of_f64(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).unwrap()
    }
    fn to_f64(self) -> f64;
    fn of_f32(v: f32) -> Self {
        <Self as FromPrimitive>::from_f32(v).unwrap()
    }
    fn to_f32(self) -> f32;
}

impl Scalar for f32 {
    fn gemm_acc(m: usize, k: usize, n: usize, a: &[Self], b: &[Self], c: &mut [Self]) {
        debug_assert_eq!(a.len(), m * k);
        debug_assert_eq!(b.len(), k * n);
        debug_assert_eq!(c.len(), m * n);
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                k as isize,
                1,
                b.as_ptr(),
                n as isize,
                1,
                1.0,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }

    fn to_f64(self) -> f64 {
        self as f64
    }
    fn to_f32(self) -> f32 {
        self
    }
}

impl Scalar for f64 {
    fn gemm_acc(m: usize, k: usize, n: usize, a: &[Self], b: &[Self], c: &mut [Self]) {
        debug_assert_eq!(a.len(), m * k);
        debug_assert_eq!(b.len(), k * n);
        debug_assert_eq!(c.len(), m * n);
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                k as isize,
                1,
                b.as_ptr(),
                n as isize,
                1,
                1.0,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }

    fn to_f64(self) -> f64 {
        self
    }
    fn to_f32(self) -> f32 {
        self as f32
    }
}
