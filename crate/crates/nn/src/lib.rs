//! A small reverse-mode autodiff engine over `ndarray`.
//!
//! Networks are built as dynamic computation graphs on a [`Tape`]: every
//! operation appends a node holding its value and a closure that routes
//! gradients to its parents. Parameters live outside the tape in a
//! [`ParamSet`] and are registered as leaves per forward pass, so a fresh
//! graph is built for every training step.
//!
//! The engine is generic over the element type: `f32` for training speed,
//! `f64` for finite-difference gradient checks and analytic oracles.

pub mod conv;
pub mod norm;
pub mod optim;
pub mod params;
pub mod tape;

pub use optim::Adam;
pub use params::{ParamId, ParamSet};
pub use tape::{Id, Tape};

use ndarray::{ArrayD, LinalgScalar, ScalarOperand};
use num_traits::Float;
use rand::Rng;

/// Dynamic-rank tensor.
pub type Tensor<F> = ArrayD<F>;

/// Element type of all tensors.
pub trait Scalar:
    Float
    + LinalgScalar
    + ScalarOperand
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::ops::DivAssign
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    fn c(x: f64) -> Self;
    fn f64(self) -> f64;
    fn randn<R: Rng + ?Sized>(rng: &mut R) -> Self;
}

impl Scalar for f32 {
    #[inline]
    fn c(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn randn<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.sample(rand_distr::StandardNormal)
    }
}

impl Scalar for f64 {
    #[inline]
    fn c(x: f64) -> Self {
        x
    }
    #[inline]
    fn f64(self) -> f64 {
        self
    }
    #[inline]
    fn randn<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.sample(rand_distr::StandardNormal)
    }
}

/// Keep large allocations on the main heap so freed tensor buffers are
/// reused instead of being returned to the kernel and page-faulted back in.
/// Call once at process start; safe to call repeatedly.
pub fn tune_allocator() {
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 256 << 20);
        libc::mallopt(libc::M_TRIM_THRESHOLD, 256 << 20);
    }
}

/// Fill a tensor with i.i.d. standard-normal draws.
pub fn randn_tensor<F: Scalar, R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor<F> {
    let n: usize = shape.iter().product();
    let data: Vec<F> = (0..n).map(|_| F::randn(rng)).collect();
    Tensor::from_shape_vec(ndarray::IxDyn(shape), data).expect("shape/product mismatch")
}
