//! Floating-point abstraction so the whole pipeline can run in f32 (training
//! speed) or f64 (finite-difference gradient checks, oracles).

use ndarray::{Array2, LinalgScalar, ScalarOperand};
use num_traits::Float;

pub trait Scalar:
    Float
    + LinalgScalar
    + ScalarOperand
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + Send
    + Sync
    + 'static
{
    const DTYPE_TAG: u32;

    fn from_f64(v: f64) -> Self;
    fn into_f64(self) -> f64;
}

impl Scalar for f32 {
    const DTYPE_TAG: u32 = 0;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn into_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const DTYPE_TAG: u32 = 1;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn into_f64(self) -> f64 {
        self
    }
}

/// Shorthand for writing literals in generic code.
#[inline]
pub fn lit<S: Scalar>(v: f64) -> S {
    S::from_f64(v)
}

/// Convert an f64 matrix into the working scalar type.
pub fn mat_from_f64<S: Scalar>(m: &Array2<f64>) -> Array2<S> {
    m.mapv(S::from_f64)
}

/// Convert a matrix of the working scalar type to f64 (for reports, metrics).
pub fn mat_to_f64<S: Scalar>(m: &Array2<S>) -> Array2<f64> {
    m.mapv(Scalar::into_f64)
}
