//! Scalar abstraction for the numerical kernels.
//!
//! Everything downstream is generic over [`Scalar`], which is implemented for
//! `f32` and `f64` only. The default precision for all experiments is `f64`;
//! the concrete aliases live at the crate root.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssignOps};

/// Floating-point element type accepted by the matrix kernels: `f32` or `f64`.
///
/// The `faer` bound routes SVD, eigendecomposition and large matrix products
/// through its dense kernels; the `num-traits` bounds cover everything else.
pub trait Scalar:
    Float
    + FromPrimitive
    + NumAssignOps
    + Sum
    + Default
    + Debug
    + Display
    + faer_traits::RealField
    + Send
    + Sync
    + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Conversion from an `f64` literal; exact for `f64`, rounded for `f32`.
#[inline]
pub fn cast<T: Scalar>(x: f64) -> T {
    <T as FromPrimitive>::from_f64(x).expect("finite f64 converts")
}

/// Conversion from a count; exact for the matrix sizes used here.
#[inline]
pub fn cast_usize<T: Scalar>(n: usize) -> T {
    <T as FromPrimitive>::from_usize(n).expect("usize converts")
}
