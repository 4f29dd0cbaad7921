//! Floating point abstraction shared by every numeric module.
//!
//! All geometry, metrics, optimization and variance code is written against
//! [`Scalar`], which is implemented for `f32` and `f64`. Concrete aliases for
//! the common `f64` instantiations live at the crate root.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// floating point: f32 or f64
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Converts an `f64` literal. Every literal used in this crate is
    /// representable (possibly rounded) in both `f32` and `f64`.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable as scalar")
    }

    #[inline]
    fn from_usize_lossy(n: usize) -> Self {
        Self::from_usize(n).expect("count representable as scalar")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// Tolerance used when validating that weights sum to one.
    fn simplex_tolerance() -> Self;
}

impl Scalar for f32 {
    fn simplex_tolerance() -> Self {
        1e-5
    }
}

impl Scalar for f64 {
    fn simplex_tolerance() -> Self {
        1e-9
    }
}

/// Population mean. Returns zero for an empty slice.
pub fn mean<T: Scalar>(xs: &[T]) -> T {
    if xs.is_empty() {
        return T::zero();
    }
    xs.iter().copied().sum::<T>() / T::from_usize_lossy(xs.len())
}

/// Population variance (two-pass). Returns zero for fewer than one element.
pub fn population_variance<T: Scalar>(xs: &[T]) -> T {
    if xs.is_empty() {
        return T::zero();
    }
    let m = mean(xs);
    xs.iter().map(|&x| (x - m) * (x - m)).sum::<T>() / T::from_usize_lossy(xs.len())
}
