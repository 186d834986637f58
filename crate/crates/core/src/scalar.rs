//! Scalar abstraction shared by every numeric routine in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::NdFloat;
use num_traits::FromPrimitive;

/// Floating-point scalar the model, objectives and metrics are generic over.
///
/// Implemented for `f32` and `f64`. Gradient checks and the CLI run in `f64`.
pub trait Real: NdFloat + FromPrimitive + Default + Sum + Debug + Display + 'static {
    /// Lossless-enough conversion from an `f64` constant.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// Largest `x` for which `exp(-x)` is comfortably inside the normal range.
    fn exp_headroom() -> Self;
}

impl Real for f32 {
    fn exp_headroom() -> Self {
        60.0
    }
}

impl Real for f64 {
    fn exp_headroom() -> Self {
        500.0
    }
}

#[inline]
pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
