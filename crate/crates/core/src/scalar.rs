//! Floating-point abstraction shared by every numeric routine in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};

/// Real scalar the metamodel is computed in: `f32` or `f64`.
pub trait Scalar:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from an `f64` constant.
    fn of(v: f64) -> Self {
        Self::from_f64(v).unwrap_or_else(Self::nan)
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Floor used by the logarithm guard and the denominator clamp.
pub const GUARD_EPS: f64 = 1e-6;

/// Magnitude bound applied to every primitive output.
pub const MAX_MAGNITUDE: f64 = 1e30;

/// Clamp `v` into `[-MAX_MAGNITUDE, MAX_MAGNITUDE]`; NaN maps to the upper bound.
#[inline]
pub fn saturate<T: Scalar>(v: T) -> T {
    let hi = T::of(MAX_MAGNITUDE);
    if v.is_nan() {
        hi
    } else if v > hi {
        hi
    } else if v < -hi {
        -hi
    } else {
        v
    }
}

/// Same as [`saturate`] but NaN maps to zero. Used for derivative values.
#[inline]
pub fn saturate_slope<T: Scalar>(v: T) -> T {
    if v.is_nan() {
        T::zero()
    } else {
        saturate(v)
    }
}

/// Push `v` away from zero so that `|v| >= GUARD_EPS`, keeping its sign (zero counts as positive).
/// Returns the clamped value and whether the clamp was active.
#[inline]
pub fn clamp_magnitude<T: Scalar>(v: T) -> (T, bool) {
    let eps = T::of(GUARD_EPS);
    if v.abs() >= eps {
        (v, false)
    } else if v < T::zero() {
        (-eps, true)
    } else {
        (eps, true)
    }
}
