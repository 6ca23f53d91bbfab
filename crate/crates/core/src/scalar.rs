//! Scalar abstraction: all numeric code is generic over f32/f64.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::ScalarOperand;
use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating-point scalar the numeric kernels are generic over.
///
/// Randomness is always drawn in f64 and converted through
/// [`Scalar::from_f64_lossy`], so a fixed seed produces the same sample
/// stream for every scalar type.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + ScalarOperand
    + Sum
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Conversion from f64, saturating rather than panicking.
    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).unwrap_or_else(|| {
            if v > 0.0 {
                Self::max_value()
            } else {
                Self::min_value()
            }
        })
    }

    /// Widen to f64 (exact for f32 and f64).
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// `x/y` guarded against a zero denominator (returns 0 instead of NaN).
pub fn safe_div<F: Scalar>(x: F, y: F) -> F {
    if y == F::zero() {
        F::zero()
    } else {
        x / y
    }
}
