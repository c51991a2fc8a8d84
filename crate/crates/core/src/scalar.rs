//! Floating-point element type shared by every numeric routine.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Real scalar usable throughout the crate: `f32` or `f64`.
///
/// Checkpoints and dataset files always store 64-bit values; an `f32`
/// model is widened on save and narrowed on load.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Converts an `f64` literal; exact for `f64`, rounded for `f32`.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable in Scalar")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("Scalar convertible to f64")
    }

    /// Tolerance used when checking that a vector lies on the simplex.
    #[inline]
    fn simplex_tolerance(len: usize) -> Self {
        Self::lit(1e-9).max(Self::epsilon() * Self::lit(16.0 * len.max(1) as f64))
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
