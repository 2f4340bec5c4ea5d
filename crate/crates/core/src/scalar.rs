//! Floating-point scalar abstraction.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating-point scalar the numeric core is generic over: `f32` or `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
}

impl<T> Scalar for T where
    T: Float
        + FromPrimitive
        + ToPrimitive
        + NumAssign
        + Sum
        + Debug
        + Display
        + Default
        + Send
        + Sync
        + 'static
{
}

/// Convert an `f64` literal into the scalar type.
///
/// Panics only if the target type cannot represent any `f64` at all,
/// which does not happen for the supported float types.
#[inline]
pub fn lit<T: Scalar>(x: f64) -> T {
    T::from_f64(x).expect("f64 literal representable in scalar type")
}

/// Probability floor applied before any logarithm, small enough to stay
/// below the tiniest entropy threshold in use (1e-25) while keeping every
/// log finite.
#[inline]
pub fn prob_floor<T: Scalar>() -> T {
    lit(1e-30)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lit_roundtrips_for_both_widths() {
        assert_eq!(lit::<f64>(0.5), 0.5);
        assert_eq!(lit::<f32>(0.5), 0.5f32);
    }

    #[test]
    fn prob_floor_is_positive_and_tiny() {
        let f: f64 = prob_floor();
        assert!(f > 0.0 && f < 1e-25);
    }
}
