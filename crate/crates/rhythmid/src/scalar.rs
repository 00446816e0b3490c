//! Scalar abstraction for the numeric core.

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

/// Floating-point scalar the tensor core is generic over.
///
/// `f32` is the training precision; `f64` is used wherever finite
/// differences need headroom (gradient checks, schedule math).
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssignOps
    + Default
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from `f64`, the interchange precision.
    fn of(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("finite f64 converts to any Scalar")
    }

    /// Widen to `f64` for reporting and logging.
    fn as_f64(self) -> f64 {
        <Self as ToPrimitive>::to_f64(&self).expect("Scalar widens to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conversions_round_trip_exactly_for_representable_values() {
        assert_eq!(f32::of(0.5).as_f64(), 0.5);
        assert_eq!(f64::of(-3.25), -3.25);
        assert_eq!(f32::of(1e-4), 1e-4f32);
    }
}
