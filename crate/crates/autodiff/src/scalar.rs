//! Scalar abstraction for the numeric core.
//!
//! Every tensor, tape and optimizer in this crate is generic over [`Scalar`]
//! so the same kernels run in `f32` or `f64`. The crate root exports `f64`
//! aliases, which is the working precision for the laboratory: checkpoint
//! payloads are stored as `f64` on disk and the finite-difference oracle
//! needs the headroom.

use std::fmt;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating-point element type usable by the tape kernels.
///
/// The supertraits provide everything the kernels need (transcendentals,
/// comparisons, assignment operators); the two inherent methods pin down the
/// conversion used by checkpoint serialization, which always stores `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Default + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    /// Converts from `f64`, the checkpoint/payload precision.
    fn from_f64_checked(v: f64) -> Self {
        Self::from_f64(v).expect("f64 value representable in scalar type")
    }

    /// Converts to `f64`, the checkpoint/payload precision.
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_through_f64_exactly() {
        let x: f32 = 0.1;
        assert_eq!(f32::from_f64_checked(x.as_f64()), x);
        let y: f64 = 0.1;
        assert_eq!(f64::from_f64_checked(y.as_f64()), y);
    }
}
