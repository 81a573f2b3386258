//! Scalar abstraction for the numeric parts of the crate.
//!
//! Everything that does arithmetic (matrices, encoder/decoder, GCN,
//! adjacency normalization) is generic over [`Real`] so the same code
//! runs in `f32` or `f64`. The pipeline and checkpoints use `f64`
//! (see the aliases at the crate root); gradient verification relies
//! on the 64-bit instantiation.

use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Floating-point scalar: `f32` or `f64`.
pub trait Real:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::NumAssignOps
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Lossless conversion out (for reports and serialization).
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn to_f64(self) -> f64 {
        self
    }
}

/// Shorthand for lifting an `f64` constant into the working scalar.
pub fn real<R: Real>(v: f64) -> R {
    R::from_f64(v).expect("constant representable in scalar type")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_constants() {
        let x: f32 = real(0.5);
        assert_eq!(x, 0.5f32);
        let y: f64 = real(1e-3);
        assert_eq!(y, 1e-3);
        assert_eq!(y.to_f64(), 1e-3);
    }
}
