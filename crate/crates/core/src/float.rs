use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{FromPrimitive, NumAssignOps};

/// Scalar type the numeric core is generic over.
///
/// Training runs use `f32`; gradient checks and numerical oracles use `f64`.
/// The bound collects everything the kernels need so downstream signatures
/// stay short.
pub trait Float:
    num_traits::Float
    + FromPrimitive
    + NumAssignOps
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Lossy cast from `f64`, for constants and config values. Named to
    /// avoid colliding with `FromPrimitive::from_f64`.
    fn cast(v: f64) -> Self;

    /// Widening cast to `f64`, for metrics and accumulators.
    fn as_f64(self) -> f64;
}

impl Float for f32 {
    #[inline(always)]
    fn cast(v: f64) -> Self {
        v as f32
    }

    #[inline(always)]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Float for f64 {
    #[inline(always)]
    fn cast(v: f64) -> Self {
        v
    }

    #[inline(always)]
    fn as_f64(self) -> f64 {
        self
    }
}
