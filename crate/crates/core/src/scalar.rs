//! Scalar abstraction for the deterministic kernels.
//!
//! Geometry, quadrature, and the closed-form kernels are generic over
//! [`Real`], instantiated as `f32` or `f64`. Everything probabilistic is
//! concrete `f64` (see the crate root alias [`crate::Scalar`]).

use num_traits::{Float, FloatConst, FromPrimitive};

/// Floating-point scalar usable in the deterministic kernels.
pub trait Real: Float + FloatConst + FromPrimitive + core::fmt::Debug + 'static {
    /// Shorthand for lossy conversion from `f64` literals.
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 conversion")
    }
    fn of_usize(n: usize) -> Self {
        Self::from_usize(n).expect("usize conversion")
    }
}

impl Real for f32 {}
impl Real for f64 {}
