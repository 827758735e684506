//! Monte Carlo and quadrature laboratory for isotropic heavy-tailed random
//! walks in `R^d` that are killed the first time they leave a right circular
//! cone.
//!
//! The crate provides
//! * exact samplers for the rotation-invariant stable increment law with
//!   characteristic function `exp(-|xi|^alpha)` and for compactly supported
//!   perturbations of it,
//! * cone geometry (membership, boundary distance, interior grids),
//! * the positive harmonic function of the killed process: closed form on the
//!   half-space, survival-ratio estimators on general cones, together with
//!   mean-value and envelope checks,
//! * the killed half-space Green function and the compensator construction
//!   used to certify one-step supermartingale drift,
//! * killed-walk simulation: survival curves, tail-exponent fits, harmonic
//!   limits, and the normalizing constant of the survival asymptotics,
//! * conditioned-path (meander) sampling with distributional equality and
//!   tightness diagnostics.
//!
//! All estimators consume explicit substreams from [`rng::StreamFactory`] and
//! reduce over fixed index chunks, so every result is reproducible bit for bit
//! across thread counts.
//!
//! Deterministic kernels (geometry, quadrature, special functions, closed
//! forms) are generic over the scalar type through [`scalar::Real`]; the
//! default type parameter everywhere is `f64`, which is what the samplers and
//! estimators use.

pub mod compensator;
pub mod geometry;
pub mod martin;
pub mod meander;
pub mod parallel;
pub mod quad;
pub mod rng;
pub mod scalar;
pub mod special;
pub mod stable;
pub mod stats;
pub mod walk;

/// Working scalar type of the sampling and estimation layers.
pub type Scalar = f64;

/// Position in `R^d`, dimension fixed at runtime.
pub type Point = Vec<f64>;

pub use geometry::ConeSpec;
pub use stable::{IncrementLaw, StableParams};

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A parameter is outside the mathematical domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),
    /// Adaptive quadrature stopped without reaching the requested accuracy.
    /// The payload carries the best value and the achieved error estimate.
    #[error("quadrature did not converge: value {value}, achieved error {achieved}, requested {requested}")]
    Quadrature {
        value: f64,
        achieved: f64,
        requested: f64,
    },
    /// A rejection sampler exceeded its retry cap.
    #[error("rejection sampler exceeded {cap} proposals (acceptance ~ {acceptance:.3e})")]
    RejectionCap { cap: u64, acceptance: f64 },
    /// An estimator was asked for a quantity its inputs cannot support.
    #[error("estimation error: {0}")]
    Estimation(String),
}

pub type Result<T> = std::result::Result<T, Error>;
