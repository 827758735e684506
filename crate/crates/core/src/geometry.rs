//! Right circular cones: membership, distance to the boundary, and small
//! vector helpers shared by the samplers.
//!
//! A cone here is the open set of points whose angle to the positive last
//! coordinate axis is strictly less than a fixed half-angle `theta`. The
//! half-space is the special case `theta = pi/2`.

use crate::scalar::Real;
use crate::Error;

/// An open right circular cone around the positive last-coordinate axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConeSpec<F> {
    dim: usize,
    theta: F,
    cos_theta: F,
}

impl<F: Real> ConeSpec<F> {
    /// Cone of half-angle `theta` (radians, in `(0, pi)`) in dimension `dim >= 2`.
    pub fn new(dim: usize, theta: F) -> crate::Result<Self> {
        if dim < 2 {
            return Err(Error::Domain(format!(
                "cone dimension must be at least 2, got {dim}"
            )));
        }
        if !(theta > F::zero() && theta < F::PI()) || !theta.is_finite() {
            return Err(Error::Domain(format!(
                "cone half-angle must lie strictly between 0 and pi, got {:?}",
                theta
            )));
        }
        Ok(Self {
            dim,
            theta,
            cos_theta: theta.cos(),
        })
    }

    /// The upper half-space `{ x : x_d > 0 }` as a cone.
    pub fn half_space(dim: usize) -> crate::Result<Self> {
        let mut cone = Self::new(dim, F::FRAC_PI_2())?;
        // Pin the obvious value; cos(pi/2) rounds to ~6e-17 otherwise.
        cone.cos_theta = F::zero();
        Ok(cone)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn theta(&self) -> F {
        self.theta
    }

    /// The point `r * e_d` on the cone axis.
    pub fn axis_point(&self, r: F) -> Vec<F> {
        let mut x = vec![F::zero(); self.dim];
        x[self.dim - 1] = r;
        x
    }

    /// Angle between `x` and the axis, in `[0, pi]`. The origin maps to 0.
    pub fn angle_from_axis(&self, x: &[F]) -> F {
        debug_assert_eq!(x.len(), self.dim);
        let r = norm(x);
        if r == F::zero() {
            return F::zero();
        }
        let c = (x[self.dim - 1] / r).min(F::one()).max(-F::one());
        c.acos()
    }

    /// Whether `x` lies in the open cone (the apex does not).
    pub fn contains(&self, x: &[F]) -> bool {
        debug_assert_eq!(x.len(), self.dim);
        let r = norm(x);
        r > F::zero() && x[self.dim - 1] > r * self.cos_theta
    }

    /// Euclidean distance from `x` to the cone boundary; 0 outside the cone.
    ///
    /// For a point at angle `psi < theta` the nearest boundary point lies on
    /// the lateral surface at distance `|x| sin(theta - psi)` as long as
    /// `theta - psi <= pi/2`; beyond that (possible only for obtuse cones)
    /// the apex is nearest.
    pub fn dist_to_boundary(&self, x: &[F]) -> F {
        if !self.contains(x) {
            return F::zero();
        }
        let r = norm(x);
        let gap = self.theta - self.angle_from_axis(x);
        if gap <= F::FRAC_PI_2() {
            r * gap.sin()
        } else {
            r
        }
    }
}

/// Euclidean norm.
pub fn norm<F: Real>(x: &[F]) -> F {
    x.iter().fold(F::zero(), |s, &v| s + v * v).sqrt()
}

/// Euclidean distance.
pub fn dist<F: Real>(x: &[F], y: &[F]) -> F {
    debug_assert_eq!(x.len(), y.len());
    x.iter()
        .zip(y)
        .fold(F::zero(), |s, (&a, &b)| s + (a - b) * (a - b))
        .sqrt()
}

/// `x + y`, elementwise.
pub fn add<F: Real>(x: &[F], y: &[F]) -> Vec<F> {
    debug_assert_eq!(x.len(), y.len());
    x.iter().zip(y).map(|(&a, &b)| a + b).collect()
}

/// Reflection taking the last coordinate axis `e_d` to the unit vector `v`.
///
/// Returns the image of `x` under the Householder map across the bisector of
/// `e_d` and `v`. Isometric, so it pushes rotation-symmetric laws around
/// `e_d` to the same laws around `v`.
pub fn reflect_axis_to<F: Real>(v: &[F], x: &[F]) -> Vec<F> {
    debug_assert_eq!(v.len(), x.len());
    let d = v.len();
    let mut w: Vec<F> = v.to_vec();
    w[d - 1] = w[d - 1] - F::one();
    let w2 = w.iter().fold(F::zero(), |s, &c| s + c * c);
    if w2 < F::of(1e-24) {
        return x.to_vec();
    }
    let dot = w.iter().zip(x).fold(F::zero(), |s, (&a, &b)| s + a * b);
    let scale = F::of(2.0) * dot / w2;
    x.iter().zip(&w).map(|(&a, &b)| a - scale * b).collect()
}
