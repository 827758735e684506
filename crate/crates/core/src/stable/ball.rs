//! Exit law of the isotropic stable process from a centered ball.
//!
//! Started at `x` inside the ball of radius `r`, the process leaves by a jump
//! and lands at `y` outside with density
//!
//! `P(x, y) = c(d, alpha) [(r^2 - |x|^2) / (|y|^2 - r^2)]^(alpha/2) |x - y|^(-d)`,
//! `c(d, alpha) = Gamma(d/2) pi^(-d/2 - 1) sin(pi alpha / 2)`.
//!
//! From the center the radial law is explicit: the exit radius `rho` (ball
//! radius 1) satisfies `P(rho <= s) = I_(1 - 1/s^2)(1 - alpha/2, alpha/2)`,
//! which inverts through the incomplete-beta quantile, and the direction is
//! uniform. Off-center draws come from that proposal by rejection with the
//! alpha-free acceptance `(|y| (r - |x|) / (r |x - y|))^d`.

use rand::Rng;

use crate::geometry::{dist, norm};
use crate::quad::adaptive;
use crate::scalar::Real;
use crate::special::{beta_reg, gamma, inv_beta_reg};
use crate::stable::sampler::uniform_direction;
use crate::stable::StableParams;
use crate::{Error, Result};

/// Normalizing constant `c(d, alpha)` of the exit density.
pub fn poisson_ball_constant<F: Real>(params: &StableParams<F>) -> F {
    let d = F::of_usize(params.dim());
    let half = F::of(0.5);
    gamma(d * half) * F::PI().powf(-(d * half + F::one()))
        * (F::FRAC_PI_2() * params.alpha()).sin()
}

/// Exit density `P(x, y)` for the ball of radius `radius`; `x` must be
/// strictly inside, and the density vanishes for `y` inside the closed ball.
pub fn poisson_ball_density<F: Real>(
    params: &StableParams<F>,
    radius: F,
    x: &[F],
    y: &[F],
) -> F {
    debug_assert_eq!(x.len(), params.dim());
    debug_assert_eq!(y.len(), params.dim());
    let rx = norm(x);
    debug_assert!(rx < radius, "start must lie inside the ball");
    let ry = norm(y);
    if ry <= radius {
        return F::zero();
    }
    let half = F::of(0.5);
    let ratio = (radius * radius - rx * rx) / (ry * ry - radius * radius);
    poisson_ball_constant(params)
        * ratio.powf(params.alpha() * half)
        * dist(x, y).powi(-(params.dim() as i32))
}

/// Distribution function of the exit radius from the unit ball, started at
/// the center: `P(|Y| <= rho) = I_(1 - 1/rho^2)(1 - alpha/2, alpha/2)`.
pub fn ball_exit_radial_cdf(params: &StableParams, rho: f64) -> f64 {
    if rho <= 1.0 {
        return 0.0;
    }
    let a = params.alpha() / 2.0;
    beta_reg(1.0 - a, a, 1.0 - 1.0 / (rho * rho))
}

/// Quantile of the exit radius from the unit ball, started at the center.
pub fn ball_exit_radial_quantile(params: &StableParams, q: f64) -> f64 {
    debug_assert!((0.0..1.0).contains(&q));
    let a = params.alpha() / 2.0;
    let x = inv_beta_reg(1.0 - a, a, q);
    1.0 / (1.0 - x).sqrt()
}

/// Exact draw of the process position at its first exit from the ball of
/// radius `radius` centered at the origin, started at `x` strictly inside.
///
/// From the center this is one inverse-CDF draw. Off-center starts use
/// rejection against the centered proposal; the expected number of proposals
/// is `[r^2/(r^2 - |x|^2)]^(alpha/2) [r/(r - |x|)]^d`, so starts very close
/// to the boundary are expensive and eventually trip the proposal cap.
pub fn sample_ball_exit(
    params: &StableParams,
    radius: f64,
    x: &[f64],
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    let rx = norm(x);
    if !(rx < radius * (1.0 - 1e-9)) {
        return Err(Error::Domain(format!(
            "exit sampling needs |x| = {rx} strictly inside the ball of radius {radius}"
        )));
    }
    fn centered(params: &StableParams, radius: f64, rng: &mut impl Rng) -> Vec<f64> {
        // Quantiles of q ~ 1e-64 round to the sphere itself; resample those
        // (measure-zero) draws so the output is always strictly outside.
        let rho = loop {
            let q: f64 = rng.random();
            let rho = radius * ball_exit_radial_quantile(params, q);
            if rho > radius {
                break rho;
            }
        };
        uniform_direction(params.dim(), rng)
            .into_iter()
            .map(|c| c * rho)
            .collect()
    }
    let dim = params.dim();
    if rx < 1e-14 * radius {
        return Ok(centered(params, radius, rng));
    }
    let cap = 100_000u64;
    for _ in 0..cap {
        let y = centered(params, radius, rng);
        let accept = (norm(&y) * (radius - rx) / (radius * dist(x, &y))).powi(dim as i32);
        debug_assert!(accept <= 1.0 + 1e-12);
        if rng.random::<f64>() < accept {
            return Ok(y);
        }
    }
    let acceptance = ((radius * radius - rx * rx) / (radius * radius))
        .powf(params.alpha() / 2.0)
        * ((radius - rx) / radius).powi(dim as i32);
    Err(Error::RejectionCap { cap, acceptance })
}

/// Angular integral `int_{S^(d-1)} |rho u - x|^(-d) dsigma(u)` for `|x| = t`,
/// in closed form for d = 1, 2, 3.
fn angular_factor(dim: usize, rho: f64, t: f64) -> Result<f64> {
    let gap = rho * rho - t * t;
    match dim {
        1 => Ok(2.0 * rho / gap),
        2 => Ok(2.0 * std::f64::consts::PI / gap),
        3 => Ok(4.0 * std::f64::consts::PI / (rho * gap)),
        _ => Err(Error::Domain(format!(
            "angular reduction is implemented for dimensions 1..=3, got {dim}"
        ))),
    }
}

/// `P(|Y| <= rho)` for the exit from the unit ball started at distance `t`
/// from the center, by quadrature of the radially reduced exit density.
/// `rho = inf` gives the total mass, which must be 1.
pub fn exit_radial_mass(params: &StableParams, t: f64, rho: Option<f64>) -> Result<f64> {
    if !(0.0..1.0).contains(&t) {
        return Err(Error::Domain(format!(
            "start distance must lie in [0, 1), got {t}"
        )));
    }
    let alpha = params.alpha();
    let dim = params.dim();
    angular_factor(dim, 2.0, t)?;
    let g = |rho: f64| -> f64 {
        rho.powi(dim as i32 - 1) * angular_factor(dim, rho, t).expect("dimension checked above")
    };

    // Near piece on [1, 2]: rho = sqrt(1 + v^q) flattens the boundary
    // singularity (rho^2 - 1)^(-alpha/2) exactly.
    let q = 2.0 / (2.0 - alpha);
    let upper = rho.unwrap_or(f64::INFINITY);
    let near_end = upper.min(2.0);
    let mut total = 0.0;
    if near_end > 1.0 {
        let v_end = (near_end * near_end - 1.0).powf(1.0 / q);
        let near = adaptive(
            |v: f64| {
                let r = (1.0 + v.powf(q)).sqrt();
                g(r) / (2.0 * r)
            },
            0.0,
            v_end,
            1e-11,
            1e-14,
            2000,
        )
        .expect_converged(1e-11)?;
        total += q * near;
    }

    // Far piece beyond 2: rho = 2 sigma^(-1/alpha) turns the tail into a
    // bounded integrand on (0, 1].
    if upper > 2.0 {
        let h = |r: f64| (r * r - 1.0).powf(-alpha / 2.0) * g(r);
        let sigma_low = if upper.is_finite() {
            (upper / 2.0).powf(-alpha)
        } else {
            0.0
        };
        let far = adaptive(
            |sigma: f64| {
                if sigma <= 0.0 {
                    // Limit value c_d 2^(-alpha) / alpha * ... is finite; the
                    // open endpoint is never sampled by the Kronrod nodes.
                    return 0.0;
                }
                let r = 2.0 * sigma.powf(-1.0 / alpha);
                h(r) * (2.0 / alpha) * sigma.powf(-1.0 / alpha - 1.0)
            },
            sigma_low,
            1.0,
            1e-11,
            1e-14,
            2000,
        )
        .expect_converged(1e-11)?;
        total += far;
    }

    Ok(poisson_ball_constant::<f64>(params) * (1.0 - t * t).powf(alpha / 2.0) * total)
}
