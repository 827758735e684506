//! Special functions needed by the closed-form kernels.
//!
//! `gamma` is a nine-term Lanczos approximation, generic over the scalar so
//! the kernels that use it stay generic; the incomplete-beta family and the
//! distribution CDFs are delegated to `statrs` at `f64`.

use crate::scalar::Real;
use statrs::distribution::ContinuousCDF;

/// Lanczos coefficients, g = 7.
const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_93,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_13,
    -176.615_029_162_140_59,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_571_6e-6,
    1.505_632_735_149_311_6e-7,
];

/// Gamma function for positive arguments (reflection handles `x < 1/2`).
pub fn gamma<F: Real>(x: F) -> F {
    let half = F::of(0.5);
    if x < half {
        // Gamma(x) Gamma(1-x) = pi / sin(pi x)
        let pi = F::PI();
        pi / ((pi * x).sin() * gamma(F::one() - x))
    } else {
        let x = x - F::one();
        let mut acc = F::of(LANCZOS[0]);
        for (i, &c) in LANCZOS.iter().enumerate().skip(1) {
            acc = acc + F::of(c) / (x + F::of_usize(i));
        }
        let t = x + F::of(7.5);
        let sqrt_two_pi = F::of(2.506_628_274_631_000_5);
        sqrt_two_pi * t.powf(x + half) * (-t).exp() * acc
    }
}

/// Surface area of the unit sphere `S^(d-1)` in `R^d`.
pub fn sphere_surface<F: Real>(dim: usize) -> F {
    let d = F::of_usize(dim);
    let half = F::of(0.5);
    F::of(2.0) * F::PI().powf(d * half) / gamma(d * half)
}

/// Bessel function of the first kind, order zero.
///
/// Taylor series for `|x| <= 12`, Hankel asymptotic expansion with
/// runtime-generated coefficients beyond. Absolute accuracy is about
/// `1e-11` near the crossover and much better elsewhere.
pub fn bessel_j0<F: Real>(x: F) -> F {
    let x = x.abs();
    if x <= F::of(12.0) {
        let q = x * x * F::of(0.25);
        let mut term = F::one();
        let mut sum = F::one();
        let mut k = 1usize;
        loop {
            let kf = F::of_usize(k);
            term = -term * q / (kf * kf);
            sum = sum + term;
            if term.abs() < F::of(1e-18) || k > 60 {
                break;
            }
            k += 1;
        }
        sum
    } else {
        // J0(x) ~ sqrt(2/(pi x)) (P cos w - Q sin w), w = x - pi/4, with
        //   P = sum_k (-1)^k     a_{2k}   x^{-2k}
        //   Q = sum_k (-1)^{k+1} a_{2k+1} x^{-2k-1}
        // and a_m = a_{m-1} (2m-1)^2 / (8m), a_0 = 1. The series is
        // asymptotic; truncate at the smallest term.
        let mut p = F::one();
        let mut q = F::zero();
        let mut a = F::one();
        let mut pow = F::one();
        let mut prev = F::infinity();
        for m in 1..40usize {
            let mf = F::of_usize(m);
            let odd = F::of((2 * m - 1) as f64);
            a = a * odd * odd / (F::of(8.0) * mf);
            pow = pow / x;
            let term = a * pow;
            if term.abs() >= prev {
                break;
            }
            prev = term.abs();
            if m % 2 == 1 {
                let k = (m - 1) / 2;
                q = if k % 2 == 0 { q - term } else { q + term };
            } else {
                let k = m / 2;
                p = if k % 2 == 0 { p + term } else { p - term };
            }
            if term.abs() < F::of(1e-17) {
                break;
            }
        }
        let w = x - F::FRAC_PI_4();
        (F::of(2.0) / (F::PI() * x)).sqrt() * (p * w.cos() - q * w.sin())
    }
}

/// Natural log of the gamma function for positive arguments.
pub fn ln_gamma(x: f64) -> f64 {
    statrs::function::gamma::ln_gamma(x)
}

/// Volume of the ball of radius `r` in `R^dim`.
pub fn ball_volume<F: Real>(dim: usize, r: F) -> F {
    sphere_surface::<F>(dim) / F::of_usize(dim) * r.powi(dim as i32)
}

/// Regularized incomplete beta function `I_x(a, b)`.
pub fn beta_reg(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else if x >= 1.0 {
        1.0
    } else {
        statrs::function::beta::beta_reg(a, b, x)
    }
}

/// Complete beta function `B(a, b)`.
pub fn beta(a: f64, b: f64) -> f64 {
    statrs::function::beta::beta(a, b)
}

/// Inverse of `x -> I_x(a, b)`.
///
/// The library inverse is only ~1e-8 accurate and can step slightly out of
/// `[0, 1]`, so its output is clamped and polished by Newton steps against
/// `beta_reg`.
pub fn inv_beta_reg(a: f64, b: f64, p: f64) -> f64 {
    if p <= 0.0 {
        return 0.0;
    }
    if p >= 1.0 {
        return 1.0;
    }
    let dist = statrs::distribution::Beta::new(a, b).expect("beta parameters");
    let mut x = dist.inverse_cdf(p).clamp(0.0, 1.0);
    let ln_b = ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b);
    for _ in 0..3 {
        if !(x > 0.0 && x < 1.0) {
            break;
        }
        let residual = beta_reg(a, b, x) - p;
        if residual == 0.0 {
            break;
        }
        let density = ((a - 1.0) * x.ln() + (b - 1.0) * (1.0 - x).ln() - ln_b).exp();
        if !density.is_finite() || density <= 0.0 {
            break;
        }
        let next = x - residual / density;
        if !(next > 0.0 && next < 1.0) {
            break;
        }
        x = next;
    }
    x
}

/// Upper tail of the chi-squared distribution with `k` degrees of freedom.
pub fn chi_squared_sf(k: f64, x: f64) -> f64 {
    let dist = statrs::distribution::ChiSquared::new(k).expect("chi-squared dof");
    1.0 - dist.cdf(x)
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    let dist = statrs::distribution::Normal::new(0.0, 1.0).expect("unit normal");
    dist.cdf(x)
}
