//! The Martin kernel of the killed limit process: its closed form on the
//! half-space, survival-ratio estimation on general cones, the cone index,
//! and checks of harmonicity, homogeneity, and the boundary-decay envelope.
//!
//! The kernel is normalized to 1 at the unit axis point `e_d`. On general
//! cones it is only accessible through survival ratios, and the start
//! points must grow with the horizon while staying far below the diffusive
//! scale `n^(1/alpha)`: launched from `x * a_n` with `a_n -> infinity`,
//! `a_n = o(n^(1/alpha))`, the walk survives `n` steps with probability
//! asymptotic to a constant times `M(x * a_n / n^(1/alpha))`, and by
//! homogeneity the ratio against the `e_d * a_n` start converges to
//! `M(x)`. Both endpoints of that window fail: fixed starts converge to
//! the ratio of the walk's own harmonic function (which matches `M` only
//! far from the apex), and starts at the full scale `n^(1/alpha)` converge
//! to a unit-time survival ratio of the limit process. Either way the
//! kernel would be biased at order one; see `estimate_martin_ratio`.
//!
//! Every estimator here runs both starts on common random numbers (one
//! path ensemble per seed), so ratios of the same configuration cancel
//! shared noise and the self-ratio at `e_d` is exactly one.

use crate::geometry::ConeSpec;
use crate::parallel::{chunked_fold, merge};
use crate::rng::StreamFactory;
use crate::stable::ball::sample_ball_exit;
use crate::stable::{IncrementLaw, StableParams};
use crate::stats::{
    bootstrap_replicates, percentile_ci, replicate_sd, weighted_least_squares, MeanVar,
    PointEstimate, Z95,
};
use crate::walk::{survival_curve, top_decade, PlateauVerdict, SurvivalCurve, WalkConfig};
use crate::{Error, Result};

/// Number of angles in an estimated kernel profile.
pub const PROFILE_ANGLES: usize = 32;

/// Fewest survivors at the top horizon before the index fit is considered
/// tail-starved and its interval widened.
pub const SPARSE_TAIL_MIN: u64 = 100;

const RESAMPLES: u32 = 500;

/// The half-space Martin kernel `x_d^(alpha/2)`, extended by zero.
///
/// The function is total: callers feed it arbitrary points of `R^d`
/// (ball-exit draws, stepped walk positions) and rely on the zero extension
/// outside the half-space.
pub fn eval_martin_halfspace(params: &StableParams, x: &[f64]) -> f64 {
    let height = x[x.len() - 1];
    if height > 0.0 {
        height.powf(params.alpha() / 2.0)
    } else {
        0.0
    }
}

/// One horizon of the index regression.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BetaPoint {
    pub horizon: u32,
    pub survival: f64,
    /// Inverse variance of the log-survival, the regression weight.
    pub weight: f64,
    /// False for horizons excluded from the fit (the pre-asymptotic head
    /// and any horizon with no survivors).
    pub used: bool,
}

/// The estimated cone index with its provenance.
#[derive(Debug, Clone)]
pub struct BetaEstimate {
    pub beta: PointEstimate,
    /// 95% interval; doubled in half-width when `sparse_tail` is set.
    pub ci: (f64, f64),
    /// Fewer than [`SPARSE_TAIL_MIN`] survivors at the largest horizon.
    pub sparse_tail: bool,
    pub points: Vec<BetaPoint>,
}

fn validate_beta_grid(horizons: &[u32]) -> Result<()> {
    if horizons.len() < 5 {
        return Err(Error::Domain(format!(
            "index regression needs at least 5 horizons, got {}",
            horizons.len()
        )));
    }
    let r0 = horizons[1] as f64 / horizons[0] as f64;
    for w in horizons.windows(2) {
        let r = w[1] as f64 / w[0] as f64;
        if (r / r0 - 1.0).abs() > 0.01 {
            return Err(Error::Domain(format!(
                "horizon grid must be geometric, ratio drifts from {r0:.4} to {r:.4}"
            )));
        }
    }
    Ok(())
}

/// Fit `log P(tau > n) = intercept + slope * log n` and return
/// `beta = -slope * alpha`. Shared by the public estimator and the profile
/// builder (which reuses an existing curve).
fn beta_from_curve(curve: &SurvivalCurve, alpha: f64) -> Result<BetaEstimate> {
    let stats = curve.stats();
    let reps = curve.reps() as f64;
    // Drop the smallest 20% of horizons: they carry pre-asymptotic bias.
    let dropped = (stats.len() as f64 * 0.2).round() as usize;

    let mut points = Vec::with_capacity(stats.len());
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut ws = Vec::new();
    for (i, s) in stats.iter().enumerate() {
        // Var(log p_hat) ~ (1 - p) / (reps * p) by the delta method; the
        // floor keeps all-survivor horizons from claiming zero variance.
        let weight = if s.survivors == 0 {
            0.0
        } else {
            reps * s.estimate / (1.0 - s.estimate).max(0.5 / reps)
        };
        let used = i >= dropped && s.survivors > 0;
        points.push(BetaPoint {
            horizon: s.horizon,
            survival: s.estimate,
            weight,
            used,
        });
        if used {
            xs.push((s.horizon as f64).ln());
            ys.push(s.estimate.ln());
            ws.push(weight);
        }
    }
    if xs.len() < 2 {
        return Err(Error::Estimation(
            "index regression has fewer than 2 usable horizons".into(),
        ));
    }

    let fit = weighted_least_squares(&xs, &ys, &ws);
    let beta = -fit.slope * alpha;
    let se = alpha * fit.slope_var.sqrt();
    let sparse_tail = stats.last().unwrap().survivors < SPARSE_TAIL_MIN;
    let half = Z95 * se * if sparse_tail { 2.0 } else { 1.0 };
    Ok(BetaEstimate {
        beta: PointEstimate { value: beta, se },
        ci: (beta - half, beta + half),
        sparse_tail,
        points,
    })
}

fn stable_walk_config(
    cone: ConeSpec<f64>,
    params: &StableParams,
    start: Vec<f64>,
    horizon: u32,
    reps: u64,
    seed: u64,
) -> Result<WalkConfig> {
    WalkConfig::new(
        cone,
        IncrementLaw::Stable(*params),
        start,
        horizon,
        reps,
        seed,
    )
}

/// Estimate the cone index from the survival decay of the walk started at
/// `e_d`: the weighted log-log slope over a geometric horizon grid, scaled
/// by `-alpha`.
pub fn estimate_beta(
    cone: ConeSpec<f64>,
    params: &StableParams,
    horizons: &[u32],
    reps: u64,
    seed: u64,
) -> Result<BetaEstimate> {
    validate_beta_grid(horizons)?;
    if reps < 100_000 {
        return Err(Error::Domain(format!(
            "index regression needs at least 1e5 paths, got {reps}"
        )));
    }
    let cfg = stable_walk_config(
        cone,
        params,
        cone.axis_point(1.0),
        *horizons.last().unwrap(),
        reps,
        seed,
    )?;
    let curve = survival_curve(&cfg, horizons)?;
    beta_from_curve(&curve, params.alpha())
}

/// A kernel value estimated as a survival ratio against the `e_d` anchor.
#[derive(Debug, Clone)]
pub struct MartinRatio {
    pub per_horizon: Vec<(u32, f64)>,
    /// Average ratio over the top decade of horizons; the standard error is
    /// the spread of joint chunk-bootstrap replicates.
    pub value: PointEstimate,
    pub ci: (f64, f64),
    /// `pass = false` flags a ratio still trending across the top two
    /// horizons (difference interval excluding zero).
    pub plateau: PlateauVerdict,
}

/// Start scale for horizon `n`: two thirds of the diffusive exponent, so
/// the start walks out to infinity (suppressing the finite-distance bias
/// of the walk's harmonic function against the kernel, measured ~ 0.5/a
/// on the half-space axis) while `a_n / n^(1/alpha) = n^(-1/(3 alpha))`
/// still vanishes, keeping the small-argument kernel asymptotics of the
/// survival probability in force.
fn start_scale(n: u32, alpha: f64) -> f64 {
    (n as f64).powf(2.0 / (3.0 * alpha))
}

fn scaled_start(x: &[f64], n: u32, alpha: f64) -> Vec<f64> {
    let s = start_scale(n, alpha);
    x.iter().map(|v| v * s).collect()
}

/// One single-point survival curve per horizon, each launched from
/// `x * a_n` with the intermediate scale of [`start_scale`]. All runs
/// share the seed, so pairs of calls with the same configuration shape
/// ride common random numbers.
fn horizon_curves(
    cone: ConeSpec<f64>,
    params: &StableParams,
    x: &[f64],
    horizons: &[u32],
    reps: u64,
    seed: u64,
) -> Result<Vec<SurvivalCurve>> {
    horizons
        .iter()
        .map(|&n| {
            let start = scaled_start(x, n, params.alpha());
            let cfg = stable_walk_config(cone, params, start, n, reps, seed)?;
            survival_curve(&cfg, &[n])
        })
        .collect()
}

fn ratio_from_horizon_curves(
    num: &[SurvivalCurve],
    den: &[SurvivalCurve],
    seed: u64,
) -> Result<MartinRatio> {
    let chunks = num[0].n_chunks();
    for c in num.iter().chain(den) {
        if c.n_chunks() != chunks || c.reps() != num[0].reps() {
            return Err(Error::Domain(
                "ratio curves must come from configurations of equal size".into(),
            ));
        }
    }
    if den.iter().any(|c| c.stats()[0].survivors == 0) {
        return Err(Error::Estimation(
            "anchor walk went extinct before the largest horizon".into(),
        ));
    }
    let per_horizon: Vec<(u32, f64)> = num
        .iter()
        .zip(den)
        .map(|(n, d)| (n.stats()[0].horizon, n.stats()[0].estimate / d.stats()[0].estimate))
        .collect();

    let flat: Vec<_> = num.iter().map(|c| c.stats()[0].clone()).collect();
    let top = top_decade(&flat);
    let ratio_over = |sel: &[usize], k: usize| {
        num[k].resampled_estimate(0, sel) / den[k].resampled_estimate(0, sel)
    };
    let plateau_avg =
        |sel: &[usize]| top.iter().map(|&k| ratio_over(sel, k)).sum::<f64>() / top.len() as f64;

    let factory = StreamFactory::new(seed).child("ratio-boot");
    let avg_reps = bootstrap_replicates(
        chunks,
        RESAMPLES,
        &mut factory.stream("boot", 0),
        plateau_avg,
    );
    let value = PointEstimate {
        value: plateau_avg(&(0..chunks).collect::<Vec<_>>()),
        se: replicate_sd(&avg_reps),
    };
    let ci = percentile_ci(&avg_reps, 0.95);

    let last = num.len() - 1;
    let diff_reps = bootstrap_replicates(
        chunks,
        RESAMPLES,
        &mut factory.stream("boot", 1),
        |sel| ratio_over(sel, last) - ratio_over(sel, last - 1),
    );
    let diff_ci = percentile_ci(&diff_reps, 0.95);
    let plateau = PlateauVerdict {
        pass: diff_ci.0 <= 0.0 && 0.0 <= diff_ci.1,
        difference: per_horizon[last].1 - per_horizon[last - 1].1,
        ci: diff_ci,
    };

    Ok(MartinRatio {
        per_horizon,
        value,
        ci,
        plateau,
    })
}

/// Estimate the Martin kernel at `x` as the plateau of survival ratios
/// with horizon-scaled starts:
/// `P(tau_{x a_n} > n) / P(tau_{e_d a_n} > n)` with the intermediate
/// scale `a_n = n^(2/(3 alpha))` of [`start_scale`].
///
/// Pushing the starts out with the horizon (but below the diffusive
/// scale) keeps the walk in the regime where its survival probability is
/// proportional to the kernel of the limit process, which is the
/// homogeneous object this estimator targets. A fixed start would instead
/// settle on the ratio of the walk's own harmonic function, which differs
/// from the kernel at any finite point.
///
/// Every horizon runs numerator and denominator on the same path ensemble
/// (common seed), so the estimate at `x = e_d` is exactly one with a
/// degenerate interval, and ratios at nearby starts cancel most of the
/// shared noise.
pub fn estimate_martin_ratio(
    cone: ConeSpec<f64>,
    params: &StableParams,
    x: &[f64],
    horizons: &[u32],
    reps: u64,
    seed: u64,
) -> Result<MartinRatio> {
    if horizons.len() < 2 {
        return Err(Error::Domain(
            "ratio estimation needs at least 2 horizons".into(),
        ));
    }
    let num = horizon_curves(cone, params, x, horizons, reps, seed)?;
    let den = horizon_curves(cone, params, &cone.axis_point(1.0), horizons, reps, seed)?;
    ratio_from_horizon_curves(&num, &den, seed)
}

/// One angle of the kernel profile.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProfilePoint {
    /// Angle from the cone axis, in `[0, theta)`.
    pub psi: f64,
    pub value: PointEstimate,
    pub ci: (f64, f64),
}

/// The Martin kernel of a cone, estimated on the unit sphere.
///
/// The profile lives on [`PROFILE_ANGLES`] uniform angles from the axis;
/// values off the grid interpolate linearly, with the exact boundary zero
/// at `psi = theta` closing the last segment. Radial behavior is recovered
/// through homogeneity of order `beta`, so the unit-sphere profile
/// determines the kernel everywhere.
#[derive(Debug, Clone)]
pub struct MartinEstimate {
    pub cone: ConeSpec<f64>,
    pub params: StableParams,
    pub beta: BetaEstimate,
    pub profile: Vec<ProfilePoint>,
}

impl MartinEstimate {
    /// Largest angle carried by the profile grid itself.
    pub fn max_angle(&self) -> f64 {
        self.profile.last().map_or(0.0, |p| p.psi)
    }

    fn interpolate_with(&self, psi: f64, pick: impl Fn(&ProfilePoint) -> f64) -> f64 {
        let theta = self.cone.theta();
        let psi = psi.clamp(0.0, theta);
        // Walk the grid; the boundary anchor (theta, 0) closes the range.
        let mut prev = (self.profile[0].psi, pick(&self.profile[0]));
        if psi <= prev.0 {
            return prev.1;
        }
        for p in &self.profile[1..] {
            let here = (p.psi, pick(p));
            if psi <= here.0 {
                let t = (psi - prev.0) / (here.0 - prev.0);
                return prev.1 + t * (here.1 - prev.1);
            }
            prev = here;
        }
        let t = (psi - prev.0) / (theta - prev.0);
        prev.1 * (1.0 - t)
    }

    /// Piecewise-linear profile value at angle `psi`.
    pub fn interpolate(&self, psi: f64) -> f64 {
        self.interpolate_with(psi, |p| p.value.value)
    }

    /// Interval bounds interpolated the same way as the values.
    pub fn interpolate_ci(&self, psi: f64) -> (f64, f64) {
        (
            self.interpolate_with(psi, |p| p.ci.0),
            self.interpolate_with(psi, |p| p.ci.1),
        )
    }

    /// Whether the kernel provably (beyond the interpolated intervals)
    /// decays from the axis toward the lateral boundary: the value just
    /// inside the boundary, at `psi = 0.99 theta`, must sit below the axis
    /// value.
    pub fn boundary_decay_check(&self) -> bool {
        let near_boundary = self.interpolate_ci(0.99 * self.cone.theta()).1;
        let axis = self.interpolate_ci(0.0).0;
        near_boundary < axis
    }
}

/// Estimate the full kernel profile of a cone: the index from a
/// fixed-start survival curve (its log-log decay slope) and one
/// scaled-start survival ratio per grid angle, all against a single set
/// of anchor curves.
///
/// Unlike [`estimate_beta`] this puts no floor on `reps`; small pilot
/// profiles are legitimate, they just carry wide intervals.
pub fn estimate_martin_profile(
    cone: ConeSpec<f64>,
    params: &StableParams,
    horizons: &[u32],
    reps: u64,
    seed: u64,
) -> Result<MartinEstimate> {
    validate_beta_grid(horizons)?;
    let decay_cfg = stable_walk_config(
        cone,
        params,
        cone.axis_point(1.0),
        *horizons.last().unwrap(),
        reps,
        seed,
    )?;
    let beta = beta_from_curve(&survival_curve(&decay_cfg, horizons)?, params.alpha())?;

    let den = horizon_curves(cone, params, &cone.axis_point(1.0), horizons, reps, seed)?;
    let theta = cone.theta();
    let dim = cone.dim();
    let mut profile = Vec::with_capacity(PROFILE_ANGLES);
    for j in 0..PROFILE_ANGLES {
        let psi = theta * j as f64 / PROFILE_ANGLES as f64;
        let mut x = vec![0.0; dim];
        x[0] = psi.sin();
        x[dim - 1] = psi.cos();
        let num = horizon_curves(cone, params, &x, horizons, reps, seed)?;
        let ratio = ratio_from_horizon_curves(&num, &den, seed)?;
        profile.push(ProfilePoint {
            psi,
            value: ratio.value,
            ci: ratio.ci,
        });
    }
    Ok(MartinEstimate {
        cone,
        params: *params,
        beta,
        profile,
    })
}

/// Monte Carlo mean-value residual of `m_eval` over the exit law of the
/// ball `B_r(x)`: returns `E[m_eval(exit)] - m_eval(x)` with its standard
/// error. Zero (within noise) characterizes harmonicity at `x`.
///
/// `m_eval` must be total on `R^d`, zero outside the cone: the exit law
/// charges the whole exterior of the ball.
pub fn check_mean_value(
    cone: ConeSpec<f64>,
    params: &StableParams,
    m_eval: impl Fn(&[f64]) -> f64 + Sync,
    x: &[f64],
    r: f64,
    reps: u64,
    seed: u64,
) -> Result<PointEstimate> {
    if params.dim() != cone.dim() || x.len() != cone.dim() {
        return Err(Error::Domain("dimension mismatch".into()));
    }
    if !cone.contains(x) {
        return Err(Error::Domain(format!("{x:?} lies outside the cone")));
    }
    let delta = cone.dist_to_boundary(x);
    if !(r > 0.0 && r < delta) {
        return Err(Error::Domain(format!(
            "ball radius must lie in (0, {delta}), got {r}"
        )));
    }
    if reps < 2 {
        return Err(Error::Domain("mean-value check needs reps >= 2".into()));
    }

    let factory = StreamFactory::new(seed);
    let center = vec![0.0; cone.dim()];
    let parts = chunked_fold(reps, MeanVar::default, |acc, i| {
        let mut rng = factory.stream("mean-value", i);
        let z = sample_ball_exit(params, r, &center, &mut rng)
            .expect("center start cannot exhaust the exit sampler");
        let y: Vec<f64> = x.iter().zip(&z).map(|(a, b)| a + b).collect();
        acc.push(m_eval(&y));
    });
    let mv = merge(parts, |a, b| a.merge(b)).expect("reps >= 2");
    Ok(PointEstimate {
        value: mv.mean() - m_eval(x),
        se: mv.se(),
    })
}

/// Result of comparing a kernel profile against its boundary-decay
/// envelope `|x|^(beta - alpha/2) * delta(x)^(alpha/2)`.
#[derive(Debug, Clone)]
pub struct EnvelopeStats {
    pub min: f64,
    pub max: f64,
    /// `(psi, ratio)` pairs over the requested grid.
    pub ratios: Vec<(f64, f64)>,
}

/// Ratio of the estimated kernel to the envelope
/// `|x|^(beta - alpha/2) delta(x)^(alpha/2)` over a grid of angles at unit
/// radius. The two-sided comparability of kernel and envelope means both
/// extremes stay finite and positive; radial invariance of the ratio is
/// exact because both sides are homogeneous of the same order.
pub fn check_michalik_envelope(
    estimate: &MartinEstimate,
    angles: &[f64],
) -> Result<EnvelopeStats> {
    let alpha = estimate.params.alpha();
    let beta_hat = estimate.beta.beta.value;
    let max_angle = estimate.max_angle();
    let mut ratios = Vec::with_capacity(angles.len());
    let dim = estimate.cone.dim();
    for &psi in angles {
        if !(0.0..=max_angle).contains(&psi) {
            return Err(Error::Domain(format!(
                "angle {psi} is outside the profile coverage [0, {max_angle}]"
            )));
        }
        let mut x = vec![0.0; dim];
        x[0] = psi.sin();
        x[dim - 1] = psi.cos();
        // Unit radius: the |x|^(beta - alpha/2) factor is identically 1,
        // and by homogeneity of both sides the ratio at any other radius
        // equals the ratio here.
        let envelope = crate::geometry::norm(&x).powf(beta_hat - alpha / 2.0)
            * estimate.cone.dist_to_boundary(&x).powf(alpha / 2.0);
        ratios.push((psi, estimate.interpolate(psi) / envelope));
    }
    let min = ratios.iter().map(|r| r.1).fold(f64::INFINITY, f64::min);
    let max = ratios.iter().map(|r| r.1).fold(f64::NEG_INFINITY, f64::max);
    Ok(EnvelopeStats { min, max, ratios })
}
