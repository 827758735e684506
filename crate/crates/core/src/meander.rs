//! Conditioned-path sampling and its distributional diagnostics.
//!
//! A walk conditioned to stay in the cone for `n` steps, rescaled by
//! `n^{1/alpha}`, approaches a law that no longer remembers the fine detail
//! of the increment distribution. This module samples such paths by
//! rejection (simulate, keep the survivors), records them on a fixed time
//! skeleton together with the running maximum of the modulus, and provides
//! the two statistical checks built on top: a two-sample equality test
//! between increment laws ([`invariance_check`]) and the conditional tail
//! table of the running maximum ([`tightness_check`]).
//!
//! Proposals reuse the shared path ensemble of [`crate::walk`]: proposal `i`
//! draws from the same substream as path `i` of [`crate::walk::survival_curve`],
//! so on a common configuration the acceptance rate and the survival estimate
//! are the same number, not merely close. Accepted paths are kept in proposal
//! order, which the fixed chunk partition of [`crate::parallel`] preserves at
//! any thread count.

use rand::Rng;

use crate::geometry::{norm, ConeSpec};
use crate::parallel::{chunked_fold, merge};
use crate::stable::IncrementLaw;
use crate::stats::{self, weighted_least_squares, KsResult};
use crate::walk::WalkConfig;
use crate::{Error, Result};

/// Fewest accepted paths on which summary statistics are considered
/// meaningful; also the smallest allowed acceptance target.
pub const MIN_ACCEPTED: u64 = 100;

/// Smallest sample size accepted by [`ks_two_sample`].
pub const KS_MIN_SIZE: usize = 50;

/// Fewest exceedances a tail row needs before it enters the slope fit.
pub const MIN_EXCEEDANCES: u64 = 25;

/// Per-projection p-value floor of the invariance verdict. Two projections
/// are tested, so the floor is Bonferroni-adjusted: the family-wise false
/// alarm rate stays below `2 * INVARIANCE_P_FLOOR`.
pub const INVARIANCE_P_FLOOR: f64 = 0.01;

/// Quantile levels reported by [`endpoint_stats`].
pub const SUMMARY_QUANTILES: [f64; 7] = [0.05, 0.1, 0.25, 0.5, 0.75, 0.9, 0.95];

const ANGLE_BINS: usize = 12;

/// Rescaled conditioned paths on a fixed time skeleton.
///
/// Every stored path stayed in the cone through step `n`. Positions are
/// scaled by `n^{-1/alpha}`, so skeleton points live on the scale of the
/// limiting path; the cone is scale invariant, hence scaled points with
/// grid step `>= 1` still lie in it. The running maximum is taken over all
/// visited positions (start and every step through `n`), not only the
/// skeleton, and is stored on the same scale.
#[derive(Debug, Clone)]
pub struct MeanderSample {
    cone: ConeSpec<f64>,
    n: u32,
    alpha: f64,
    times: Vec<f64>,
    grid_steps: Vec<u32>,
    // accepted * (k+1) * dim scaled coordinates, row-major by (path, grid point)
    skeletons: Vec<f64>,
    path_indices: Vec<u64>,
    running_max: Vec<f64>,
    proposed: u64,
    flagged: bool,
}

impl MeanderSample {
    pub fn cone(&self) -> &ConeSpec<f64> {
        &self.cone
    }

    pub fn dim(&self) -> usize {
        self.cone.dim()
    }

    /// Conditioning horizon `n`.
    pub fn n(&self) -> u32 {
        self.n
    }

    /// Stability index used for the `n^{1/alpha}` scaling.
    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Skeleton times `j/k` for `j = 0..=k`.
    pub fn times(&self) -> &[f64] {
        &self.times
    }

    /// Walk step recorded at each skeleton time, `floor(n j / k)`.
    pub fn grid_steps(&self) -> &[u32] {
        &self.grid_steps
    }

    pub fn accepted(&self) -> u64 {
        self.path_indices.len() as u64
    }

    pub fn proposed(&self) -> u64 {
        self.proposed
    }

    /// Fraction of proposals that survived; equals the survival estimate of
    /// the same configuration at horizon `n`.
    pub fn acceptance_rate(&self) -> f64 {
        self.accepted() as f64 / self.proposed as f64
    }

    /// True when fewer paths were accepted than the requested target
    /// (partial sample: the proposal budget ran out first).
    pub fn flagged(&self) -> bool {
        self.flagged
    }

    /// Proposal index of accepted path `i`; strictly increasing in `i`.
    pub fn path_index(&self, i: usize) -> u64 {
        self.path_indices[i]
    }

    /// All `(k+1) * dim` scaled coordinates of accepted path `i`.
    pub fn skeleton(&self, i: usize) -> &[f64] {
        let w = self.times.len() * self.dim();
        &self.skeletons[i * w..(i + 1) * w]
    }

    /// Scaled position of accepted path `i` at skeleton index `j`.
    pub fn point(&self, i: usize, j: usize) -> &[f64] {
        let d = self.dim();
        &self.skeleton(i)[j * d..(j + 1) * d]
    }

    /// Scaled position at time 1 (walk step `n`).
    pub fn endpoint(&self, i: usize) -> &[f64] {
        self.point(i, self.times.len() - 1)
    }

    /// Moduli of the scaled endpoints, one per accepted path.
    pub fn endpoint_radii(&self) -> Vec<f64> {
        (0..self.path_indices.len())
            .map(|i| norm(self.endpoint(i)))
            .collect()
    }

    /// Axis coordinates of the scaled endpoints, one per accepted path.
    pub fn endpoint_axis_coordinates(&self) -> Vec<f64> {
        let d = self.dim();
        (0..self.path_indices.len())
            .map(|i| self.endpoint(i)[d - 1])
            .collect()
    }

    /// Scaled running maxima, one per accepted path, in path order.
    pub fn running_maxes(&self) -> &[f64] {
        &self.running_max
    }
}

/// One accepted proposal: skeleton coordinates and scaled running max.
struct Accepted {
    index: u64,
    skeleton: Vec<f64>,
    running_max: f64,
}

/// Walk one proposal to step `n`, recording scaled positions at the grid
/// steps. Returns `None` as soon as the path leaves the cone. Consumes the
/// generator exactly like the survival simulation up to the exit step, which
/// is what makes acceptance and survival identical on shared streams.
fn conditioned_skeleton(
    cone: &ConeSpec<f64>,
    law: &IncrementLaw,
    start: &[f64],
    n: u32,
    grid_steps: &[u32],
    inv_scale: f64,
    rng: &mut impl Rng,
) -> Option<(Vec<f64>, f64)> {
    let mut pos = start.to_vec();
    let mut inc = vec![0.0; pos.len()];
    let mut rmax = norm(&pos);
    let mut skeleton = Vec::with_capacity(grid_steps.len() * pos.len());
    let mut next = 0usize;
    while next < grid_steps.len() && grid_steps[next] == 0 {
        skeleton.extend(pos.iter().map(|p| p * inv_scale));
        next += 1;
    }
    for step in 1..=n {
        law.sample_into(rng, &mut inc);
        for (p, dx) in pos.iter_mut().zip(&inc) {
            *p += dx;
        }
        let r = norm(&pos);
        if r > rmax {
            rmax = r;
        }
        if !cone.contains(&pos) {
            return None;
        }
        while next < grid_steps.len() && grid_steps[next] == step {
            skeleton.extend(pos.iter().map(|p| p * inv_scale));
            next += 1;
        }
    }
    debug_assert_eq!(next, grid_steps.len());
    Some((skeleton, rmax * inv_scale))
}

/// Sample paths conditioned to stay in the cone through step `n` by
/// rejection, on the time skeleton `{0, 1/k, ..., 1}` with `k = k_grid`.
///
/// All `cfg.reps()` proposals are consumed (a fixed proposal set keeps the
/// accepted set independent of the thread count); the sample is flagged when
/// fewer than `target_accepted` of them survive. Expect the acceptance rate
/// to decay like a power of `n`, so budgets scale polynomially, not
/// exponentially.
pub fn sample_conditioned(
    cfg: &WalkConfig,
    n: u32,
    k_grid: u32,
    target_accepted: u64,
) -> Result<MeanderSample> {
    if n < 1 || n > cfg.horizon() {
        return Err(Error::Domain(format!(
            "conditioning horizon {n} must lie in [1, {}]",
            cfg.horizon()
        )));
    }
    if k_grid < 1 {
        return Err(Error::Domain("skeleton needs k_grid >= 1".into()));
    }
    if target_accepted < MIN_ACCEPTED {
        return Err(Error::Domain(format!(
            "target_accepted {target_accepted} is below the minimum {MIN_ACCEPTED}"
        )));
    }
    let alpha = cfg.law().alpha();
    let inv_scale = (n as f64).powf(1.0 / alpha).recip();
    let k = k_grid as u64;
    let times: Vec<f64> = (0..=k).map(|j| j as f64 / k as f64).collect();
    let grid_steps: Vec<u32> = (0..=k).map(|j| (n as u64 * j / k) as u32).collect();

    struct Acc {
        kept: Vec<Accepted>,
        proposed: u64,
    }
    let parts = chunked_fold(
        cfg.reps(),
        || Acc {
            kept: Vec::new(),
            proposed: 0,
        },
        |acc, i| {
            let mut rng = cfg.path_rng(i);
            acc.proposed += 1;
            if let Some((skeleton, running_max)) = conditioned_skeleton(
                cfg.cone(),
                cfg.law(),
                cfg.start(),
                n,
                &grid_steps,
                inv_scale,
                &mut rng,
            ) {
                acc.kept.push(Accepted {
                    index: i,
                    skeleton,
                    running_max,
                });
            }
        },
    );
    let all = merge(parts, |a, b| {
        a.kept.extend(b.kept);
        a.proposed += b.proposed;
    })
    .expect("reps >= 1 yields at least one chunk");
    debug_assert_eq!(all.proposed, cfg.reps());
    debug_assert!(all.kept.windows(2).all(|w| w[0].index < w[1].index));

    let accepted = all.kept.len() as u64;
    let mut skeletons = Vec::with_capacity(all.kept.len() * times.len() * cfg.cone().dim());
    let mut path_indices = Vec::with_capacity(all.kept.len());
    let mut running_max = Vec::with_capacity(all.kept.len());
    for rec in all.kept {
        skeletons.extend(rec.skeleton);
        path_indices.push(rec.index);
        running_max.push(rec.running_max);
    }
    Ok(MeanderSample {
        cone: cfg.cone().clone(),
        n,
        alpha,
        times,
        grid_steps,
        skeletons,
        path_indices,
        running_max,
        proposed: all.proposed,
        flagged: accepted < target_accepted,
    })
}

/// Deterministic summaries of the time-1 marginal and of the running max.
#[derive(Debug, Clone)]
pub struct EndpointSummary {
    pub accepted: u64,
    /// `(level, value)` quantiles of the scaled endpoint modulus.
    pub radial_quantiles: Vec<(f64, f64)>,
    /// Histogram of the endpoint angle to the cone axis over `[0, theta)`.
    pub angular_counts: Vec<u64>,
    /// Bin edges of the angular histogram, length `angular_counts.len() + 1`.
    pub angular_edges: Vec<f64>,
    /// `(level, value)` quantiles of the scaled running maximum.
    pub max_modulus_quantiles: Vec<(f64, f64)>,
}

/// Summarize the endpoint marginal and the running-max distribution.
pub fn endpoint_stats(s: &MeanderSample) -> Result<EndpointSummary> {
    if s.accepted() < MIN_ACCEPTED {
        return Err(Error::Domain(format!(
            "endpoint summary needs at least {MIN_ACCEPTED} accepted paths, got {}",
            s.accepted()
        )));
    }
    let mut radii = s.endpoint_radii();
    radii.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
    let mut maxes = s.running_maxes().to_vec();
    maxes.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());

    let theta = s.cone.theta();
    let mut angular_counts = vec![0u64; ANGLE_BINS];
    for i in 0..s.accepted() as usize {
        // endpoints sit strictly inside the cone, so the angle is < theta
        let angle = s.cone.angle_from_axis(s.endpoint(i));
        let bin = ((angle / theta) * ANGLE_BINS as f64) as usize;
        angular_counts[bin.min(ANGLE_BINS - 1)] += 1;
    }
    let angular_edges = (0..=ANGLE_BINS)
        .map(|b| theta * b as f64 / ANGLE_BINS as f64)
        .collect();

    let quantiles_of = |sorted: &[f64]| {
        SUMMARY_QUANTILES
            .iter()
            .map(|&q| (q, stats::quantile(sorted, q)))
            .collect::<Vec<_>>()
    };
    Ok(EndpointSummary {
        accepted: s.accepted(),
        radial_quantiles: quantiles_of(&radii),
        angular_counts,
        angular_edges,
        max_modulus_quantiles: quantiles_of(&maxes),
    })
}

/// Two-sample Kolmogorov-Smirnov test with input validation.
///
/// The statistic is the exact sup distance between the two empirical CDFs
/// (tied values are consumed as blocks, the mid-rank convention); the
/// p-value is the usual asymptotic one. Both samples must hold at least
/// [`KS_MIN_SIZE`] finite values for the asymptotic p-value to be trusted.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<KsResult> {
    if a.len() < KS_MIN_SIZE || b.len() < KS_MIN_SIZE {
        return Err(Error::Domain(format!(
            "KS needs both samples >= {KS_MIN_SIZE}, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    if !a.iter().chain(b).all(|v| v.is_finite()) {
        return Err(Error::Domain("KS samples must be finite".into()));
    }
    Ok(stats::ks_two_sample(a, b))
}

/// Outcome of the two-law invariance test.
///
/// The verdict compares the scaled conditioned endpoints through two
/// one-dimensional projections, modulus and axis coordinate, each by a KS
/// test at the Bonferroni floor [`INVARIANCE_P_FLOOR`] (one-dimensional
/// projections keep the critical values distribution free). The running-max
/// comparison is reported alongside as a path-functional diagnostic but
/// does not enter the verdict.
#[derive(Debug, Clone)]
pub struct InvarianceReport {
    /// KS test between the scaled endpoint moduli.
    pub radius: KsResult,
    /// KS test between the scaled endpoint axis coordinates.
    pub axis: KsResult,
    /// KS test between the scaled running maxima (diagnostic only).
    pub max_modulus: KsResult,
    /// Both projection p-values clear the Bonferroni floor.
    pub pass: bool,
    /// Either sample fell short of its acceptance target.
    pub flagged: bool,
    pub accepted_a: u64,
    pub accepted_b: u64,
}

/// Test whether two increment laws produce the same scaled conditioned
/// paths at horizon `n`.
///
/// Both configurations must use the same cone and the same start; each
/// sample is scaled by its own law's `n^{1/alpha}` (the index is part of
/// the law under test: feeding a mismatched index is the standard negative
/// control and shows up as a failed verdict, not an input error).
pub fn invariance_check(
    cfg_a: &WalkConfig,
    cfg_b: &WalkConfig,
    n: u32,
    k_grid: u32,
    target_accepted: u64,
) -> Result<InvarianceReport> {
    if cfg_a.cone().dim() != cfg_b.cone().dim() || cfg_a.cone().theta() != cfg_b.cone().theta() {
        return Err(Error::Domain(
            "invariance check needs both walks in the same cone".into(),
        ));
    }
    if cfg_a.start() != cfg_b.start() {
        return Err(Error::Domain(
            "invariance check needs a common start point".into(),
        ));
    }
    let a = sample_conditioned(cfg_a, n, k_grid, target_accepted)?;
    let b = sample_conditioned(cfg_b, n, k_grid, target_accepted)?;
    let radius = ks_two_sample(&a.endpoint_radii(), &b.endpoint_radii())?;
    let axis = ks_two_sample(
        &a.endpoint_axis_coordinates(),
        &b.endpoint_axis_coordinates(),
    )?;
    let max_modulus = ks_two_sample(a.running_maxes(), b.running_maxes())?;
    Ok(InvarianceReport {
        radius,
        axis,
        max_modulus,
        pass: radius.p_value > INVARIANCE_P_FLOOR && axis.p_value > INVARIANCE_P_FLOOR,
        flagged: a.flagged() || b.flagged(),
        accepted_a: a.accepted(),
        accepted_b: b.accepted(),
    })
}

/// One row of the conditional running-max tail table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TightnessRow {
    /// Threshold `A`, on the scale of the running max (already divided by
    /// `n^{1/alpha}`).
    pub threshold: f64,
    /// Accepted paths whose scaled running max exceeds the threshold.
    pub exceedances: u64,
    /// Conditional exceedance probability.
    pub probability: f64,
    /// Too few exceedances to trust the row.
    pub flagged: bool,
}

/// Weighted log-log fit through the usable tail rows.
#[derive(Debug, Clone, Copy)]
pub struct TailFit {
    pub slope: f64,
    pub slope_se: f64,
    pub intercept: f64,
    pub rows_used: usize,
}

/// Conditional tail of the scaled running maximum.
#[derive(Debug, Clone)]
pub struct TightnessTable {
    rows: Vec<TightnessRow>,
    fit: Option<TailFit>,
}

impl TightnessTable {
    pub fn rows(&self) -> &[TightnessRow] {
        &self.rows
    }

    /// Log-log slope fit, absent when fewer than two rows are usable.
    pub fn fit(&self) -> Option<&TailFit> {
        self.fit.as_ref()
    }
}

/// Tabulate `P(max_k |x + S(k)| > A n^{1/alpha} | alive at n)` over the
/// threshold grid and fit the log-log slope through the usable rows.
///
/// The decay exponent of this tail is what caps the paths' excursions, so
/// the fitted slope is compared (by the caller) against the negated gap
/// between the stability index and the cone exponent. Rows with fewer than
/// [`MIN_EXCEEDANCES`] exceedances are flagged and excluded from the fit,
/// as are saturated rows (probability 1 carries no slope information);
/// remaining rows are weighted by their inverse binomial log-variance.
pub fn tightness_check(s: &MeanderSample, a_grid: &[f64]) -> Result<TightnessTable> {
    if s.accepted() < MIN_ACCEPTED {
        return Err(Error::Domain(format!(
            "tail table needs at least {MIN_ACCEPTED} accepted paths, got {}",
            s.accepted()
        )));
    }
    if a_grid.is_empty() {
        return Err(Error::Domain("threshold grid is empty".into()));
    }
    if !a_grid.iter().all(|a| a.is_finite() && *a > 0.0) {
        return Err(Error::Domain("thresholds must be finite and positive".into()));
    }
    if !a_grid.windows(2).all(|w| w[0] < w[1]) {
        return Err(Error::Domain("thresholds must be strictly increasing".into()));
    }
    let total = s.accepted();
    let rows: Vec<TightnessRow> = a_grid
        .iter()
        .map(|&a| {
            let exceedances = s.running_maxes().iter().filter(|&&m| m > a).count() as u64;
            TightnessRow {
                threshold: a,
                exceedances,
                probability: exceedances as f64 / total as f64,
                flagged: exceedances < MIN_EXCEEDANCES,
            }
        })
        .collect();

    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut ws = Vec::new();
    for r in &rows {
        if !r.flagged && r.probability < 1.0 {
            xs.push(r.threshold.ln());
            ys.push(r.probability.ln());
            // Var(ln p) ~ (1 - p) / exceedances for a binomial count
            ws.push(r.exceedances as f64 / (1.0 - r.probability));
        }
    }
    let fit = (xs.len() >= 2).then(|| {
        let line = weighted_least_squares(&xs, &ys, &ws);
        TailFit {
            slope: line.slope,
            slope_se: line.slope_var.sqrt(),
            intercept: line.intercept,
            rows_used: xs.len(),
        }
    });
    Ok(TightnessTable { rows, fit })
}
