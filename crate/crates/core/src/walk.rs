//! The random walk killed on leaving a cone: exit simulation, survival
//! curves, the harmonic-function estimator, and the tail-constant plateau.
//!
//! All estimators share one deterministic path layout: path `i` draws from
//! the substream `(seed, PATH_TAG, i)` and paths are folded in fixed chunks
//! (see [`crate::parallel`]), so identical configurations reproduce
//! identical bits at any thread count. Because streams depend only on seed
//! and index, [`survival_curve`] and [`estimate_v`] run on the *same*
//! trajectories, which makes their chunk partitions jointly resampleable;
//! the tail-constant estimator exploits that for its bootstrap intervals.
//! Estimators that need paths independent of the shared ensemble (the
//! nested harmonicity residual) derive child factories instead.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::geometry::{norm, ConeSpec};
use crate::parallel::{chunked_fold, merge};
use crate::rng::StreamFactory;
use crate::stable::IncrementLaw;
use crate::stats::{self, MeanVar, PointEstimate, Z95};
use crate::{Error, Result};

/// Stream tag of the shared path ensemble.
pub const PATH_TAG: &str = "walk-path";

/// Number of bootstrap resamples used by the plateau and tail-constant
/// intervals.
pub const BOOTSTRAP_RESAMPLES: u32 = 500;

/// A killed-walk simulation plan.
#[derive(Debug, Clone)]
pub struct WalkConfig {
    cone: ConeSpec<f64>,
    law: IncrementLaw,
    start: Vec<f64>,
    horizon: u32,
    reps: u64,
    seed: u64,
}

impl WalkConfig {
    pub fn new(
        cone: ConeSpec<f64>,
        law: IncrementLaw,
        start: Vec<f64>,
        horizon: u32,
        reps: u64,
        seed: u64,
    ) -> Result<Self> {
        if law.dim() != cone.dim() {
            return Err(Error::Domain(format!(
                "increment law lives in dimension {}, cone in {}",
                law.dim(),
                cone.dim()
            )));
        }
        if start.len() != cone.dim() {
            return Err(Error::Domain(format!(
                "start point has {} coordinates, cone needs {}",
                start.len(),
                cone.dim()
            )));
        }
        if !cone.contains(&start) {
            return Err(Error::Domain(format!("start {start:?} lies outside the cone")));
        }
        if horizon < 1 || reps < 1 {
            return Err(Error::Domain(
                "walk needs horizon >= 1 and reps >= 1".into(),
            ));
        }
        Ok(Self {
            cone,
            law,
            start,
            horizon,
            reps,
            seed,
        })
    }

    pub fn cone(&self) -> &ConeSpec<f64> {
        &self.cone
    }

    pub fn law(&self) -> &IncrementLaw {
        &self.law
    }

    pub fn start(&self) -> &[f64] {
        &self.start
    }

    pub fn horizon(&self) -> u32 {
        self.horizon
    }

    pub fn reps(&self) -> u64 {
        self.reps
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn factory(&self) -> StreamFactory {
        StreamFactory::new(self.seed)
    }

    /// Substream of path `path_index` in the shared ensemble.
    pub fn path_rng(&self, path_index: u64) -> ChaCha8Rng {
        self.factory().stream(PATH_TAG, path_index)
    }
}

/// Outcome of one simulated path.
#[derive(Debug, Clone, PartialEq)]
pub struct ExitRecord {
    /// First step strictly outside the cone; `None` if censored at the cap.
    pub exit_step: Option<u32>,
    /// Position at the exit step, or at the cap when censored.
    pub final_position: Vec<f64>,
    /// Max of |position| over all visited indices, start and final included.
    pub running_max: f64,
}

impl ExitRecord {
    /// Survival of the event `tau > n`; valid for `n` up to the simulated cap.
    pub fn survived(&self, n: u32) -> bool {
        self.exit_step.is_none_or(|t| t > n)
    }
}

fn walk_record(
    cone: &ConeSpec<f64>,
    law: &IncrementLaw,
    start: &[f64],
    cap: u32,
    rng: &mut impl Rng,
) -> ExitRecord {
    let mut pos = start.to_vec();
    let mut inc = vec![0.0; pos.len()];
    let mut running_max = norm(&pos);
    for step in 1..=cap {
        law.sample_into(rng, &mut inc);
        for (p, dx) in pos.iter_mut().zip(&inc) {
            *p += dx;
        }
        let r = norm(&pos);
        if r > running_max {
            running_max = r;
        }
        if !cone.contains(&pos) {
            return ExitRecord {
                exit_step: Some(step),
                final_position: pos,
                running_max,
            };
        }
    }
    ExitRecord {
        exit_step: None,
        final_position: pos,
        running_max,
    }
}

/// Simulate one path to the configured horizon.
pub fn run_walk_exit(cfg: &WalkConfig, rng: &mut impl Rng) -> ExitRecord {
    walk_record(&cfg.cone, &cfg.law, &cfg.start, cfg.horizon, rng)
}

/// Survival estimate at one horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct HorizonStat {
    pub horizon: u32,
    pub survivors: u64,
    pub estimate: f64,
    /// Wilson 95% interval.
    pub ci: (f64, f64),
}

/// Survival probabilities over a horizon grid, estimated on shared paths
/// (every path serves all horizons), with chunk-level counts retained for
/// bootstrap resampling.
#[derive(Debug, Clone)]
pub struct SurvivalCurve {
    reps: u64,
    stats: Vec<HorizonStat>,
    chunk_survivors: Vec<Vec<u64>>,
    chunk_paths: Vec<u64>,
}

impl SurvivalCurve {
    pub fn reps(&self) -> u64 {
        self.reps
    }

    pub fn stats(&self) -> &[HorizonStat] {
        &self.stats
    }

    /// True when some horizon has zero survivors (its CI is degenerate).
    pub fn flagged(&self) -> bool {
        self.stats.iter().any(|s| s.survivors == 0)
    }

    pub fn n_chunks(&self) -> usize {
        self.chunk_paths.len()
    }

    /// Chunk partition fingerprint; estimates from the same configuration
    /// share it, which joint bootstraps require.
    fn partition(&self) -> &[u64] {
        &self.chunk_paths
    }

    /// Survival fraction at horizon index `idx` over a chunk selection.
    pub fn resampled_estimate(&self, idx: usize, chunks: &[usize]) -> f64 {
        let mut s = 0u64;
        let mut n = 0u64;
        for &c in chunks {
            s += self.chunk_survivors[c][idx];
            n += self.chunk_paths[c];
        }
        s as f64 / n as f64
    }

    /// Bootstrap replicates of the survival estimate at horizon index `idx`.
    pub fn bootstrap(&self, idx: usize, resamples: u32, rng: &mut impl Rng) -> Vec<f64> {
        stats::bootstrap_replicates(self.n_chunks(), resamples, rng, |sel| {
            self.resampled_estimate(idx, sel)
        })
    }
}

/// Estimate the survival curve `P(tau > n)` on the given horizon grid.
///
/// Horizons must be strictly increasing within `[1, cfg.horizon]`. One pass
/// serves every horizon (censoring at the largest one), so the curve is
/// monotone by construction and the per-horizon estimates are dependent;
/// joint statements across horizons should use the chunk bootstrap.
pub fn survival_curve(cfg: &WalkConfig, horizons: &[u32]) -> Result<SurvivalCurve> {
    validate_grid(horizons, 1, cfg.horizon, "horizon")?;
    let cap = *horizons.last().unwrap();

    struct Acc {
        survivors: Vec<u64>,
        paths: u64,
    }
    let parts = chunked_fold(
        cfg.reps,
        || Acc {
            survivors: vec![0; horizons.len()],
            paths: 0,
        },
        |acc, i| {
            let mut rng = cfg.path_rng(i);
            let rec = walk_record(&cfg.cone, &cfg.law, &cfg.start, cap, &mut rng);
            acc.paths += 1;
            match rec.exit_step {
                None => {
                    for s in acc.survivors.iter_mut() {
                        *s += 1;
                    }
                }
                Some(t) => {
                    for (j, &h) in horizons.iter().enumerate() {
                        if t > h {
                            acc.survivors[j] += 1;
                        } else {
                            break;
                        }
                    }
                }
            }
        },
    );

    let chunk_survivors: Vec<Vec<u64>> = parts.iter().map(|a| a.survivors.clone()).collect();
    let chunk_paths: Vec<u64> = parts.iter().map(|a| a.paths).collect();
    let totals = merge(parts, |a, b| {
        for (s, o) in a.survivors.iter_mut().zip(&b.survivors) {
            *s += o;
        }
        a.paths += b.paths;
    })
    .expect("reps >= 1 yields at least one chunk");
    debug_assert_eq!(totals.paths, cfg.reps);

    let stats = horizons
        .iter()
        .zip(&totals.survivors)
        .map(|(&h, &s)| HorizonStat {
            horizon: h,
            survivors: s,
            estimate: s as f64 / cfg.reps as f64,
            ci: stats::wilson_interval(s, cfg.reps, Z95),
        })
        .collect();

    Ok(SurvivalCurve {
        reps: cfg.reps,
        stats,
        chunk_survivors,
        chunk_paths,
    })
}

/// Verdict of the "top of the grid has stopped moving" check: the bootstrap
/// interval of the difference between the two largest-grid estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauVerdict {
    pub pass: bool,
    pub difference: f64,
    pub ci: (f64, f64),
}

/// The harmonic-function estimator
/// `V_m(x) = E[M(x + S(m)); tau_x > m]` over a grid of `m`.
#[derive(Debug, Clone)]
pub struct HarmonicEstimate {
    m_grid: Vec<u32>,
    values: Vec<PointEstimate>,
    chunk_sums: Vec<Vec<f64>>,
    chunk_paths: Vec<u64>,
    plateau: PlateauVerdict,
}

impl HarmonicEstimate {
    pub fn m_grid(&self) -> &[u32] {
        &self.m_grid
    }

    pub fn values(&self) -> &[PointEstimate] {
        &self.values
    }

    /// The estimate at the top of the grid (the plateau value).
    pub fn value(&self) -> PointEstimate {
        *self.values.last().unwrap()
    }

    pub fn plateau(&self) -> &PlateauVerdict {
        &self.plateau
    }

    fn partition(&self) -> &[u64] {
        &self.chunk_paths
    }

    pub fn resampled_value(&self, idx: usize, chunks: &[usize]) -> f64 {
        let mut s = 0.0;
        let mut n = 0u64;
        for &c in chunks {
            s += self.chunk_sums[c][idx];
            n += self.chunk_paths[c];
        }
        s / n as f64
    }

    pub fn bootstrap(&self, idx: usize, resamples: u32, rng: &mut impl Rng) -> Vec<f64> {
        stats::bootstrap_replicates(self.chunk_paths.len(), resamples, rng, |sel| {
            self.resampled_value(idx, sel)
        })
    }
}

/// Estimate `V_m(x) = E[M(x + S(m)); tau_x > m]` for every `m` in the grid,
/// on the shared path ensemble (common random numbers with the survival
/// curve of the same configuration).
///
/// `m_eval` must be defined on all of `R^d`; killed paths contribute zero by
/// the indicator, not through `m_eval`. The grid must be strictly increasing
/// in `[0, cfg.horizon]`; `m = 0` yields `m_eval(start)` exactly.
pub fn estimate_v(
    cfg: &WalkConfig,
    m_grid: &[u32],
    m_eval: impl Fn(&[f64]) -> f64 + Sync,
) -> Result<HarmonicEstimate> {
    validate_grid(m_grid, 0, cfg.horizon, "m")?;
    let cap = *m_grid.last().unwrap();

    struct Acc {
        sums: Vec<f64>,
        moments: Vec<MeanVar>,
        paths: u64,
        scratch: Vec<f64>,
        inc: Vec<f64>,
    }
    let parts = chunked_fold(
        cfg.reps,
        || Acc {
            sums: vec![0.0; m_grid.len()],
            moments: vec![MeanVar::default(); m_grid.len()],
            paths: 0,
            scratch: vec![0.0; m_grid.len()],
            inc: vec![0.0; cfg.cone.dim()],
        },
        |acc, i| {
            let mut rng = cfg.path_rng(i);
            let mut pos = cfg.start.clone();
            acc.scratch.fill(0.0);
            let mut j = 0;
            if m_grid[j] == 0 {
                acc.scratch[j] = m_eval(&pos);
                j += 1;
            }
            'walk: for step in 1..=cap {
                cfg.law.sample_into(&mut rng, &mut acc.inc);
                for (p, dx) in pos.iter_mut().zip(&acc.inc) {
                    *p += dx;
                }
                if !cfg.cone.contains(&pos) {
                    break 'walk;
                }
                if step == m_grid[j] {
                    acc.scratch[j] = m_eval(&pos);
                    j += 1;
                    if j == m_grid.len() {
                        break 'walk;
                    }
                }
            }
            acc.paths += 1;
            for ((s, mv), &c) in acc.sums.iter_mut().zip(&mut acc.moments).zip(&acc.scratch) {
                *s += c;
                mv.push(c);
            }
        },
    );

    let chunk_sums: Vec<Vec<f64>> = parts.iter().map(|a| a.sums.clone()).collect();
    let chunk_paths: Vec<u64> = parts.iter().map(|a| a.paths).collect();
    let moments = merge(
        parts.into_iter().map(|a| a.moments).collect(),
        |a: &mut Vec<MeanVar>, b| {
            for (x, y) in a.iter_mut().zip(b) {
                x.merge(y);
            }
        },
    )
    .expect("reps >= 1 yields at least one chunk");
    let values: Vec<PointEstimate> = moments.iter().map(PointEstimate::of).collect();

    let mut estimate = HarmonicEstimate {
        m_grid: m_grid.to_vec(),
        values,
        chunk_sums,
        chunk_paths,
        plateau: PlateauVerdict {
            pass: true,
            difference: 0.0,
            ci: (0.0, 0.0),
        },
    };
    if m_grid.len() >= 2 {
        let top = m_grid.len() - 1;
        let mut rng = cfg.factory().child("v-plateau").stream("boot", 0);
        let reps = stats::bootstrap_replicates(
            estimate.chunk_paths.len(),
            BOOTSTRAP_RESAMPLES,
            &mut rng,
            |sel| estimate.resampled_value(top, sel) - estimate.resampled_value(top - 1, sel),
        );
        let ci = stats::percentile_ci(&reps, 0.95);
        estimate.plateau = PlateauVerdict {
            pass: ci.0 <= 0.0 && 0.0 <= ci.1,
            difference: estimate.values[top].value - estimate.values[top - 1].value,
            ci,
        };
    }
    Ok(estimate)
}

/// One-step invariance defect of the estimator `V`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualEstimate {
    /// `base - stepped`; zero in expectation when `V` is invariant under one
    /// killed step.
    pub residual: f64,
    pub se: f64,
    /// `V` at the base point, horizon `m* + 1`.
    pub base: PointEstimate,
    /// One-step expectation `E[V_{m*}(x + X); x + X in cone]`.
    pub stepped: PointEstimate,
    /// Share of the outer variance contributed by inner-estimate noise;
    /// near 1 means `inner_reps` dominates the error budget.
    pub inner_noise_share: f64,
}

/// Nested Monte Carlo check of one-step invariance:
/// `V_{m*+1}(x) = E[V_{m*}(x + X); tau_x > 1]` exactly, by the tower
/// property, so the returned residual has mean zero at *finite* `m*` and no
/// limit bias enters the test.
///
/// The base estimate runs on the shared path ensemble; the outer one-step
/// draws and every inner estimate use child streams, so base and stepped
/// are independent and their standard errors add in quadrature.
pub fn harmonicity_residual(
    cfg: &WalkConfig,
    m_eval: impl Fn(&[f64]) -> f64 + Sync,
    m_star: u32,
    outer_reps: u64,
    inner_reps: u64,
) -> Result<ResidualEstimate> {
    if m_star + 1 > cfg.horizon {
        return Err(Error::Domain(format!(
            "m* + 1 = {} exceeds the configured horizon {}",
            m_star + 1,
            cfg.horizon
        )));
    }
    if outer_reps < 2 || inner_reps < 2 {
        return Err(Error::Domain(
            "nested residual needs outer_reps >= 2 and inner_reps >= 2".into(),
        ));
    }

    let base = estimate_v(cfg, &[m_star + 1], &m_eval)?.value();

    let outer_factory = cfg.factory().child("resid-outer");
    let inner_factory = cfg.factory().child("resid-inner");
    struct Acc {
        outer: MeanVar,
        inner_var_sum: f64,
        inc: Vec<f64>,
    }
    let parts = chunked_fold(
        outer_reps,
        || Acc {
            outer: MeanVar::default(),
            inner_var_sum: 0.0,
            inc: vec![0.0; cfg.cone.dim()],
        },
        |acc, i| {
            let mut rng = outer_factory.stream("step", i);
            cfg.law.sample_into(&mut rng, &mut acc.inc);
            let y: Vec<f64> = cfg.start.iter().zip(&acc.inc).map(|(a, b)| a + b).collect();
            if !cfg.cone.contains(&y) {
                acc.outer.push(0.0);
                return;
            }
            let mut inner = MeanVar::default();
            for k in 0..inner_reps {
                let mut inner_rng = inner_factory.stream("path", i * inner_reps + k);
                let rec = walk_record(&cfg.cone, &cfg.law, &y, m_star, &mut inner_rng);
                inner.push(if rec.exit_step.is_none() {
                    m_eval(&rec.final_position)
                } else {
                    0.0
                });
            }
            acc.outer.push(inner.mean());
            acc.inner_var_sum += inner.se() * inner.se();
        },
    );
    let acc = merge(parts, |a, b| {
        a.outer.merge(b.outer);
        a.inner_var_sum += b.inner_var_sum;
    })
    .expect("outer_reps >= 2");

    let stepped = PointEstimate::of(&acc.outer);
    let inner_noise_share = if acc.outer.variance() > 0.0 {
        (acc.inner_var_sum / acc.outer.count() as f64) / acc.outer.variance()
    } else {
        0.0
    };
    Ok(ResidualEstimate {
        residual: base.value - stepped.value,
        se: (base.se * base.se + stepped.se * stepped.se).sqrt(),
        base,
        stepped,
        inner_noise_share,
    })
}

/// The tail-constant plateau: `kappa(n) = n^(beta/alpha) P(tau > n) / V`.
#[derive(Debug, Clone)]
pub struct KappaEstimate {
    pub per_horizon: Vec<(u32, PointEstimate)>,
    /// Average of `kappa(n)` over the top decade of horizons; the standard
    /// error and interval come from the joint chunk bootstrap.
    pub plateau_value: PointEstimate,
    pub ci: (f64, f64),
    /// Max spread of `kappa(n)` over the top decade, relative to its mean.
    pub max_drift: f64,
    /// True when the drift stays below 10% and every horizon has survivors.
    pub plateau: bool,
}

/// Threshold on [`KappaEstimate::max_drift`] below which the curve counts
/// as flat.
pub const KAPPA_DRIFT_LIMIT: f64 = 0.10;

pub(crate) fn top_decade(stats: &[HorizonStat]) -> Vec<usize> {
    let n_max = stats.last().unwrap().horizon as f64;
    (0..stats.len())
        .filter(|&i| stats[i].horizon as f64 >= n_max / 10.0)
        .collect()
}

/// Joint bootstrap replicates of the plateau average, resampling survival
/// counts and `V` sums over the same chunk selection (both estimates come
/// from the same trajectories, so their noise is strongly dependent).
pub fn kappa_bootstrap(
    curve: &SurvivalCurve,
    v: &HarmonicEstimate,
    exponent: f64,
    resamples: u32,
    rng: &mut impl Rng,
) -> Vec<f64> {
    let top = top_decade(curve.stats());
    let v_idx = v.values().len() - 1;
    stats::bootstrap_replicates(curve.n_chunks(), resamples, rng, |sel| {
        let vv = v.resampled_value(v_idx, sel);
        top.iter()
            .map(|&i| {
                (curve.stats[i].horizon as f64).powf(exponent)
                    * curve.resampled_estimate(i, sel)
                    / vv
            })
            .sum::<f64>()
            / top.len() as f64
    })
}

/// Estimate the tail constant from a survival curve and a `V` estimate that
/// share one path ensemble (same configuration, same seed).
pub fn estimate_kappa(
    cfg: &WalkConfig,
    curve: &SurvivalCurve,
    v: &HarmonicEstimate,
    beta_hat: f64,
) -> Result<KappaEstimate> {
    if curve.partition() != v.partition() {
        return Err(Error::Domain(
            "survival curve and V estimate must come from the same path ensemble".into(),
        ));
    }
    if !(beta_hat > 0.0) {
        return Err(Error::Domain(format!(
            "need a positive tail exponent, got {beta_hat}"
        )));
    }
    let exponent = beta_hat / cfg.law.alpha();
    let vhat = v.value();

    let per_horizon: Vec<(u32, PointEstimate)> = curve
        .stats()
        .iter()
        .map(|s| {
            let k = (s.horizon as f64).powf(exponent) * s.estimate / vhat.value;
            let se_p = (s.estimate * (1.0 - s.estimate) / curve.reps as f64).sqrt();
            let rel = if s.estimate > 0.0 && vhat.value > 0.0 {
                ((se_p / s.estimate).powi(2) + (vhat.se / vhat.value).powi(2)).sqrt()
            } else {
                f64::INFINITY
            };
            (s.horizon, PointEstimate { value: k, se: k * rel })
        })
        .collect();

    let top = top_decade(curve.stats());
    let top_vals: Vec<f64> = top.iter().map(|&i| per_horizon[i].1.value).collect();
    let mean = top_vals.iter().sum::<f64>() / top_vals.len() as f64;
    let max = top_vals.iter().cloned().fold(f64::MIN, f64::max);
    let min = top_vals.iter().cloned().fold(f64::MAX, f64::min);
    let max_drift = (max - min) / mean;

    let mut rng = cfg.factory().child("kappa-boot").stream("boot", 0);
    let reps = kappa_bootstrap(curve, v, exponent, BOOTSTRAP_RESAMPLES, &mut rng);
    let ci = stats::percentile_ci(&reps, 0.95);
    let se = stats::replicate_sd(&reps);

    Ok(KappaEstimate {
        per_horizon,
        plateau_value: PointEstimate { value: mean, se },
        ci,
        max_drift,
        plateau: max_drift <= KAPPA_DRIFT_LIMIT && !curve.flagged(),
    })
}

fn validate_grid(grid: &[u32], lo: u32, hi: u32, what: &str) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::Domain(format!("{what} grid is empty")));
    }
    if grid[0] < lo || *grid.last().unwrap() > hi {
        return Err(Error::Domain(format!(
            "{what} grid must lie within [{lo}, {hi}]"
        )));
    }
    if grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Domain(format!(
            "{what} grid must be strictly increasing"
        )));
    }
    Ok(())
}
