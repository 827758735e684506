//! Statistical machinery shared by the estimators: streaming moments, Wilson
//! intervals, weighted regression, Kolmogorov-Smirnov tests, a chi-squared
//! uniformity test, quantiles, and the chunk-level bootstrap.

use crate::special::{chi_squared_sf, normal_cdf};
use rand::Rng;

/// Two-sided normal quantile for 95% intervals.
pub const Z95: f64 = 1.959_963_984_540_054;

/// Streaming mean/variance accumulator (Welford), mergeable across chunks.
#[derive(Debug, Clone, Copy, Default)]
pub struct MeanVar {
    n: u64,
    mean: f64,
    m2: f64,
}

impl MeanVar {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    pub fn merge(&mut self, other: MeanVar) {
        if other.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = other;
            return;
        }
        let n = (self.n + other.n) as f64;
        let d = other.mean - self.mean;
        self.m2 += other.m2 + d * d * self.n as f64 * other.n as f64 / n;
        self.mean += d * other.n as f64 / n;
        self.n += other.n;
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Sample variance (unbiased).
    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            f64::NAN
        } else {
            self.m2 / (self.n - 1) as f64
        }
    }

    /// Standard error of the mean.
    pub fn se(&self) -> f64 {
        (self.variance() / self.n as f64).sqrt()
    }
}

/// A point estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointEstimate {
    pub value: f64,
    pub se: f64,
}

impl PointEstimate {
    pub fn of(mv: &MeanVar) -> Self {
        Self {
            value: mv.mean(),
            se: mv.se(),
        }
    }

    pub fn ci95(&self) -> (f64, f64) {
        (self.value - Z95 * self.se, self.value + Z95 * self.se)
    }
}

/// Wilson score interval for a binomial proportion.
pub fn wilson_interval(successes: u64, trials: u64, z: f64) -> (f64, f64) {
    assert!(trials > 0, "empty sample");
    let n = trials as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let den = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / den;
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / den;
    ((center - half).max(0.0), (center + half).min(1.0))
}

/// Weighted least-squares line fit.
#[derive(Debug, Clone, Copy)]
pub struct FittedLine {
    pub slope: f64,
    pub intercept: f64,
    /// Variance of the slope under the model Var(y_i) = 1 / w_i.
    pub slope_var: f64,
}

pub fn weighted_least_squares(xs: &[f64], ys: &[f64], ws: &[f64]) -> FittedLine {
    assert!(xs.len() == ys.len() && ys.len() == ws.len() && xs.len() >= 2);
    let w_sum: f64 = ws.iter().sum();
    let xb = xs.iter().zip(ws).map(|(x, w)| x * w).sum::<f64>() / w_sum;
    let yb = ys.iter().zip(ws).map(|(y, w)| y * w).sum::<f64>() / w_sum;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for ((&x, &y), &w) in xs.iter().zip(ys).zip(ws) {
        sxx += w * (x - xb) * (x - xb);
        sxy += w * (x - xb) * (y - yb);
    }
    let slope = sxy / sxx;
    FittedLine {
        slope,
        intercept: yb - slope * xb,
        slope_var: 1.0 / sxx,
    }
}

/// Wald test p-value for "slope = 0" of an (unweighted) trend fit with
/// empirical residual variance. Used as a no-trend diagnostic.
pub fn trend_p_value(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len();
    assert!(n >= 3);
    let ws = vec![1.0; n];
    let fit = weighted_least_squares(xs, ys, &ws);
    let mut rss = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        let r = y - fit.intercept - fit.slope * x;
        rss += r * r;
    }
    let sigma2 = rss / (n - 2) as f64;
    let se = (sigma2 * fit.slope_var).sqrt();
    if se == 0.0 {
        return 1.0;
    }
    let z = fit.slope / se;
    2.0 * (1.0 - normal_cdf(z.abs()))
}

/// Survival function of the Kolmogorov distribution,
/// `Q(l) = 2 sum_{k>=1} (-1)^(k-1) exp(-2 k^2 l^2)`.
pub fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for k in 1..=100u32 {
        let k = k as f64;
        let term = (-2.0 * k * k * lambda * lambda).exp();
        sum += sign * term;
        sign = -sign;
        if term < 1e-18 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Result of a Kolmogorov-Smirnov test.
#[derive(Debug, Clone, Copy)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
    pub n_a: usize,
    pub n_b: usize,
}

/// Two-sample KS test: exact sup statistic (ties are consumed as blocks, the
/// mid-rank convention), asymptotic p-value with the usual finite-sample
/// phase correction `lambda = (sqrt(ne) + 0.12 + 0.11/sqrt(ne)) D`.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> KsResult {
    assert!(!a.is_empty() && !b.is_empty(), "empty KS sample");
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_unstable_by(|x, y| x.partial_cmp(y).unwrap());
    b.sort_unstable_by(|x, y| x.partial_cmp(y).unwrap());
    let (na, nb) = (a.len(), b.len());
    let (mut i, mut j) = (0usize, 0usize);
    let mut d: f64 = 0.0;
    while i < na && j < nb {
        let v = a[i].min(b[j]);
        while i < na && a[i] <= v {
            i += 1;
        }
        while j < nb && b[j] <= v {
            j += 1;
        }
        let diff = (i as f64 / na as f64 - j as f64 / nb as f64).abs();
        d = d.max(diff);
    }
    let ne = (na as f64 * nb as f64) / (na + nb) as f64;
    let lambda = (ne.sqrt() + 0.12 + 0.11 / ne.sqrt()) * d;
    KsResult {
        statistic: d,
        p_value: kolmogorov_q(lambda),
        n_a: na,
        n_b: nb,
    }
}

/// One-sample KS statistic of a sorted sample against a reference CDF.
pub fn ks_statistic_against_cdf(sorted: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    assert!(!sorted.is_empty());
    let n = sorted.len() as f64;
    let mut d: f64 = 0.0;
    for (k, &x) in sorted.iter().enumerate() {
        let f = cdf(x);
        d = d.max((f - k as f64 / n).abs());
        d = d.max(((k + 1) as f64 / n - f).abs());
    }
    d
}

/// Pearson chi-squared test of uniformity over bins.
pub fn chi_square_uniform(bins: &[u64]) -> (f64, f64) {
    assert!(bins.len() >= 2);
    let total: u64 = bins.iter().sum();
    let expected = total as f64 / bins.len() as f64;
    assert!(expected > 0.0, "empty histogram");
    let stat: f64 = bins
        .iter()
        .map(|&o| {
            let d = o as f64 - expected;
            d * d / expected
        })
        .sum();
    let dof = (bins.len() - 1) as f64;
    (stat, chi_squared_sf(dof, stat))
}

/// Linear-interpolation quantile of a sorted sample (the common "type 7").
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    assert!((0.0..=1.0).contains(&q));
    let h = q * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
    }
}

/// Bootstrap replicates over chunk indices.
///
/// `stat` receives, for each replicate, a multiset of chunk indices drawn
/// with replacement from `0..n_parts` and returns the replicate statistic.
/// Chunks are the resampling unit (they hold iid paths), which keeps the
/// bootstrap deterministic and cheap; see [`crate::parallel`].
pub fn bootstrap_replicates(
    n_parts: usize,
    resamples: u32,
    rng: &mut impl Rng,
    mut stat: impl FnMut(&[usize]) -> f64,
) -> Vec<f64> {
    assert!(n_parts > 0);
    let mut picks = vec![0usize; n_parts];
    let mut out = Vec::with_capacity(resamples as usize);
    for _ in 0..resamples {
        for p in picks.iter_mut() {
            *p = rng.random_range(0..n_parts);
        }
        out.push(stat(&picks));
    }
    out
}

/// Standard deviation of bootstrap replicates (bootstrap SE).
pub fn replicate_sd(reps: &[f64]) -> f64 {
    let mut mv = MeanVar::default();
    for &r in reps {
        mv.push(r);
    }
    mv.variance().sqrt()
}

/// Central percentile interval of bootstrap replicates.
pub fn percentile_ci(reps: &[f64], level: f64) -> (f64, f64) {
    let mut sorted = reps.to_vec();
    sorted.sort_unstable_by(|x, y| x.partial_cmp(y).unwrap());
    let tail = (1.0 - level) / 2.0;
    (quantile(&sorted, tail), quantile(&sorted, 1.0 - tail))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand_chacha::rand_core::SeedableRng;

    #[test]
    fn mean_var_matches_two_pass_and_merge_is_exact() {
        let data: Vec<f64> = (0..1000).map(|i| ((i * 37 % 101) as f64).sin()).collect();
        let mut all = MeanVar::default();
        for &x in &data {
            all.push(x);
        }
        let mean = data.iter().sum::<f64>() / data.len() as f64;
        let var = data.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (data.len() - 1) as f64;
        assert_relative_eq!(all.mean(), mean, max_relative = 1e-12);
        assert_relative_eq!(all.variance(), var, max_relative = 1e-10);

        let (mut left, mut right) = (MeanVar::default(), MeanVar::default());
        for &x in &data[..357] {
            left.push(x);
        }
        for &x in &data[357..] {
            right.push(x);
        }
        left.merge(right);
        assert_relative_eq!(left.mean(), all.mean(), max_relative = 1e-12);
        assert_relative_eq!(left.variance(), all.variance(), max_relative = 1e-10);
    }

    #[test]
    fn wilson_interval_matches_reference() {
        // Frozen reference: k=10, n=100 at 95%.
        let (lo, hi) = wilson_interval(10, 100, Z95);
        assert_relative_eq!(lo, 0.055_229_137_060_675_1, max_relative = 1e-10);
        assert_relative_eq!(hi, 0.174_365_661_504_913_45, max_relative = 1e-10);
        // Degenerate counts stay inside [0, 1] and bracket the estimate.
        let (lo, hi) = wilson_interval(0, 50, Z95);
        assert!(lo >= 0.0 && hi > 0.0 && hi < 0.08);
        let (lo, hi) = wilson_interval(50, 50, Z95);
        assert!(lo > 0.92 && hi <= 1.0);
    }

    #[test]
    fn weighted_least_squares_matches_reference() {
        let xs = [0.0, 1.0, 2.0, 3.0];
        let ys = [1.1, 2.9, 5.2, 6.8];
        let ws = [1.0, 2.0, 2.0, 1.0];
        let fit = weighted_least_squares(&xs, &ys, &ws);
        assert_relative_eq!(fit.slope, 1.972_727_272_727_272_9, max_relative = 1e-12);
        assert_relative_eq!(fit.intercept, 1.057_575_757_575_757_2, max_relative = 1e-10);
        assert_relative_eq!(fit.slope_var, 0.181_818_181_818_181_82, max_relative = 1e-12);
    }

    #[test]
    fn exact_line_is_recovered() {
        let xs: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 3.0 - 0.5 * x).collect();
        let ws = vec![2.5; 10];
        let fit = weighted_least_squares(&xs, &ys, &ws);
        assert_relative_eq!(fit.slope, -0.5, max_relative = 1e-13);
        assert_relative_eq!(fit.intercept, 3.0, max_relative = 1e-13);
    }

    #[test]
    fn kolmogorov_q_matches_references() {
        let cases = [
            (0.3, 0.999_990_694_198_665),
            (0.5, 0.963_945_243_664_875),
            (0.8284, 0.498_701_181_237_861),
            (1.0, 0.269_999_671_677_355),
            (1.5, 0.022_217_962_616_525_1),
            (2.0, 0.000_670_925_255_779_695),
        ];
        for (l, want) in cases {
            assert_relative_eq!(kolmogorov_q(l), want, max_relative = 1e-10);
        }
    }

    #[test]
    fn ks_two_sample_statistic_with_and_without_ties() {
        let r = ks_two_sample(&[1.0, 2.0, 3.0, 4.0], &[1.5, 2.5, 3.5, 4.5]);
        assert_relative_eq!(r.statistic, 0.25, max_relative = 1e-14);
        // Tie blocks are consumed whole before the gap is measured.
        let r = ks_two_sample(&[1.0, 2.0, 2.0, 3.0], &[2.0, 2.0, 4.0, 4.0]);
        assert_relative_eq!(r.statistic, 0.5, max_relative = 1e-14);
    }

    #[test]
    fn ks_two_sample_same_distribution_has_large_p() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let a: Vec<f64> = (0..2000).map(|_| rand::Rng::random::<f64>(&mut rng)).collect();
        let b: Vec<f64> = (0..2000).map(|_| rand::Rng::random::<f64>(&mut rng)).collect();
        let r = ks_two_sample(&a, &b);
        assert!(r.p_value > 0.01, "p = {}", r.p_value);
        // And a blatant shift is detected.
        let c: Vec<f64> = a.iter().map(|x| x + 0.2).collect();
        let r = ks_two_sample(&a, &c);
        assert!(r.p_value < 1e-6, "p = {}", r.p_value);
    }

    #[test]
    fn ks_calibration_rejects_at_nominal_rate() {
        // 200 null trials at size 2000; alpha = 0.05 should reject ~5%.
        let mut rejections = 0;
        for trial in 0..200u64 {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1000 + trial);
            let a: Vec<f64> = (0..2000).map(|_| rand::Rng::random::<f64>(&mut rng)).collect();
            let b: Vec<f64> = (0..2000).map(|_| rand::Rng::random::<f64>(&mut rng)).collect();
            if ks_two_sample(&a, &b).p_value < 0.05 {
                rejections += 1;
            }
        }
        // Binomial(200, 0.05): mean 10, sd ~3.1.
        assert!(
            (2..=21).contains(&rejections),
            "rejections = {rejections} out of 200"
        );
    }

    #[test]
    fn one_sample_statistic_against_true_cdf_is_small() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut xs: Vec<f64> = (0..4000).map(|_| rand::Rng::random::<f64>(&mut rng)).collect();
        xs.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
        let d = ks_statistic_against_cdf(&xs, |x| x.clamp(0.0, 1.0));
        assert!(d < 0.03, "d = {d}");
    }

    #[test]
    fn chi_square_uniform_matches_reference() {
        let (stat, p) = chi_square_uniform(&[10, 12, 8, 10]);
        assert_relative_eq!(stat, 0.8, max_relative = 1e-12);
        assert_relative_eq!(p, 0.849_467_033_391_825_5, max_relative = 1e-7);
    }

    #[test]
    fn quantiles_interpolate_linearly() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        assert_relative_eq!(quantile(&xs, 0.5), 2.5);
        assert_relative_eq!(quantile(&xs, 0.0), 1.0);
        assert_relative_eq!(quantile(&xs, 1.0), 4.0);
        assert_relative_eq!(quantile(&xs, 0.25), 1.75);
    }

    #[test]
    fn trend_test_accepts_flat_and_rejects_sloped() {
        let xs: Vec<f64> = (0..12).map(|i| i as f64).collect();
        let flat: Vec<f64> = xs.iter().map(|x| (x * 7.7).sin() * 0.1).collect();
        assert!(trend_p_value(&xs, &flat) > 0.01);
        let sloped: Vec<f64> = xs.iter().map(|x| 0.5 * x + (x * 7.7).sin() * 0.05).collect();
        assert!(trend_p_value(&xs, &sloped) < 1e-6);
    }

    #[test]
    fn bootstrap_is_deterministic_and_brackets_truth() {
        // Chunk "accumulators": per-chunk sums of uniform draws.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let parts: Vec<(f64, u64)> = (0..600)
            .map(|_| {
                let mut s = 0.0;
                for _ in 0..50 {
                    s += rand::Rng::random::<f64>(&mut rng);
                }
                (s, 50)
            })
            .collect();
        let stat = |picks: &[usize]| {
            let (mut s, mut n) = (0.0, 0u64);
            for &p in picks {
                s += parts[p].0;
                n += parts[p].1;
            }
            s / n as f64
        };
        let mut brng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let reps = bootstrap_replicates(parts.len(), 500, &mut brng, stat);
        let mut brng2 = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let reps2 = bootstrap_replicates(parts.len(), 500, &mut brng2, stat);
        assert_eq!(reps, reps2);
        let (lo, hi) = percentile_ci(&reps, 0.95);
        assert!(lo < 0.5 && 0.5 < hi, "ci = ({lo}, {hi})");
        assert!(replicate_sd(&reps) < 0.01);
    }
}
