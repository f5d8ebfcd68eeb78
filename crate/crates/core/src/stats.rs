//! Tail and two-sample statistics.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};

/// Wilson score interval for `k` successes out of `n`.
pub fn wilson_interval(k: u64, n: u64, z: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let n = n as f64;
    let p = k as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let centre = (p + z2 / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    pub std_error: f64,
}

/// Weighted least squares of `ln p` on `ln x` for points `(x, p, count)`,
/// with weight `count` (the inverse Poisson variance of `ln p`).
pub fn weighted_loglog_slope(points: &[(f64, f64, u64)]) -> Result<SlopeFit> {
    let pts: Vec<(f64, f64, f64)> = points.iter().filter(|p| p.2 > 0 && p.0 > 0.0 && p.1 > 0.0).map(|&(x, p, c)| (x.ln(), p.ln(), c as f64)).collect();
    if pts.len() < 2 {
        return Err(Error::InsufficientData("fewer than two nonzero tail points".into()));
    }
    let sw: f64 = pts.iter().map(|p| p.2).sum();
    let mx = pts.iter().map(|p| p.2 * p.0).sum::<f64>() / sw;
    let my = pts.iter().map(|p| p.2 * p.1).sum::<f64>() / sw;
    let sxx: f64 = pts.iter().map(|p| p.2 * (p.0 - mx).powi(2)).sum();
    if sxx <= 0.0 {
        return Err(Error::InsufficientData("degenerate abscissae".into()));
    }
    let sxy: f64 = pts.iter().map(|p| p.2 * (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    Ok(SlopeFit { slope, intercept: my - slope * mx, std_error: sxx.recip().sqrt() })
}

/// Ordinary least squares of `y` on `x`.
pub fn ols_slope(x: &[f64], y: &[f64]) -> Result<SlopeFit> {
    if x.len() != y.len() || x.len() < 3 {
        return Err(Error::InsufficientData("need at least three points".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    if sxx <= 0.0 {
        return Err(Error::InsufficientData("degenerate abscissae".into()));
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    Ok(SlopeFit { slope, intercept, std_error: (rss / (n - 2.0) / sxx).sqrt() })
}

/// Sample mean and its standard error.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (m, f64::NAN);
    }
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (v / n).sqrt())
}

/// Empirical quantile (type 7) of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    let h = (sorted.len() - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn sorted(xs: &[f64]) -> Vec<f64> {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Per-doubling growth of the sample mean: the average of `ln(block mean)`
/// over disjoint blocks of size `2^k`, regressed on `k` for `k` in
/// `lo..=hi`, exponentiated.
pub fn block_doubling_rate(values: &[f64], lo: u32, hi: u32) -> Result<f64> {
    if hi <= lo || values.len() < 2usize << hi {
        return Err(Error::InsufficientData(format!("need at least {} values", 2usize << hi)));
    }
    let level = |n: usize| {
        let blocks = values.len() / n;
        values[..blocks * n].chunks_exact(n).map(|c| (c.iter().sum::<f64>() / n as f64).ln()).sum::<f64>() / blocks as f64
    };
    let ks: Vec<f64> = (lo..=hi).map(f64::from).collect();
    let ls: Vec<f64> = (lo..=hi).map(|k| level(1 << k)).collect();
    let fit = if ks.len() >= 3 { ols_slope(&ks, &ls)?.slope } else { ls[1] - ls[0] };
    Ok(fit.exp())
}

/// Quantile skewness `(q_hi + q_lo - 2 median) / (q_hi - q_lo)` with
/// `q_lo`, `q_hi` at `p` and `1 - p`.
pub fn quantile_skewness(xs: &[f64], p: f64) -> f64 {
    let s = sorted(xs);
    let (lo, mid, hi) = (quantile_sorted(&s, p), quantile_sorted(&s, 0.5), quantile_sorted(&s, 1.0 - p));
    (hi + lo - 2.0 * mid) / (hi - lo)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HillEstimate {
    pub index: f64,
    pub std_error: f64,
    pub k: usize,
    /// Slope of the log-log survival plot over the top `k`, negated.
    pub loglog_index: f64,
}

fn descending_positive(samples: &[f64]) -> Vec<f64> {
    let mut v: Vec<f64> = samples.iter().copied().filter(|x| *x > 0.0).collect();
    v.sort_by(|a, b| b.total_cmp(a));
    v
}

fn hill_on_desc(desc: &[f64], n: usize, k: usize) -> Result<HillEstimate> {
    if k < 2 || k >= n / 2 || k >= desc.len() {
        return Err(Error::InsufficientData(format!("k = {k} with {} positive of {n} samples", desc.len())));
    }
    let xk = desc[k];
    let gamma = desc[..k].iter().map(|x| (x / xk).ln()).sum::<f64>() / k as f64;
    if !(gamma > 0.0) {
        return Err(Error::InsufficientData("tied top order statistics".into()));
    }
    let index = 1.0 / gamma;
    let xs: Vec<f64> = desc[..k].iter().map(|x| x.ln()).collect();
    let ys: Vec<f64> = (0..k).map(|i| ((i as f64 + 0.5) / n as f64).ln()).collect();
    let loglog_index = ols_slope(&xs, &ys).map(|f| -f.slope).unwrap_or(f64::NAN);
    Ok(HillEstimate { index, std_error: index / (k as f64).sqrt(), k, loglog_index })
}

/// Hill estimate of the upper tail index from the top `k_top` order statistics.
pub fn hill_estimator(samples: &[f64], k_top: usize) -> Result<HillEstimate> {
    hill_on_desc(&descending_positive(samples), samples.len(), k_top)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HillScan {
    pub estimates: Vec<HillEstimate>,
    /// `(max - min) / median` of the index over the scan.
    pub spread: f64,
    pub plateau: bool,
}

/// Hill estimates over `k` log-spaced in `[lo_frac n, hi_frac n]`. A plateau
/// is declared when the relative spread is at most `tol`.
pub fn hill_scan(samples: &[f64], lo_frac: f64, hi_frac: f64, points: usize, tol: f64) -> Result<HillScan> {
    let n = samples.len();
    let desc = descending_positive(samples);
    let k0 = ((lo_frac * n as f64) as usize).max(2);
    let k1 = ((hi_frac * n as f64) as usize).max(k0 + 1);
    let mut ks: Vec<usize> = (0..points.max(2)).map(|i| (k0 as f64 * (k1 as f64 / k0 as f64).powf(i as f64 / (points.max(2) - 1) as f64)).round() as usize).collect();
    ks.dedup();
    let estimates = ks.into_iter().map(|k| hill_on_desc(&desc, n, k)).collect::<Result<Vec<_>>>()?;
    let idx = sorted(&estimates.iter().map(|e| e.index).collect::<Vec<_>>());
    let spread = (idx[idx.len() - 1] - idx[0]) / quantile_sorted(&idx, 0.5);
    Ok(HillScan { estimates, spread, plateau: spread <= tol })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
    pub permutations: usize,
}

/// Pooled sorted values with group boundaries at ties.
fn pool(a: &[f64], b: &[f64]) -> (Vec<bool>, Vec<usize>) {
    let mut all: Vec<(f64, bool)> = a.iter().map(|&x| (x, true)).chain(b.iter().map(|&x| (x, false))).collect();
    all.sort_by(|x, y| x.0.total_cmp(&y.0));
    let mut ends = Vec::new();
    for i in 0..all.len() {
        if i + 1 == all.len() || all[i + 1].0 != all[i].0 {
            ends.push(i + 1);
        }
    }
    (all.into_iter().map(|p| p.1).collect(), ends)
}

fn ks_from_labels(labels: &[bool], ends: &[usize], na: usize, nb: usize) -> f64 {
    let (mut ca, mut cb, mut start, mut best) = (0usize, 0usize, 0usize, 0.0f64);
    for &e in ends {
        for &l in &labels[start..e] {
            if l {
                ca += 1
            } else {
                cb += 1
            }
        }
        start = e;
        best = best.max((ca as f64 / na as f64 - cb as f64 / nb as f64).abs());
    }
    best
}

/// Two-sample Kolmogorov-Smirnov statistic.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InsufficientData("empty sample".into()));
    }
    let (labels, ends) = pool(a, b);
    Ok(ks_from_labels(&labels, &ends, a.len(), b.len()))
}

/// Two-sample KS statistic with a permutation p-value over `permutations`
/// relabelings of the pooled sample.
pub fn ks_distance<R: Rng + ?Sized>(a: &[f64], b: &[f64], permutations: usize, rng: &mut R) -> Result<KsResult> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InsufficientData("empty sample".into()));
    }
    let (mut labels, ends) = pool(a, b);
    let statistic = ks_from_labels(&labels, &ends, a.len(), b.len());
    let mut exceed = 0;
    for _ in 0..permutations {
        labels.shuffle(rng);
        if ks_from_labels(&labels, &ends, a.len(), b.len()) >= statistic - 1e-12 {
            exceed += 1;
        }
    }
    Ok(KsResult { statistic, p_value: (1 + exceed) as f64 / (1 + permutations) as f64, permutations })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use proptest::prelude::{prop_assert, proptest};
    use rand_distr::{Distribution, Exp, Pareto};

    #[test]
    fn wilson_brackets_the_estimate() {
        let (lo, hi) = wilson_interval(10, 100, 1.96);
        assert!(lo < 0.1 && 0.1 < hi);
        let (lo, hi) = wilson_interval(0, 100, 1.96);
        assert_eq!(lo, 0.0);
        assert!(hi > 0.0 && hi < 0.05);
    }

    #[test]
    fn loglog_slope_recovers_power_law() {
        let pts: Vec<(f64, f64, u64)> = [10.0, 20.0, 40.0, 80.0].iter().map(|&x: &f64| (x, 3.0 * x.powf(-1.75), 100)).collect();
        let f = weighted_loglog_slope(&pts).unwrap();
        assert!((f.slope + 1.75).abs() < 1e-12);
        assert!((f.intercept - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn hill_on_pareto_controls() {
        for (i, kappa) in [1.1, 1.5, 1.9].into_iter().enumerate() {
            let mut rng = stream(11, &[i as u64]);
            let d = Pareto::new(1.0, kappa).unwrap();
            let xs: Vec<f64> = (0..1_000_000).map(|_| d.sample(&mut rng)).collect();
            let h = hill_estimator(&xs, 10_000).unwrap();
            assert!((h.index - kappa).abs() < 0.05, "{kappa}: {h:?}");
            assert!((h.loglog_index - kappa).abs() < 0.1, "{kappa}: {h:?}");
        }
    }

    #[test]
    fn hill_is_scale_invariant() {
        let mut rng = stream(12, &[]);
        let d = Pareto::new(1.0, 1.5).unwrap();
        let xs: Vec<f64> = (0..10_000).map(|_| d.sample(&mut rng)).collect();
        let ys: Vec<f64> = xs.iter().map(|x| x * 8.0).collect();
        assert_eq!(hill_estimator(&xs, 200).unwrap().index, hill_estimator(&ys, 200).unwrap().index);
    }

    #[test]
    fn exponential_has_no_plateau() {
        let mut rng = stream(13, &[]);
        let d = Exp::new(1.0).unwrap();
        let xs: Vec<f64> = (0..1_000_000).map(|_| d.sample(&mut rng)).collect();
        let s = hill_scan(&xs, 0.001, 0.05, 8, 0.15).unwrap();
        assert!(!s.plateau, "{}", s.spread);
        assert!(s.estimates.windows(2).all(|w| w[1].index < w[0].index));
        let d = Pareto::new(1.0, 1.5).unwrap();
        let ps: Vec<f64> = (0..1_000_000).map(|_| d.sample(&mut rng)).collect();
        assert!(hill_scan(&ps, 0.001, 0.05, 8, 0.15).unwrap().plateau);
    }

    #[test]
    fn hill_needs_enough_exceedances() {
        assert!(hill_estimator(&[1.0, 2.0, 3.0], 2).is_err());
        assert!(hill_estimator(&[-1.0; 100], 10).is_err());
    }

    #[test]
    fn ks_identical_samples() {
        let xs = [0.3, 0.1, 0.2, 0.2];
        let mut rng = stream(14, &[]);
        let r = ks_distance(&xs, &xs, 100, &mut rng).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert_eq!(r.p_value, 1.0);
    }

    #[test]
    fn ks_shifted_uniforms() {
        let mut rng = stream(15, &[]);
        let a: Vec<f64> = (0..10_000).map(|_| rng.random::<f64>()).collect();
        let b: Vec<f64> = (0..10_000).map(|_| 0.5 + rng.random::<f64>()).collect();
        let r = ks_distance(&a, &b, 200, &mut rng).unwrap();
        assert!((r.statistic - 0.5).abs() < 0.02);
        assert!(r.p_value < 0.01);
    }

    #[test]
    fn ks_level_under_the_null() {
        let mut rng = stream(16, &[]);
        let mut ok = 0;
        for _ in 0..100 {
            let a: Vec<f64> = (0..10_000).map(|_| rng.random::<f64>()).collect();
            let b: Vec<f64> = (0..10_000).map(|_| rng.random::<f64>()).collect();
            if ks_distance(&a, &b, 200, &mut rng).unwrap().p_value >= 0.01 {
                ok += 1;
            }
        }
        assert!(ok >= 95, "{ok}");
    }

    #[test]
    fn doubling_rate_separates_finite_and_infinite_means() {
        let mut rng = stream(17, &[]);
        let heavy = Pareto::new(1.0, 0.5).unwrap();
        let xs: Vec<f64> = (0..1 << 14).map(|_| heavy.sample(&mut rng)).collect();
        // Sample means of a 1/2-stable-like tail grow like n, i.e. 2 per doubling.
        assert!(block_doubling_rate(&xs, 4, 10).unwrap() > 1.6);
        let light = Exp::new(1.0).unwrap();
        let ys: Vec<f64> = (0..1 << 14).map(|_| light.sample(&mut rng)).collect();
        assert!((block_doubling_rate(&ys, 4, 10).unwrap() - 1.0).abs() < 0.01);
        assert!(block_doubling_rate(&ys[..100], 4, 10).is_err());
    }

    #[test]
    fn skewness_sign() {
        let mut rng = stream(18, &[]);
        let d = Exp::new(1.0).unwrap();
        let xs: Vec<f64> = (0..10_000).map(|_| d.sample(&mut rng)).collect();
        assert!(quantile_skewness(&xs, 0.1) > 0.0);
        let neg: Vec<f64> = xs.iter().map(|x| -x).collect();
        assert!(quantile_skewness(&neg, 0.1) < 0.0);
    }

    #[test]
    fn ks_rejects_empty() {
        assert!(ks_statistic(&[], &[1.0]).is_err());
    }

    proptest! {
        #[test]
        fn ks_statistic_is_symmetric_and_bounded(a in proptest::collection::vec(-5.0f64..5.0, 1..50), b in proptest::collection::vec(-5.0f64..5.0, 1..50)) {
            let s = ks_statistic(&a, &b).unwrap();
            prop_assert!((0.0..=1.0).contains(&s));
            prop_assert!((s - ks_statistic(&b, &a).unwrap()).abs() < 1e-15);
        }
    }
}
