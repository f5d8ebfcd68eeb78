//! Tail of the first renewal time and of its trap decomposition.

use rayon::prelude::*;

use super::{replica_environment, ExperimentConfig, ResultSet, Verdict};
use crate::dirichlet::kappa_report;
use crate::error::{Error, Result};
use crate::stats::{block_doubling_rate, hill_estimator, hill_scan, wilson_interval};
use crate::traps::{decompose_t1, TrapTimeBuckets};
use crate::walk::simulate_until_renewals;

/// One replica's `T_1` split.
#[derive(Debug, Clone, PartialEq)]
pub struct T1Sample {
    pub t1: u64,
    pub t1_out: u64,
    /// `(s_f, N_f, sum_j l_f^j)` per trap visited before `T_1`.
    pub traps: Vec<(f64, u64, u64)>,
}

impl T1Sample {
    /// In-trap time split with strength cut `h` and visit cut `m`.
    pub fn buckets(&self, h: f64, m: u64) -> TrapTimeBuckets {
        let mut b = TrapTimeBuckets::default();
        for &(s, n, l) in &self.traps {
            b.entries += n;
            if s <= h {
                b.weak += l;
            } else if n <= m {
                b.strong_few += l;
            } else {
                b.strong_many += l;
            }
        }
        b
    }
}

/// `(samples, walk steps, censored replicas)`.
pub fn collect_t1(config: &ExperimentConfig) -> Result<(Vec<T1Sample>, u64, u64)> {
    let w = config.weights()?;
    let params = config.renewal_params()?;
    let c = &config.t1_tail;
    let out: Vec<Result<(Option<T1Sample>, u64)>> = (0..c.replicas)
        .into_par_iter()
        .map(|r| {
            let env = replica_environment(&w, config.master_seed, r, 4096)?;
            let (trace, record) = simulate_until_renewals(&env, &params, 1, c.n_max, config.master_seed, r)?;
            let steps = trace.step_count() as u64;
            let Some(t1) = record.first() else { return Ok((None, steps)) };
            let dec = decompose_t1(&env, &trace, t1)?;
            let traps = dec.traps.iter().map(|t| (t.s_f, t.n_f(), t.visit_lengths.iter().sum())).collect();
            Ok((Some(T1Sample { t1: t1 as u64, t1_out: dec.t1_out, traps }), steps))
        })
        .collect();
    let mut samples = Vec::new();
    let (mut steps, mut censored) = (0, 0);
    for o in out {
        let (s, n) = o?;
        steps += n;
        match s {
            Some(s) => samples.push(s),
            None => censored += 1,
        }
    }
    Ok((samples, steps, censored))
}

fn tail_points(rs: &mut ResultSet, series: &str, xs: &[f64], grid: &[f64], kappa: Option<f64>) {
    let n = xs.len() as u64;
    for &x in grid {
        let k = xs.iter().filter(|&&v| v >= x).count() as u64;
        let p = k as f64 / n as f64;
        let (lo, hi) = wilson_interval(k, n, 1.0);
        rs.point(series, x, p, 0.5 * (hi - lo));
        if let Some(kappa) = kappa {
            rs.point(&format!("{series}_scaled"), x, p * x.powf(kappa), 0.5 * (hi - lo) * x.powf(kappa));
        }
    }
}

pub fn run_t1_tail(config: &ExperimentConfig) -> Result<ResultSet> {
    let w = config.weights()?;
    let report = kappa_report(&w);
    let kappa = report.kappa;
    let c = &config.t1_tail;
    let mut rs = ResultSet::new("t1-tail", config);
    if !w.satisfies_condition_t() {
        rs.note(format!("condition (T) criterion fails: sum |alpha_j - alpha_(j+d)| = {}", w.condition_t_sum()));
    }
    let (samples, steps, censored) = collect_t1(config)?;
    rs.steps = steps;
    if censored > 0 {
        rs.note(format!("{censored} replicas without an observed T_1 within n_max"));
    }
    if samples.len() < 100 {
        return Err(Error::InsufficientData(format!("{} uncensored T_1 samples", samples.len())));
    }
    let t1: Vec<f64> = samples.iter().map(|s| s.t1 as f64).collect();
    let out: Vec<f64> = samples.iter().map(|s| s.t1_out as f64).collect();
    let k = ((c.hill_k_frac * t1.len() as f64) as usize).max(2);
    rs.point("uncensored", 0.0, t1.len() as f64, 0.0);
    tail_points(&mut rs, "t1_tail", &t1, &c.x_grid, Some(kappa));
    tail_points(&mut rs, "t1_out_tail", &out, &c.x_grid, None);
    // Buckets at level x use the strength cut h(x) = eps x.
    let n = samples.len() as f64;
    for &x in &c.x_grid {
        let bs: Vec<TrapTimeBuckets> = samples.iter().map(|s| s.buckets(c.eps * x, c.m)).collect();
        let frac = |f: fn(&TrapTimeBuckets) -> u64| bs.iter().filter(|b| f(b) as f64 >= x).count() as f64 / n;
        rs.point("weak_trap_tail", x, frac(|b| b.weak), 0.0);
        rs.point("strong_few_tail", x, frac(|b| b.strong_few), 0.0);
        rs.point("strong_many_tail", x, frac(|b| b.strong_many), 0.0);
        rs.point("entries_tail", x, frac(|b| b.entries), 0.0);
    }
    let hill = hill_estimator(&t1, k)?;
    rs.point("hill_t1", k as f64, hill.index, hill.std_error);
    rs.point("loglog_t1", k as f64, hill.loglog_index, 0.0);
    if let Ok(scan) = hill_scan(&t1, 0.001, 0.05, 8, c.plateau_tol) {
        for e in &scan.estimates {
            rs.point("hill_scan_t1", e.k as f64, e.index, e.std_error);
        }
        rs.point("hill_scan_spread", 0.0, scan.spread, 0.0);
    }
    if kappa > 1.0 && kappa < 2.0 {
        rs.verdict(Verdict::range(7, "hill_t1", hill.index, c.hill_range[0], c.hill_range[1]));
        let hill_out = hill_estimator(&out, k)?;
        rs.point("hill_t1_out", k as f64, hill_out.index, hill_out.std_error);
        rs.verdict(Verdict::at_least(7, "hill_t1_out_excess", hill_out.index - hill.index, c.sub_dominance_margin));
    } else {
        let scan = hill_scan(&t1, 0.001, 0.05, 8, c.plateau_tol)?;
        rs.verdict(Verdict::flag(7, "no_hill_plateau", !scan.plateau));
        let fourth: Vec<f64> = t1.iter().map(|x| x.powi(4)).collect();
        // Small blocks carry a Jensen bias that swamps the signal for skewed values.
        let hi = ((fourth.len() / 8).max(64) as f64).log2().floor() as u32;
        let rate = block_doubling_rate(&fourth, hi.saturating_sub(3), hi)?;
        rs.verdict(Verdict::at_most(7, "fourth_moment_rate", rate, c.light_moment_rate));
    }
    Ok(rs)
}
