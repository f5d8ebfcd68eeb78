//! Stable fluctuations of renewal sums, of the running maximum and of the
//! position, and the vanishing of orthogonal fluctuations.

use rayon::prelude::*;

use super::{replica_environment, ExperimentConfig, ResultSet, Verdict};
use crate::dirichlet::kappa_report;
use crate::error::{domain, Error, Result};
use crate::lattice::Vertex;
use crate::rng::{stream, tag};
use crate::stable::{sample_stable, StableParams};
use crate::stats::{ks_distance, quantile_skewness, quantile_sorted, sorted};
use crate::walk::{simulate_until_renewals, WalkTrace};

/// Renewal data of one replica: `T_{n+1} - T_1` and `X_{T_{n+1}} - X_{T_1}`.
#[derive(Debug, Clone, PartialEq)]
struct Blocks {
    duration: f64,
    displacement: Vec<f64>,
}

fn run_replica(config: &ExperimentConfig, r: u64) -> Result<(WalkTrace, Option<Blocks>)> {
    let w = config.weights()?;
    let c = &config.fluctuations;
    let params = config.renewal_params()?;
    let env = replica_environment(&w, config.master_seed, r, 1 << 14)?;
    let (trace, record) = simulate_until_renewals(&env, &params, c.blocks + 1, c.n_max, config.master_seed, r)?;
    let times = record.times();
    if times.len() < c.blocks + 1 {
        return Ok((trace, None));
    }
    let (t0, t1) = (times[0], times[c.blocks]);
    let d = w.dim();
    let disp = trace.positions[t1].sub(&trace.positions[t0]);
    let displacement = disp.coords(d).iter().map(|&x| x as f64).collect();
    Ok((trace, Some(Blocks { duration: (t1 - t0) as f64, displacement })))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn coords(v: &Vertex, d: usize) -> Vec<f64> {
    v.coords(d).iter().map(|&x| x as f64).collect()
}

/// Fits `c` so that the `q` quantiles of `sign * sample` and `c * reference`
/// agree, then KS-tests `sample` against `sign * c * fresh`.
fn stable_ks(sample: &[f64], sign: f64, reference: &[f64], fresh: &[f64], q: f64, perms: usize, seed: u64, label: u64) -> Result<(f64, f64, f64)> {
    let target = quantile_sorted(&sorted(&sample.iter().map(|x| sign * x).collect::<Vec<_>>()), q);
    let base = quantile_sorted(&sorted(reference), q);
    if !(target > 0.0 && base > 0.0) {
        return Err(Error::InsufficientData("nonpositive matching quantile".into()));
    }
    let scale = target / base;
    let model: Vec<f64> = fresh.iter().map(|x| sign * scale * x).collect();
    let ks = ks_distance(sample, &model, perms, &mut stream(seed, &[tag::AUX, label]))?;
    Ok((scale, ks.statistic, ks.p_value))
}

pub fn run_fluctuations(config: &ExperimentConfig) -> Result<ResultSet> {
    let w = config.weights()?;
    let d = w.dim();
    let kappa = kappa_report(&w).kappa;
    if !(kappa > 1.0 && kappa < 2.0) {
        return domain(format!("kappa = {kappa} outside (1, 2): no stable fluctuations of this kind"));
    }
    let c = config.fluctuations.clone();
    if c.replicas < 8 {
        return domain("need at least 8 replicas");
    }
    let params = config.renewal_params()?;
    let u = params.direction.clone();
    let mut rs = ResultSet::new("fluctuations", config);
    let half = c.replicas / 2;
    let n = c.blocks as f64;
    let scale_n = n.powf(-1.0 / kappa);

    // Held-out half: tau_hat and the mean block displacement.
    let held: Vec<Result<(u64, Option<Blocks>)>> =
        (0..half).into_par_iter().map(|r| run_replica(config, r).map(|(t, b)| (t.step_count() as u64, b))).collect();
    let mut steps = 0;
    let (mut dur, mut disp, mut used) = (0.0, vec![0.0; d], 0usize);
    for h in held {
        let (s, b) = h?;
        steps += s;
        if let Some(b) = b {
            dur += b.duration;
            disp.iter_mut().zip(&b.displacement).for_each(|(a, x)| *a += x);
            used += 1;
        }
    }
    if used == 0 {
        return Err(Error::InsufficientData("no held-out replica reached the block count".into()));
    }
    let tau = dur / (used as f64 * n);
    let mu: Vec<f64> = disp.iter().map(|x| x / (used as f64 * n)).collect();
    let v: Vec<f64> = mu.iter().map(|x| x / tau).collect();
    let speed = dot(&v, &v).sqrt();
    let v_dir: Vec<f64> = v.iter().map(|x| x / speed).collect();
    let m = (c.time_frac * n * tau).floor() as usize;
    let scale_m = (m as f64).powf(-1.0 / kappa);
    rs.point("tau_hat", 0.0, tau, 0.0);
    for (i, x) in v.iter().enumerate() {
        rs.point("velocity_hat", i as f64, *x, 0.0);
    }

    // Test half.
    struct Row {
        z_t: f64,
        z_s: Option<f64>,
        z_x: Option<f64>,
        orth: f64,
        par: f64,
    }
    let test: Vec<Result<(u64, Option<Row>)>> = (half..c.replicas)
        .into_par_iter()
        .map(|r| {
            let (trace, b) = run_replica(config, r)?;
            let steps = trace.step_count() as u64;
            let Some(b) = b else { return Ok((steps, None)) };
            let dt = b.duration - n * tau;
            let dev: Vec<f64> = b.displacement.iter().zip(&mu).map(|(x, m)| x - n * m).collect();
            let along = dot(&dev, &v_dir);
            let orth = dev.iter().zip(&v_dir).map(|(x, e)| (x - along * e).powi(2)).sum::<f64>().sqrt();
            let (z_s, z_x) = if trace.step_count() >= m {
                let sup = trace.positions[..=m].iter().map(|p| dot(&coords(p, d), &u)).fold(f64::NEG_INFINITY, f64::max);
                let xm = dot(&coords(&trace.positions[m], d), &v_dir);
                (Some((sup - m as f64 * dot(&v, &u)) * scale_m), Some((xm - m as f64 * speed) * scale_m))
            } else {
                (None, None)
            };
            Ok((steps, Some(Row { z_t: dt * scale_n, z_s, z_x, orth: orth * scale_n, par: (speed * dt).abs() * scale_n })))
        })
        .collect();
    let mut rows = Vec::new();
    for t in test {
        let (s, row) = t?;
        steps += s;
        rows.extend(row);
    }
    rs.steps = steps;
    let missing = (c.replicas - half) as usize - rows.len();
    if missing > 0 {
        rs.note(format!("{missing} test replicas did not reach {} renewals", c.blocks + 1));
    }
    if rows.len() < 8 {
        return Err(Error::InsufficientData("too few complete test replicas".into()));
    }
    let p = StableParams::new(kappa, 1.0)?;
    let reference = sample_stable(&p, c.stable_draws, &mut stream(config.master_seed, &[tag::AUX, 0x0072_6566]));
    let fresh = sample_stable(&p, c.stable_draws, &mut stream(config.master_seed, &[tag::AUX, 0x6672_6573]));
    let seed = config.master_seed;

    let z_t: Vec<f64> = rows.iter().map(|r| r.z_t).collect();
    let (scale, stat, pv) = stable_ks(&z_t, 1.0, &reference, &fresh, c.match_quantile, c.permutations, seed, 1)?;
    rs.point("renewal_sum_scale", n, scale, 0.0);
    rs.point("renewal_sum_ks", n, stat, 0.0);
    rs.verdict(Verdict::at_least(10, "renewal_sum_ks_p", pv, c.ks_min_p));

    let z_s: Vec<f64> = rows.iter().filter_map(|r| r.z_s).collect();
    let z_x: Vec<f64> = rows.iter().filter_map(|r| r.z_x).collect();
    if z_s.len() >= 8 {
        let (scale, stat, pv) = stable_ks(&z_s, -1.0, &reference, &fresh, c.match_quantile, c.permutations, seed, 2)?;
        rs.point("running_max_scale", m as f64, scale, 0.0);
        rs.point("running_max_ks", m as f64, stat, 0.0);
        rs.verdict(Verdict::at_least(10, "running_max_ks_p", pv, c.ks_min_p));
        let (scale, stat, pv) = stable_ks(&z_x, -1.0, &reference, &fresh, c.match_quantile, c.permutations, seed, 3)?;
        rs.point("position_scale", m as f64, scale, 0.0);
        rs.point("position_ks", m as f64, stat, 0.0);
        rs.verdict(Verdict::at_least(10, "position_ks_p", pv, c.ks_min_p));
        rs.verdict(Verdict::at_most(10, "position_skewness", quantile_skewness(&z_x, 0.1), 0.0));
    } else {
        rs.note("fixed-time clauses skipped: traces shorter than the read-out time");
    }

    let med = |xs: Vec<f64>| quantile_sorted(&sorted(&xs), 0.5);
    let orth = med(rows.iter().map(|r| r.orth).collect());
    let par = med(rows.iter().map(|r| r.par).collect());
    rs.point("orthogonal_median", n, orth, 0.0);
    rs.point("parallel_median", n, par, 0.0);
    rs.verdict(Verdict::at_most(10, "orthogonal_ratio", orth / par, c.orthogonal_ratio_max));
    Ok(rs)
}
