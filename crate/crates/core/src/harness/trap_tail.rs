//! Trap strengths, trap times given a configuration and geometric moments.

use super::{ExperimentConfig, ResultSet, Verdict};
use crate::dirichlet::{kappa_report, sample_dirichlet_into};
use crate::error::{domain, Result};
use crate::traps::{
    back_and_forth, chunked, geometric_moment_check, is_trap, quasi_independence_envelope, strength, strength_tail_given_config, trap_strength_tail,
    trap_time_tail_given_config, Configuration,
};

/// Violations of `(1 - p_f) s_f in (0, 1]` and of `>= 1/2` on traps over
/// `n` edges with independent Dirichlet endpoints, directions cycling.
pub fn trap_algebra_violations(weights: &crate::dirichlet::Weights, n: u64, seed: u64) -> (u64, u64, u64) {
    let d = weights.dim();
    let alphas = weights.alphas().to_vec();
    chunked(
        n,
        seed,
        0x0061_6c67,
        (0u64, 0u64, 0u64),
        |len, rng| {
            let (mut range, mut half, mut traps) = (0, 0, 0);
            let mut px = vec![0.0; 2 * d];
            let mut py = vec![0.0; 2 * d];
            for i in 0..len {
                let axis = (i % d as u64) as usize;
                sample_dirichlet_into(&alphas, rng, &mut px).expect("valid weights");
                sample_dirichlet_into(&alphas, rng, &mut py).expect("valid weights");
                let (a, b) = (px[axis], py[axis + d]);
                let x = (1.0 - back_and_forth(a, b)) * strength(a, b);
                if !(x > 0.0 && x <= 1.0 + 1e-12) {
                    range += 1;
                }
                if is_trap(a, b) {
                    traps += 1;
                    if x < 0.5 - 1e-12 {
                        half += 1;
                    }
                }
            }
            (range, half, traps)
        },
        |a, b| (a.0 + b.0, a.1 + b.1, a.2 + b.2),
    )
}

pub fn run_trap_tail(config: &ExperimentConfig) -> Result<ResultSet> {
    let w = config.weights()?;
    let d = w.dim();
    let report = kappa_report(&w);
    let c = &config.trap_tail;
    let seed = config.master_seed;
    let mut rs = ResultSet::new("trap-tail", config);

    let (range, half, traps) = trap_algebra_violations(&w, c.algebra_samples, seed);
    rs.point("algebra_traps", 0.0, traps as f64, 0.0);
    rs.verdict(Verdict::at_most(4, "strength_product_range_violations", range as f64, 0.0));
    rs.verdict(Verdict::at_most(4, "strength_product_half_violations", half as f64, 0.0));

    let tail = trap_strength_tail(&w, 0, &c.a_grid, c.samples, seed, (c.fit_range[0], c.fit_range[1]))?;
    for p in &tail.points {
        rs.point("strength_tail_dir1", p.threshold, p.p, 0.5 * (p.hi - p.lo));
    }
    let kappa_1 = report.kappa_j[0];
    match tail.slope {
        Some(f) => {
            rs.point("strength_slope_dir1", 0.0, f.slope, f.std_error);
            rs.verdict(Verdict::range(4, "strength_slope_dir1", f.slope, -kappa_1 - c.slope_tol, -kappa_1 + c.slope_tol));
        }
        None => rs.verdict(Verdict::flag(4, "strength_slope_dir1", false)),
    }
    if tail.zero_at_max {
        rs.note("no strength exceedance at the largest threshold");
    }

    let [j, xx, xy, yx, yy] = c.configuration;
    if j == 0 || j as usize > d {
        return domain("configuration direction must be in 1..=d");
    }
    let config_c = Configuration::new(j as usize - 1, true, [xx, xy, yx, yy]);
    let cond = trap_time_tail_given_config(&w, config_c, c.eps, &c.x_grid, c.conditional_samples, seed)?;
    for p in &cond.points {
        rs.point("conditional_tail", p.x, p.tail.p, 0.5 * (p.tail.hi - p.tail.lo));
        rs.point("conditional_tail_scaled", p.x, p.scaled, 0.0);
        rs.point("conditional_envelope", p.x, p.envelope_p, 0.0);
        rs.verdict(Verdict::flag(4, &format!("envelope_dominates_x{}", p.x), p.envelope_p >= p.tail.p));
    }
    if cond.empty {
        rs.note("conditional event never observed");
    }
    if let Some(r) = cond.ratios.last() {
        rs.verdict(Verdict::range(4, "conditional_scaled_ratio", *r, c.ratio_range[0], c.ratio_range[1]));
    }

    let env_points = strength_tail_given_config(&w, config_c, &c.envelope_a_grid, c.conditional_samples, seed ^ 0x5a)?;
    for p in &env_points {
        rs.point("conditional_strength_tail", p.threshold, p.p, 0.5 * (p.hi - p.lo));
    }
    match quasi_independence_envelope(&env_points, cond.kappa_j, config_c.n_f(), w.total(), c.envelope_z) {
        Ok(e) => {
            rs.point("envelope_constant", 0.0, e.d_hat, 0.0);
            rs.verdict(Verdict::flag(4, "quasi_independence_envelope", e.pass));
        }
        Err(_) => rs.verdict(Verdict::flag(4, "quasi_independence_envelope", false)),
    }

    let geo = geometric_moment_check(&c.geometric_p_grid, &c.geometric_beta_grid, c.geometric_samples, seed)?;
    let mut worst = f64::NEG_INFINITY;
    for m in &geo {
        rs.point(&format!("geometric_moment_beta{}", m.beta), m.p, m.estimate, m.std_error);
        worst = worst.max((m.estimate - 4.0 * m.std_error) / m.bound);
    }
    rs.verdict(Verdict::at_most(4, "geometric_moment_over_bound", worst, 1.0));
    rs.steps = 2 * c.samples + c.algebra_samples + 2 * c.conditional_samples + c.geometric_samples * geo.len() as u64;
    Ok(rs)
}
