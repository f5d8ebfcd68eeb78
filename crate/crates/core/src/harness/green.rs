//! Moments of the Green function at the origin.

use rayon::prelude::*;

use super::{replica_environment, ExperimentConfig, ResultSet, Verdict};
use crate::dirichlet::{kappa_report, Weights};
use crate::error::{domain, Result};
use crate::graph::{return_probability, LatticeGraph};
use crate::lattice::Vertex;
use crate::stats::{block_doubling_rate, quantile_sorted, sorted};

/// `P_0(H_0^+ < exit)` on the box of radius `radius`, for environments
/// `0..count`.
pub fn box_return_probabilities(weights: &Weights, master_seed: u64, radius: u32, count: u64) -> Result<Vec<f64>> {
    let lg = LatticeGraph::cube(weights, radius)?;
    let origin = lg.index_of(&Vertex::ORIGIN).expect("origin in box");
    let cem = lg.cemetery();
    (0..count)
        .into_par_iter()
        .map(|i| {
            let env = replica_environment(weights, master_seed, i, 0)?;
            return_probability(&lg.graph, &lg.environment(&env), origin, &[cem])
        })
        .collect()
}

/// `G(0, 0) = 1 / (1 - P_0(H_0^+ < exit))`.
pub fn green_values(returns: &[f64]) -> Vec<f64> {
    returns.iter().map(|p| 1.0 / (1.0 - p)).collect()
}

pub fn run_green_moments(config: &ExperimentConfig) -> Result<ResultSet> {
    let w = config.weights()?;
    let kappa = kappa_report(&w).kappa;
    let c = &config.green;
    if !c.s_grid.iter().all(|s| *s > 0.0) {
        return domain("moment orders must be positive");
    }
    let mut rs = ResultSet::new("green-moments", config);
    let ret = box_return_probabilities(&w, config.master_seed, c.radius, c.environments)?;
    rs.steps = c.environments;
    let g = green_values(&ret);
    let gs = sorted(&g);
    rs.point("green_median", 0.0, quantile_sorted(&gs, 0.5), 0.0);
    rs.point("green_q99", 0.0, quantile_sorted(&gs, 0.99), 0.0);

    // Boundary sensitivity against the next box.
    let k = c.boundary_check.min(c.environments);
    if k > 0 {
        let bigger = box_return_probabilities(&w, config.master_seed, c.radius + 1, k)?;
        let rel: Vec<f64> = ret[..k as usize].iter().zip(&bigger).map(|(a, b)| (b - a).abs() / b.max(f64::MIN_POSITIVE)).collect();
        let sens = quantile_sorted(&sorted(&rel), 0.5);
        rs.point("boundary_sensitivity", c.radius as f64, sens, 0.0);
        if sens > c.boundary_tol {
            rs.note(format!("return probability changes by {sens:.3} from radius {} to {}: enlarge the radius", c.radius, c.radius + 1));
        }
    }

    for &s in &c.s_grid {
        let powered: Vec<f64> = g.iter().map(|x| x.powf(s)).collect();
        let mean = powered.iter().sum::<f64>() / powered.len() as f64;
        rs.point("moment", s, mean, 0.0);
        let rate = block_doubling_rate(&powered, c.block_log2[0], c.block_log2[1])?;
        rs.point("doubling_rate", s, rate, 0.0);
        if s <= kappa - c.margin {
            rs.verdict(Verdict::at_most(8, &format!("stable_s{s}"), rate, c.stable_rate));
        } else if s >= kappa + c.margin {
            rs.verdict(Verdict::at_least(8, &format!("diverging_s{s}"), rate, c.diverging_rate));
        } else {
            rs.note(format!("s = {s} within {} of kappa = {kappa}: no verdict", c.margin));
        }
    }
    Ok(rs)
}
