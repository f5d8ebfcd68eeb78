//! Time reversal of Dirichlet environments on a finite graph.

use rand_distr::{Beta, Distribution};
use std::path::Path;

use super::{ExperimentConfig, ResultSet, Verdict};
use crate::error::{domain, Error, Result};
use crate::graph::{return_probability_beta_bound, reverse_environment, EnvironmentOnGraph, FiniteGraph};
use crate::rng::{stream, tag};
use crate::stats::ks_distance;

/// `"triangle"` (bidirected, unit weights), `"two-cycle"`, or an edge-list file.
pub fn load_graph(spec: &str) -> Result<FiniteGraph> {
    match spec {
        "triangle" => Ok(FiniteGraph::bidirected_cycle(3, 1.0)),
        "two-cycle" => Ok(FiniteGraph::bidirected_cycle(2, 1.0)),
        path => {
            let text = std::fs::read_to_string(Path::new(path)).map_err(|e| Error::Config(format!("{path}: {e}")))?;
            FiniteGraph::parse_edge_list(&text)
        }
    }
}

pub fn run_reversal_test(config: &ExperimentConfig) -> Result<ResultSet> {
    let c = &config.reversal;
    let g = load_graph(&c.graph)?;
    g.require_null_divergence()?;
    if g.edge_count() == 0 {
        return domain("graph without edges");
    }
    let rg = g.reversed()?;
    let mut rs = ResultSet::new("reversal-test", config);
    let seed = config.master_seed;
    let per = (c.draws as usize).div_ceil(c.marginals.max(1));
    let mut passed = 0;
    for i in 0..c.marginals {
        let e = i % g.edge_count();
        let mut rng = stream(seed, &[tag::AUX, 0x0072_6576, i as u64]);
        let mut reversed = Vec::with_capacity(per);
        let mut direct = Vec::with_capacity(per);
        for _ in 0..per {
            let omega = EnvironmentOnGraph::sample(&g, &mut rng);
            let (_, rev) = reverse_environment(&g, &omega)?;
            reversed.push(rev.prob(e));
            direct.push(EnvironmentOnGraph::sample(&rg, &mut rng).prob(e));
        }
        let ks = ks_distance(&reversed, &direct, c.permutations, &mut rng)?;
        rs.point("marginal_ks", i as f64, ks.statistic, 0.0);
        rs.point("marginal_p", i as f64, ks.p_value, 0.0);
        if ks.p_value >= c.ks_min_p {
            passed += 1;
        }
    }
    rs.verdict(Verdict::at_least(3, "marginals_passing", passed as f64, c.min_pass as f64));

    // Escape probability against the reversed one-step probability.
    let (x, y) = match &c.bound_edge {
        Some([a, b]) => (
            g.vertex_by_label(a).ok_or_else(|| Error::Config(format!("unknown vertex {a}")))?,
            g.vertex_by_label(b).ok_or_else(|| Error::Config(format!("unknown vertex {b}")))?,
        ),
        None => (g.edge(0).tail, g.edge(0).head),
    };
    let mut rng = stream(seed, &[tag::AUX, 0x6265_7461]);
    let mut violations = 0;
    let mut rhs = Vec::with_capacity(c.draws as usize);
    for _ in 0..c.draws {
        let omega = EnvironmentOnGraph::sample(&g, &mut rng);
        let (l, r) = return_probability_beta_bound(&g, &omega, x, y)?;
        if l < r - 1e-12 {
            violations += 1;
        }
        rhs.push(r);
    }
    rs.steps = (2 * per * c.marginals) as u64 + c.draws;
    rs.verdict(Verdict::at_most(3, "beta_bound_violations", violations as f64, 0.0));
    let a_yx: f64 = g.edges().iter().filter(|e| e.tail == y && e.head == x).map(|e| e.weight).sum();
    let rest = g.out_weight(x) - a_yx;
    if a_yx > 0.0 && rest > 1e-12 {
        let beta = Beta::new(a_yx, rest).map_err(|e| Error::Domain(e.to_string()))?;
        let direct: Vec<f64> = (0..c.draws).map(|_| beta.sample(&mut rng)).collect();
        let ks = ks_distance(&rhs, &direct, c.permutations, &mut rng)?;
        rs.point("bound_rhs_ks", 0.0, ks.statistic, 0.0);
        rs.verdict(Verdict::at_least(3, "bound_rhs_ks_p", ks.p_value, c.ks_min_p));
    } else {
        rs.note("reversed one-step probability is degenerate; distribution check skipped");
    }
    Ok(rs)
}
