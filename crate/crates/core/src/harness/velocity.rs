//! Asymptotic direction of the walk.

use rayon::prelude::*;

use super::{replica_environment, ExperimentConfig, ResultSet, Verdict};
use crate::dirichlet::kappa_report;
use crate::error::{domain, Result};
use crate::lattice::Vertex;
use crate::stats::mean_se;
use crate::walk::{simulate, walk_stream};

pub fn run_velocity(config: &ExperimentConfig) -> Result<ResultSet> {
    let w = config.weights()?;
    let d = w.dim();
    let Some(drift) = kappa_report(&w).drift_direction() else {
        return domain("d_alpha = 0: no asymptotic direction to compare with");
    };
    let c = &config.velocity;
    let finals: Vec<Result<Vec<f64>>> = (0..c.replicas)
        .into_par_iter()
        .map(|r| {
            let env = replica_environment(&w, config.master_seed, r, 1 << 12)?;
            let t = simulate(&env, Vertex::ORIGIN, c.steps, None, &mut walk_stream(config.master_seed, r));
            Ok(t.last().coords(d).iter().map(|&x| x as f64 / c.steps as f64).collect())
        })
        .collect();
    let finals = finals.into_iter().collect::<Result<Vec<_>>>()?;
    let mut rs = ResultSet::new("velocity", config);
    rs.steps = c.replicas * c.steps as u64;
    let mut v = vec![0.0; d];
    let mut se = vec![0.0; d];
    for i in 0..d {
        let (m, s) = mean_se(&finals.iter().map(|f| f[i]).collect::<Vec<_>>());
        v[i] = m;
        se[i] = s;
        rs.point("velocity", i as f64, m, s);
    }
    let speed = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let cos = v.iter().zip(&drift).map(|(a, b)| a * b).sum::<f64>() / speed;
    let angle = cos.clamp(-1.0, 1.0).acos();
    let speed_se = se.iter().map(|x| x * x).sum::<f64>().sqrt();
    rs.verdict(Verdict::at_least(6, "speed_over_se", speed / speed_se, 4.0));
    rs.verdict(Verdict::at_most(6, "angle_to_drift", angle, c.angle_max));
    Ok(rs)
}
