//! Experiment configuration, read from TOML.

use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::dirichlet::{kappa_report, Weights};
use crate::error::{Error, Result};
use crate::walk::{ConfirmRule, RenewalParams};

pub const SCHEMA: u32 = 1;

fn canonical_alphas() -> Vec<f64> {
    Weights::canonical().alphas().to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema: u32,
    #[serde(default = "canonical_alphas")]
    pub weights: Vec<f64>,
    /// Checked against `weights` when given.
    #[serde(default)]
    pub dimension: Option<usize>,
    #[serde(default)]
    pub master_seed: u64,
    /// Worker threads; 0 lets the pool decide.
    #[serde(default)]
    pub threads: usize,
    /// Renewal direction; defaults to `d_alpha / |d_alpha|`.
    #[serde(default)]
    pub direction: Option<Vec<f64>>,
    /// Renewal level gap; defaults to `2 sqrt(d) + 0.1`.
    #[serde(default)]
    pub a: Option<f64>,
    #[serde(default)]
    pub t1_tail: T1TailConfig,
    #[serde(default)]
    pub fluctuations: FluctuationConfig,
    #[serde(default)]
    pub trap_tail: TrapTailConfig,
    #[serde(default)]
    pub green: GreenConfig,
    #[serde(default)]
    pub reversal: ReversalConfig,
    #[serde(default)]
    pub velocity: VelocityConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct T1TailConfig {
    pub replicas: u64,
    pub n_max: usize,
    /// Hill `k` as a fraction of the sample size.
    pub hill_k_frac: f64,
    /// Accepted range for the Hill index of `T_1` when `kappa < 2`.
    pub hill_range: [f64; 2],
    /// Required excess of the `T_1°` index over the `T_1` index.
    pub sub_dominance_margin: f64,
    /// Plateau tolerance of the Hill scan.
    pub plateau_tol: f64,
    pub x_grid: Vec<f64>,
    /// `h(x) = eps x` for the trap-time buckets.
    pub eps: f64,
    /// Visit-count cut `m(eps)`.
    pub m: u64,
    /// Largest accepted block-doubling rate of the fourth moment when `kappa >= 2`.
    pub light_moment_rate: f64,
}

impl Default for T1TailConfig {
    fn default() -> Self {
        Self {
            replicas: 100_000,
            n_max: 50_000_000,
            hill_k_frac: 0.01,
            hill_range: [1.55, 1.95],
            sub_dominance_margin: 0.1,
            plateau_tol: 0.15,
            x_grid: vec![10.0, 20.0, 50.0, 100.0, 200.0, 500.0, 1000.0],
            eps: 0.1,
            m: 5,
            light_moment_rate: 1.03,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FluctuationConfig {
    pub replicas: u64,
    /// Renewal blocks per replica.
    pub blocks: usize,
    pub n_max: usize,
    /// Fresh stable draws for each KS comparison.
    pub stable_draws: usize,
    pub permutations: usize,
    /// Quantile matched when fitting the stable scale.
    pub match_quantile: f64,
    pub ks_min_p: f64,
    /// Largest accepted orthogonal over parallel median ratio.
    pub orthogonal_ratio_max: f64,
    /// Fixed-time clauses are read at `time_frac * blocks * tau_hat`.
    pub time_frac: f64,
}

impl Default for FluctuationConfig {
    fn default() -> Self {
        Self {
            replicas: 1000,
            blocks: 1000,
            n_max: 50_000_000,
            stable_draws: 10_000,
            permutations: 1000,
            match_quantile: 0.9,
            ks_min_p: 0.01,
            orthogonal_ratio_max: 0.1,
            time_frac: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrapTailConfig {
    /// Two-vertex samples per direction.
    pub samples: u64,
    pub a_grid: Vec<f64>,
    /// Thresholds used by the slope fit.
    pub fit_range: [f64; 2],
    pub slope_tol: f64,
    /// Random edges for the `(1 - p_f) s_f` bounds.
    pub algebra_samples: u64,
    /// Configuration `(j, N_xx, N_xy, N_yx, N_yy)` for the conditional tail.
    pub configuration: [u64; 5],
    pub eps: f64,
    pub x_grid: Vec<f64>,
    pub conditional_samples: u64,
    /// Accepted range for `x^kappa_j` tail ratios at consecutive grid points.
    pub ratio_range: [f64; 2],
    pub envelope_a_grid: Vec<f64>,
    pub envelope_z: f64,
    pub geometric_p_grid: Vec<f64>,
    pub geometric_beta_grid: Vec<f64>,
    pub geometric_samples: u64,
}

impl Default for TrapTailConfig {
    fn default() -> Self {
        Self {
            samples: 10_000_000,
            a_grid: vec![2.0, 4.0, 8.0, 16.0, 32.0, 64.0, 128.0, 256.0, 512.0, 1024.0],
            fit_range: [16.0, 1024.0],
            slope_tol: 0.15,
            algebra_samples: 1_000_000,
            configuration: [1, 0, 1, 0, 0],
            eps: 0.1,
            x_grid: vec![200.0, 400.0, 800.0, 1600.0],
            conditional_samples: 4_000_000,
            ratio_range: [0.7, 1.4],
            envelope_a_grid: vec![10.0, 20.0, 40.0, 100.0],
            envelope_z: 4.0,
            geometric_p_grid: vec![0.5, 0.1, 0.01],
            geometric_beta_grid: vec![1.0, 1.5, 2.0],
            geometric_samples: 1_000_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GreenConfig {
    pub environments: u64,
    pub radius: u32,
    pub s_grid: Vec<f64>,
    /// Block sizes `2^lo ..= 2^hi` for the doubling rate.
    pub block_log2: [u32; 2],
    /// Rate at or below which a moment is stable.
    pub stable_rate: f64,
    /// Rate at or above which a moment diverges.
    pub diverging_rate: f64,
    /// Environments re-solved on the larger box for the boundary check.
    pub boundary_check: u64,
    pub boundary_tol: f64,
    /// Only `s` at least this far from `kappa` get a verdict.
    pub margin: f64,
}

impl Default for GreenConfig {
    fn default() -> Self {
        Self {
            environments: 16_384,
            radius: 2,
            s_grid: vec![1.25, 2.25],
            block_log2: [4, 10],
            stable_rate: 1.03,
            diverging_rate: 1.06,
            boundary_check: 256,
            boundary_tol: 0.05,
            margin: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReversalConfig {
    /// `"triangle"` or a path to an edge list.
    pub graph: String,
    pub draws: u64,
    /// Marginal tests; edge `i mod |E|` with its own batch.
    pub marginals: usize,
    pub permutations: usize,
    pub ks_min_p: f64,
    pub min_pass: usize,
    /// `(x, y)` labels for the escape-probability bound; first edge when empty.
    pub bound_edge: Option<[String; 2]>,
}

impl Default for ReversalConfig {
    fn default() -> Self {
        Self { graph: "triangle".into(), draws: 10_000, marginals: 10, permutations: 1000, ks_min_p: 0.01, min_pass: 9, bound_edge: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VelocityConfig {
    pub replicas: u64,
    pub steps: usize,
    pub angle_max: f64,
}

impl Default for VelocityConfig {
    fn default() -> Self {
        Self { replicas: 8, steps: 1_000_000, angle_max: 0.1 }
    }
}

impl ExperimentConfig {
    pub fn canonical(master_seed: u64) -> Self {
        Self {
            schema: SCHEMA,
            weights: canonical_alphas(),
            dimension: None,
            master_seed,
            threads: 0,
            direction: None,
            a: None,
            t1_tail: T1TailConfig::default(),
            fluctuations: FluctuationConfig::default(),
            trap_tail: TrapTailConfig::default(),
            green: GreenConfig::default(),
            reversal: ReversalConfig::default(),
            velocity: VelocityConfig::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("serializable")
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema != SCHEMA {
            return Err(Error::Config(format!("unsupported schema {} (expected {SCHEMA})", self.schema)));
        }
        let w = self.weights()?;
        if let Some(d) = self.dimension {
            if d != w.dim() {
                return Err(Error::Config(format!("dimension {d} does not match {} weights", self.weights.len())));
            }
        }
        if let Some(u) = &self.direction {
            if u.len() != w.dim() {
                return Err(Error::Config("direction length does not match the dimension".into()));
            }
        }
        Ok(())
    }

    pub fn weights(&self) -> Result<Weights> {
        Weights::new(self.weights.clone()).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn kappa(&self) -> Result<f64> {
        Ok(kappa_report(&self.weights()?).kappa)
    }

    /// Renewal parameters with the overrides applied.
    pub fn renewal_params(&self) -> Result<RenewalParams> {
        let w = self.weights()?;
        let mut p = match &self.direction {
            Some(u) => {
                let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
                let a = 2.0 * (w.dim() as f64).sqrt() + 0.1;
                RenewalParams { direction: u.iter().map(|x| x / norm).collect(), a, confirm: ConfirmRule::default_for(&w, a) }
            }
            None => RenewalParams::default_for(&w)?,
        };
        if let Some(a) = self.a {
            p.a = a;
            p.confirm = ConfirmRule::default_for(&w, a);
        }
        p.validate(w.dim())?;
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_defaults() {
        let c = ExperimentConfig::canonical(7);
        let back = ExperimentConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        let minimal = ExperimentConfig::from_toml("schema = 1\nmaster_seed = 3\n").unwrap();
        assert_eq!(minimal.weights, canonical_alphas());
        assert_eq!(minimal.t1_tail, T1TailConfig::default());
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(matches!(ExperimentConfig::from_toml("schema = 2"), Err(Error::Config(_))));
        assert!(ExperimentConfig::from_toml("schema = 1\nbogus = 1").is_err());
        assert!(ExperimentConfig::from_toml("schema = 1\nweights = [1.0, 1.0, -1.0, 1.0]").is_err());
        assert!(ExperimentConfig::from_toml("schema = 1\ndimension = 2").is_err());
        assert!(ExperimentConfig::from_toml("schema = 1\na = 1.0").unwrap().renewal_params().is_err());
    }

    #[test]
    fn direction_override_is_normalized() {
        let c = ExperimentConfig::from_toml("schema = 1\ndirection = [2.0, 0.0, 0.0]").unwrap();
        assert_eq!(c.renewal_params().unwrap().direction, vec![1.0, 0.0, 0.0]);
    }
}
