//! Monte Carlo experiments with declared tolerances.
//!
//! Every experiment is a pure function of its configuration: replicas draw
//! from streams keyed by `(master_seed, replica)` and results are reduced in
//! replica order, so outputs do not depend on the thread count.

pub mod config;
pub mod fluctuations;
pub mod green;
pub mod result;
pub mod reversal;
pub mod t1_tail;
pub mod trap_tail;
pub mod velocity;

pub use config::ExperimentConfig;
pub use result::{Point, ResultSet, Verdict};

use crate::dirichlet::Weights;
use crate::error::{Error, Result};
use crate::lattice::LatticeEnvironment;
use crate::rng::{derive_seed, tag};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Experiment {
    T1Tail,
    Fluctuations,
    TrapTail,
    GreenMoments,
    ReversalTest,
    Velocity,
}

impl Experiment {
    pub const ALL: [Experiment; 6] = [Self::T1Tail, Self::Fluctuations, Self::TrapTail, Self::GreenMoments, Self::ReversalTest, Self::Velocity];

    pub fn id(self) -> &'static str {
        match self {
            Self::T1Tail => "t1-tail",
            Self::Fluctuations => "fluctuations",
            Self::TrapTail => "trap-tail",
            Self::GreenMoments => "green-moments",
            Self::ReversalTest => "reversal-test",
            Self::Velocity => "velocity",
        }
    }

    pub fn parse(id: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|e| e.id() == id)
    }
}

/// Runs `exp` on a pool of `config.threads` workers.
pub fn run(exp: Experiment, config: &ExperimentConfig) -> Result<ResultSet> {
    config.validate()?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(config.threads).build().map_err(|e| Error::Config(e.to_string()))?;
    pool.install(|| match exp {
        Experiment::T1Tail => t1_tail::run_t1_tail(config),
        Experiment::Fluctuations => fluctuations::run_fluctuations(config),
        Experiment::TrapTail => trap_tail::run_trap_tail(config),
        Experiment::GreenMoments => green::run_green_moments(config),
        Experiment::ReversalTest => reversal::run_reversal_test(config),
        Experiment::Velocity => velocity::run_velocity(config),
    })
}

/// Environment of replica `r`.
pub fn replica_environment(weights: &Weights, master_seed: u64, r: u64, cache: usize) -> Result<LatticeEnvironment> {
    LatticeEnvironment::with_cache_capacity(weights.clone(), derive_seed(master_seed, &[tag::REPLICA, r]), cache)
}
