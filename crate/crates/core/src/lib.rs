//! Random walks in i.i.d. Dirichlet environments on `Z^d`: environments,
//! renewal structure, traps, finite-graph Dirichlet calculus, stable laws and
//! the Monte Carlo experiments built on them.

pub mod dirichlet;
pub mod error;
pub mod graph;
pub mod harness;
pub mod lattice;
pub mod linalg;
pub mod rng;
pub mod stable;
pub mod stats;
pub mod traps;
pub mod walk;

pub use error::{Error, Result};
