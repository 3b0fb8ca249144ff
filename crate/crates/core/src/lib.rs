//! Equilibrium seeking for noncooperative games whose coupling constraints are
//! inferred from data, together with probabilistic feasibility certificates
//! for a tunable region of strategic deviations around the equilibrium.
//!
//! The pipeline is: draw a multisample of affine constraints ([`scenario`]),
//! assemble the sampled feasibility polytope ([`geometry`]), run the
//! constraint-tightening primal-dual iteration ([`solver`], [`tightening`],
//! [`multipliers`]), and attach a priori / a posteriori violation
//! certificates validated by out-of-sample Monte Carlo ([`certificates`]).
//! [`experiment`] reproduces the aggregative benchmark and the statistical
//! validation campaign end to end.

pub mod certificates;
pub mod error;
pub mod exec;
pub mod experiment;
pub mod game;
pub mod geometry;
pub mod lp;
pub mod multipliers;
pub mod qp;
pub mod scenario;
pub mod solver;
pub mod tightening;

pub use error::{Error, Result};
