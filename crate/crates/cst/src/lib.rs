//! Collaborative score-type tests for linear hypotheses on high-dimensional
//! GLMs with multi-site, non-shared data.
//!
//! The library simulates (or connects to) a cluster in which only parameter
//! vectors, gradients, and small variance matrices cross site boundaries. On
//! top of that it provides a two-stage partially penalized estimator driven
//! by a gradient-shifted surrogate loss, and a chi-square score statistic for
//! hypotheses of the form `Cθ = t` with a sparse high-dimensional nuisance
//! block. A Monte Carlo harness reproduces size/power experiments and ingests
//! user-supplied per-site CSV data.
//!
//! See the `examples/` directory for one runnable walkthrough per capability
//! and the `cst` binary for the command-line interface.

pub mod cluster;
pub mod error;
pub mod inference;
pub mod model;
pub mod numerics;
pub mod penalty;
pub mod solver;

pub use error::{Error, Result};
