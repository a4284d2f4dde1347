//! Bellman filtering, approximate maximum-likelihood estimation and the
//! baselines it is compared against (Kalman filter, continuous SIR particle
//! filter), plus a Monte Carlo study harness.

// NaN-rejecting `!(x > 0.0)` guards and index loops over small matrices
// are deliberate.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::too_many_arguments)]

pub mod bellman;
pub mod dynamics;
pub mod error;
pub mod estimation;
pub mod harness;
pub mod kalman;
pub mod numerics;
pub mod obsmodels;
pub mod particle;
pub mod svleverage;

pub use error::{Error, Result};
