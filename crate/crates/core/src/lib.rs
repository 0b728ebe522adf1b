//! Real-time electricity pricing under Blowfish privacy for temporally
//! correlated household occupancy.
//!
//! The pricing mechanism publishes `alpha * z + beta` plus Laplace noise whose
//! scale depends only on households an adversary could still tell apart given
//! its current belief. [`model`] holds occupancy chains and beliefs,
//! [`mechanism`] the per-step release and curator loop, [`adversary`] the
//! Bayesian tracker, [`simulator`] the synthetic population, [`metrics`] the
//! error, budget and audit measurements, and [`oracle`] a brute-force check of
//! the factorized fast path.

// `!(x > 0.0)` is used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adversary;
pub mod error;
pub mod mechanism;
pub mod metrics;
pub mod model;
pub mod oracle;
pub mod rng;
pub mod schema;
pub mod simulator;

pub use error::{Error, Result};
