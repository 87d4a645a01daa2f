//! Wasserstein gradient flows by the JKO scheme with input-convex networks.
//!
//! Each JKO step fits a convex potential `u` whose gradient pushes the current
//! particle cloud forward; the flow is tracked through per-particle
//! log-Jacobians so densities can be evaluated anywhere afterwards.

pub mod analytic;
pub mod cloud;
pub mod density;
pub mod divergence;
pub mod error;
pub mod experiment;
pub mod functionals;
pub mod icnn;
pub mod jko;
pub mod logdet;
pub mod metrics;
pub mod numcore;
pub mod optim;
pub mod par;

pub use error::{Error, Result};
