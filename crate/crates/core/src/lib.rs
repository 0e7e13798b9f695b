//! Bayesian hierarchical B-spline regression for neonatal mortality.
//!
//! The log ratio of neonatal to other under-five deaths is modelled as a
//! hinge function of U5MR plus a country-specific penalised B-spline
//! multiplier, fitted by Metropolis-within-Gibbs MCMC to observations with
//! source-specific error structures.

pub mod config;
pub mod error;
pub mod estimates;
pub mod ingest;
pub mod model;
pub mod plot;
pub mod posterior;
pub mod rng;
pub mod sampler;
pub mod splines;
pub mod stats;
pub mod synth;
pub mod validation;

pub use error::{Error, Result};
