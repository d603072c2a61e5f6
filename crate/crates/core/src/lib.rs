//! Uncertainty-aware individual treatment effect estimation on networked
//! observational data.
//!
//! The pipeline: a Lipschitz-constrained graph encoder ([`encoder`]) maps node
//! features to latent representations, twin sparse variational Gaussian
//! process heads ([`gp`]) model the control and treated outcome surfaces, and
//! [`estimator`] turns the two predictive posteriors into an ITE estimate with
//! an uncertainty score. [`synthgen`] generates networked causal datasets with
//! a tunable imbalance knob and [`evalrej`] scores rejection policies.

pub mod checkpoint;
pub mod cli;
pub mod diffnum;
pub mod encoder;
pub mod error;
pub mod estimator;
pub mod evalrej;
pub mod gp;
pub mod graph;
pub mod par;
pub mod synthgen;

pub use error::{Error, Result};
