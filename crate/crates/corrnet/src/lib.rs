//! Bayesian inference of a single subject's correlation network from
//! multivariate time series: Gaussian likelihoods with inverse-Wishart,
//! shrinkage inverse-Wishart, and mixture priors; moment-based prior
//! elicitation; marginal-likelihood mixture weighting; and credible-set edge
//! detection.

pub mod core_math;
pub mod edge;
pub mod elicitation;
pub mod error;
pub mod inference;
pub mod io;
pub mod priors;
pub mod samplers;

pub use error::{Error, Result};
