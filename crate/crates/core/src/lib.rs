//! Bayesian nonlinear regression of crop yield on fertilizer inputs.
//!
//! The crate provides the nine classical yield response families, a
//! Mitscherlich-Baule hierarchy with gamma priors sampled by NUTS, MCMC
//! diagnostics, predictive model comparison (WAIC, PSIS-LOO, bridge-sampled
//! Bayes factors) and a synthetic data generator.

pub mod model;
pub mod data;
pub mod target;
pub mod nls;
pub mod nuts;
pub mod diagnostics;
pub mod selection;
pub mod workflow;
pub mod predict;
pub mod cli;
