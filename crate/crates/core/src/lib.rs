//! Multilevel covariate-assisted principal regression.
//!
//! Finds, for every cluster of a nested dataset, a projection of the unit
//! covariance matrices whose log-variance follows a linear mixed model in
//! covariates, with cluster projections tied together by a von Mises-Fisher
//! prior.

pub mod data;
pub mod error;
pub mod linalg;
pub mod rng;
pub mod special;
pub mod likelihood;
pub mod estimator;
pub mod components;
pub mod inference;
pub mod simulation;
pub mod io;

pub use error::{McapError, Result};
