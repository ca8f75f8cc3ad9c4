//! Distributed clustering with overfitted mixtures of Gaussian mixtures.
//!
//! Workers run independent Gibbs samplers on disjoint shards. The master
//! reconciles their local clusters from item statistics and picks a point
//! estimate under a partition loss. Model parameters are then sampled given
//! that allocation. Raw rows never leave a worker.

pub mod artifacts;
pub mod conditionals;
pub mod error;
pub mod estimate;
pub mod eval;
pub mod kernels;
pub mod kmeans;
pub mod local;
pub mod model;
pub mod params;
pub mod refine;
pub mod runtime;

pub use error::{Error, Result, Step};
