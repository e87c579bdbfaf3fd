//! Tree-based model averaging of conditional average treatment effect (CATE)
//! estimators across data sites that cannot pool subject-level data.
//!
//! Each site fits a local CATE model on its own rows ([`local`]). Only the
//! fitted models travel ([`exchange`]). The target site evaluates every model
//! on a held-out estimation split, stacks the predictions into an augmented
//! table keyed by a categorical site indicator, and fits an ensemble tree or
//! ensemble forest on it ([`ensemble`]). Fixing the site indicator to the
//! target site yields the model-averaged estimate together with per-subject
//! site weights that sum to one.
//!
//! [`baselines`] holds the competing averaging schemes and [`sim`] the
//! Monte-Carlo harness used to compare them.

pub mod baselines;
pub mod dataset;
pub mod ensemble;
pub mod error;
pub mod exchange;
pub mod local;
pub mod rng;
pub mod sim;
pub mod tree;

pub use error::{Error, Result};

/// Anything that maps a covariate vector to a treatment effect estimate.
pub trait CateEstimator {
    fn estimate(&self, x: &[f64]) -> Result<f64>;
}
