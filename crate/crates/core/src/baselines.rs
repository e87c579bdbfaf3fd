//! Comparison estimators with constant site weights.
//!
//! * LOC fits the target site alone, on all of its rows.
//! * MA averages the local models with equal weights.
//! * EWMA weights model `k` by `exp(-L_k)`, where `L_k` is the summed squared
//!   gap between its predictions and a reference on the estimation subjects.
//! * STACK regresses the reference on the prediction columns (no intercept).
//!
//! The reference is either a fresh local fit on the target's estimation split
//! or, for the oracle variants, the true effect function.

use nalgebra::{DMatrix, DVector};

use crate::dataset::SiteDataset;
use crate::error::{Error, Result};
use crate::local::{fit_local, LocalLearner, LocalModel, OracleTau, PropensityModel};
use crate::rng::SeedSpec;
use crate::CateEstimator;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineKind {
    Loc,
    Ma,
    Ewma,
    Stack,
}

/// Weight construction target for EWMA and STACK.
#[derive(Debug, Clone, PartialEq)]
pub enum Reference {
    Model(LocalModel),
    Truth(OracleTau),
}

impl Reference {
    fn eval(&self, x: &[f64]) -> Result<f64> {
        match self {
            Reference::Model(m) => m.predict_tau(x),
            Reference::Truth(t) => Ok(t.eval(x)),
        }
    }

    pub fn is_oracle(&self) -> bool {
        matches!(self, Reference::Truth(_))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineModel {
    pub kind: BaselineKind,
    pub oracle: bool,
    pub models: Vec<LocalModel>,
    /// One weight per model; simplex for MA and EWMA.
    pub weights: Vec<f64>,
    /// STACK only: the design was rank deficient and the minimum-norm
    /// solution was used.
    pub rank_deficient: bool,
}

impl BaselineModel {
    /// `sum_k w_k tau_hat_k(x)`.
    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        let mut sum = 0.0;
        for (w, m) in self.weights.iter().zip(&self.models) {
            sum += w * m.predict_tau(x)?;
        }
        Ok(sum)
    }
}

impl CateEstimator for BaselineModel {
    fn estimate(&self, x: &[f64]) -> Result<f64> {
        self.predict(x)
    }
}

pub fn predict_baseline(model: &BaselineModel, x: &[f64]) -> Result<f64> {
    model.predict(x)
}

/// Local learner on every row of the target site.
pub fn fit_loc(
    site1: &SiteDataset,
    learner: &LocalLearner,
    prop: &PropensityModel,
    seed: SeedSpec,
) -> Result<BaselineModel> {
    let model = fit_local(site1, learner, prop, seed)?;
    Ok(BaselineModel {
        kind: BaselineKind::Loc,
        oracle: false,
        models: vec![model],
        weights: vec![1.0],
        rank_deficient: false,
    })
}

/// Equal weights `1/K`.
pub fn fit_ma(models: &[LocalModel]) -> Result<BaselineModel> {
    ma_with(models, false)
}

/// Literal reading of the displayed weight, `1/k` for the `k`-th model (not a
/// simplex). For auditing only.
pub fn fit_ma_literal(models: &[LocalModel]) -> Result<BaselineModel> {
    ma_with(models, true)
}

fn ma_with(models: &[LocalModel], literal: bool) -> Result<BaselineModel> {
    if models.is_empty() {
        return Err(Error::Validation("model averaging needs at least one model".into()));
    }
    let k = models.len() as f64;
    let weights = (1..=models.len())
        .map(|j| if literal { 1.0 / j as f64 } else { 1.0 / k })
        .collect();
    Ok(BaselineModel {
        kind: BaselineKind::Ma,
        oracle: false,
        models: models.to_vec(),
        weights,
        rank_deficient: false,
    })
}

/// Reference model fitted on the target's estimation split.
pub fn fit_reference(
    estimation: &SiteDataset,
    learner: &LocalLearner,
    prop: &PropensityModel,
    seed: SeedSpec,
) -> Result<Reference> {
    fit_local(estimation, learner, prop, seed).map(Reference::Model)
}

fn prediction_matrix(models: &[LocalModel], estimation: &SiteDataset) -> Result<DMatrix<f64>> {
    let mut p = DMatrix::zeros(estimation.len(), models.len());
    for i in 0..estimation.len() {
        let x = estimation.x(i);
        for (k, m) in models.iter().enumerate() {
            p[(i, k)] = m.predict_tau(x)?;
        }
    }
    Ok(p)
}

fn reference_vector(reference: &Reference, estimation: &SiteDataset) -> Result<DVector<f64>> {
    let mut r = DVector::zeros(estimation.len());
    for i in 0..estimation.len() {
        r[i] = reference.eval(estimation.x(i))?;
    }
    Ok(r)
}

/// Normalised `exp(-loss)` computed relative to the smallest loss.
pub fn softmin_weights(losses: &[f64]) -> Vec<f64> {
    let best = losses.iter().copied().fold(f64::INFINITY, f64::min);
    let raw: Vec<f64> = losses.iter().map(|l| (best - l).exp()).collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|r| r / total).collect()
}

pub fn fit_ewma(models: &[LocalModel], estimation: &SiteDataset, reference: &Reference) -> Result<BaselineModel> {
    if models.is_empty() || estimation.is_empty() {
        return Err(Error::Validation("EWMA needs models and estimation rows".into()));
    }
    let p = prediction_matrix(models, estimation)?;
    let r = reference_vector(reference, estimation)?;
    let losses: Vec<f64> = (0..models.len())
        .map(|k| p.column(k).iter().zip(r.iter()).map(|(a, b)| (a - b) * (a - b)).sum())
        .collect();
    Ok(BaselineModel {
        kind: BaselineKind::Ewma,
        oracle: reference.is_oracle(),
        models: models.to_vec(),
        weights: softmin_weights(&losses),
        rank_deficient: false,
    })
}

/// Relative singular-value cutoff for the minimum-norm solve.
const RANK_TOL: f64 = 1e-10;

pub fn fit_stack(models: &[LocalModel], estimation: &SiteDataset, reference: &Reference) -> Result<BaselineModel> {
    if models.is_empty() || estimation.is_empty() {
        return Err(Error::Validation("STACK needs models and estimation rows".into()));
    }
    let p = prediction_matrix(models, estimation)?;
    let r = reference_vector(reference, estimation)?;
    let (weights, rank_deficient) = min_norm_least_squares(&p, &r)?;
    Ok(BaselineModel {
        kind: BaselineKind::Stack,
        oracle: reference.is_oracle(),
        models: models.to_vec(),
        weights,
        rank_deficient,
    })
}

/// Least squares through the SVD pseudo-inverse; also reports whether any
/// singular value fell below the cutoff.
pub fn min_norm_least_squares(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<(Vec<f64>, bool)> {
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let eps = if smax > 0.0 { RANK_TOL * smax } else { f64::MIN_POSITIVE };
    let rank = svd.singular_values.iter().filter(|s| **s > eps).count();
    let solution = svd
        .solve(b, eps)
        .map_err(|e| Error::Fit(format!("least-squares solve failed: {e}")))?;
    if solution.iter().any(|v| !v.is_finite()) {
        return Err(Error::Fit("least-squares solution is not finite".into()));
    }
    Ok((solution.iter().copied().collect(), rank < a.ncols()))
}
