//! Treatment propensity models and the transformed outcome.

use nalgebra::{DMatrix, DVector};

use crate::dataset::SiteDataset;
use crate::error::{Error, Result};

pub const DEFAULT_CLIP: (f64, f64) = (0.01, 0.99);
const MAX_ITERATIONS: usize = 100;
const GRADIENT_TOL: f64 = 1e-8;
const RELATIVE_LOG_LIK_TOL: f64 = 1e-12;
const SEPARATION_NORM: f64 = 1e3;
// a log-likelihood this close to zero means every row is fitted perfectly
const SEPARATION_LOG_LIK: f64 = -1e-6;

#[inline]
pub fn expit(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

// log(1 + e^v) without overflow
#[inline]
fn softplus(v: f64) -> f64 {
    if v > 0.0 {
        v + (-v).exp().ln_1p()
    } else {
        v.exp().ln_1p()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PropensityKind {
    Constant,
    Logistic,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PropensityForm {
    Constant(f64),
    /// `expit(b0 + sum_j b_j * x[covariates[j]])`; `coefficients[0]` is the intercept.
    Logistic {
        covariates: Vec<usize>,
        coefficients: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropensityModel {
    pub form: PropensityForm,
    /// Probabilities are clipped into `[lo, hi]`.
    pub clip: (f64, f64),
    /// Training rows whose fitted probability was clipped.
    pub clipped_rows: usize,
}

impl PropensityModel {
    pub fn constant(p: f64) -> Result<Self> {
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::Validation(format!(
                "constant propensity must lie in (0,1), got {p}"
            )));
        }
        Ok(Self {
            form: PropensityForm::Constant(p),
            clip: DEFAULT_CLIP,
            clipped_rows: 0,
        })
    }

    pub fn logistic(covariates: Vec<usize>, coefficients: Vec<f64>) -> Result<Self> {
        if covariates.is_empty() || coefficients.len() != covariates.len() + 1 {
            return Err(Error::Validation(
                "logistic propensity needs one coefficient per covariate plus an intercept".into(),
            ));
        }
        Ok(Self {
            form: PropensityForm::Logistic {
                covariates,
                coefficients,
            },
            clip: DEFAULT_CLIP,
            clipped_rows: 0,
        })
    }

    pub fn with_clip(mut self, lo: f64, hi: f64) -> Result<Self> {
        if !(lo > 0.0 && lo < hi && hi < 1.0) {
            return Err(Error::Validation(format!(
                "clip bounds must satisfy 0 < lo < hi < 1, got ({lo}, {hi})"
            )));
        }
        self.clip = (lo, hi);
        Ok(self)
    }

    /// Unclipped model probability.
    pub fn raw_probability(&self, x: &[f64]) -> f64 {
        match &self.form {
            PropensityForm::Constant(p) => *p,
            PropensityForm::Logistic {
                covariates,
                coefficients,
            } => {
                let eta = coefficients[0]
                    + covariates
                        .iter()
                        .zip(&coefficients[1..])
                        .map(|(&j, b)| b * x[j])
                        .sum::<f64>();
                expit(eta)
            }
        }
    }

    /// Clipped probability of treatment.
    pub fn probability(&self, x: &[f64]) -> f64 {
        self.raw_probability(x).clamp(self.clip.0, self.clip.1)
    }

    /// Clipped probability of the arm actually received.
    pub fn arm_probability(&self, z: bool, x: &[f64]) -> f64 {
        let e = self.probability(x);
        if z {
            e
        } else {
            1.0 - e
        }
    }

    /// Largest covariate index the model reads, if any.
    pub fn max_covariate(&self) -> Option<usize> {
        match &self.form {
            PropensityForm::Constant(_) => None,
            PropensityForm::Logistic { covariates, .. } => covariates.iter().copied().max(),
        }
    }
}

/// Fits a constant (empirical treated share) or logistic propensity model.
///
/// The logistic fit runs damped Newton iterations on the log-likelihood until
/// the gradient norm drops to `1e-8`, the relative change in log-likelihood
/// drops to `1e-12`, or 100 iterations elapse. Separation is
/// reported when the coefficients grow past norm `1e3` or the fit becomes
/// perfect.
pub fn fit_propensity(data: &SiteDataset, kind: PropensityKind, covariates: &[usize]) -> Result<PropensityModel> {
    let n = data.len();
    let treated = data.treated_count();
    if treated == 0 || treated == n {
        return Err(Error::Positivity("propensity fit needs both arms".into()));
    }
    let mut model = match kind {
        PropensityKind::Constant => PropensityModel::constant(treated as f64 / n as f64)?,
        PropensityKind::Logistic => {
            if covariates.is_empty() {
                return Err(Error::Validation(
                    "logistic propensity needs at least one covariate".into(),
                ));
            }
            if let Some(&j) = covariates.iter().find(|&&j| j >= data.dim()) {
                return Err(Error::Validation(format!(
                    "covariate {j} outside dimension {}",
                    data.dim()
                )));
            }
            let coefficients = newton_logistic(data, covariates)?;
            PropensityModel::logistic(covariates.to_vec(), coefficients)?
        }
    };
    model.clipped_rows = data
        .rows()
        .filter(|(_, _, x)| {
            let p = model.raw_probability(x);
            p < model.clip.0 || p > model.clip.1
        })
        .count();
    if model.clipped_rows > 0 {
        log::debug!(
            "site {}: {} propensities clipped into [{}, {}]",
            data.site_id(),
            model.clipped_rows,
            model.clip.0,
            model.clip.1
        );
    }
    Ok(model)
}

fn newton_logistic(data: &SiteDataset, covariates: &[usize]) -> Result<Vec<f64>> {
    let n = data.len();
    let p = covariates.len() + 1;
    let design = DMatrix::from_fn(n, p, |i, j| if j == 0 { 1.0 } else { data.x(i)[covariates[j - 1]] });
    let z = DVector::from_iterator(n, data.z().iter().map(|&t| if t { 1.0 } else { 0.0 }));

    let log_lik = |beta: &DVector<f64>| -> f64 {
        let eta = &design * beta;
        eta.iter().zip(z.iter()).map(|(e, zi)| zi * e - softplus(*e)).sum()
    };

    let mut beta = DVector::zeros(p);
    let mut current = log_lik(&beta);
    let mut grad_norm = f64::INFINITY;
    for _ in 0..MAX_ITERATIONS {
        let eta = &design * &beta;
        let prob = eta.map(expit);
        let grad = design.transpose() * (&z - &prob);
        grad_norm = grad.norm();
        if grad_norm <= GRADIENT_TOL {
            if current > SEPARATION_LOG_LIK {
                return Err(Error::Separation {
                    norm: beta.norm(),
                    last_iterate: beta.iter().copied().collect(),
                });
            }
            return Ok(beta.iter().copied().collect());
        }
        let w = prob.map(|q| q * (1.0 - q));
        let mut hessian = DMatrix::zeros(p, p);
        for i in 0..n {
            let row = design.row(i);
            hessian += w[i] * row.transpose() * row;
        }
        let step = match hessian.clone().cholesky() {
            Some(ch) => ch.solve(&grad),
            None => {
                let norm = beta.norm();
                return Err(Error::Separation {
                    norm,
                    last_iterate: beta.iter().copied().collect(),
                });
            }
        };
        let mut t = 1.0;
        let mut candidate = &beta + &step * t;
        let mut value = log_lik(&candidate);
        while value < current && t > 1e-10 {
            t *= 0.5;
            candidate = &beta + &step * t;
            value = log_lik(&candidate);
        }
        let previous = current;
        beta = candidate;
        current = value;
        let norm = beta.norm();
        if norm > SEPARATION_NORM {
            return Err(Error::Separation {
                norm,
                last_iterate: beta.iter().copied().collect(),
            });
        }
        if (current - previous).abs() <= RELATIVE_LOG_LIK_TOL * (current.abs() + 0.1) {
            if current > SEPARATION_LOG_LIK {
                return Err(Error::Separation {
                    norm,
                    last_iterate: beta.iter().copied().collect(),
                });
            }
            return Ok(beta.iter().copied().collect());
        }
    }
    Err(Error::Convergence {
        iterations: MAX_ITERATIONS,
        gradient_norm: grad_norm,
        last_iterate: beta.iter().copied().collect(),
    })
}

/// `(z - e(x)) * y / (e(x) * (1 - e(x)))` with the clipped propensity; its
/// conditional mean given `x` is the treatment effect under unconfoundedness.
pub fn transform_outcome(y: f64, z: bool, x: &[f64], prop: &PropensityModel) -> f64 {
    let e = prop.probability(x);
    let zf = if z { 1.0 } else { 0.0 };
    (zf - e) * y / (e * (1.0 - e))
}
