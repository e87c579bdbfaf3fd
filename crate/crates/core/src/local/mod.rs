//! Per-site CATE learners.
//!
//! A site regresses the transformed outcome on its covariates with an honest
//! pruned tree (causal tree) or an honest subsampled forest (causal forest).
//! The fitted function is the only thing the site ever shares.

mod propensity;

pub use propensity::{
    expit, fit_propensity, transform_outcome, PropensityForm, PropensityKind, PropensityModel, DEFAULT_CLIP,
};

use crate::dataset::SiteDataset;
use crate::error::{Error, Result};
use crate::rng::SeedSpec;
use crate::tree::{fit_forest, fit_tree, FeatureSchema, FitParams, ForestModel, TreeData, TreeModel};
use crate::CateEstimator;

/// Known treatment effect function, used by oracle learners.
#[derive(Debug, Clone, PartialEq)]
pub enum OracleTau {
    /// `intercept + slopes . x`
    Affine { intercept: f64, slopes: Vec<f64> },
    /// `1{x1 > 0} x1 + (x1 - 3) h` with `h = c u`, or `h = u^c` when
    /// `nonlinear`.
    Benchmark { c: f64, u: f64, nonlinear: bool },
}

impl OracleTau {
    pub fn constant(v: f64) -> Self {
        OracleTau::Affine {
            intercept: v,
            slopes: Vec::new(),
        }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            OracleTau::Affine { intercept, slopes } => {
                intercept + slopes.iter().zip(x).map(|(b, v)| b * v).sum::<f64>()
            }
            OracleTau::Benchmark { c, u, nonlinear } => {
                let x1 = x[0];
                let local = if x1 > 0.0 { x1 } else { 0.0 };
                let global = if *nonlinear { u.powf(*c) } else { c * u };
                local + (x1 - 3.0) * global
            }
        }
    }
}

/// Learner choice with its hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub enum LocalLearner {
    CausalTree(FitParams),
    CausalForest { params: FitParams, trees: usize },
    Oracle(OracleTau),
}

impl LocalLearner {
    /// Honest tree pruned by cross-validation.
    pub fn causal_tree() -> Self {
        LocalLearner::CausalTree(FitParams {
            honest: true,
            ..FitParams::single_tree()
        })
    }

    pub fn causal_forest(trees: usize) -> Self {
        LocalLearner::CausalForest {
            params: FitParams::forest(),
            trees,
        }
    }

    pub fn kind(&self) -> LearnerKind {
        match self {
            LocalLearner::CausalTree(_) => LearnerKind::CausalTree,
            LocalLearner::CausalForest { .. } => LearnerKind::CausalForest,
            LocalLearner::Oracle(_) => LearnerKind::Oracle,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LearnerKind {
    CausalTree,
    CausalForest,
    Oracle,
}

impl LearnerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LearnerKind::CausalTree => "causal_tree",
            LearnerKind::CausalForest => "causal_forest",
            LearnerKind::Oracle => "oracle",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "causal_tree" => Some(LearnerKind::CausalTree),
            "causal_forest" => Some(LearnerKind::CausalForest),
            "oracle" => Some(LearnerKind::Oracle),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LocalFit {
    Tree(TreeModel),
    Forest(ForestModel),
    Oracle(OracleTau),
}

/// A site's fitted CATE function.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalModel {
    pub site_id: u32,
    pub dim: usize,
    /// Training rows behind the model.
    pub n_k: usize,
    pub fit: LocalFit,
    pub propensity: Option<PropensityModel>,
}

impl LocalModel {
    pub fn kind(&self) -> LearnerKind {
        match self.fit {
            LocalFit::Tree(_) => LearnerKind::CausalTree,
            LocalFit::Forest(_) => LearnerKind::CausalForest,
            LocalFit::Oracle(_) => LearnerKind::Oracle,
        }
    }

    /// Wraps a known effect function.
    pub fn oracle(site_id: u32, dim: usize, n_k: usize, tau: OracleTau) -> Self {
        Self {
            site_id,
            dim,
            n_k: n_k.max(1),
            fit: LocalFit::Oracle(tau),
            propensity: None,
        }
    }

    pub fn predict_tau(&self, x: &[f64]) -> Result<f64> {
        match &self.fit {
            LocalFit::Tree(t) => t.predict(x),
            LocalFit::Forest(f) => f.predict(x),
            LocalFit::Oracle(tau) => {
                FeatureSchema::numeric(self.dim).check(x)?;
                Ok(tau.eval(x))
            }
        }
    }
}

impl CateEstimator for LocalModel {
    fn estimate(&self, x: &[f64]) -> Result<f64> {
        self.predict_tau(x)
    }
}

/// Transformed-outcome regression rows for a site.
pub fn transformed_rows(data: &SiteDataset, prop: &PropensityModel) -> Result<TreeData> {
    if let Some(j) = prop.max_covariate() {
        if j >= data.dim() {
            return Err(Error::Validation(format!(
                "propensity reads covariate {j} but the site has dimension {}",
                data.dim()
            )));
        }
    }
    let mut x = Vec::with_capacity(data.len() * data.dim());
    let mut target = Vec::with_capacity(data.len());
    for (y, z, row) in data.rows() {
        x.extend_from_slice(row);
        target.push(transform_outcome(y, z, row, prop));
    }
    TreeData::unweighted(x, data.dim(), target)
}

/// Fits a site's CATE model from that site's rows only.
pub fn fit_local(
    data: &SiteDataset,
    learner: &LocalLearner,
    prop: &PropensityModel,
    seed: SeedSpec,
) -> Result<LocalModel> {
    let treated = data.treated_count();
    if treated == 0 || treated == data.len() {
        return Err(Error::Positivity(format!(
            "site {} lacks one treatment arm",
            data.site_id()
        )));
    }
    let schema = FeatureSchema::numeric(data.dim());
    let fit = match learner {
        LocalLearner::CausalTree(params) => {
            let rows = transformed_rows(data, prop)?;
            LocalFit::Tree(fit_tree(&rows, &schema, params, seed)?)
        }
        LocalLearner::CausalForest { params, trees } => {
            let rows = transformed_rows(data, prop)?;
            LocalFit::Forest(fit_forest(&rows, &schema, params, seed, *trees, None)?)
        }
        LocalLearner::Oracle(tau) => LocalFit::Oracle(tau.clone()),
    };
    Ok(LocalModel {
        site_id: data.site_id(),
        dim: data.dim(),
        n_k: data.len(),
        fit,
        propensity: match learner {
            LocalLearner::Oracle(_) => None,
            _ => Some(prop.clone()),
        },
    })
}

/// Per-site sample-size multipliers `K n_k / sum_j n_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteWeights {
    eta: Vec<f64>,
}

impl SiteWeights {
    pub fn as_slice(&self) -> &[f64] {
        &self.eta
    }

    pub fn len(&self) -> usize {
        self.eta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eta.is_empty()
    }

    /// Multiplier for the site at position `k` (0-based).
    pub fn get(&self, k: usize) -> f64 {
        self.eta[k]
    }
}

pub fn site_size_weights(sizes: &[usize]) -> Result<SiteWeights> {
    if sizes.is_empty() || sizes.contains(&0) {
        return Err(Error::Validation("site sizes must be positive".into()));
    }
    let k = sizes.len() as f64;
    let total: f64 = sizes.iter().map(|&n| n as f64).sum();
    Ok(SiteWeights {
        eta: sizes.iter().map(|&n| k * n as f64 / total).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_passthrough() {
        let m = LocalModel::oracle(
            1,
            3,
            10,
            OracleTau::Affine {
                intercept: 0.0,
                slopes: vec![1.0, 0.0, 0.0],
            },
        );
        assert_eq!(m.predict_tau(&[2.0, 5.0, -1.0]).unwrap(), 2.0);
        let zero = LocalModel::oracle(1, 2, 10, OracleTau::constant(0.0));
        assert_eq!(zero.predict_tau(&[3.0, 4.0]).unwrap(), 0.0);
        assert!(matches!(zero.predict_tau(&[1.0]), Err(Error::Schema(_))));
    }

    #[test]
    fn benchmark_formula() {
        let t = OracleTau::Benchmark {
            c: 0.0,
            u: 1.0,
            nonlinear: false,
        };
        assert_eq!(t.eval(&[2.0]), 2.0);
        assert_eq!(t.eval(&[-1.0]), 0.0);
        let t = OracleTau::Benchmark {
            c: 2.0,
            u: 1.0,
            nonlinear: false,
        };
        assert_eq!(t.eval(&[2.0]), 0.0);
        let t = OracleTau::Benchmark {
            c: 2.0,
            u: 3.0,
            nonlinear: true,
        };
        assert_eq!(t.eval(&[1.0]), 1.0 - 18.0);
    }

    #[test]
    fn site_weight_formula() {
        assert_eq!(site_size_weights(&[7, 7, 7]).unwrap().as_slice(), &[1.0, 1.0, 1.0]);
        assert_eq!(site_size_weights(&[300, 100]).unwrap().as_slice(), &[1.5, 0.5]);
        assert!(site_size_weights(&[3, 0]).is_err());
    }
}
