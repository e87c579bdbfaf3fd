use std::path::Path;

use serde::Deserialize;

use crate::ensemble::EfSampling;
use crate::error::{Error, Result};
use crate::local::{LocalLearner, PropensityKind};
use crate::tree::{default_complexity_grid, FeaturesTried, FitParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    Discrete,
    Continuous,
    NonlinearContinuous,
}

impl Grouping {
    pub fn name(&self) -> &'static str {
        match self {
            Grouping::Discrete => "discrete",
            Grouping::Continuous => "continuous",
            Grouping::NonlinearContinuous => "nonlinear_continuous",
        }
    }
}

/// How treatment is assigned in the simulated sites.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PropensityDesign {
    Rct,
    Observational,
}

/// Propensity model the analyst fits at each site.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PropensityChoice {
    Constant,
    /// Logistic on `x1` only.
    LogisticCorrect,
    /// Logistic on every covariate.
    LogisticMisspecified,
}

impl PropensityChoice {
    pub fn kind_and_covariates(&self, dim: usize) -> (PropensityKind, Vec<usize>) {
        match self {
            PropensityChoice::Constant => (PropensityKind::Constant, Vec::new()),
            PropensityChoice::LogisticCorrect => (PropensityKind::Logistic, vec![0]),
            PropensityChoice::LogisticMisspecified => (PropensityKind::Logistic, (0..dim).collect()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LearnerChoice {
    CausalTree,
    CausalForest,
    Oracle,
}

/// One simulation cell.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulationConfig {
    /// Number of sites.
    pub k: usize,
    /// Per-site sizes; a single entry applies to every site.
    pub n_k: Vec<usize>,
    pub dim: usize,
    pub c: f64,
    pub grouping: Grouping,
    pub propensity: PropensityDesign,
    pub propensity_model: PropensityChoice,
    pub local_learner: LearnerChoice,
    pub n_te: usize,
    pub replicates: usize,
    /// Trees per ensemble forest.
    pub b: usize,
    pub seed: u64,
    /// Share of site 1 used to train its local model.
    pub split_fraction: f64,
    /// Weight augmented rows by relative site size.
    pub site_weights: bool,
    pub ct_min_leaf: usize,
    pub ct_max_depth: Option<usize>,
    pub ct_prune: bool,
    pub ct_honest: bool,
    pub cf_trees: usize,
    pub ef_min_leaf: usize,
    pub ef_sampling: EfSampling,
    /// Features tried per EF split; `None` means `ceil(sqrt(D + 1))`.
    pub ef_features_tried: Option<usize>,
    /// Share of subjects (or rows) drawn per EF tree.
    pub ef_subsample_fraction: f64,
    /// Smallest relative complexity penalty the ET may select.
    pub et_complexity_floor: f64,
    pub et_min_leaf: usize,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            k: 20,
            n_k: vec![500],
            dim: 5,
            c: 0.0,
            grouping: Grouping::Discrete,
            propensity: PropensityDesign::Rct,
            propensity_model: PropensityChoice::Constant,
            local_learner: LearnerChoice::CausalTree,
            n_te: 2000,
            replicates: 100,
            b: 500,
            seed: 1,
            split_fraction: 0.5,
            site_weights: false,
            ct_min_leaf: 5,
            ct_max_depth: None,
            ct_prune: true,
            ct_honest: true,
            cf_trees: 200,
            ef_min_leaf: 5,
            ef_sampling: EfSampling::Subject,
            ef_features_tried: None,
            ef_subsample_fraction: 0.5,
            et_complexity_floor: 1e-5,
            et_min_leaf: 5,
        }
    }
}

impl SimulationConfig {
    pub fn site_size(&self, k: usize) -> usize {
        if self.n_k.len() == 1 {
            self.n_k[0]
        } else {
            self.n_k[k - 1]
        }
    }

    /// Size of site 1, used as the `n` column of the outputs.
    pub fn n1(&self) -> usize {
        self.site_size(1)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.k < 2 {
            return fail(format!("K must be at least 2, got {}", self.k));
        }
        if !(self.c.is_finite() && self.c >= 0.0) {
            return fail(format!("c must be a nonnegative number, got {}", self.c));
        }
        if self.n_k.is_empty() || (self.n_k.len() != 1 && self.n_k.len() != self.k) {
            return fail(format!("n_k must hold one size or K = {} sizes", self.k));
        }
        if let Some(n) = self.n_k.iter().find(|&&n| n < 20) {
            return fail(format!("site sizes must be at least 20, got {n}"));
        }
        if self.grouping == Grouping::Discrete && self.k % 2 != 0 {
            return fail(format!("discrete grouping needs an even K, got {}", self.k));
        }
        if self.dim < 4 {
            return fail(format!(
                "the outcome model reads four covariates; D = {} is too small",
                self.dim
            ));
        }
        if self.n_te == 0 || self.replicates == 0 || self.b == 0 || self.cf_trees == 0 {
            return fail("n_te, replicates, B and cf_trees must be positive".into());
        }
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return fail(format!("split_fraction must lie in (0,1), got {}", self.split_fraction));
        }
        if self.ef_features_tried.is_some_and(|n| n == 0 || n > self.dim + 1) {
            return fail(format!("ef_features_tried must lie in 1..={}", self.dim + 1));
        }
        if !(self.ef_subsample_fraction > 0.0 && self.ef_subsample_fraction <= 1.0) {
            return fail(format!(
                "ef_subsample_fraction must lie in (0,1], got {}",
                self.ef_subsample_fraction
            ));
        }
        if !(self.et_complexity_floor > 0.0 && self.et_complexity_floor.is_finite()) {
            return fail(format!(
                "et_complexity_floor must be positive, got {}",
                self.et_complexity_floor
            ));
        }
        if self.ct_min_leaf == 0 || self.ef_min_leaf == 0 || self.et_min_leaf == 0 {
            return fail("leaf sizes must be positive".into());
        }
        Ok(())
    }

    /// Parameters of the causal tree used by local fits and LOC.
    pub fn ct_params(&self) -> FitParams {
        FitParams {
            min_leaf: self.ct_min_leaf,
            max_depth: self.ct_max_depth,
            prune: self.ct_prune,
            honest: self.ct_honest,
            ..FitParams::single_tree()
        }
    }

    pub fn et_params(&self) -> FitParams {
        let grid: Vec<f64> = default_complexity_grid()
            .into_iter()
            .filter(|&a| a >= self.et_complexity_floor * (1.0 - 1e-9))
            .collect();
        FitParams {
            min_leaf: self.et_min_leaf,
            complexity_grid: if grid.is_empty() {
                vec![self.et_complexity_floor]
            } else {
                grid
            },
            ..FitParams::single_tree()
        }
    }

    pub fn ef_params(&self) -> FitParams {
        FitParams {
            min_leaf: self.ef_min_leaf,
            features_tried: self.ef_features_tried.map_or(FeaturesTried::Sqrt, FeaturesTried::Count),
            subsample_fraction: self.ef_subsample_fraction,
            ..FitParams::forest()
        }
    }

    /// Learner for the fitted local models. With the oracle choice the
    /// target-site fits (LOC and the reference) use the causal tree.
    pub fn fitted_learner(&self) -> LocalLearner {
        match self.local_learner {
            LearnerChoice::CausalForest => LocalLearner::CausalForest {
                params: FitParams {
                    min_leaf: self.ct_min_leaf,
                    ..FitParams::forest()
                },
                trees: self.cf_trees,
            },
            LearnerChoice::CausalTree | LearnerChoice::Oracle => LocalLearner::CausalTree(self.ct_params()),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum OneOrMany<T> {
    One(T),
    Many(Vec<T>),
}

impl<T> OneOrMany<T> {
    fn into_vec(self) -> Vec<T> {
        match self {
            OneOrMany::One(v) => vec![v],
            OneOrMany::Many(v) => v,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    #[serde(rename = "K")]
    k: Option<usize>,
    n_k: Option<OneOrMany<usize>>,
    #[serde(rename = "D")]
    dim: Option<usize>,
    c: Option<OneOrMany<f64>>,
    grouping: Option<Grouping>,
    propensity: Option<PropensityDesign>,
    propensity_model: Option<PropensityChoice>,
    local_learner: Option<LearnerChoice>,
    n_te: Option<usize>,
    replicates: Option<usize>,
    #[serde(rename = "B")]
    b: Option<usize>,
    seed: Option<u64>,
    split_fraction: Option<f64>,
    site_weights: Option<bool>,
    ct_min_leaf: Option<usize>,
    ct_max_depth: Option<usize>,
    ct_prune: Option<bool>,
    ct_honest: Option<bool>,
    cf_trees: Option<usize>,
    ef_min_leaf: Option<usize>,
    ef_sampling: Option<SamplingName>,
    ef_features_tried: Option<usize>,
    ef_subsample_fraction: Option<f64>,
    et_complexity_floor: Option<f64>,
    et_min_leaf: Option<usize>,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(rename_all = "snake_case")]
enum SamplingName {
    Subject,
    Row,
}

/// Parses a TOML configuration. `c` may be a list, in which case one cell is
/// returned per value in the given order.
pub fn parse_configs(text: &str) -> Result<Vec<SimulationConfig>> {
    let f: ConfigFile = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    let d = SimulationConfig::default();
    let base = SimulationConfig {
        k: f.k.unwrap_or(d.k),
        n_k: f.n_k.map_or(d.n_k, OneOrMany::into_vec),
        dim: f.dim.unwrap_or(d.dim),
        c: d.c,
        grouping: f.grouping.unwrap_or(d.grouping),
        propensity: f.propensity.unwrap_or(d.propensity),
        propensity_model: f.propensity_model.unwrap_or(d.propensity_model),
        local_learner: f.local_learner.unwrap_or(d.local_learner),
        n_te: f.n_te.unwrap_or(d.n_te),
        replicates: f.replicates.unwrap_or(d.replicates),
        b: f.b.unwrap_or(d.b),
        seed: f.seed.unwrap_or(d.seed),
        split_fraction: f.split_fraction.unwrap_or(d.split_fraction),
        site_weights: f.site_weights.unwrap_or(d.site_weights),
        ct_min_leaf: f.ct_min_leaf.unwrap_or(d.ct_min_leaf),
        ct_max_depth: f.ct_max_depth.or(d.ct_max_depth),
        ct_prune: f.ct_prune.unwrap_or(d.ct_prune),
        ct_honest: f.ct_honest.unwrap_or(d.ct_honest),
        cf_trees: f.cf_trees.unwrap_or(d.cf_trees),
        ef_min_leaf: f.ef_min_leaf.unwrap_or(d.ef_min_leaf),
        ef_sampling: match f.ef_sampling {
            Some(SamplingName::Subject) => EfSampling::Subject,
            Some(SamplingName::Row) => EfSampling::Row,
            None => d.ef_sampling,
        },
        ef_features_tried: f.ef_features_tried.or(d.ef_features_tried),
        ef_subsample_fraction: f.ef_subsample_fraction.unwrap_or(d.ef_subsample_fraction),
        et_complexity_floor: f.et_complexity_floor.unwrap_or(d.et_complexity_floor),
        et_min_leaf: f.et_min_leaf.unwrap_or(d.et_min_leaf),
    };
    let cs = f.c.map_or(vec![d.c], OneOrMany::into_vec);
    if cs.is_empty() {
        return Err(Error::Config("c list is empty".into()));
    }
    cs.into_iter()
        .map(|c| {
            let cfg = SimulationConfig { c, ..base.clone() };
            cfg.validate()?;
            Ok(cfg)
        })
        .collect()
}

pub fn load_configs(path: impl AsRef<Path>) -> Result<Vec<SimulationConfig>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_configs(&text)
}
