//! Ensemble stage at the target site.
//!
//! Every local model is evaluated on the target's estimation subjects. The
//! resulting table has one row per (subject, site) pair with the covariates,
//! the site as a categorical level and the predicted effect as target. A
//! pruned tree (ET) or an honest subject-subsampled forest (EF) fitted on it
//! gives `T(x, s)`; the model-averaged estimate is `T(x, 1)`.
//!
//! Level 1 always denotes the target site. Because every leaf value is a
//! weighted mean of table rows, `T(x, 1)` is a kernel average
//! `sum_{i,k} lambda_{i,k}(x) value_{i,k}`, and summing the kernel over the
//! subjects of site `k` gives that site's averaging weight.

use crate::dataset::SiteDataset;
use crate::error::{Error, Result};
use crate::exchange::digest64;
use crate::local::{LocalModel, SiteWeights};
use crate::rng::SeedSpec;
use crate::tree::{
    fit_forest, fit_tree_grouped, FeatureKind, FeatureSchema, FitParams, Node, Subsample, TreeData, TreeModel,
};
use crate::CateEstimator;

/// One (subject, site) row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentedRow {
    /// Position of the subject in the estimation set.
    pub subject: u32,
    /// Site level in `1..=K`.
    pub site: u32,
    /// `tau_hat_site(x_subject)`.
    pub value: f64,
    pub weight: f64,
}

/// Estimation subjects crossed with all local-model predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedTable {
    dim: usize,
    site_ids: Vec<u32>,
    // subject covariates, row-major
    subject_x: Vec<f64>,
    rows: Vec<AugmentedRow>,
    site_weighted: bool,
    fingerprint: u64,
}

impl AugmentedTable {
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of sites `K`.
    pub fn n_sites(&self) -> usize {
        self.site_ids.len()
    }

    /// Site ids by level; `site_ids()[0]` is the target.
    pub fn site_ids(&self) -> &[u32] {
        &self.site_ids
    }

    pub fn n_subjects(&self) -> usize {
        self.subject_x.len() / self.dim
    }

    pub fn subject_x(&self, subject: usize) -> &[f64] {
        &self.subject_x[subject * self.dim..(subject + 1) * self.dim]
    }

    /// Subject-major, site-minor.
    pub fn rows(&self) -> &[AugmentedRow] {
        &self.rows
    }

    pub fn site_weighted(&self) -> bool {
        self.site_weighted
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    /// Covariates plus the site level as a trailing categorical feature.
    pub fn schema(&self) -> FeatureSchema {
        let mut kinds = vec![FeatureKind::Numeric; self.dim];
        kinds.push(FeatureKind::Categorical {
            levels: self.n_sites().max(2) as u32,
        });
        FeatureSchema::new(kinds).expect("levels >= 2")
    }

    pub fn tree_data(&self) -> Result<TreeData> {
        let p = self.dim + 1;
        let mut x = Vec::with_capacity(self.rows.len() * p);
        for r in &self.rows {
            x.extend_from_slice(self.subject_x(r.subject as usize));
            x.push(f64::from(r.site));
        }
        TreeData::new(
            x,
            p,
            self.rows.iter().map(|r| r.value).collect(),
            self.rows.iter().map(|r| r.weight).collect(),
        )
    }

    pub fn subject_groups(&self) -> Vec<u32> {
        self.rows.iter().map(|r| r.subject).collect()
    }
}

/// Builds the augmented table.
///
/// `models[0]` must be the target site's model (trained on its training split
/// only); the others follow in any fixed order and receive levels `2..=K`.
/// `site_weights`, when given, are indexed like `models`.
pub fn build_augmented(
    estimation: &SiteDataset,
    models: &[LocalModel],
    site_weights: Option<&SiteWeights>,
) -> Result<AugmentedTable> {
    let Some(first) = models.first() else {
        return Err(Error::Validation("at least one local model is required".into()));
    };
    if first.site_id != estimation.site_id() {
        return Err(Error::Validation(format!(
            "first model belongs to site {} but the estimation rows come from site {}",
            first.site_id,
            estimation.site_id()
        )));
    }
    let mut ids: Vec<u32> = models.iter().map(|m| m.site_id).collect();
    ids.sort_unstable();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Validation("duplicate site ids among local models".into()));
    }
    let dim = estimation.dim();
    if let Some(m) = models.iter().find(|m| m.dim != dim) {
        return Err(Error::Schema(format!(
            "model of site {} expects dimension {} but the target has {dim}",
            m.site_id, m.dim
        )));
    }
    if let Some(w) = site_weights {
        if w.len() != models.len() {
            return Err(Error::Validation(format!(
                "{} site weights for {} models",
                w.len(),
                models.len()
            )));
        }
    }

    let k = models.len();
    let n = estimation.len();
    let mut subject_x = Vec::with_capacity(n * dim);
    let mut rows = Vec::with_capacity(n * k);
    for i in 0..n {
        let x = estimation.x(i);
        subject_x.extend_from_slice(x);
        for (j, m) in models.iter().enumerate() {
            let value = m.predict_tau(x)?;
            if !value.is_finite() {
                return Err(Error::Validation(format!(
                    "non-finite prediction for subject {i} from site level {}",
                    j + 1
                )));
            }
            rows.push(AugmentedRow {
                subject: i as u32,
                site: (j + 1) as u32,
                value,
                weight: site_weights.map_or(1.0, |w| w.get(j)),
            });
        }
    }
    let site_ids: Vec<u32> = models.iter().map(|m| m.site_id).collect();
    let fingerprint = table_fingerprint(dim, &site_ids, &subject_x, &rows);
    Ok(AugmentedTable {
        dim,
        site_ids,
        subject_x,
        rows,
        site_weighted: site_weights.is_some(),
        fingerprint,
    })
}

fn table_fingerprint(dim: usize, site_ids: &[u32], subject_x: &[f64], rows: &[AugmentedRow]) -> u64 {
    let mut bytes = Vec::with_capacity(16 + subject_x.len() * 8 + rows.len() * 24);
    bytes.extend_from_slice(&(dim as u64).to_le_bytes());
    for id in site_ids {
        bytes.extend_from_slice(&id.to_le_bytes());
    }
    for v in subject_x {
        bytes.extend_from_slice(&v.to_bits().to_le_bytes());
    }
    for r in rows {
        bytes.extend_from_slice(&r.subject.to_le_bytes());
        bytes.extend_from_slice(&r.site.to_le_bytes());
        bytes.extend_from_slice(&r.value.to_bits().to_le_bytes());
        bytes.extend_from_slice(&r.weight.to_bits().to_le_bytes());
    }
    digest64(&bytes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnsembleKind {
    Tree,
    Forest,
}

/// How EF trees draw their subsample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EfSampling {
    /// Distinct subjects, one random site row each.
    #[default]
    Subject,
    /// Plain rows without replacement.
    Row,
}

/// Fitted ET or EF.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleModel {
    kind: EnsembleKind,
    trees: Vec<TreeModel>,
    subsamples: Vec<Subsample>,
    // [tree][node] -> per-level weight mass of the rows behind a leaf value;
    // empty for internal nodes
    site_mass: Vec<Vec<Vec<f64>>>,
    dim: usize,
    site_ids: Vec<u32>,
    n_subjects: usize,
    site_weighted: bool,
    level_weights: Vec<f64>,
    table_fingerprint: u64,
}

/// Site weights of the model-averaged estimate at one query point.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightProfile {
    /// `omega[k]` is the weight of the site at level `k + 1`.
    pub omega: Vec<f64>,
    pub x: Vec<f64>,
    /// Kernel weight of each table row with nonzero weight, sorted by row;
    /// absent for models rebuilt from an exchanged payload.
    pub kernel: Option<Vec<(u32, f64)>>,
    pub table_fingerprint: u64,
}

impl WeightProfile {
    pub fn sum(&self) -> f64 {
        self.omega.iter().sum()
    }
}

/// Single tree on the table, pruned by cross-validation with folds that keep
/// each subject's rows together.
pub fn fit_et(table: &AugmentedTable, params: &FitParams, seed: SeedSpec) -> Result<EnsembleModel> {
    let data = table.tree_data()?;
    let groups = table.subject_groups();
    let tree = fit_tree_grouped(&data, &table.schema(), params, seed, Some(&groups))?;
    EnsembleModel::from_fitted(EnsembleKind::Tree, vec![tree], Vec::new(), table)
}

/// Honest subsampled forest in subject mode.
pub fn fit_ef(table: &AugmentedTable, params: &FitParams, b: usize, seed: SeedSpec) -> Result<EnsembleModel> {
    fit_ef_with(table, params, b, seed, EfSampling::Subject)
}

pub fn fit_ef_with(
    table: &AugmentedTable,
    params: &FitParams,
    b: usize,
    seed: SeedSpec,
    sampling: EfSampling,
) -> Result<EnsembleModel> {
    let data = table.tree_data()?;
    let groups = table.subject_groups();
    let groups = match sampling {
        EfSampling::Subject => Some(groups.as_slice()),
        EfSampling::Row => None,
    };
    let forest = fit_forest(&data, &table.schema(), params, seed, b, groups)?;
    let subsamples = forest.subsamples().to_vec();
    EnsembleModel::from_fitted(EnsembleKind::Forest, forest.trees().to_vec(), subsamples, table)
}

/// Default EF parameters: honest, unpruned, `ceil(sqrt(D + 1))` features per split.
pub fn default_ef_params() -> FitParams {
    FitParams::forest()
}

/// Default ET parameters: pruned by 10-fold cross-validation, not honest.
pub fn default_et_params() -> FitParams {
    FitParams::single_tree()
}

impl EnsembleModel {
    fn from_fitted(
        kind: EnsembleKind,
        trees: Vec<TreeModel>,
        subsamples: Vec<Subsample>,
        table: &AugmentedTable,
    ) -> Result<Self> {
        let k = table.n_sites();
        let mut site_mass = Vec::with_capacity(trees.len());
        for tree in &trees {
            let mut per_node = vec![Vec::new(); tree.nodes().len()];
            for (id, node) in tree.nodes().iter().enumerate() {
                if let Node::Leaf { .. } = node {
                    let mut mass = vec![0.0; k];
                    for &r in tree.cohort_of(id)? {
                        let row = &table.rows()[r as usize];
                        mass[(row.site - 1) as usize] += row.weight;
                    }
                    per_node[id] = mass;
                }
            }
            site_mass.push(per_node);
        }
        Ok(Self {
            kind,
            trees,
            subsamples,
            site_mass,
            dim: table.dim(),
            site_ids: table.site_ids().to_vec(),
            n_subjects: table.n_subjects(),
            site_weighted: table.site_weighted(),
            level_weights: table.rows()[..k].iter().map(|r| r.weight).collect(),
            table_fingerprint: table.fingerprint(),
        })
    }

    /// Rebuilds a model from exchanged parts.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        kind: EnsembleKind,
        trees: Vec<TreeModel>,
        site_mass: Vec<Vec<Vec<f64>>>,
        dim: usize,
        site_ids: Vec<u32>,
        n_subjects: usize,
        level_weights: Option<Vec<f64>>,
        table_fingerprint: u64,
    ) -> Result<Self> {
        if trees.is_empty() || (kind == EnsembleKind::Tree && trees.len() != 1) {
            return Err(Error::Format("ensemble tree count does not match its kind".into()));
        }
        let k = site_ids.len();
        let expected = {
            let mut kinds = vec![FeatureKind::Numeric; dim];
            kinds.push(FeatureKind::Categorical {
                levels: k.max(2) as u32,
            });
            FeatureSchema::new(kinds)?
        };
        if site_mass.len() != trees.len() {
            return Err(Error::Format("site mass missing for some trees".into()));
        }
        for (t, (tree, mass)) in trees.iter().zip(&site_mass).enumerate() {
            if tree.schema() != &expected {
                return Err(Error::Format(format!(
                    "tree {t} schema does not match the ensemble header"
                )));
            }
            if mass.len() != tree.nodes().len() {
                return Err(Error::Format(format!("tree {t} site mass does not cover its nodes")));
            }
            for (id, node) in tree.nodes().iter().enumerate() {
                let ok = match node {
                    Node::Leaf { .. } => {
                        mass[id].len() == k
                            && mass[id].iter().all(|m| m.is_finite() && *m >= 0.0)
                            && mass[id].iter().sum::<f64>() > 0.0
                    }
                    Node::Internal { .. } => mass[id].is_empty(),
                };
                if !ok {
                    return Err(Error::Format(format!("tree {t} node {id} has an invalid site mass")));
                }
            }
        }
        let site_weighted = level_weights.is_some();
        let level_weights = level_weights.unwrap_or_else(|| vec![1.0; k]);
        if level_weights.len() != k || level_weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::Format("site weights must be positive, one per site".into()));
        }
        Ok(Self {
            kind,
            trees,
            subsamples: Vec::new(),
            site_mass,
            dim,
            site_ids,
            n_subjects,
            site_weighted,
            level_weights,
            table_fingerprint,
        })
    }

    pub fn kind(&self) -> EnsembleKind {
        self.kind
    }

    pub fn trees(&self) -> &[TreeModel] {
        &self.trees
    }

    pub fn n_trees(&self) -> usize {
        self.trees.len()
    }

    pub fn subsamples(&self) -> &[Subsample] {
        &self.subsamples
    }

    pub fn site_mass(&self) -> &[Vec<Vec<f64>>] {
        &self.site_mass
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_sites(&self) -> usize {
        self.site_ids.len()
    }

    pub fn site_ids(&self) -> &[u32] {
        &self.site_ids
    }

    pub fn n_subjects(&self) -> usize {
        self.n_subjects
    }

    pub fn site_weighted(&self) -> bool {
        self.site_weighted
    }

    /// Row weight per site level.
    pub fn level_weights(&self) -> &[f64] {
        &self.level_weights
    }

    pub fn table_fingerprint(&self) -> u64 {
        self.table_fingerprint
    }

    fn augmented_query(&self, x: &[f64], site: u32) -> Result<Vec<f64>> {
        if x.len() != self.dim {
            return Err(Error::Schema(format!(
                "expected {} covariates, got {}",
                self.dim,
                x.len()
            )));
        }
        let mut q = Vec::with_capacity(self.dim + 1);
        q.extend_from_slice(x);
        q.push(f64::from(site));
        self.trees[0].schema().check(&q)?;
        Ok(q)
    }

    /// `T(x, site)`: mean over trees of the leaf averages, in tree order.
    pub fn predict_at(&self, x: &[f64], site: u32) -> Result<f64> {
        let q = self.augmented_query(x, site)?;
        let mut sum = 0.0;
        for t in &self.trees {
            sum += t.predict_unchecked(&q);
        }
        Ok(sum / self.trees.len() as f64)
    }

    /// Model-averaged estimate for the target site, `T(x, 1)`.
    pub fn predict_star(&self, x: &[f64]) -> Result<f64> {
        self.predict_at(x, 1)
    }

    /// Per-site averaging weights at `x`.
    pub fn weights(&self, x: &[f64]) -> Result<WeightProfile> {
        let q = self.augmented_query(x, 1)?;
        let k = self.n_sites();
        let b = self.trees.len() as f64;
        let with_kernel = self.trees.iter().all(TreeModel::has_cohorts);
        let mut omega = vec![0.0; k];
        let mut lambda: Vec<(u32, f64)> = Vec::new();
        for (tree, mass) in self.trees.iter().zip(&self.site_mass) {
            let leaf = tree.leaf_index_unchecked(&q);
            let m = &mass[leaf];
            let total: f64 = m.iter().sum();
            for (o, v) in omega.iter_mut().zip(m) {
                *o += v / total;
            }
            if with_kernel {
                let Node::Leaf { weight, .. } = tree.nodes()[leaf] else {
                    unreachable!()
                };
                for &r in tree.cohort_of(leaf)? {
                    lambda.push((r, self.row_weight(r) / weight / b));
                }
            }
        }
        for o in &mut omega {
            *o /= b;
        }
        let kernel = with_kernel.then(|| {
            lambda.sort_by_key(|&(r, _)| r);
            let mut merged: Vec<(u32, f64)> = Vec::with_capacity(lambda.len());
            for (r, l) in lambda {
                match merged.last_mut() {
                    Some((last, acc)) if *last == r => *acc += l,
                    _ => merged.push((r, l)),
                }
            }
            merged
        });
        Ok(WeightProfile {
            omega,
            x: x.to_vec(),
            kernel,
            table_fingerprint: self.table_fingerprint,
        })
    }

    // rows are subject-major, so the level of row r is r mod K
    fn row_weight(&self, row: u32) -> f64 {
        self.level_weights[row as usize % self.level_weights.len()]
    }

    /// `sum_k omega_k(x) tau_hat_k(x)`: local models evaluated at the query
    /// point itself. Differs from [`predict_star`](Self::predict_star), which
    /// averages predictions at the leaf-mates' covariates.
    pub fn display_form(&self, x: &[f64], models: &[LocalModel]) -> Result<f64> {
        if models.len() != self.n_sites() {
            return Err(Error::Consistency(format!(
                "{} models for an ensemble over {} sites",
                models.len(),
                self.n_sites()
            )));
        }
        let profile = self.weights(x)?;
        let mut sum = 0.0;
        for (w, m) in profile.omega.iter().zip(models) {
            sum += w * m.predict_tau(x)?;
        }
        Ok(sum)
    }
}

impl CateEstimator for EnsembleModel {
    fn estimate(&self, x: &[f64]) -> Result<f64> {
        self.predict_star(x)
    }
}

/// `sum_{i,k} lambda_{i,k}(x, 1) tau_hat_k(x_i)` from a weight profile.
pub fn reconstruct_from_weights(profile: &WeightProfile, table: &AugmentedTable, x: &[f64]) -> Result<f64> {
    if profile.table_fingerprint != table.fingerprint() {
        return Err(Error::Consistency(
            "weight profile was produced from a different table".into(),
        ));
    }
    if profile.x.as_slice() != x {
        return Err(Error::Consistency(
            "weight profile was computed at a different point".into(),
        ));
    }
    let Some(kernel) = &profile.kernel else {
        return Err(Error::Consistency("weight profile carries no kernel weights".into()));
    };
    let rows = table.rows();
    let mut sum = 0.0;
    for &(r, l) in kernel {
        let row = rows
            .get(r as usize)
            .ok_or_else(|| Error::Consistency(format!("kernel row {r} outside the table")))?;
        sum += l * row.value;
    }
    Ok(sum)
}
