use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;

use super::grow::{honest_halves, Grower};
use super::{FeatureSchema, FitParams, TreeData, TreeModel};
use crate::error::{Error, Result};
use crate::rng::SeedSpec;

/// Rows used by one forest tree.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Subsample {
    /// Rows that placed the splits.
    pub structure: Vec<u32>,
    /// Rows that filled the leaf values; equal to `structure` when not honest.
    pub estimation: Vec<u32>,
}

/// Mean of `B` trees, each grown on its own subsample.
#[derive(Debug, Clone, PartialEq)]
pub struct ForestModel {
    trees: Vec<TreeModel>,
    subsamples: Vec<Subsample>,
}

impl ForestModel {
    /// Rebuilds a forest from exchanged trees (subsamples unknown).
    pub fn from_trees(trees: Vec<TreeModel>) -> Result<Self> {
        if trees.is_empty() {
            return Err(Error::Config("a forest needs at least one tree".into()));
        }
        if trees.iter().any(|t| t.schema() != trees[0].schema()) {
            return Err(Error::Schema("forest trees disagree on the feature schema".into()));
        }
        Ok(Self {
            trees,
            subsamples: Vec::new(),
        })
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

    pub fn schema(&self) -> &FeatureSchema {
        self.trees[0].schema()
    }

    /// Mean of the tree predictions, summed in tree order.
    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        self.schema().check(x)?;
        Ok(self.predict_unchecked(x))
    }

    pub(crate) fn predict_unchecked(&self, x: &[f64]) -> f64 {
        let mut sum = 0.0;
        for t in &self.trees {
            sum += t.predict_unchecked(x);
        }
        sum / self.trees.len() as f64
    }
}

/// Fits `b` trees. With `subject_groups`, each tree draws
/// `round(subsample_fraction * subjects)` distinct subjects and one uniformly
/// chosen row per subject; otherwise it draws `round(subsample_fraction * n)`
/// rows without replacement. Honest trees split their subsample in half.
/// Forest trees are never pruned.
pub fn fit_forest(
    data: &TreeData,
    schema: &FeatureSchema,
    params: &FitParams,
    seed: SeedSpec,
    b: usize,
    subject_groups: Option<&[u32]>,
) -> Result<ForestModel> {
    if b < 1 {
        return Err(Error::Config("forest size B must be at least 1".into()));
    }
    params.validate()?;
    data.check_schema(schema)?;

    let by_subject: Option<Vec<Vec<u32>>> = match subject_groups {
        Some(g) => {
            if g.len() != data.len() {
                return Err(Error::Validation("subject labels must cover every row".into()));
            }
            let mut map: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
            for (r, &s) in g.iter().enumerate() {
                map.entry(s).or_default().push(r as u32);
            }
            Some(map.into_values().collect())
        }
        None => None,
    };
    let population = by_subject.as_ref().map_or(data.len(), Vec::len);
    let m = (params.subsample_fraction * population as f64).round() as usize;
    if m < 2 * params.min_leaf {
        return Err(Error::Fit(format!(
            "subsample of {m} is smaller than twice min_leaf ({})",
            params.min_leaf
        )));
    }

    let n_try = params.features_tried.resolve(schema.len());
    let grower = Grower::new(data, schema, params, n_try);
    let built: Vec<(TreeModel, Subsample)> = (0..b)
        .into_par_iter()
        .map(|t| {
            let mut rng = seed.stream("tree", t as u64);
            let mut chosen: Vec<u32> = match &by_subject {
                Some(subjects) => index::sample(&mut rng, subjects.len(), m)
                    .into_iter()
                    .map(|s| {
                        let rows = &subjects[s];
                        rows[rng.random_range(0..rows.len())]
                    })
                    .collect(),
                None => index::sample(&mut rng, data.len(), m)
                    .into_iter()
                    .map(|r| r as u32)
                    .collect(),
            };
            chosen.sort_unstable();
            let (structure, estimation) = if params.honest {
                honest_halves(&chosen, &mut rng)
            } else {
                (chosen.clone(), chosen)
            };
            let est = params.honest.then_some(estimation.as_slice());
            let grown = grower.grow(&structure, est, &mut rng);
            let tree = grown.finalize(&grown.full_mask(), data, &estimation, schema.clone());
            (tree, Subsample { structure, estimation })
        })
        .collect();
    let (trees, subsamples) = built.into_iter().unzip();
    Ok(ForestModel { trees, subsamples })
}
