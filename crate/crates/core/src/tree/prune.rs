//! Cost-complexity pruning with cross-validated penalty selection.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use super::grow::Grower;
use super::{FeatureSchema, FitParams, TreeData, TreeModel};
use crate::error::{Error, Result};
use crate::rng::SeedSpec;

/// Outcome of the penalty selection attached to a pruned tree.
#[derive(Debug, Clone, PartialEq)]
pub struct PruneReport {
    /// Selected grid entry, relative to the root loss.
    pub relative_alpha: f64,
    /// `relative_alpha * root loss`.
    pub alpha: f64,
    /// Cross-validated squared error for each grid entry.
    pub cv_error: Vec<f64>,
}

/// Returns the selected relative penalty and the cross-validated error per
/// grid entry. Ties go to the larger penalty.
pub(crate) fn select_alpha(
    grower: &Grower<'_>,
    structure: &[u32],
    groups: Option<&[u32]>,
    seed: SeedSpec,
) -> Result<(f64, Vec<f64>)> {
    let params = grower.params;
    let grid = &params.complexity_grid;

    // fold units: groups when given, otherwise rows
    let unit_of = |r: u32| -> u32 { groups.map_or(r, |g| g[r as usize]) };
    let mut units: Vec<u32> = structure.iter().map(|&r| unit_of(r)).collect();
    units.sort_unstable();
    units.dedup();
    let folds = params.cv_folds.min(units.len());
    if folds < 2 {
        return Ok((grid[0], Vec::new()));
    }
    units.shuffle(&mut seed.stream("cv", 0));
    let fold_of: BTreeMap<u32, usize> = units.iter().enumerate().map(|(p, &u)| (u, p % folds)).collect();

    let data = grower.data;
    let mut cv_error = vec![0.0; grid.len()];
    for fold in 0..folds {
        let (valid, train): (Vec<u32>, Vec<u32>) = structure.iter().partition(|&&r| fold_of[&unit_of(r)] == fold);
        if train.is_empty() || valid.is_empty() {
            continue;
        }
        let tree = grower.grow(&train, None, &mut seed.stream("cv-grow", fold as u64));
        let root = tree.root_loss();
        for (j, rel) in grid.iter().enumerate() {
            let keep = tree.prune_mask(rel * root);
            for &r in &valid {
                let r = r as usize;
                let e = data.target(r) - tree.predict_masked(&keep, data.row(r));
                cv_error[j] += data.weight(r) * e * e;
            }
        }
    }
    let mut best = 0;
    for j in 1..grid.len() {
        if cv_error[j] < cv_error[best] {
            best = j;
        }
    }
    Ok((grid[best], cv_error))
}

/// Grows one unpruned tree on all rows (non-honest) and returns its optimal
/// cost-complexity subtree for each absolute penalty in `alphas`.
pub fn cost_complexity_path(
    data: &TreeData,
    schema: &FeatureSchema,
    params: &FitParams,
    seed: SeedSpec,
    alphas: &[f64],
) -> Result<Vec<TreeModel>> {
    data.check_schema(schema)?;
    if data.len() < 2 * params.min_leaf {
        return Err(Error::Fit("too few rows".into()));
    }
    let rows: Vec<u32> = (0..data.len() as u32).collect();
    let n_try = params.features_tried.resolve(schema.len());
    let grower = Grower::new(data, schema, params, n_try);
    let grown = grower.grow(&rows, None, &mut seed.stream("grow", 0));
    Ok(alphas
        .iter()
        .map(|&a| grown.finalize(&grown.prune_mask(a), data, &rows, schema.clone()))
        .collect())
}
