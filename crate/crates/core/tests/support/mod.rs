//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use fedtree_core::tree::{FeatureKind, FeatureSchema, TreeData};
use rand::Rng;

/// A small regression problem held in plain vectors.
#[derive(Debug, Clone)]
pub struct Problem {
    pub x: Vec<Vec<f64>>,
    pub kinds: Vec<FeatureKind>,
    pub target: Vec<f64>,
    pub weight: Vec<f64>,
}

impl Problem {
    pub fn tree_data(&self) -> TreeData {
        let dim = self.kinds.len();
        let flat: Vec<f64> = self.x.iter().flatten().copied().collect();
        TreeData::new(flat, dim, self.target.clone(), self.weight.clone()).unwrap()
    }

    pub fn schema(&self) -> FeatureSchema {
        FeatureSchema::new(self.kinds.clone()).unwrap()
    }

    pub fn has_categorical(&self) -> bool {
        self.kinds.iter().any(|k| matches!(k, FeatureKind::Categorical { .. }))
    }

    /// Draws a random problem with `n` rows. Numeric columns take values on a
    /// coarse grid so that repeated values occur.
    pub fn random(rng: &mut impl Rng, n: usize, dim: usize, weighted: bool) -> Self {
        let kinds: Vec<FeatureKind> = (0..dim)
            .map(|_| {
                if rng.random_bool(0.4) {
                    FeatureKind::Categorical {
                        levels: rng.random_range(2..=4),
                    }
                } else {
                    FeatureKind::Numeric
                }
            })
            .collect();
        let x = (0..n)
            .map(|_| {
                kinds
                    .iter()
                    .map(|k| match k {
                        FeatureKind::Numeric => f64::from(rng.random_range(-3i32..=3)) * 0.5,
                        FeatureKind::Categorical { levels } => f64::from(rng.random_range(1..=*levels)),
                    })
                    .collect()
            })
            .collect();
        let target = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
        let weight = (0..n)
            .map(|_| if weighted { rng.random_range(0.5..2.0) } else { 1.0 })
            .collect();
        Self {
            x,
            kinds,
            target,
            weight,
        }
    }
}

/// Weighted mean and squared error, summed in row order.
pub fn mean_and_loss(p: &Problem, rows: &[usize]) -> (f64, f64) {
    let (mut sw, mut swy) = (0.0, 0.0);
    for &r in rows {
        sw += p.weight[r];
        swy += p.weight[r] * p.target[r];
    }
    let mean = swy / sw;
    let mut loss = 0.0;
    for &r in rows {
        let d = p.target[r] - mean;
        loss += p.weight[r] * d * d;
    }
    (mean, loss)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Rule {
    Threshold(f64),
    Left(Vec<u32>),
}

impl Rule {
    pub fn goes_left(&self, v: f64) -> bool {
        match self {
            Rule::Threshold(t) => v <= *t,
            Rule::Left(levels) => levels.contains(&(v as u32)),
        }
    }

    fn order(&self, other: &Rule) -> std::cmp::Ordering {
        use std::cmp::Ordering::*;
        match (self, other) {
            (Rule::Threshold(a), Rule::Threshold(b)) => a.total_cmp(b),
            (Rule::Left(a), Rule::Left(b)) => a.cmp(b),
            (Rule::Threshold(_), Rule::Left(_)) => Less,
            (Rule::Left(_), Rule::Threshold(_)) => Greater,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Split {
    pub feature: usize,
    pub rule: Rule,
    pub loss: f64,
}

/// Every admissible split of `rows`: all midpoints between distinct numeric
/// values, and every proper subset of the present levels that contains the
/// lowest present level.
pub fn all_splits(p: &Problem, rows: &[usize], min_leaf: usize) -> Vec<Split> {
    let mut out = Vec::new();
    for (j, kind) in p.kinds.iter().enumerate() {
        let rules: Vec<Rule> = match kind {
            FeatureKind::Numeric => {
                let mut vals: Vec<f64> = rows.iter().map(|&r| p.x[r][j]).collect();
                vals.sort_by(f64::total_cmp);
                vals.dedup();
                vals.windows(2)
                    .map(|w| Rule::Threshold(w[0] + (w[1] - w[0]) / 2.0))
                    .collect()
            }
            FeatureKind::Categorical { .. } => {
                let mut present: Vec<u32> = rows.iter().map(|&r| p.x[r][j] as u32).collect();
                present.sort_unstable();
                present.dedup();
                let m = present.len();
                (0..(1u32 << m) - 1)
                    .filter(|mask| mask & 1 == 1)
                    .map(|mask| Rule::Left((0..m).filter(|b| mask >> b & 1 == 1).map(|b| present[b]).collect()))
                    .collect()
            }
        };
        for rule in rules {
            let (l, r): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&i| rule.goes_left(p.x[i][j]));
            if l.len() < min_leaf || r.len() < min_leaf {
                continue;
            }
            let loss = mean_and_loss(p, &l).1 + mean_and_loss(p, &r).1;
            out.push(Split { feature: j, rule, loss });
        }
    }
    out
}

/// The loss-minimising split; near-ties go to the lower feature, then the
/// lower threshold or lexicographically smaller left set.
pub fn best_split(p: &Problem, rows: &[usize], min_leaf: usize, tol: f64) -> Option<Split> {
    let splits = all_splits(p, rows, min_leaf);
    let min = splits.iter().map(|s| s.loss).fold(f64::INFINITY, f64::min);
    splits
        .into_iter()
        .filter(|s| s.loss <= min + tol)
        .min_by(|a, b| a.feature.cmp(&b.feature).then(a.rule.order(&b.rule)))
}

#[derive(Debug, Clone)]
pub enum OracleNode {
    Leaf(f64),
    Split(usize, Rule, Box<OracleNode>, Box<OracleNode>),
}

impl OracleNode {
    pub fn predict(&self, x: &[f64]) -> f64 {
        match self {
            OracleNode::Leaf(v) => *v,
            OracleNode::Split(j, rule, l, r) => {
                if rule.goes_left(x[*j]) {
                    l.predict(x)
                } else {
                    r.predict(x)
                }
            }
        }
    }

    pub fn leaves(&self) -> usize {
        match self {
            OracleNode::Leaf(_) => 1,
            OracleNode::Split(_, _, l, r) => l.leaves() + r.leaves(),
        }
    }
}

/// Exhaustive greedy tree: at every node try all admissible splits and
/// recurse while the best one strictly lowers the loss.
pub fn oracle_tree(p: &Problem, rows: &[usize], min_leaf: usize, depth_left: Option<usize>) -> OracleNode {
    let (mean, loss) = mean_and_loss(p, rows);
    let scale: f64 = rows.iter().map(|&r| p.weight[r] * p.target[r] * p.target[r]).sum();
    if loss <= 0.0 || loss <= 1e-24 * scale || rows.len() < 2 * min_leaf || depth_left == Some(0) {
        return OracleNode::Leaf(mean);
    }
    let tol = 1e-12 * loss;
    match best_split(p, rows, min_leaf, tol) {
        Some(s) if s.loss < loss - tol => {
            let (l, r): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&i| s.rule.goes_left(p.x[i][s.feature]));
            let next = depth_left.map(|d| d - 1);
            OracleNode::Split(
                s.feature,
                s.rule,
                Box::new(oracle_tree(p, &l, min_leaf, next)),
                Box::new(oracle_tree(p, &r, min_leaf, next)),
            )
        }
        _ => OracleNode::Leaf(mean),
    }
}

/// A random query point valid for the problem's schema.
pub fn random_query(p: &Problem, rng: &mut impl Rng) -> Vec<f64> {
    p.kinds
        .iter()
        .map(|k| match k {
            FeatureKind::Numeric => rng.random_range(-2.0..2.0),
            FeatureKind::Categorical { levels } => f64::from(rng.random_range(1..=*levels)),
        })
        .collect()
}

/// Solves the square system `a x = b` by Gaussian elimination with partial
/// pivoting.
pub fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    x
}

/// Logistic regression by iteratively reweighted least squares on the
/// normal equations.
pub fn irls_logistic(design: &[Vec<f64>], z: &[f64], iterations: usize) -> Vec<f64> {
    let p = design[0].len();
    let mut beta = vec![0.0; p];
    for _ in 0..iterations {
        let mut xtwx = vec![vec![0.0; p]; p];
        let mut xtwz = vec![0.0; p];
        for (row, &zi) in design.iter().zip(z) {
            let eta: f64 = row.iter().zip(&beta).map(|(a, b)| a * b).sum();
            let mu = 1.0 / (1.0 + (-eta).exp());
            let w = mu * (1.0 - mu);
            let working = eta + (zi - mu) / w;
            for a in 0..p {
                xtwz[a] += w * row[a] * working;
                for b in 0..p {
                    xtwx[a][b] += w * row[a] * row[b];
                }
            }
        }
        beta = solve(xtwx, xtwz);
    }
    beta
}

/// A random site with `y = x1 * z + noise` and both arms present.
pub fn random_site(rng: &mut impl Rng, site_id: u32, n: usize, dim: usize) -> fedtree_core::dataset::SiteDataset {
    use rand_distr::StandardNormal;
    let x: Vec<f64> = (0..n * dim).map(|_| rng.sample(StandardNormal)).collect();
    let mut z: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
    z[0] = true;
    z[1] = false;
    let y: Vec<f64> = (0..n)
        .map(|i| x[i * dim] * f64::from(u8::from(z[i])) + rng.sample::<f64, _>(StandardNormal))
        .collect();
    fedtree_core::dataset::SiteDataset::new(site_id, y, z, x, dim).unwrap()
}

/// `k` local models for sites `1..=k`: a mix of affine oracles and causal
/// trees fitted on freshly drawn sites.
pub fn random_models(rng: &mut impl Rng, k: usize, dim: usize) -> Vec<fedtree_core::local::LocalModel> {
    use fedtree_core::local::{fit_local, LocalLearner, LocalModel, OracleTau, PropensityModel};
    use fedtree_core::rng::SeedSpec;
    (1..=k as u32)
        .map(|id| {
            if rng.random_bool(0.5) {
                let slopes = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
                LocalModel::oracle(
                    id,
                    dim,
                    100,
                    OracleTau::Affine {
                        intercept: rng.random_range(-1.0..1.0),
                        slopes,
                    },
                )
            } else {
                let site = random_site(rng, id, 80, dim);
                let prop = PropensityModel::constant(0.5).unwrap();
                fit_local(&site, &LocalLearner::causal_tree(), &prop, SeedSpec::new(rng.random())).unwrap()
            }
        })
        .collect()
}

/// A random augmented table with 2 to 6 sites, 10 to 40 subjects and 1 to 3
/// covariates, optionally site-weighted.
pub fn random_table(rng: &mut impl Rng) -> fedtree_core::ensemble::AugmentedTable {
    use fedtree_core::ensemble::build_augmented;
    use fedtree_core::local::site_size_weights;
    let k = rng.random_range(2..=6);
    let dim = rng.random_range(1..=3);
    let n = rng.random_range(10..=40);
    let models = random_models(rng, k, dim);
    let estimation = random_site(rng, 1, n, dim);
    let eta = if rng.random_bool(0.3) {
        let sizes: Vec<usize> = (0..k).map(|_| rng.random_range(50..500)).collect();
        Some(site_size_weights(&sizes).unwrap())
    } else {
        None
    };
    build_augmented(&estimation, &models, eta.as_ref()).unwrap()
}
