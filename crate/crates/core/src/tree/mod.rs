//! Weighted least-squares regression trees and subsampled forests.
//!
//! One engine backs both the local learners and the ensemble stage. Splits
//! minimise the weighted within-child squared error; numeric features split at
//! midpoints between consecutive distinct values, categorical features by the
//! mean-sorted prefix scan. Single trees are pruned by cost complexity with
//! cross-validated selection of the penalty. Honest trees place splits with
//! one part of the rows and fill leaf values from a disjoint part.

mod forest;
mod grow;
mod prune;

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::rng::SeedSpec;

pub use forest::{fit_forest, ForestModel, Subsample};
pub use prune::{cost_complexity_path, PruneReport};

/// Kind of one predictor column.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureKind {
    Numeric,
    /// Integer levels `1..=levels` stored as `f64`.
    Categorical {
        levels: u32,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureSchema {
    kinds: Vec<FeatureKind>,
}

impl FeatureSchema {
    pub fn new(kinds: Vec<FeatureKind>) -> Result<Self> {
        if kinds.is_empty() {
            return Err(Error::Schema("schema needs at least one feature".into()));
        }
        for (j, k) in kinds.iter().enumerate() {
            if let FeatureKind::Categorical { levels } = k {
                if *levels < 2 {
                    return Err(Error::Schema(format!(
                        "categorical feature {j} needs at least 2 levels, has {levels}"
                    )));
                }
            }
        }
        Ok(Self { kinds })
    }

    pub fn numeric(dim: usize) -> Self {
        Self {
            kinds: vec![FeatureKind::Numeric; dim.max(1)],
        }
    }

    pub fn len(&self) -> usize {
        self.kinds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kinds.is_empty()
    }

    pub fn kind(&self, feature: usize) -> FeatureKind {
        self.kinds[feature]
    }

    pub fn kinds(&self) -> &[FeatureKind] {
        &self.kinds
    }

    /// Checks length, finiteness and categorical level ranges.
    pub fn check(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.kinds.len() {
            return Err(Error::Schema(format!(
                "expected {} features, got {}",
                self.kinds.len(),
                x.len()
            )));
        }
        for (j, (&v, kind)) in x.iter().zip(&self.kinds).enumerate() {
            match kind {
                FeatureKind::Numeric if !v.is_finite() => {
                    return Err(Error::Schema(format!("feature {j} is not finite")));
                }
                FeatureKind::Categorical { levels } => {
                    if v.fract() != 0.0 || v < 1.0 || v > f64::from(*levels) {
                        return Err(Error::Schema(format!("feature {j} level {v} outside 1..={levels}")));
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// Routing rule of an internal node.
#[derive(Debug, Clone, PartialEq)]
pub enum SplitRule {
    /// `x <= threshold` goes left.
    Numeric { threshold: f64 },
    /// Levels in `left` (sorted ascending) go left; all other levels go right.
    Categorical { left: Vec<u32> },
}

impl SplitRule {
    #[inline]
    pub fn goes_left(&self, v: f64) -> bool {
        match self {
            SplitRule::Numeric { threshold } => v <= *threshold,
            SplitRule::Categorical { left } => left.binary_search(&(v as u32)).is_ok(),
        }
    }

    // Tie-break order among equal-loss splits on the same feature.
    fn key_cmp(&self, other: &SplitRule) -> Ordering {
        match (self, other) {
            (SplitRule::Numeric { threshold: a }, SplitRule::Numeric { threshold: b }) => a.total_cmp(b),
            (SplitRule::Categorical { left: a }, SplitRule::Categorical { left: b }) => a.cmp(b),
            (SplitRule::Numeric { .. }, SplitRule::Categorical { .. }) => Ordering::Less,
            (SplitRule::Categorical { .. }, SplitRule::Numeric { .. }) => Ordering::Greater,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Internal {
        feature: usize,
        rule: SplitRule,
        left: usize,
        right: usize,
    },
    Leaf {
        value: f64,
        /// Rows that produced `value`.
        count: usize,
        /// Sum of their weights.
        weight: f64,
    },
}

/// A fitted regression tree. Nodes are stored in pre-order; node 0 is the root.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeModel {
    nodes: Vec<Node>,
    schema: FeatureSchema,
    // row ids behind each leaf value, indexed by node id; empty when the
    // tree was rebuilt from an exchanged payload
    cohorts: Vec<Vec<u32>>,
    pruning: Option<PruneReport>,
}

impl TreeModel {
    /// Rebuilds a tree from a node list (no cohort information).
    pub fn from_nodes(nodes: Vec<Node>, schema: FeatureSchema) -> Result<Self> {
        validate_nodes(&nodes, &schema)?;
        Ok(Self {
            nodes,
            schema,
            cohorts: Vec::new(),
            pruning: None,
        })
    }

    /// Single-leaf tree.
    pub fn constant(value: f64, count: usize, schema: FeatureSchema) -> Self {
        Self {
            nodes: vec![Node::Leaf {
                value,
                count,
                weight: count as f64,
            }],
            schema,
            cohorts: Vec::new(),
            pruning: None,
        }
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn schema(&self) -> &FeatureSchema {
        &self.schema
    }

    pub fn pruning(&self) -> Option<&PruneReport> {
        self.pruning.as_ref()
    }

    pub fn has_cohorts(&self) -> bool {
        !self.cohorts.is_empty()
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Leaf { .. })).count()
    }

    pub fn depth(&self) -> usize {
        fn go(nodes: &[Node], id: usize) -> usize {
            match &nodes[id] {
                Node::Leaf { .. } => 0,
                Node::Internal { left, right, .. } => 1 + go(nodes, *left).max(go(nodes, *right)),
            }
        }
        go(&self.nodes, 0)
    }

    /// Node id of the leaf containing `x`.
    pub fn leaf_index(&self, x: &[f64]) -> Result<usize> {
        self.schema.check(x)?;
        Ok(self.leaf_index_unchecked(x))
    }

    #[inline]
    pub(crate) fn leaf_index_unchecked(&self, x: &[f64]) -> usize {
        let mut id = 0;
        loop {
            match &self.nodes[id] {
                Node::Leaf { .. } => return id,
                Node::Internal {
                    feature,
                    rule,
                    left,
                    right,
                } => {
                    id = if rule.goes_left(x[*feature]) { *left } else { *right };
                }
            }
        }
    }

    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        self.schema.check(x)?;
        Ok(self.predict_unchecked(x))
    }

    #[inline]
    pub(crate) fn predict_unchecked(&self, x: &[f64]) -> f64 {
        match &self.nodes[self.leaf_index_unchecked(x)] {
            Node::Leaf { value, .. } => *value,
            Node::Internal { .. } => unreachable!("leaf_index returns leaves"),
        }
    }

    /// Identifiers of the rows whose targets produced the value of `x`'s leaf.
    pub fn leaf_cohort(&self, x: &[f64]) -> Result<&[u32]> {
        let leaf = self.leaf_index(x)?;
        self.cohort_of(leaf)
    }

    /// Cohort of a leaf node id.
    pub fn cohort_of(&self, leaf: usize) -> Result<&[u32]> {
        if self.cohorts.is_empty() {
            return Err(Error::Consistency(
                "tree carries no leaf membership (rebuilt from an exchanged payload)".into(),
            ));
        }
        match self.nodes.get(leaf) {
            Some(Node::Leaf { .. }) => Ok(&self.cohorts[leaf]),
            _ => Err(Error::Consistency(format!("node {leaf} is not a leaf"))),
        }
    }

    /// Weighted squared error of the tree's predictions on `data`.
    pub fn training_loss(&self, data: &TreeData) -> f64 {
        (0..data.len())
            .map(|i| {
                let r = data.target(i) - self.predict_unchecked(data.row(i));
                data.weight(i) * r * r
            })
            .sum()
    }

    /// `training_loss + alpha * leaves`.
    pub fn penalized_loss(&self, data: &TreeData, alpha: f64) -> f64 {
        self.training_loss(data) + alpha * self.n_leaves() as f64
    }

    /// Pre-order summaries of the rows of `data` reaching each node.
    pub fn node_summaries(&self, data: &TreeData) -> Vec<NodeSummary> {
        let mut members: Vec<Vec<u32>> = vec![Vec::new(); self.nodes.len()];
        for i in 0..data.len() {
            let x = data.row(i);
            let mut id = 0;
            loop {
                members[id].push(i as u32);
                match &self.nodes[id] {
                    Node::Leaf { .. } => break,
                    Node::Internal {
                        feature,
                        rule,
                        left,
                        right,
                    } => id = if rule.goes_left(x[*feature]) { *left } else { *right },
                }
            }
        }
        members
            .into_iter()
            .map(|rows| {
                let (_, loss) = weighted_mean_and_loss(data, &rows);
                NodeSummary { rows, loss }
            })
            .collect()
    }
}

/// Rows reaching a node and their weighted within-node squared error.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeSummary {
    pub rows: Vec<u32>,
    pub loss: f64,
}

fn validate_nodes(nodes: &[Node], schema: &FeatureSchema) -> Result<()> {
    if nodes.is_empty() {
        return Err(Error::Format("tree has no nodes".into()));
    }
    // pre-order with children after their parent; every node reached once
    let mut seen = vec![false; nodes.len()];
    let mut stack = vec![0usize];
    while let Some(id) = stack.pop() {
        if seen[id] {
            return Err(Error::Format(format!("node {id} reached twice")));
        }
        seen[id] = true;
        if let Node::Internal {
            feature,
            rule,
            left,
            right,
        } = &nodes[id]
        {
            if *feature >= schema.len() {
                return Err(Error::Format(format!("node {id} splits on unknown feature {feature}")));
            }
            match (rule, schema.kind(*feature)) {
                (SplitRule::Numeric { threshold }, FeatureKind::Numeric) if threshold.is_finite() => {}
                (SplitRule::Categorical { left: set }, FeatureKind::Categorical { levels }) => {
                    if set.is_empty()
                        || set.windows(2).any(|w| w[0] >= w[1])
                        || set.iter().any(|&l| l < 1 || l > levels)
                    {
                        return Err(Error::Format(format!("node {id} has an invalid level set")));
                    }
                }
                _ => return Err(Error::Format(format!("node {id} rule does not match feature kind"))),
            }
            for &child in [left, right] {
                if child <= id || child >= nodes.len() {
                    return Err(Error::Format(format!("node {id} has invalid child {child}")));
                }
                stack.push(child);
            }
        } else if let Node::Leaf { value, .. } = &nodes[id] {
            if !value.is_finite() {
                return Err(Error::Format(format!("leaf {id} value is not finite")));
            }
        }
    }
    if let Some(id) = seen.iter().position(|s| !s) {
        return Err(Error::Format(format!("node {id} is unreachable")));
    }
    Ok(())
}

/// Regression rows: row-major features, targets and positive weights.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeData {
    x: Vec<f64>,
    dim: usize,
    target: Vec<f64>,
    weight: Vec<f64>,
}

impl TreeData {
    pub fn new(x: Vec<f64>, dim: usize, target: Vec<f64>, weight: Vec<f64>) -> Result<Self> {
        if dim == 0 || x.len() != target.len() * dim || weight.len() != target.len() {
            return Err(Error::Validation("tree data columns have inconsistent lengths".into()));
        }
        if let Some(i) = weight.iter().position(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::Validation(format!(
                "row {i}: weight must be positive and finite"
            )));
        }
        if let Some(i) = target.iter().position(|t| !t.is_finite()) {
            return Err(Error::Validation(format!("row {i}: target is not finite")));
        }
        Ok(Self { x, dim, target, weight })
    }

    pub fn unweighted(x: Vec<f64>, dim: usize, target: Vec<f64>) -> Result<Self> {
        let n = target.len();
        Self::new(x, dim, target, vec![1.0; n])
    }

    pub fn len(&self) -> usize {
        self.target.len()
    }

    pub fn is_empty(&self) -> bool {
        self.target.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.dim..(i + 1) * self.dim]
    }

    #[inline]
    pub fn feature(&self, i: usize, j: usize) -> f64 {
        self.x[i * self.dim + j]
    }

    #[inline]
    pub fn target(&self, i: usize) -> f64 {
        self.target[i]
    }

    #[inline]
    pub fn weight(&self, i: usize) -> f64 {
        self.weight[i]
    }

    fn check_schema(&self, schema: &FeatureSchema) -> Result<()> {
        if schema.len() != self.dim {
            return Err(Error::Schema(format!(
                "schema has {} features, data has {}",
                schema.len(),
                self.dim
            )));
        }
        for i in 0..self.len() {
            schema
                .check(self.row(i))
                .map_err(|e| Error::Schema(format!("row {i}: {e}")))?;
        }
        Ok(())
    }
}

/// Weighted mean and weighted within-set squared error, summed in row order.
pub(crate) fn weighted_mean_and_loss(data: &TreeData, rows: &[u32]) -> (f64, f64) {
    if rows.is_empty() {
        return (0.0, 0.0);
    }
    let mut sw = 0.0;
    let mut swy = 0.0;
    for &r in rows {
        let r = r as usize;
        sw += data.weight(r);
        swy += data.weight(r) * data.target(r);
    }
    let mean = swy / sw;
    let mut loss = 0.0;
    for &r in rows {
        let r = r as usize;
        let d = data.target(r) - mean;
        loss += data.weight(r) * d * d;
    }
    (mean, loss)
}

/// How many features are examined at each split.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeaturesTried {
    All,
    /// `ceil(sqrt(#features))`
    Sqrt,
    Count(usize),
}

impl FeaturesTried {
    pub fn resolve(&self, n_features: usize) -> usize {
        match self {
            FeaturesTried::All => n_features,
            FeaturesTried::Sqrt => ((n_features as f64).sqrt().ceil() as usize).clamp(1, n_features),
            FeaturesTried::Count(m) => (*m).clamp(1, n_features),
        }
    }
}

/// Growth, pruning and sampling parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct FitParams {
    pub min_leaf: usize,
    pub max_depth: Option<usize>,
    pub cv_folds: usize,
    /// Strictly decreasing penalties relative to the root loss.
    pub complexity_grid: Vec<f64>,
    pub prune: bool,
    pub honest: bool,
    pub subsample_fraction: f64,
    pub features_tried: FeaturesTried,
}

/// `10^-1` down to `10^-5`, three points per decade.
pub fn default_complexity_grid() -> Vec<f64> {
    (0..=12).map(|i| 10f64.powf(-1.0 - f64::from(i) / 3.0)).collect()
}

impl Default for FitParams {
    fn default() -> Self {
        Self::single_tree()
    }
}

impl FitParams {
    /// Pruned, non-honest, all features.
    pub fn single_tree() -> Self {
        Self {
            min_leaf: 5,
            max_depth: None,
            cv_folds: 10,
            complexity_grid: default_complexity_grid(),
            prune: true,
            honest: false,
            subsample_fraction: 0.5,
            features_tried: FeaturesTried::All,
        }
    }

    /// Unpruned, honest, `ceil(sqrt(p))` features per split.
    pub fn forest() -> Self {
        Self {
            prune: false,
            honest: true,
            features_tried: FeaturesTried::Sqrt,
            ..Self::single_tree()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.min_leaf < 1 {
            return Err(Error::Config("min_leaf must be at least 1".into()));
        }
        if self.max_depth == Some(0) {
            return Err(Error::Config("max_depth must be positive when set".into()));
        }
        if !(self.subsample_fraction > 0.0 && self.subsample_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "subsample_fraction must lie in (0,1], got {}",
                self.subsample_fraction
            )));
        }
        if let FeaturesTried::Count(0) = self.features_tried {
            return Err(Error::Config("features_tried must be positive".into()));
        }
        if self.prune {
            if self.cv_folds < 2 {
                return Err(Error::Config("pruning needs at least 2 cross-validation folds".into()));
            }
            if self.complexity_grid.is_empty() {
                return Err(Error::Config("complexity grid is empty".into()));
            }
            if self.complexity_grid.iter().any(|a| !(a.is_finite() && *a > 0.0))
                || self.complexity_grid.windows(2).any(|w| w[0] <= w[1])
            {
                return Err(Error::Config(
                    "complexity grid must be positive and strictly decreasing".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Fits a single tree, pruned by cross-validated cost complexity when
/// `params.prune` is set.
pub fn fit_tree(data: &TreeData, schema: &FeatureSchema, params: &FitParams, seed: SeedSpec) -> Result<TreeModel> {
    fit_tree_grouped(data, schema, params, seed, None)
}

/// As [`fit_tree`]; rows sharing a group id never straddle a
/// cross-validation fold boundary.
pub fn fit_tree_grouped(
    data: &TreeData,
    schema: &FeatureSchema,
    params: &FitParams,
    seed: SeedSpec,
    groups: Option<&[u32]>,
) -> Result<TreeModel> {
    params.validate()?;
    data.check_schema(schema)?;
    if let Some(g) = groups {
        if g.len() != data.len() {
            return Err(Error::Validation("group labels must cover every row".into()));
        }
    }
    if data.len() < 2 * params.min_leaf {
        return Err(Error::Fit(format!(
            "{} rows cannot support two leaves of at least {} rows",
            data.len(),
            params.min_leaf
        )));
    }

    let all: Vec<u32> = (0..data.len() as u32).collect();
    let (structure, estimation) = if params.honest {
        let (s, e) = grow::honest_halves(&all, &mut seed.stream("honest", 0));
        (s, Some(e))
    } else {
        (all, None)
    };
    let n_try = params.features_tried.resolve(schema.len());
    let grower = grow::Grower::new(data, schema, params, n_try);
    let grown = grower.grow(&structure, estimation.as_deref(), &mut seed.stream("grow", 0));

    let (mask, report) = if params.prune {
        let (alpha_rel, cv_error) = prune::select_alpha(&grower, &structure, groups, seed)?;
        let root_loss = grown.root_loss();
        let alpha = alpha_rel * root_loss;
        (
            grown.prune_mask(alpha),
            Some(PruneReport {
                relative_alpha: alpha_rel,
                alpha,
                cv_error,
            }),
        )
    } else {
        (grown.full_mask(), None)
    };
    let value_rows = estimation.as_deref().unwrap_or(&structure);
    let mut tree = grown.finalize(&mask, data, value_rows, schema.clone());
    tree.pruning = report;
    Ok(tree)
}
