//! Greedy recursive partitioning.

use std::cmp::Ordering;

use rand::seq::{index, SliceRandom};

use super::{weighted_mean_and_loss, FeatureKind, FeatureSchema, FitParams, Node, SplitRule, TreeData, TreeModel};
use crate::rng::Stream;

// Relative loss differences below this are ties.
pub(crate) const TIE_TOL: f64 = 1e-12;
// Node loss below this fraction of the uncentred sum of squares counts as pure.
const PURE_TOL: f64 = 1e-24;

/// Splits rows into (structure, estimation) halves; the structure half gets
/// the extra row when the count is odd. Both halves are sorted.
pub(crate) fn honest_halves(rows: &[u32], rng: &mut Stream) -> (Vec<u32>, Vec<u32>) {
    let mut shuffled = rows.to_vec();
    shuffled.shuffle(rng);
    let n_structure = rows.len() - rows.len() / 2;
    let mut structure = shuffled[..n_structure].to_vec();
    let mut estimation = shuffled[n_structure..].to_vec();
    structure.sort_unstable();
    estimation.sort_unstable();
    (structure, estimation)
}

#[derive(Debug, Clone)]
pub(crate) struct GrownNode {
    pub value: f64,
    pub loss: f64,
    pub children: Option<(usize, SplitRule, usize, usize)>,
}

/// Unpruned tree in growth order, with per-node loss for pruning.
#[derive(Debug, Clone)]
pub(crate) struct GrownTree {
    pub nodes: Vec<GrownNode>,
}

#[derive(Debug, Clone)]
pub(crate) struct Candidate {
    pub loss: f64,
    pub feature: usize,
    pub rule: SplitRule,
}

impl Candidate {
    fn beats(&self, best: &Candidate, tol: f64) -> bool {
        if self.loss < best.loss - tol {
            return true;
        }
        if self.loss > best.loss + tol {
            return false;
        }
        match self.feature.cmp(&best.feature) {
            Ordering::Less => true,
            Ordering::Greater => false,
            Ordering::Equal => self.rule.key_cmp(&best.rule) == Ordering::Less,
        }
    }
}

pub(crate) struct Grower<'a> {
    pub data: &'a TreeData,
    pub schema: &'a FeatureSchema,
    pub params: &'a FitParams,
    pub n_try: usize,
}

impl<'a> Grower<'a> {
    pub fn new(data: &'a TreeData, schema: &'a FeatureSchema, params: &'a FitParams, n_try: usize) -> Self {
        Self {
            data,
            schema,
            params,
            n_try,
        }
    }

    /// Grows on `structure`; when `estimation` is given every child must also
    /// receive at least `min_leaf` estimation rows (only their covariates are
    /// consulted).
    pub fn grow(&self, structure: &[u32], estimation: Option<&[u32]>, rng: &mut Stream) -> GrownTree {
        let mut tree = GrownTree { nodes: Vec::new() };
        self.grow_node(&mut tree, structure.to_vec(), estimation.map(<[u32]>::to_vec), 0, rng);
        tree
    }

    fn grow_node(
        &self,
        tree: &mut GrownTree,
        rows: Vec<u32>,
        est: Option<Vec<u32>>,
        depth: usize,
        rng: &mut Stream,
    ) -> usize {
        let (value, loss) = weighted_mean_and_loss(self.data, &rows);
        let id = tree.nodes.len();
        tree.nodes.push(GrownNode {
            value,
            loss,
            children: None,
        });

        let min_leaf = self.params.min_leaf;
        let depth_ok = self.params.max_depth.is_none_or(|d| depth < d);
        let room = rows.len() >= 2 * min_leaf && est.as_ref().is_none_or(|e| e.len() >= 2 * min_leaf);
        if !depth_ok || !room || self.is_pure(&rows, loss) {
            return id;
        }

        let Some(best) = self.best_split(&rows, est.as_deref(), value, loss, rng) else {
            return id;
        };
        if !(best.loss < loss - TIE_TOL * loss) {
            return id;
        }

        let (left_rows, right_rows) = self.partition(&rows, best.feature, &best.rule);
        let (left_est, right_est) = match est {
            Some(e) => {
                let (l, r) = self.partition(&e, best.feature, &best.rule);
                (Some(l), Some(r))
            }
            None => (None, None),
        };
        drop(rows);
        let left = self.grow_node(tree, left_rows, left_est, depth + 1, rng);
        let right = self.grow_node(tree, right_rows, right_est, depth + 1, rng);
        tree.nodes[id].children = Some((best.feature, best.rule, left, right));
        id
    }

    fn is_pure(&self, rows: &[u32], loss: f64) -> bool {
        if loss <= 0.0 {
            return true;
        }
        let scale: f64 = rows
            .iter()
            .map(|&r| self.data.weight(r as usize) * self.data.target(r as usize).powi(2))
            .sum();
        loss <= PURE_TOL * scale
    }

    fn partition(&self, rows: &[u32], feature: usize, rule: &SplitRule) -> (Vec<u32>, Vec<u32>) {
        rows.iter()
            .partition(|&&r| rule.goes_left(self.data.feature(r as usize, feature)))
    }

    fn best_split(
        &self,
        rows: &[u32],
        est: Option<&[u32]>,
        mean: f64,
        loss: f64,
        rng: &mut Stream,
    ) -> Option<Candidate> {
        let p = self.schema.len();
        let features: Vec<usize> = if self.n_try >= p {
            (0..p).collect()
        } else {
            let mut f = index::sample(rng, p, self.n_try).into_vec();
            f.sort_unstable();
            f
        };
        let tol = TIE_TOL * loss;
        let mut best: Option<Candidate> = None;
        for feature in features {
            let cand = match self.schema.kind(feature) {
                FeatureKind::Numeric => self.best_numeric(rows, est, feature, mean, tol),
                FeatureKind::Categorical { levels } => self.best_categorical(rows, est, feature, levels, mean, tol),
            };
            if let Some(c) = cand {
                if best.as_ref().is_none_or(|b| c.beats(b, tol)) {
                    best = Some(c);
                }
            }
        }
        best
    }

    fn best_numeric(
        &self,
        rows: &[u32],
        est: Option<&[u32]>,
        feature: usize,
        mean: f64,
        tol: f64,
    ) -> Option<Candidate> {
        let data = self.data;
        let min_leaf = self.params.min_leaf;
        let mut order: Vec<(f64, u32)> = rows.iter().map(|&r| (data.feature(r as usize, feature), r)).collect();
        order.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let est_sorted: Option<Vec<f64>> = est.map(|e| {
            let mut v: Vec<f64> = e.iter().map(|&r| data.feature(r as usize, feature)).collect();
            v.sort_unstable_by(f64::total_cmp);
            v
        });

        let (mut tw, mut twt, mut twt2) = (0.0, 0.0, 0.0);
        for &(_, r) in &order {
            let (w, t) = (data.weight(r as usize), data.target(r as usize) - mean);
            tw += w;
            twt += w * t;
            twt2 += w * t * t;
        }

        let n = order.len();
        let (mut lw, mut lwt, mut lwt2) = (0.0, 0.0, 0.0);
        let mut best: Option<Candidate> = None;
        for i in 0..n - 1 {
            let (v, r) = order[i];
            let (w, t) = (data.weight(r as usize), data.target(r as usize) - mean);
            lw += w;
            lwt += w * t;
            lwt2 += w * t * t;
            let next = order[i + 1].0;
            if v == next {
                continue;
            }
            let n_left = i + 1;
            if n_left < min_leaf || n - n_left < min_leaf {
                continue;
            }
            let threshold = midpoint(v, next);
            if let Some(es) = &est_sorted {
                let e_left = es.partition_point(|&u| u <= threshold);
                if e_left < min_leaf || es.len() - e_left < min_leaf {
                    continue;
                }
            }
            let (rw, rwt, rwt2) = (tw - lw, twt - lwt, twt2 - lwt2);
            let child = sse(lw, lwt, lwt2) + sse(rw, rwt, rwt2);
            let cand = Candidate {
                loss: child,
                feature,
                rule: SplitRule::Numeric { threshold },
            };
            if best.as_ref().is_none_or(|b| cand.beats(b, tol)) {
                best = Some(cand);
            }
        }
        best
    }

    fn best_categorical(
        &self,
        rows: &[u32],
        est: Option<&[u32]>,
        feature: usize,
        levels: u32,
        mean: f64,
        tol: f64,
    ) -> Option<Candidate> {
        let data = self.data;
        let min_leaf = self.params.min_leaf;
        let l = levels as usize;
        // per level: weight, weighted centred target, weighted squared, count, estimation count
        let mut stats = vec![(0.0f64, 0.0f64, 0.0f64, 0usize, 0usize); l + 1];
        for &r in rows {
            let lev = data.feature(r as usize, feature) as usize;
            let (w, t) = (data.weight(r as usize), data.target(r as usize) - mean);
            let s = &mut stats[lev];
            s.0 += w;
            s.1 += w * t;
            s.2 += w * t * t;
            s.3 += 1;
        }
        if let Some(e) = est {
            for &r in e {
                stats[data.feature(r as usize, feature) as usize].4 += 1;
            }
        }
        let mut present: Vec<usize> = (1..=l).filter(|&lev| stats[lev].3 > 0).collect();
        if present.len() < 2 {
            return None;
        }
        let lowest = present[0];
        present.sort_by(|&a, &b| {
            let ma = stats[a].1 / stats[a].0;
            let mb = stats[b].1 / stats[b].0;
            ma.total_cmp(&mb).then(a.cmp(&b))
        });

        let total = present.iter().fold((0.0, 0.0, 0.0, 0usize, 0usize), |acc, &lev| {
            let s = stats[lev];
            (acc.0 + s.0, acc.1 + s.1, acc.2 + s.2, acc.3 + s.3, acc.4 + s.4)
        });
        let est_total = est.map_or(0, <[u32]>::len);
        let mut acc = (0.0, 0.0, 0.0, 0usize, 0usize);
        let mut best: Option<Candidate> = None;
        for p in 1..present.len() {
            let s = stats[present[p - 1]];
            acc = (acc.0 + s.0, acc.1 + s.1, acc.2 + s.2, acc.3 + s.3, acc.4 + s.4);
            let prefix_has_lowest = present[..p].contains(&lowest);
            let mut left: Vec<u32> = if prefix_has_lowest {
                present[..p].iter().map(|&v| v as u32).collect()
            } else {
                present[p..].iter().map(|&v| v as u32).collect()
            };
            left.sort_unstable();
            let (n_pre, n_rest) = (acc.3, total.3 - acc.3);
            if n_pre < min_leaf || n_rest < min_leaf {
                continue;
            }
            if est.is_some() {
                // levels absent from the structure rows route right
                let e_left: usize = left.iter().map(|&v| stats[v as usize].4).sum();
                if e_left < min_leaf || est_total - e_left < min_leaf {
                    continue;
                }
            }
            let child = sse(acc.0, acc.1, acc.2) + sse(total.0 - acc.0, total.1 - acc.1, total.2 - acc.2);
            let cand = Candidate {
                loss: child,
                feature,
                rule: SplitRule::Categorical { left },
            };
            if best.as_ref().is_none_or(|b| cand.beats(b, tol)) {
                best = Some(cand);
            }
        }
        best
    }
}

#[inline]
fn sse(w: f64, wt: f64, wt2: f64) -> f64 {
    if w <= 0.0 {
        return 0.0;
    }
    (wt2 - wt * wt / w).max(0.0)
}

/// Midpoint of two consecutive distinct values that still separates them.
pub(crate) fn midpoint(a: f64, b: f64) -> f64 {
    let m = a + (b - a) / 2.0;
    if m >= b || m < a {
        a
    } else {
        m
    }
}

impl GrownTree {
    pub fn root_loss(&self) -> f64 {
        self.nodes[0].loss
    }

    /// Every node kept; `true` marks nodes that remain internal.
    pub fn full_mask(&self) -> Vec<bool> {
        self.nodes.iter().map(|n| n.children.is_some()).collect()
    }

    /// Optimal cost-complexity subtree for `alpha`: the smallest subtree
    /// minimising `loss + alpha * leaves`. Returns the internal-node mask.
    pub fn prune_mask(&self, alpha: f64) -> Vec<bool> {
        let mut keep = vec![false; self.nodes.len()];
        self.prune_cost(0, alpha, &mut keep);
        keep
    }

    // returns the optimal penalised cost of the subtree at `id`
    fn prune_cost(&self, id: usize, alpha: f64, keep: &mut [bool]) -> f64 {
        let node = &self.nodes[id];
        let as_leaf = node.loss + alpha;
        match &node.children {
            None => as_leaf,
            Some((_, _, l, r)) => {
                let sub = self.prune_cost(*l, alpha, keep) + self.prune_cost(*r, alpha, keep);
                if as_leaf <= sub {
                    as_leaf
                } else {
                    keep[id] = true;
                    sub
                }
            }
        }
    }

    /// Grown-node value reached by `x` under an internal-node mask.
    pub fn predict_masked(&self, keep: &[bool], x: &[f64]) -> f64 {
        let mut id = 0;
        loop {
            let node = &self.nodes[id];
            match &node.children {
                Some((f, rule, l, r)) if keep[id] => id = if rule.goes_left(x[*f]) { *l } else { *r },
                _ => return node.value,
            }
        }
    }

    /// Converts the masked subtree into a pre-order [`TreeModel`] whose leaf
    /// values are weighted means of `value_rows`.
    pub fn finalize(&self, keep: &[bool], data: &TreeData, value_rows: &[u32], schema: FeatureSchema) -> TreeModel {
        let mut nodes: Vec<Node> = Vec::new();
        let mut cohorts: Vec<Vec<u32>> = Vec::new();
        self.emit(0, keep, &mut nodes);
        cohorts.resize(nodes.len(), Vec::new());

        let mut sorted = value_rows.to_vec();
        sorted.sort_unstable();
        for &r in &sorted {
            let x = data.row(r as usize);
            let mut id = 0;
            while let Node::Internal {
                feature,
                rule,
                left,
                right,
            } = &nodes[id]
            {
                id = if rule.goes_left(x[*feature]) { *left } else { *right };
            }
            cohorts[id].push(r);
        }
        for (id, node) in nodes.iter_mut().enumerate() {
            if let Node::Leaf { value, count, weight } = node {
                let rows = &cohorts[id];
                let (mean, _) = weighted_mean_and_loss(data, rows);
                *value = mean;
                *count = rows.len();
                *weight = rows.iter().map(|&r| data.weight(r as usize)).sum();
            }
        }
        TreeModel {
            nodes,
            schema,
            cohorts,
            pruning: None,
        }
    }

    fn emit(&self, id: usize, keep: &[bool], out: &mut Vec<Node>) -> usize {
        let at = out.len();
        match &self.nodes[id].children {
            Some((feature, rule, l, r)) if keep[id] => {
                out.push(Node::Internal {
                    feature: *feature,
                    rule: rule.clone(),
                    left: 0,
                    right: 0,
                });
                let left = self.emit(*l, keep, out);
                let right = self.emit(*r, keep, out);
                if let Node::Internal {
                    left: lo, right: ro, ..
                } = &mut out[at]
                {
                    *lo = left;
                    *ro = right;
                }
            }
            _ => out.push(Node::Leaf {
                value: 0.0,
                count: 0,
                weight: 0.0,
            }),
        }
        at
    }
}
