use super::{ModelEnvelope, Payload};
use crate::tree::{FitParams, Node};

/// Audit result for one tree.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TreeAudit {
    pub tree: usize,
    pub passed: bool,
    /// Leaves holding fewer than `min_leaf` rows.
    pub small_leaves: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuditReport {
    pub passed: bool,
    pub min_leaf: usize,
    pub trees: Vec<TreeAudit>,
    /// Payload fields whose length could hold one entry per training row.
    pub row_arrays: Vec<String>,
}

/// Checks that every leaf summarises at least `params.min_leaf` rows and that
/// no payload list is long enough to carry per-row data. Lists in an envelope
/// are bounded by the site count, the dimension or a category count; anything
/// longer, or as long as `n_k`, is reported.
pub fn audit_privacy(envelope: &ModelEnvelope, params: &FitParams) -> AuditReport {
    let min_leaf = params.min_leaf;
    let k = envelope.ensemble.as_ref().map_or(1, |h| h.site_ids.len());
    let bound = k.max(envelope.dim + 1);
    let suspicious = |len: usize| len > bound || (len > 1 && len >= envelope.n_k);
    let mut row_arrays = Vec::new();

    if let Some(h) = &envelope.ensemble {
        if let Some(w) = &h.site_weights {
            if w.len() != k {
                row_arrays.push(format!("site_weights has {} entries", w.len()));
            }
        }
    }
    if let Some(p) = &envelope.propensity {
        if let crate::local::PropensityForm::Logistic { coefficients, .. } = &p.form {
            if suspicious(coefficients.len()) {
                row_arrays.push(format!("propensity has {} coefficients", coefficients.len()));
            }
        }
    }

    let mut trees = Vec::new();
    match &envelope.payload {
        Payload::Oracle(tau) => {
            if let crate::local::OracleTau::Affine { slopes, .. } = tau {
                if suspicious(slopes.len()) {
                    row_arrays.push(format!("oracle has {} slopes", slopes.len()));
                }
            }
        }
        Payload::Trees(ts) => {
            for (t, tree) in ts.iter().enumerate() {
                let mut small_leaves = Vec::new();
                for (id, node) in tree.nodes.iter().enumerate() {
                    match node {
                        Node::Leaf { count, .. } if *count < min_leaf => small_leaves.push(id),
                        Node::Internal {
                            rule: crate::tree::SplitRule::Categorical { left },
                            ..
                        } if suspicious(left.len()) && left.len() > k => {
                            row_arrays.push(format!("tree {t} node {id} lists {} levels", left.len()));
                        }
                        _ => {}
                    }
                }
                for (id, m) in tree.mass.iter().enumerate() {
                    if !m.is_empty() && m.len() != k {
                        row_arrays.push(format!("tree {t} node {id} mass has {} entries", m.len()));
                    }
                }
                trees.push(TreeAudit {
                    tree: t,
                    passed: small_leaves.is_empty(),
                    small_leaves,
                });
            }
        }
    }
    AuditReport {
        passed: row_arrays.is_empty() && trees.iter().all(|t| t.passed),
        min_leaf,
        trees,
        row_arrays,
    }
}
