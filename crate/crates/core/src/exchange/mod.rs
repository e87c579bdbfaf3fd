//! Versioned text envelopes for fitted models.
//!
//! An envelope holds a header (version, site, learner, training size,
//! dimension, propensity), the node records of every tree and a trailing
//! 64-bit checksum of all preceding bytes. Reals are written with 17
//! significant digits, so every `f64` survives the round trip bit for bit.
//!
//! ```text
//! fedmodel 1
//! site_id 3
//! learner causal_tree
//! n_k 250
//! dim 5
//! propensity constant 5.0000000000000000e-1 1.0000000000000000e-2 9.8999999999999999e-1 0
//! trees 1
//! tree 0 3
//! node 0 num 0 2.5000000000000000e-1 1 2 - -
//! node 1 leaf - - - - 1.2000000000000000e0 40
//! node 2 leaf - - - - -3.0000000000000000e-1 35
//! checksum 9f0c1e22d3a4b5c6
//! ```
//!
//! Ensemble envelopes add `sites`, `site_weights` and `fingerprint` lines and
//! a `mass` record after every leaf, holding the per-site weight mass behind
//! the leaf value.

mod audit;

pub use audit::{audit_privacy, AuditReport, TreeAudit};

use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::dataset::format_real;
use crate::ensemble::{EnsembleKind, EnsembleModel};
use crate::error::{Error, Result};
use crate::local::{LocalFit, LocalModel, OracleTau, PropensityForm, PropensityModel};
use crate::tree::{FeatureKind, FeatureSchema, ForestModel, Node, SplitRule, TreeModel};

pub const FORMAT_VERSION: u32 = 1;
pub const SUPPORTED_VERSIONS: &[u32] = &[1];
pub const EXTENSION: &str = "fedmodel";

/// First eight bytes of the SHA-256 digest, big-endian.
pub fn digest64(bytes: &[u8]) -> u64 {
    let d = Sha256::digest(bytes);
    u64::from_be_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

/// A model as read from or written to an envelope.
#[derive(Debug, Clone, PartialEq)]
pub enum ExchangeModel {
    Local(LocalModel),
    Ensemble(EnsembleModel),
}

impl ExchangeModel {
    pub fn dim(&self) -> usize {
        match self {
            ExchangeModel::Local(m) => m.dim,
            ExchangeModel::Ensemble(m) => m.dim(),
        }
    }

    /// `tau_hat(x)` for a local model, `T(x, 1)` for an ensemble.
    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        match self {
            ExchangeModel::Local(m) => m.predict_tau(x),
            ExchangeModel::Ensemble(m) => m.predict_star(x),
        }
    }
}

impl From<LocalModel> for ExchangeModel {
    fn from(m: LocalModel) -> Self {
        ExchangeModel::Local(m)
    }
}

impl From<EnsembleModel> for ExchangeModel {
    fn from(m: EnsembleModel) -> Self {
        ExchangeModel::Ensemble(m)
    }
}

/// Borrowed model handed to the exporter.
#[derive(Debug, Clone, Copy)]
pub enum ModelRef<'a> {
    Local(&'a LocalModel),
    Ensemble(&'a EnsembleModel),
}

impl<'a> From<&'a LocalModel> for ModelRef<'a> {
    fn from(m: &'a LocalModel) -> Self {
        ModelRef::Local(m)
    }
}

impl<'a> From<&'a EnsembleModel> for ModelRef<'a> {
    fn from(m: &'a EnsembleModel) -> Self {
        ModelRef::Ensemble(m)
    }
}

impl<'a> From<&'a ExchangeModel> for ModelRef<'a> {
    fn from(m: &'a ExchangeModel) -> Self {
        match m {
            ExchangeModel::Local(l) => ModelRef::Local(l),
            ExchangeModel::Ensemble(e) => ModelRef::Ensemble(e),
        }
    }
}

/// One tree of the payload.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvelopeTree {
    pub nodes: Vec<Node>,
    /// Per-node site mass; empty vectors for internal nodes and for local models.
    pub mass: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleHeader {
    pub method: EnsembleKind,
    pub site_ids: Vec<u32>,
    pub site_weights: Option<Vec<f64>>,
    pub fingerprint: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Trees(Vec<EnvelopeTree>),
    Oracle(OracleTau),
}

/// Parsed contents of a `.fedmodel` file.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelEnvelope {
    pub format_version: u32,
    pub site_id: u32,
    /// `causal_tree`, `causal_forest`, `oracle`, `ensemble_tree` or `ensemble_forest`.
    pub learner: String,
    pub n_k: usize,
    pub dim: usize,
    pub propensity: Option<PropensityModel>,
    pub ensemble: Option<EnsembleHeader>,
    pub payload: Payload,
    pub checksum: u64,
}

impl ModelEnvelope {
    /// Builds the envelope of a model; the checksum covers its canonical text.
    pub fn of<'a>(model: impl Into<ModelRef<'a>>) -> Self {
        let mut env = match model.into() {
            ModelRef::Local(m) => {
                let (learner, payload) = match &m.fit {
                    LocalFit::Tree(t) => ("causal_tree", Payload::Trees(vec![plain_tree(t)])),
                    LocalFit::Forest(f) => (
                        "causal_forest",
                        Payload::Trees(f.trees().iter().map(plain_tree).collect()),
                    ),
                    LocalFit::Oracle(tau) => ("oracle", Payload::Oracle(tau.clone())),
                };
                ModelEnvelope {
                    format_version: FORMAT_VERSION,
                    site_id: m.site_id,
                    learner: learner.into(),
                    n_k: m.n_k,
                    dim: m.dim,
                    propensity: m.propensity.clone(),
                    ensemble: None,
                    payload,
                    checksum: 0,
                }
            }
            ModelRef::Ensemble(e) => {
                let trees = e
                    .trees()
                    .iter()
                    .zip(e.site_mass())
                    .map(|(t, m)| EnvelopeTree {
                        nodes: wire_nodes(t),
                        mass: m.clone(),
                    })
                    .collect();
                ModelEnvelope {
                    format_version: FORMAT_VERSION,
                    site_id: e.site_ids()[0],
                    learner: match e.kind() {
                        EnsembleKind::Tree => "ensemble_tree".into(),
                        EnsembleKind::Forest => "ensemble_forest".into(),
                    },
                    n_k: e.n_subjects(),
                    dim: e.dim(),
                    propensity: None,
                    ensemble: Some(EnsembleHeader {
                        method: e.kind(),
                        site_ids: e.site_ids().to_vec(),
                        site_weights: e.site_weighted().then(|| e.level_weights().to_vec()),
                        fingerprint: e.table_fingerprint(),
                    }),
                    payload: Payload::Trees(trees),
                    checksum: 0,
                }
            }
        };
        env.checksum = digest64(env.body().as_bytes());
        env
    }

    /// Canonical text without the checksum line.
    fn body(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "fedmodel {}", self.format_version);
        let _ = writeln!(s, "site_id {}", self.site_id);
        let _ = writeln!(s, "learner {}", self.learner);
        let _ = writeln!(s, "n_k {}", self.n_k);
        let _ = writeln!(s, "dim {}", self.dim);
        let _ = writeln!(s, "propensity {}", propensity_text(self.propensity.as_ref()));
        if let Some(h) = &self.ensemble {
            let _ = writeln!(s, "sites {}", join(h.site_ids.iter().map(u32::to_string)));
            let _ = writeln!(
                s,
                "site_weights {}",
                h.site_weights
                    .as_ref()
                    .map_or_else(|| "none".to_string(), |w| join(w.iter().map(|v| format_real(*v))))
            );
            let _ = writeln!(s, "fingerprint {:016x}", h.fingerprint);
        }
        match &self.payload {
            Payload::Oracle(tau) => {
                let _ = writeln!(s, "oracle {}", oracle_text(tau));
            }
            Payload::Trees(trees) => {
                let _ = writeln!(s, "trees {}", trees.len());
                for (t, tree) in trees.iter().enumerate() {
                    let _ = writeln!(s, "tree {t} {}", tree.nodes.len());
                    for (id, node) in tree.nodes.iter().enumerate() {
                        let _ = writeln!(s, "{}", node_text(id, node));
                        if let Some(m) = tree.mass.get(id).filter(|m| !m.is_empty()) {
                            let _ = writeln!(s, "mass {id} {}", join(m.iter().map(|v| format_real(*v))));
                        }
                    }
                }
            }
        }
        s
    }

    /// Full canonical text including the checksum line.
    pub fn to_text(&self) -> String {
        let mut s = self.body();
        let _ = writeln!(s, "checksum {:016x}", self.checksum);
        s
    }

    /// Parses and verifies an envelope. The version is checked first, then
    /// the checksum, then the structure.
    pub fn parse(text: &str) -> Result<Self> {
        let first = text
            .lines()
            .next()
            .ok_or_else(|| Error::Format("empty envelope".into()))?;
        let version = match first.split_once(' ') {
            Some(("fedmodel", v)) => v
                .parse::<u32>()
                .map_err(|_| Error::Format(format!("bad version field {v:?}")))?,
            _ => return Err(Error::Format("missing fedmodel header line".into())),
        };
        if !SUPPORTED_VERSIONS.contains(&version) {
            return Err(Error::Version {
                found: version,
                supported: SUPPORTED_VERSIONS.to_vec(),
            });
        }
        let body_end = text
            .rfind("\nchecksum ")
            .ok_or_else(|| Error::Format("missing checksum line".into()))?
            + 1;
        let (body, tail) = text.split_at(body_end);
        let hex = tail
            .strip_prefix("checksum ")
            .and_then(|t| t.strip_suffix('\n'))
            .filter(|h| h.len() == 16)
            .ok_or_else(|| Error::Format("malformed checksum line".into()))?;
        let stored = u64::from_str_radix(hex, 16).map_err(|_| Error::Format("malformed checksum line".into()))?;
        let actual = digest64(body.as_bytes());
        if stored != actual {
            return Err(Error::Integrity(format!(
                "checksum mismatch: stored {stored:016x}, computed {actual:016x}"
            )));
        }
        let mut env = Parser::new(body).envelope(version)?;
        env.checksum = stored;
        Ok(env)
    }

    /// Rebuilds the model described by the envelope.
    pub fn into_model(self) -> Result<ExchangeModel> {
        if self.dim == 0 {
            return Err(Error::Format("dimension must be positive".into()));
        }
        match (self.ensemble, self.payload) {
            (None, Payload::Oracle(tau)) => {
                if self.learner != "oracle" {
                    return Err(Error::Format(format!(
                        "learner {} with an oracle payload",
                        self.learner
                    )));
                }
                if self.n_k == 0 {
                    return Err(Error::Format("n_k must be positive".into()));
                }
                let mut m = LocalModel::oracle(self.site_id, self.dim, self.n_k, tau);
                m.propensity = self.propensity;
                Ok(ExchangeModel::Local(m))
            }
            (None, Payload::Trees(trees)) => {
                if self.n_k == 0 {
                    return Err(Error::Format("n_k must be positive".into()));
                }
                let schema = FeatureSchema::numeric(self.dim);
                let mut built = Vec::with_capacity(trees.len());
                for (t, tree) in trees.into_iter().enumerate() {
                    if tree.mass.iter().any(|m| !m.is_empty()) {
                        return Err(Error::Format(format!("tree {t}: site mass in a local model")));
                    }
                    built.push(tree_from_nodes(tree.nodes, schema.clone(), |_, count| count as f64, t)?);
                }
                let fit = match self.learner.as_str() {
                    "causal_tree" if built.len() == 1 => LocalFit::Tree(built.pop().expect("one tree")),
                    "causal_forest" if !built.is_empty() => {
                        LocalFit::Forest(ForestModel::from_trees(built).map_err(as_format)?)
                    }
                    other => {
                        return Err(Error::Format(format!(
                            "learner {other} does not match a payload of {} trees",
                            built.len()
                        )))
                    }
                };
                Ok(ExchangeModel::Local(LocalModel {
                    site_id: self.site_id,
                    dim: self.dim,
                    n_k: self.n_k,
                    fit,
                    propensity: self.propensity,
                }))
            }
            (Some(h), Payload::Trees(trees)) => {
                let k = h.site_ids.len();
                if k == 0 || h.site_ids[0] != self.site_id {
                    return Err(Error::Format(
                        "ensemble site list must start with the target site".into(),
                    ));
                }
                let expected = match h.method {
                    EnsembleKind::Tree => "ensemble_tree",
                    EnsembleKind::Forest => "ensemble_forest",
                };
                if self.learner != expected {
                    return Err(Error::Format(format!(
                        "learner {} does not match the method",
                        self.learner
                    )));
                }
                let mut kinds = vec![FeatureKind::Numeric; self.dim];
                kinds.push(FeatureKind::Categorical {
                    levels: k.max(2) as u32,
                });
                let schema = FeatureSchema::new(kinds).map_err(as_format)?;
                let mut built = Vec::with_capacity(trees.len());
                let mut masses = Vec::with_capacity(trees.len());
                for (t, tree) in trees.into_iter().enumerate() {
                    let mass = tree.mass;
                    if mass.len() != tree.nodes.len() {
                        return Err(Error::Format(format!("tree {t}: site mass does not cover its nodes")));
                    }
                    let model = tree_from_nodes(tree.nodes, schema.clone(), |id, _| mass[id].iter().sum(), t)?;
                    built.push(model);
                    masses.push(mass);
                }
                EnsembleModel::from_parts(
                    h.method,
                    built,
                    masses,
                    self.dim,
                    h.site_ids,
                    self.n_k,
                    h.site_weights,
                    h.fingerprint,
                )
                .map(ExchangeModel::Ensemble)
            }
            (Some(_), Payload::Oracle(_)) => Err(Error::Format("ensemble envelope with an oracle payload".into())),
        }
    }
}

fn as_format(e: Error) -> Error {
    match e {
        Error::Format(_) => e,
        other => Error::Format(other.to_string()),
    }
}

/// Nodes as they appear on the wire: leaf weights are not stored and are
/// rebuilt on import.
fn wire_nodes(t: &TreeModel) -> Vec<Node> {
    let mut nodes = t.nodes().to_vec();
    for node in &mut nodes {
        if let Node::Leaf { weight, .. } = node {
            *weight = 0.0;
        }
    }
    nodes
}

fn plain_tree(t: &TreeModel) -> EnvelopeTree {
    EnvelopeTree {
        nodes: wire_nodes(t),
        mass: vec![Vec::new(); t.nodes().len()],
    }
}

fn tree_from_nodes(
    mut nodes: Vec<Node>,
    schema: FeatureSchema,
    leaf_weight: impl Fn(usize, usize) -> f64,
    t: usize,
) -> Result<TreeModel> {
    for (id, node) in nodes.iter_mut().enumerate() {
        if let Node::Leaf { count, weight, .. } = node {
            *weight = leaf_weight(id, *count);
        }
    }
    TreeModel::from_nodes(nodes, schema).map_err(|e| Error::Format(format!("tree {t}: {e}")))
}

fn join(items: impl Iterator<Item = String>) -> String {
    let v: Vec<String> = items.collect();
    if v.is_empty() {
        "-".into()
    } else {
        v.join(",")
    }
}

fn propensity_text(p: Option<&PropensityModel>) -> String {
    let Some(p) = p else {
        return "none".into();
    };
    let (lo, hi) = p.clip;
    match &p.form {
        PropensityForm::Constant(v) => format!(
            "constant {} {} {} {}",
            format_real(*v),
            format_real(lo),
            format_real(hi),
            p.clipped_rows
        ),
        PropensityForm::Logistic {
            covariates,
            coefficients,
        } => format!(
            "logistic {} {} {} {} {}",
            format_real(lo),
            format_real(hi),
            p.clipped_rows,
            join(covariates.iter().map(usize::to_string)),
            join(coefficients.iter().map(|v| format_real(*v)))
        ),
    }
}

fn oracle_text(tau: &OracleTau) -> String {
    match tau {
        OracleTau::Affine { intercept, slopes } => {
            format!(
                "affine {} {}",
                format_real(*intercept),
                join(slopes.iter().map(|v| format_real(*v)))
            )
        }
        OracleTau::Benchmark { c, u, nonlinear } => format!(
            "benchmark {} {} {}",
            format_real(*c),
            format_real(*u),
            if *nonlinear { "nonlinear" } else { "linear" }
        ),
    }
}

fn node_text(id: usize, node: &Node) -> String {
    match node {
        Node::Internal {
            feature,
            rule: SplitRule::Numeric { threshold },
            left,
            right,
        } => format!("node {id} num {feature} {} {left} {right} - -", format_real(*threshold)),
        Node::Internal {
            feature,
            rule: SplitRule::Categorical { left: levels },
            left,
            right,
        } => format!(
            "node {id} cat {feature} {} {left} {right} - -",
            levels.iter().map(u32::to_string).collect::<Vec<_>>().join(";")
        ),
        Node::Leaf { value, count, .. } => {
            format!("node {id} leaf - - - - {} {count}", format_real(*value))
        }
    }
}

struct Parser<'a> {
    lines: std::iter::Peekable<std::iter::Enumerate<std::str::Lines<'a>>>,
}

impl<'a> Parser<'a> {
    fn new(body: &'a str) -> Self {
        Self {
            lines: body.lines().enumerate().peekable(),
        }
    }

    fn next_fields(&mut self, key: &str) -> Result<(usize, Vec<&'a str>)> {
        let (no, line) = self
            .lines
            .next()
            .ok_or_else(|| Error::Format(format!("envelope ends before the {key} line")))?;
        let mut fields = line.split(' ');
        if fields.next() != Some(key) {
            return Err(Error::Format(format!("line {}: expected {key}", no + 1)));
        }
        Ok((no + 1, fields.collect()))
    }

    fn single(&mut self, key: &str) -> Result<(usize, &'a str)> {
        let (no, f) = self.next_fields(key)?;
        match f.as_slice() {
            [v] => Ok((no, v)),
            _ => Err(Error::Format(format!("line {no}: {key} takes one value"))),
        }
    }

    fn peek_key(&mut self) -> Option<&'a str> {
        self.lines.peek().and_then(|(_, l)| l.split(' ').next())
    }

    fn envelope(mut self, version: u32) -> Result<ModelEnvelope> {
        self.next_fields("fedmodel")?;
        let (no, v) = self.single("site_id")?;
        let site_id = num::<u32>(v, no)?;
        let (_, learner) = self.single("learner")?;
        let (no, v) = self.single("n_k")?;
        let n_k = num::<usize>(v, no)?;
        let (no, v) = self.single("dim")?;
        let dim = num::<usize>(v, no)?;
        let (no, f) = self.next_fields("propensity")?;
        let propensity = parse_propensity(&f, no)?;

        let ensemble = if self.peek_key() == Some("sites") {
            let (no, v) = self.single("sites")?;
            let site_ids = list(v, no, num::<u32>)?;
            let (no, v) = self.single("site_weights")?;
            let site_weights = if v == "none" { None } else { Some(list(v, no, real)?) };
            let (no, v) = self.single("fingerprint")?;
            let fingerprint =
                u64::from_str_radix(v, 16).map_err(|_| Error::Format(format!("line {no}: bad fingerprint")))?;
            let method = match learner {
                "ensemble_tree" => EnsembleKind::Tree,
                "ensemble_forest" => EnsembleKind::Forest,
                other => {
                    return Err(Error::Format(format!(
                        "line {no}: learner {other} with ensemble fields"
                    )))
                }
            };
            Some(EnsembleHeader {
                method,
                site_ids,
                site_weights,
                fingerprint,
            })
        } else {
            None
        };

        let payload = if self.peek_key() == Some("oracle") {
            let (no, f) = self.next_fields("oracle")?;
            Payload::Oracle(parse_oracle(&f, no)?)
        } else {
            let (no, v) = self.single("trees")?;
            let n_trees = num::<usize>(v, no)?;
            if n_trees == 0 {
                return Err(Error::Format(format!("line {no}: zero trees")));
            }
            let mut trees = Vec::with_capacity(n_trees.min(1 << 16));
            for t in 0..n_trees {
                let (no, f) = self.next_fields("tree")?;
                let [idx, count] = f.as_slice() else {
                    return Err(Error::Format(format!("line {no}: tree takes index and node count")));
                };
                if num::<usize>(idx, no)? != t {
                    return Err(Error::Format(format!("line {no}: trees out of order")));
                }
                let count = num::<usize>(count, no)?;
                if count == 0 {
                    return Err(Error::Format(format!("line {no}: empty tree")));
                }
                let mut nodes = Vec::with_capacity(count.min(1 << 20));
                let mut mass = Vec::with_capacity(count.min(1 << 20));
                for id in 0..count {
                    let (no, f) = self.next_fields("node")?;
                    nodes.push(parse_node(&f, id, no)?);
                    if self.peek_key() == Some("mass") {
                        let (no, f) = self.next_fields("mass")?;
                        match f.as_slice() {
                            [i, values] if num::<usize>(i, no)? == id => mass.push(list(values, no, real)?),
                            _ => return Err(Error::Format(format!("line {no}: malformed mass record"))),
                        }
                    } else {
                        mass.push(Vec::new());
                    }
                }
                trees.push(EnvelopeTree { nodes, mass });
            }
            Payload::Trees(trees)
        };
        if let Some((no, _)) = self.lines.next() {
            return Err(Error::Format(format!("line {}: unexpected trailing content", no + 1)));
        }
        Ok(ModelEnvelope {
            format_version: version,
            site_id,
            learner: learner.to_string(),
            n_k,
            dim,
            propensity,
            ensemble,
            payload,
            checksum: 0,
        })
    }
}

fn num<T: std::str::FromStr>(s: &str, line: usize) -> Result<T> {
    s.parse::<T>()
        .map_err(|_| Error::Format(format!("line {line}: cannot parse {s:?}")))
}

fn real(s: &str, line: usize) -> Result<f64> {
    let v: f64 = num(s, line)?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Format(format!("line {line}: non-finite value {s:?}")))
    }
}

fn list<T>(s: &str, line: usize, item: impl Fn(&str, usize) -> Result<T>) -> Result<Vec<T>> {
    if s == "-" {
        return Ok(Vec::new());
    }
    s.split(',').map(|p| item(p, line)).collect()
}

fn dash(s: &str, line: usize) -> Result<()> {
    if s == "-" {
        Ok(())
    } else {
        Err(Error::Format(format!("line {line}: expected '-' got {s:?}")))
    }
}

fn parse_propensity(f: &[&str], no: usize) -> Result<Option<PropensityModel>> {
    let model = match f {
        ["none"] => return Ok(None),
        ["constant", p, lo, hi, clipped] => {
            let mut m = PropensityModel::constant(real(p, no)?).map_err(as_format)?;
            m = m.with_clip(real(lo, no)?, real(hi, no)?).map_err(as_format)?;
            m.clipped_rows = num(clipped, no)?;
            m
        }
        ["logistic", lo, hi, clipped, covs, coefs] => {
            let mut m =
                PropensityModel::logistic(list(covs, no, num::<usize>)?, list(coefs, no, real)?).map_err(as_format)?;
            m = m.with_clip(real(lo, no)?, real(hi, no)?).map_err(as_format)?;
            m.clipped_rows = num(clipped, no)?;
            m
        }
        _ => return Err(Error::Format(format!("line {no}: malformed propensity"))),
    };
    Ok(Some(model))
}

fn parse_oracle(f: &[&str], no: usize) -> Result<OracleTau> {
    match f {
        ["affine", intercept, slopes] => Ok(OracleTau::Affine {
            intercept: real(intercept, no)?,
            slopes: list(slopes, no, real)?,
        }),
        ["benchmark", c, u, shape] => Ok(OracleTau::Benchmark {
            c: real(c, no)?,
            u: real(u, no)?,
            nonlinear: match *shape {
                "linear" => false,
                "nonlinear" => true,
                _ => return Err(Error::Format(format!("line {no}: unknown oracle shape"))),
            },
        }),
        _ => Err(Error::Format(format!("line {no}: malformed oracle record"))),
    }
}

fn parse_node(f: &[&str], id: usize, no: usize) -> Result<Node> {
    let [idx, kind, feature, rule, left, right, value, count] = f else {
        return Err(Error::Format(format!("line {no}: node records have eight fields")));
    };
    if num::<usize>(idx, no)? != id {
        return Err(Error::Format(format!("line {no}: node ids out of order")));
    }
    match *kind {
        "leaf" => {
            for s in [feature, rule, left, right] {
                dash(s, no)?;
            }
            Ok(Node::Leaf {
                value: real(value, no)?,
                count: num(count, no)?,
                weight: 0.0,
            })
        }
        "num" | "cat" => {
            dash(value, no)?;
            dash(count, no)?;
            let rule = if *kind == "num" {
                SplitRule::Numeric {
                    threshold: real(rule, no)?,
                }
            } else {
                let levels: Vec<u32> = rule.split(';').map(|p| num(p, no)).collect::<Result<_>>()?;
                if levels.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::Format(format!("line {no}: levels must be strictly increasing")));
                }
                SplitRule::Categorical { left: levels }
            };
            Ok(Node::Internal {
                feature: num(feature, no)?,
                rule,
                left: num(left, no)?,
                right: num(right, no)?,
            })
        }
        other => Err(Error::Format(format!("line {no}: unknown node kind {other:?}"))),
    }
}

/// Writes the canonical envelope of `model` to `path`.
pub fn export_model<'a>(model: impl Into<ModelRef<'a>>, path: impl AsRef<Path>) -> Result<ModelEnvelope> {
    let env = ModelEnvelope::of(model);
    let path = path.as_ref();
    std::fs::write(path, env.to_text()).map_err(|e| Error::io(path, e))?;
    Ok(env)
}

/// Reads and verifies an envelope without rebuilding the model.
pub fn read_envelope(path: impl AsRef<Path>) -> Result<ModelEnvelope> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let text = String::from_utf8(bytes).map_err(|_| Error::Format(format!("{} is not UTF-8 text", path.display())))?;
    ModelEnvelope::parse(&text)
}

pub fn import_model(path: impl AsRef<Path>) -> Result<ExchangeModel> {
    read_envelope(path)?.into_model()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf_model(v: f64) -> LocalModel {
        LocalModel {
            site_id: 2,
            dim: 3,
            n_k: 40,
            fit: LocalFit::Tree(TreeModel::constant(v, 40, FeatureSchema::numeric(3))),
            propensity: Some(PropensityModel::constant(0.5).unwrap()),
        }
    }

    #[test]
    fn single_leaf_text_is_canonical() {
        let m = leaf_model(-0.1);
        let a = ModelEnvelope::of(&m).to_text();
        let b = ModelEnvelope::of(&m).to_text();
        assert_eq!(a, b);
        assert_eq!(a.lines().filter(|l| l.starts_with("node ")).count(), 1);
        let back = ModelEnvelope::parse(&a).unwrap().into_model().unwrap();
        assert_eq!(ModelEnvelope::of(&back).to_text(), a);
        assert_eq!(back.predict(&[1.0, 2.0, 3.0]).unwrap(), -0.1);
    }

    #[test]
    fn version_is_checked_before_checksum() {
        let text = ModelEnvelope::of(&leaf_model(1.0))
            .to_text()
            .replacen("fedmodel 1", "fedmodel 99", 1);
        match ModelEnvelope::parse(&text) {
            Err(Error::Version { found, supported }) => {
                assert_eq!(found, 99);
                assert_eq!(supported, vec![1]);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn tampering_and_truncation() {
        let text = ModelEnvelope::of(&leaf_model(1.0)).to_text();
        let tampered = text.replacen("site_id 2", "site_id 3", 1);
        assert!(matches!(ModelEnvelope::parse(&tampered), Err(Error::Integrity(_))));
        for cut in [0, 5, text.len() / 2, text.len() - 3] {
            assert!(
                matches!(ModelEnvelope::parse(&text[..cut]), Err(Error::Format(_))),
                "cut {cut}"
            );
        }
    }

    #[test]
    fn oracle_round_trip() {
        let m = LocalModel::oracle(
            4,
            2,
            10,
            OracleTau::Benchmark {
                c: 0.6,
                u: 0.3,
                nonlinear: false,
            },
        );
        let back = ModelEnvelope::parse(&ModelEnvelope::of(&m).to_text())
            .unwrap()
            .into_model()
            .unwrap();
        assert_eq!(back, ExchangeModel::Local(m));
    }

    #[test]
    fn digest_is_stable() {
        // first 8 bytes of SHA-256("abc")
        assert_eq!(digest64(b"abc"), 0xba7816bf8f01cfea);
    }
}
