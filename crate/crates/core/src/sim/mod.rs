//! Monte-Carlo benchmark.
//!
//! Site `k` draws `X ~ N(0, I_D)`, treatment `Z ~ Bernoulli(e(X))` and
//!
//! ```text
//! Y = m(X, k) + (Z - e(X)) tau(X, k) + eps,   eps ~ N(0, 1)
//! m(x, k)   = x1 / 2 + x2 + x3 + x4 + (x1 - 3) h_k
//! tau(x, k) = 1{x1 > 0} x1 + (x1 - 3) h_k
//! ```
//!
//! with `h_k = c U_k` (or `U_k^c` for the nonlinear grouping). Every estimator
//! is scored by its mean squared error against `tau(., 1)` on a fresh test
//! sample from site 1's covariate law.

mod config;
mod output;
mod policy;
mod run;

pub use config::{
    load_configs, parse_configs, Grouping, LearnerChoice, PropensityChoice, PropensityDesign, SimulationConfig,
};
pub use output::{write_plot_csv, write_results_csv, write_summary_csv};
pub use policy::policy_value;
pub use run::{
    run_experiment, run_replicate, Estimator, EstimatorResult, ExperimentResult, ReplicateResult, SummaryRow,
    ESTIMATORS,
};

use rand::Rng;
use rand_distr::{Bernoulli, Distribution, StandardNormal, Uniform};

use crate::dataset::SiteDataset;
use crate::error::{Error, Result};
use crate::local::{expit, OracleTau};
use crate::rng::SeedSpec;

/// Site-level shift `h_k` for effect `u`.
fn site_shift(config: &SimulationConfig, u: f64) -> f64 {
    match config.grouping {
        Grouping::NonlinearContinuous => u.powf(config.c),
        _ => config.c * u,
    }
}

/// `tau(x, k)` given the site effect `u = U_k`.
pub fn true_tau(x: &[f64], u: f64, config: &SimulationConfig) -> f64 {
    let x1 = x[0];
    let local = if x1 > 0.0 { x1 } else { 0.0 };
    local + (x1 - 3.0) * site_shift(config, u)
}

/// The true effect function of a site as an oracle.
pub fn oracle_tau(u: f64, config: &SimulationConfig) -> OracleTau {
    OracleTau::Benchmark {
        c: config.c,
        u,
        nonlinear: config.grouping == Grouping::NonlinearContinuous,
    }
}

/// `m(x, k)`.
pub fn baseline_mean(x: &[f64], u: f64, config: &SimulationConfig) -> f64 {
    0.5 * x[0] + x[1] + x[2] + x[3] + (x[0] - 3.0) * site_shift(config, u)
}

/// True treatment probability.
pub fn true_propensity(x: &[f64], config: &SimulationConfig) -> f64 {
    match config.propensity {
        PropensityDesign::Rct => 0.5,
        PropensityDesign::Observational => expit(0.6 * x[0]),
    }
}

/// `U_1..U_K`: parity for discrete grouping (odd sites 0, even sites 1),
/// otherwise uniform draws on `[0, 1]` or `[0, 3]` for the nonlinear case.
pub fn draw_site_effects(config: &SimulationConfig, seed: SeedSpec) -> Vec<f64> {
    let k = config.k;
    match config.grouping {
        Grouping::Discrete => (1..=k).map(|j| if j % 2 == 0 { 1.0 } else { 0.0 }).collect(),
        Grouping::Continuous | Grouping::NonlinearContinuous => {
            let hi = if config.grouping == Grouping::Continuous {
                1.0
            } else {
                3.0
            };
            let dist = Uniform::new_inclusive(0.0, hi).expect("valid bounds");
            let mut rng = seed.rng();
            (0..k).map(|_| dist.sample(&mut rng)).collect()
        }
    }
}

/// Covariates for `n` subjects, row-major.
pub fn draw_covariates(n: usize, dim: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..n * dim).map(|_| rng.sample(StandardNormal)).collect()
}

/// Draws site `k` (1-based). An all-treated or all-control draw is
/// redrawn once before giving up.
pub fn generate_site(k: usize, config: &SimulationConfig, u: &[f64], seed: SeedSpec) -> Result<SiteDataset> {
    if k == 0 || k > config.k || u.len() != config.k {
        return Err(Error::Validation(format!("site {k} outside 1..={}", config.k)));
    }
    let n = config.site_size(k);
    let dim = config.dim;
    let uk = u[k - 1];
    let mut rng = seed.rng();
    let x = draw_covariates(n, dim, &mut rng);
    let e: Vec<f64> = (0..n)
        .map(|i| true_propensity(&x[i * dim..(i + 1) * dim], config))
        .collect();
    let draw_z = |rng: &mut crate::rng::Stream| -> Vec<bool> {
        e.iter()
            .map(|&p| Bernoulli::new(p).expect("probability in [0,1]").sample(rng))
            .collect()
    };
    let mut z = draw_z(&mut rng);
    let degenerate = |z: &[bool]| z.iter().all(|&t| t) || z.iter().all(|&t| !t);
    if degenerate(&z) {
        z = draw_z(&mut rng);
        if degenerate(&z) {
            return Err(Error::Positivity(format!(
                "site {k}: every subject landed in one arm twice"
            )));
        }
    }
    let y: Vec<f64> = (0..n)
        .map(|i| {
            let xi = &x[i * dim..(i + 1) * dim];
            let zi = if z[i] { 1.0 } else { 0.0 };
            let eps: f64 = rng.sample(StandardNormal);
            baseline_mean(xi, uk, config) + (zi - e[i]) * true_tau(xi, uk, config) + eps
        })
        .collect();
    SiteDataset::new(k as u32, y, z, x, dim)
}
