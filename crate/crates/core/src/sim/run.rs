use std::time::{Duration, Instant};

use rayon::prelude::*;

use super::config::{LearnerChoice, SimulationConfig};
use super::{draw_covariates, draw_site_effects, generate_site, oracle_tau, true_tau};
use crate::baselines::{fit_ewma, fit_loc, fit_ma, fit_reference, fit_stack, Reference};
use crate::dataset::{split_site1, SiteDataset};
use crate::ensemble::{build_augmented, fit_ef_with, fit_et, AugmentedTable};
use crate::error::{Error, Result};
use crate::local::{fit_local, fit_propensity, site_size_weights, LocalModel, PropensityModel};
use crate::rng::SeedSpec;
use crate::CateEstimator;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Estimator {
    Loc,
    Ma,
    Ewma,
    EwmaOracle,
    Stack,
    StackOracle,
    Et,
    EtOracle,
    Ef,
    EfOracle,
}

/// Output order of the estimators.
pub const ESTIMATORS: [Estimator; 10] = [
    Estimator::Loc,
    Estimator::Ma,
    Estimator::Ewma,
    Estimator::EwmaOracle,
    Estimator::Stack,
    Estimator::StackOracle,
    Estimator::Et,
    Estimator::EtOracle,
    Estimator::Ef,
    Estimator::EfOracle,
];

impl Estimator {
    pub fn name(&self) -> &'static str {
        match self {
            Estimator::Loc => "LOC",
            Estimator::Ma => "MA",
            Estimator::Ewma => "EWMA",
            Estimator::EwmaOracle => "EWMA-oracle",
            Estimator::Stack => "STACK",
            Estimator::StackOracle => "STACK-oracle",
            Estimator::Et => "ET",
            Estimator::EtOracle => "ET-oracle",
            Estimator::Ef => "EF",
            Estimator::EfOracle => "EF-oracle",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimatorResult {
    pub estimator: Estimator,
    pub mse: f64,
    /// `mse / mse_LOC`.
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateResult {
    pub replicate: usize,
    /// In [`ESTIMATORS`] order.
    pub results: Vec<EstimatorResult>,
    pub elapsed: Duration,
}

impl ReplicateResult {
    pub fn get(&self, e: Estimator) -> &EstimatorResult {
        self.results
            .iter()
            .find(|r| r.estimator == e)
            .expect("every estimator is run")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub estimator: Estimator,
    pub mean_ratio: f64,
    /// Sample standard deviation; zero with fewer than two replicates.
    pub sd_ratio: f64,
    pub n_ok: usize,
    /// Mean MSE over mean LOC MSE.
    pub ratio_of_means: f64,
}

#[derive(Debug)]
pub struct ExperimentResult {
    pub config: SimulationConfig,
    /// One entry per replicate, in replicate order.
    pub outcomes: Vec<Result<ReplicateResult>>,
}

/// Largest tolerated share of failed replicates.
pub const MAX_FAILURE_SHARE: f64 = 0.05;

impl ExperimentResult {
    pub fn successes(&self) -> impl Iterator<Item = &ReplicateResult> {
        self.outcomes.iter().filter_map(|o| o.as_ref().ok())
    }

    pub fn failures(&self) -> impl Iterator<Item = &Error> {
        self.outcomes.iter().filter_map(|o| o.as_ref().err())
    }

    pub fn failure_count(&self) -> usize {
        self.failures().count()
    }

    /// Fails with the first replicate error when more than 5% failed.
    pub fn check(&self) -> Result<()> {
        let failed = self.failure_count();
        if failed as f64 > MAX_FAILURE_SHARE * self.outcomes.len() as f64 {
            let first = self.failures().next().expect("at least one failure");
            return Err(Error::Replicate {
                replicate: match first {
                    Error::Replicate { replicate, .. } => *replicate,
                    _ => 0,
                },
                stage: format!("{failed} of {} replicates failed", self.outcomes.len()),
                cause: Box::new(Error::Fit(first.to_string())),
            });
        }
        Ok(())
    }

    pub fn summary(&self) -> Vec<SummaryRow> {
        let ok: Vec<&ReplicateResult> = self.successes().collect();
        let n = ok.len();
        let mean_loc = ok.iter().map(|r| r.get(Estimator::Loc).mse).sum::<f64>() / n as f64;
        ESTIMATORS
            .iter()
            .map(|&e| {
                let ratios: Vec<f64> = ok.iter().map(|r| r.get(e).ratio).collect();
                let mean = ratios.iter().sum::<f64>() / n as f64;
                let sd = if n > 1 {
                    (ratios.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
                } else {
                    0.0
                };
                let mean_mse = ok.iter().map(|r| r.get(e).mse).sum::<f64>() / n as f64;
                SummaryRow {
                    estimator: e,
                    mean_ratio: mean,
                    sd_ratio: sd,
                    n_ok: n,
                    ratio_of_means: mean_mse / mean_loc,
                }
            })
            .collect()
    }

    pub fn mean_ratio(&self, e: Estimator) -> f64 {
        self.summary()
            .into_iter()
            .find(|s| s.estimator == e)
            .map_or(f64::NAN, |s| s.mean_ratio)
    }
}

/// Runs every replicate (in parallel on the current rayon pool). Results do
/// not depend on the number of threads.
pub fn run_experiment(config: &SimulationConfig) -> Result<ExperimentResult> {
    config.validate()?;
    let outcomes: Vec<Result<ReplicateResult>> = (0..config.replicates)
        .into_par_iter()
        .map(|r| run_replicate(config, r))
        .collect();
    for e in outcomes.iter().filter_map(|o| o.as_ref().err()) {
        log::warn!("{e}");
    }
    Ok(ExperimentResult {
        config: config.clone(),
        outcomes,
    })
}

fn stage<T>(replicate: usize, name: &str, r: Result<T>) -> Result<T> {
    r.map_err(|cause| Error::Replicate {
        replicate,
        stage: name.to_string(),
        cause: Box::new(cause),
    })
}

fn fit_site_propensity(config: &SimulationConfig, data: &SiteDataset) -> Result<PropensityModel> {
    let (kind, covariates) = config.propensity_model.kind_and_covariates(config.dim);
    fit_propensity(data, kind, &covariates)
}

fn mse(est: &dyn CateEstimator, test_x: &[f64], truth: &[f64], dim: usize) -> Result<f64> {
    let mut sum = 0.0;
    for (i, t) in truth.iter().enumerate() {
        let e = est.estimate(&test_x[i * dim..(i + 1) * dim])? - t;
        sum += e * e;
    }
    Ok(sum / truth.len() as f64)
}

/// One replicate of the benchmark. All randomness hangs off
/// `(seed, "rep", r)`.
pub fn run_replicate(config: &SimulationConfig, r: usize) -> Result<ReplicateResult> {
    let started = Instant::now();
    config.validate()?;
    let rep = SeedSpec::new(config.seed).child("rep", r as u64);
    let k = config.k;
    let dim = config.dim;

    let u = draw_site_effects(config, rep.child("effects", 0));
    let sites: Vec<SiteDataset> = stage(
        r,
        "generate",
        (1..=k)
            .map(|j| generate_site(j, config, &u, rep.child("site", j as u64)))
            .collect(),
    )?;
    let test_x = draw_covariates(config.n_te, dim, &mut rep.stream("test", 0));
    let truth: Vec<f64> = test_x.chunks(dim).map(|x| true_tau(x, u[0], config)).collect();

    let site1 = &sites[0];
    let split = stage(
        r,
        "split",
        split_site1(site1, config.split_fraction, &mut rep.stream("split", 0)),
    )?;
    let training = site1.subset(&split.training)?;
    let estimation = site1.subset(&split.estimation)?;
    let learner = config.fitted_learner();

    // local models: site 1 from its training part, the others from all rows
    let fitted: Vec<LocalModel> = stage(
        r,
        "local",
        (0..k)
            .into_par_iter()
            .map(|j| {
                let data = if j == 0 { &training } else { &sites[j] };
                if config.local_learner == LearnerChoice::Oracle {
                    return Ok(LocalModel::oracle(
                        data.site_id(),
                        dim,
                        data.len(),
                        oracle_tau(u[j], config),
                    ));
                }
                let prop = fit_site_propensity(config, data)?;
                fit_local(data, &learner, &prop, rep.child("local", j as u64 + 1))
            })
            .collect(),
    )?;
    let oracles: Vec<LocalModel> = (0..k)
        .map(|j| {
            let n = if j == 0 { training.len() } else { sites[j].len() };
            LocalModel::oracle((j + 1) as u32, dim, n, oracle_tau(u[j], config))
        })
        .collect();
    let sizes: Vec<usize> = (0..k)
        .map(|j| if j == 0 { training.len() } else { sites[j].len() })
        .collect();
    let eta = if config.site_weights {
        Some(site_size_weights(&sizes)?)
    } else {
        None
    };

    let loc = stage(r, "loc", {
        let prop = fit_site_propensity(config, site1)?;
        fit_loc(site1, &learner, &prop, rep.child("loc", 0))
    })?;
    let reference = stage(r, "reference", {
        let prop = fit_site_propensity(config, &estimation)?;
        fit_reference(&estimation, &learner, &prop, rep.child("reference", 0))
    })?;
    let truth_ref = Reference::Truth(oracle_tau(u[0], config));

    let ma = stage(r, "ma", fit_ma(&fitted))?;
    let ewma = stage(r, "ewma", fit_ewma(&fitted, &estimation, &reference))?;
    let ewma_o = stage(r, "ewma-oracle", fit_ewma(&oracles, &estimation, &truth_ref))?;
    let stack = stage(r, "stack", fit_stack(&fitted, &estimation, &reference))?;
    let stack_o = stage(r, "stack-oracle", fit_stack(&oracles, &estimation, &truth_ref))?;

    let table: AugmentedTable = stage(r, "augment", build_augmented(&estimation, &fitted, eta.as_ref()))?;
    let table_o = stage(
        r,
        "augment-oracle",
        build_augmented(&estimation, &oracles, eta.as_ref()),
    )?;
    let et_params = config.et_params();
    let ef_params = config.ef_params();
    let et = stage(r, "et", fit_et(&table, &et_params, rep.child("et", 0)))?;
    let et_o = stage(r, "et-oracle", fit_et(&table_o, &et_params, rep.child("et-oracle", 0)))?;
    let ef = stage(
        r,
        "ef",
        fit_ef_with(&table, &ef_params, config.b, rep.child("ef", 0), config.ef_sampling),
    )?;
    let ef_o = stage(
        r,
        "ef-oracle",
        fit_ef_with(
            &table_o,
            &ef_params,
            config.b,
            rep.child("ef-oracle", 0),
            config.ef_sampling,
        ),
    )?;

    let models: [(Estimator, &dyn CateEstimator); 10] = [
        (Estimator::Loc, &loc),
        (Estimator::Ma, &ma),
        (Estimator::Ewma, &ewma),
        (Estimator::EwmaOracle, &ewma_o),
        (Estimator::Stack, &stack),
        (Estimator::StackOracle, &stack_o),
        (Estimator::Et, &et),
        (Estimator::EtOracle, &et_o),
        (Estimator::Ef, &ef),
        (Estimator::EfOracle, &ef_o),
    ];
    let mut mses = Vec::with_capacity(models.len());
    for (e, m) in models {
        mses.push((e, stage(r, "evaluate", mse(m, &test_x, &truth, dim))?));
    }
    let loc_mse = mses[0].1;
    if !(loc_mse > 0.0) {
        return stage(
            r,
            "evaluate",
            Err(Error::DegenerateEstimand("LOC has zero test error".into())),
        );
    }
    Ok(ReplicateResult {
        replicate: r,
        results: mses
            .into_iter()
            .map(|(estimator, mse)| EstimatorResult {
                estimator,
                mse,
                ratio: mse / loc_mse,
            })
            .collect(),
        elapsed: started.elapsed(),
    })
}
