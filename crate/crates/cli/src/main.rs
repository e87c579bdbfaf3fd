use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use fedtree_core::dataset::{load_csv, split_site1, SiteDataset};
use fedtree_core::ensemble::{build_augmented, fit_ef, fit_et, EnsembleModel};
use fedtree_core::exchange::{export_model, import_model, ExchangeModel, EXTENSION};
use fedtree_core::local::{fit_local, fit_propensity, site_size_weights, LocalLearner, LocalModel, PropensityKind};
use fedtree_core::rng::SeedSpec;
use fedtree_core::sim::{
    load_configs, policy_value, run_experiment, write_plot_csv, write_results_csv, write_summary_csv,
};
use fedtree_core::tree::{default_complexity_grid, FitParams};
use fedtree_core::{CateEstimator, Error, Result};

#[derive(Parser)]
#[command(
    name = "fedtree",
    version,
    about = "Tree-based averaging of treatment effect models across data sites"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a site's local CATE model and write it as an envelope.
    FitLocal(FitLocalArgs),
    /// Fit an ensemble tree or forest at the target site from exchanged models.
    Ensemble(EnsembleArgs),
    /// Print the model-averaged estimate at one covariate vector.
    Predict(QueryArgs),
    /// Print the per-site weights at one covariate vector.
    Weights(QueryArgs),
    /// Run the Monte-Carlo benchmark described by a TOML config.
    Simulate(SimulateArgs),
    /// Estimate the value of the rule "treat when the estimated effect is positive".
    EvaluatePolicy(PolicyArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Learner {
    Ct,
    Cf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Propensity {
    Constant,
    Logit,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Et,
    Ef,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Args)]
struct LearnerArgs {
    #[arg(long, value_enum, default_value = "ct")]
    learner: Learner,
    #[arg(long, value_enum, default_value = "constant")]
    propensity: Propensity,
    /// Minimum rows per leaf of the local trees.
    #[arg(long, default_value_t = 5)]
    min_leaf: usize,
    #[arg(long)]
    max_depth: Option<usize>,
    /// Skip cross-validated pruning of the causal tree.
    #[arg(long)]
    no_prune: bool,
    /// Use all rows for both splits and leaf values of the causal tree.
    #[arg(long)]
    no_honest: bool,
    /// Trees in a causal forest.
    #[arg(long, default_value_t = 200)]
    trees: usize,
}

impl LearnerArgs {
    fn learner(&self) -> Result<LocalLearner> {
        if self.min_leaf == 0 {
            return Err(Error::Config("--min-leaf must be positive".into()));
        }
        Ok(match self.learner {
            Learner::Ct => LocalLearner::CausalTree(FitParams {
                honest: !self.no_honest,
                min_leaf: self.min_leaf,
                max_depth: self.max_depth,
                prune: !self.no_prune,
                ..FitParams::single_tree()
            }),
            Learner::Cf => {
                if self.trees == 0 {
                    return Err(Error::Config("--trees must be positive".into()));
                }
                LocalLearner::CausalForest {
                    params: FitParams {
                        min_leaf: self.min_leaf,
                        max_depth: self.max_depth,
                        ..FitParams::forest()
                    },
                    trees: self.trees,
                }
            }
        })
    }
}

#[derive(Args)]
struct FitLocalArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    learner: LearnerArgs,
    /// Defaults to the trailing digits of the data file name.
    #[arg(long)]
    site_id: Option<u32>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args)]
struct EnsembleArgs {
    /// The target site's rows.
    #[arg(long)]
    target: PathBuf,
    /// Directory of `.fedmodel` envelopes from the other sites.
    #[arg(long)]
    models: PathBuf,
    #[arg(long, value_enum, default_value = "ef")]
    method: Method,
    /// Trees in the ensemble forest.
    #[arg(long, default_value_t = 2000)]
    b: usize,
    /// Share of target rows used to fit the target's own local model.
    #[arg(long, default_value_t = 0.5)]
    split_frac: f64,
    #[arg(long, value_enum, default_value = "off")]
    site_weights: Switch,
    #[arg(long, default_value_t = 1)]
    target_id: u32,
    /// Minimum rows per leaf of the ensemble trees.
    #[arg(long, default_value_t = 5)]
    ensemble_min_leaf: usize,
    /// Smallest relative complexity penalty the ensemble tree may select.
    #[arg(long, default_value_t = 1e-5)]
    complexity_floor: f64,
    /// Learner settings for the target's own local model.
    #[command(flatten)]
    learner: LearnerArgs,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args)]
struct QueryArgs {
    #[arg(long)]
    model: PathBuf,
    /// Comma-separated covariates.
    #[arg(long, allow_hyphen_values = true)]
    x: String,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    config: PathBuf,
    /// Per-replicate results; `summary.csv` and `plot.csv` are written next to it.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; defaults to the number of cores.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct PolicyArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_enum, default_value = "logit")]
    propensity: Propensity,
}

fn propensity_kind(p: Propensity) -> PropensityKind {
    match p {
        Propensity::Constant => PropensityKind::Constant,
        Propensity::Logit => PropensityKind::Logistic,
    }
}

fn fit_site_propensity(data: &SiteDataset, p: Propensity) -> Result<fedtree_core::local::PropensityModel> {
    let covariates: Vec<usize> = (0..data.dim()).collect();
    fit_propensity(data, propensity_kind(p), &covariates)
}

fn site_id_from_path(path: &Path) -> Option<u32> {
    let stem = path.file_stem()?.to_str()?;
    let digits: String = stem
        .chars()
        .rev()
        .take_while(char::is_ascii_digit)
        .collect::<Vec<_>>()
        .into_iter()
        .rev()
        .collect();
    digits.parse().ok()
}

fn parse_x(raw: &str) -> Result<Vec<f64>> {
    raw.split(',')
        .map(|v| {
            let v = v.trim();
            v.parse::<f64>()
                .ok()
                .filter(|f| f.is_finite())
                .ok_or_else(|| Error::Validation(format!("cannot parse covariate `{v}`")))
        })
        .collect()
}

fn fit_local_cmd(args: FitLocalArgs) -> Result<()> {
    let site_id = match args.site_id.or_else(|| site_id_from_path(&args.data)) {
        Some(id) => id,
        None => {
            return Err(Error::Validation(format!(
                "cannot infer a site id from {}; pass --site-id",
                args.data.display()
            )))
        }
    };
    let data = load_csv(&args.data, None)?.with_site_id(site_id);
    let prop = fit_site_propensity(&data, args.learner.propensity)?;
    let model = fit_local(&data, &args.learner.learner()?, &prop, SeedSpec::new(args.seed))?;
    export_model(&model, &args.out)?;
    log::info!("site {site_id}: wrote {}", args.out.display());
    Ok(())
}

fn read_site_models(dir: &Path, target_id: u32) -> Result<Vec<LocalModel>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().and_then(|e| e.to_str()) == Some(EXTENSION))
        .collect();
    paths.sort();
    let mut models = Vec::new();
    for path in paths {
        match import_model(&path)? {
            ExchangeModel::Local(m) if m.site_id == target_id => {
                log::warn!(
                    "ignoring {}: the target's model is refitted on its training split",
                    path.display()
                );
            }
            ExchangeModel::Local(m) => models.push(m),
            ExchangeModel::Ensemble(_) => {
                return Err(Error::Validation(format!(
                    "{} holds an ensemble, not a local model",
                    path.display()
                )))
            }
        }
    }
    models.sort_by_key(|m| m.site_id);
    Ok(models)
}

fn ensemble_cmd(args: EnsembleArgs) -> Result<()> {
    if args.b == 0 {
        return Err(Error::Config("--b must be at least 1".into()));
    }
    if args.ensemble_min_leaf == 0 {
        return Err(Error::Config("--ensemble-min-leaf must be positive".into()));
    }
    let target = load_csv(&args.target, None)?.with_site_id(args.target_id);
    let others = read_site_models(&args.models, args.target_id)?;
    let seed = SeedSpec::new(args.seed);
    let split = split_site1(&target, args.split_frac, &mut seed.stream("split", 0))?;
    let training = target.subset(&split.training)?;
    let estimation = target.subset(&split.estimation)?;

    let prop = fit_site_propensity(&training, args.learner.propensity)?;
    let own = fit_local(&training, &args.learner.learner()?, &prop, seed.child("local", 0))?;
    let mut models = Vec::with_capacity(others.len() + 1);
    models.push(own);
    models.extend(others);

    let eta = match args.site_weights {
        Switch::On => Some(site_size_weights(&models.iter().map(|m| m.n_k).collect::<Vec<_>>())?),
        Switch::Off => None,
    };
    let table = build_augmented(&estimation, &models, eta.as_ref())?;
    let model: EnsembleModel = match args.method {
        Method::Et => {
            let grid: Vec<f64> = default_complexity_grid()
                .into_iter()
                .filter(|&a| a >= args.complexity_floor * (1.0 - 1e-9))
                .collect();
            if grid.is_empty() {
                return Err(Error::Config("--complexity-floor leaves no penalty to select".into()));
            }
            let params = FitParams {
                min_leaf: args.ensemble_min_leaf,
                complexity_grid: grid,
                ..FitParams::single_tree()
            };
            fit_et(&table, &params, seed.child("et", 0))?
        }
        Method::Ef => {
            let params = FitParams {
                min_leaf: args.ensemble_min_leaf,
                ..FitParams::forest()
            };
            fit_ef(&table, &params, args.b, seed.child("ef", 0))?
        }
    };
    export_model(&model, &args.out)?;
    log::info!(
        "{} sites, {} subjects: wrote {}",
        models.len(),
        table.n_subjects(),
        args.out.display()
    );
    Ok(())
}

fn predict_cmd(args: QueryArgs) -> Result<()> {
    let model = import_model(&args.model)?;
    let x = parse_x(&args.x)?;
    println!("{}", model.predict(&x)?);
    Ok(())
}

fn weights_cmd(args: QueryArgs) -> Result<()> {
    let ExchangeModel::Ensemble(model) = import_model(&args.model)? else {
        return Err(Error::Validation("weights need an ensemble model".into()));
    };
    let x = parse_x(&args.x)?;
    let profile = model.weights(&x)?;
    for (site, w) in model.site_ids().iter().zip(&profile.omega) {
        println!("{site},{w}");
    }
    Ok(())
}

fn simulate_cmd(args: SimulateArgs) -> Result<()> {
    let mut configs = load_configs(&args.config)?;
    if let Some(seed) = args.seed {
        for c in &mut configs {
            c.seed = seed;
        }
    }
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(t) = args.threads {
        if t == 0 {
            return Err(Error::Config("--threads must be positive".into()));
        }
        builder = builder.num_threads(t);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker threads: {e}")))?;

    let mut experiments = Vec::with_capacity(configs.len());
    for config in &configs {
        let exp = pool.install(|| run_experiment(config))?;
        log::info!(
            "c={} grouping={} n={}: {} of {} replicates succeeded",
            config.c,
            config.grouping.name(),
            config.n1(),
            exp.successes().count(),
            config.replicates
        );
        experiments.push(exp);
    }
    let dir = args
        .out
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    write_results_csv(&experiments, &args.out)?;
    write_summary_csv(&experiments, dir.join("summary.csv"))?;
    write_plot_csv(&experiments, dir.join("plot.csv"))?;
    for exp in &experiments {
        exp.check()?;
    }
    Ok(())
}

fn policy_cmd(args: PolicyArgs) -> Result<()> {
    let data = load_csv(&args.data, None)?;
    let model = import_model(&args.model)?;
    let prop = fit_site_propensity(&data, args.propensity)?;
    struct Estimate(ExchangeModel);
    impl CateEstimator for Estimate {
        fn estimate(&self, x: &[f64]) -> Result<f64> {
            self.0.predict(x)
        }
    }
    println!("{}", policy_value(&data, &Estimate(model), &prop)?);
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::FitLocal(a) => fit_local_cmd(a),
        Command::Ensemble(a) => ensemble_cmd(a),
        Command::Predict(a) => predict_cmd(a),
        Command::Weights(a) => weights_cmd(a),
        Command::Simulate(a) => simulate_cmd(a),
        Command::EvaluatePolicy(a) => policy_cmd(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
