//! Acceptance checks. Each criterion prints one PASS or FAIL line; the process
//! exits nonzero when any criterion fails. Pass criterion numbers as arguments
//! to run a subset, e.g. `cargo test --test acceptance -- 5 6`.

#[path = "../../core/tests/support/mod.rs"]
mod support;

use std::collections::HashMap;
use std::process::{Command, ExitCode};
use std::time::Instant;

use fedtree_core::ensemble::{fit_ef, fit_et, reconstruct_from_weights};
use fedtree_core::exchange::{audit_privacy, ExchangeModel, ModelEnvelope};
use fedtree_core::local::{fit_local, transform_outcome, LocalLearner, LocalModel, OracleTau, PropensityModel};
use fedtree_core::rng::SeedSpec;
use fedtree_core::sim::{
    draw_site_effects, generate_site, run_experiment, Estimator, ExperimentResult, Grouping, PropensityChoice,
    PropensityDesign, SimulationConfig,
};
use fedtree_core::tree::{fit_tree, FeatureKind, FitParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use support::Problem;

const REPLICATES: usize = 100;
const TREND_REPLICATES: usize = 50;
const FOREST_SIZE: usize = 500;

const CELL_C0: (f64, f64) = (0.12, 0.10);
const CELL_C2: (f64, f64) = (0.16, 0.10);
const MA_FLOOR: f64 = 3.0;
const EF_ORACLE_CEILING: f64 = 0.05;
const PARITY_FACTOR: f64 = 2.0;
const SIMPLEX_TOL: f64 = 1e-10;
const KERNEL_TOL: f64 = 1e-10;
const SE_MULTIPLE: f64 = 3.0;
const OBSERVATIONAL_CEILING: f64 = 1.0;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

/// Benchmark cell with the tuning used for every simulation criterion.
fn benchmark(c: f64, n: usize) -> SimulationConfig {
    SimulationConfig {
        c,
        n_k: vec![n],
        replicates: REPLICATES,
        b: FOREST_SIZE,
        ct_prune: false,
        ct_honest: false,
        ct_min_leaf: 75,
        ef_min_leaf: 1,
        ef_features_tried: Some(6),
        ef_subsample_fraction: 0.9,
        et_complexity_floor: 0.01,
        ..SimulationConfig::default()
    }
}

struct Runs(HashMap<String, ExperimentResult>);

impl Runs {
    fn get(&mut self, cfg: SimulationConfig) -> &ExperimentResult {
        let key = format!("{cfg:?}");
        self.0.entry(key).or_insert_with(|| {
            let started = Instant::now();
            let exp = run_experiment(&cfg).expect("valid configuration");
            eprintln!(
                "  ran c={} n={} {} replicates in {:.0?} ({} failed)",
                cfg.c,
                cfg.n1(),
                cfg.replicates,
                started.elapsed(),
                exp.failure_count()
            );
            exp
        })
    }
}

fn ratios(exp: &ExperimentResult) -> Result<HashMap<&'static str, f64>, String> {
    exp.check().map_err(|e| e.to_string())?;
    Ok(exp
        .summary()
        .into_iter()
        .map(|s| (s.estimator.name(), s.mean_ratio))
        .collect())
}

fn within(v: f64, (centre, half): (f64, f64)) -> bool {
    (v - centre).abs() <= half
}

fn table_cells(runs: &mut Runs) -> Outcome {
    let c0 = runs.get(benchmark(0.0, 500)).mean_ratio(Estimator::Ef);
    let c2 = runs.get(benchmark(2.0, 500)).mean_ratio(Estimator::Ef);
    let failures = runs.get(benchmark(0.0, 500)).failure_count() + runs.get(benchmark(2.0, 500)).failure_count();
    outcome(
        within(c0, CELL_C0) && within(c2, CELL_C2) && failures == 0,
        format!(
            "EF/LOC {c0:.3} at c=0 (want {}±{}), {c2:.3} at c=2 (want {}±{}), {failures} failed replicates",
            CELL_C0.0, CELL_C0.1, CELL_C2.0, CELL_C2.1
        ),
    )
}

fn sample_size_trend(runs: &mut Runs) -> Outcome {
    let mut values = Vec::new();
    for n in [100, 500, 1000] {
        let cfg = SimulationConfig {
            replicates: TREND_REPLICATES,
            ct_min_leaf: 25,
            ..benchmark(0.0, n)
        };
        let exp = runs.get(cfg);
        if let Err(e) = exp.check() {
            return outcome(false, format!("n={n}: {e}"));
        }
        values.push(exp.mean_ratio(Estimator::Ef));
    }
    outcome(
        values.windows(2).all(|w| w[1] < w[0]),
        format!(
            "EF/LOC {:.3} / {:.3} / {:.3} at n = 100 / 500 / 1000",
            values[0], values[1], values[2]
        ),
    )
}

fn heterogeneity_orderings(runs: &mut Runs) -> Outcome {
    let r = match ratios(runs.get(benchmark(1.0, 500))) {
        Ok(r) => r,
        Err(e) => return outcome(false, e),
    };
    let (ma, ewma, et, ef, efo) = (r["MA"], r["EWMA"], r["ET"], r["EF"], r["EF-oracle"]);
    outcome(
        ma > MA_FLOOR && et < ewma && ef < ewma && efo < EF_ORACLE_CEILING,
        format!("MA {ma:.3} (> {MA_FLOOR}), ET {et:.3} and EF {ef:.3} vs EWMA {ewma:.3}, EF-oracle {efo:.4} (< {EF_ORACLE_CEILING})"),
    )
}

fn homogeneity_parity(runs: &mut Runs) -> Outcome {
    let r = match ratios(runs.get(benchmark(0.0, 500))) {
        Ok(r) => r,
        Err(e) => return outcome(false, e),
    };
    let (ef, ma) = (r["EF"], r["MA"]);
    let factor = (ef / ma).max(ma / ef);
    outcome(
        factor <= PARITY_FACTOR,
        format!("EF {ef:.3} vs MA {ma:.3}, factor {factor:.2} (<= {PARITY_FACTOR})"),
    )
}

fn weight_simplex() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut worst_sum, mut worst_kernel, mut negative) = (0.0f64, 0.0f64, 0usize);
    for t in 0..20u64 {
        let table = support::random_table(&mut rng);
        let et = fit_et(&table, &FitParams::single_tree(), SeedSpec::new(t)).unwrap();
        let forest = FitParams {
            min_leaf: 2,
            ..FitParams::forest()
        };
        let ef = fit_ef(&table, &forest, 100, SeedSpec::new(t)).unwrap();
        for _ in 0..1000 {
            let x: Vec<f64> = (0..table.dim()).map(|_| rng.random_range(-3.0..3.0)).collect();
            for model in [&et, &ef] {
                let w = model.weights(&x).unwrap();
                negative += w.omega.iter().filter(|&&v| v < 0.0).count();
                worst_sum = worst_sum.max((w.sum() - 1.0).abs());
                let rebuilt = reconstruct_from_weights(&w, &table, &x).unwrap();
                worst_kernel = worst_kernel.max((model.predict_star(&x).unwrap() - rebuilt).abs());
            }
        }
    }
    outcome(
        negative == 0 && worst_sum <= SIMPLEX_TOL && worst_kernel <= KERNEL_TOL,
        format!("{negative} negative weights, max |sum-1| {worst_sum:.1e}, max kernel gap {worst_kernel:.1e}"),
    )
}

fn brute_force_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut mismatches = 0;
    for _ in 0..200 {
        let n = rng.random_range(2..=12);
        let dim = rng.random_range(1..=3);
        let weighted = rng.random_bool(0.5);
        let p = Problem::random(&mut rng, n, dim, weighted);
        let min_leaf = if p.has_categorical() {
            1
        } else {
            rng.random_range(1..=3usize).min(n / 2).max(1)
        };
        let params = FitParams {
            min_leaf,
            prune: false,
            ..FitParams::single_tree()
        };
        let tree = fit_tree(&p.tree_data(), &p.schema(), &params, SeedSpec::new(0)).unwrap();
        let rows: Vec<usize> = (0..n).collect();
        let oracle = support::oracle_tree(&p, &rows, min_leaf, None);
        let mut oracle_loss = 0.0;
        let mut same = tree.n_leaves() == oracle.leaves();
        for (i, x) in p.x.iter().enumerate() {
            let v = oracle.predict(x);
            same &= tree.predict(x).unwrap() == v;
            oracle_loss += p.weight[i] * (p.target[i] - v) * (p.target[i] - v);
        }
        same &= tree.training_loss(&p.tree_data()) == oracle_loss;
        for _ in 0..20 {
            let q = support::random_query(&p, &mut rng);
            same &= tree.predict(&q).unwrap() == oracle.predict(&q);
        }
        mismatches += usize::from(!same);
    }

    let mut subset_gaps = 0;
    let mut checked = 0;
    for levels in 2u32..=8 {
        for _ in 0..25 {
            let n = rng.random_range(levels as usize..=40);
            let mut p = Problem::random(&mut rng, n, 1, true);
            p.kinds = vec![FeatureKind::Categorical { levels }];
            let offset = rng.random_range(0..levels);
            for (i, row) in p.x.iter_mut().enumerate() {
                row[0] = f64::from((i as u32 + offset) % levels + 1);
            }
            let params = FitParams {
                min_leaf: 1,
                max_depth: Some(1),
                prune: false,
                ..FitParams::single_tree()
            };
            let tree = fit_tree(&p.tree_data(), &p.schema(), &params, SeedSpec::new(0)).unwrap();
            let rows: Vec<usize> = (0..n).collect();
            let (_, root) = support::mean_and_loss(&p, &rows);
            let best = support::best_split(&p, &rows, 1, 0.0).map_or(root, |s| s.loss.min(root));
            checked += 1;
            if (tree.training_loss(&p.tree_data()) - best).abs() > 1e-10 * root.max(1e-300) {
                subset_gaps += 1;
            }
        }
    }
    outcome(
        mismatches == 0 && subset_gaps == 0,
        format!("{mismatches}/200 trees differ from enumeration, {subset_gaps}/{checked} categorical splits miss the best subset"),
    )
}

fn transformed_outcome() -> Outcome {
    let cfg = SimulationConfig {
        k: 2,
        n_k: vec![100_000],
        c: 0.0,
        propensity: PropensityDesign::Rct,
        ..SimulationConfig::default()
    };
    let u = draw_site_effects(&cfg, SeedSpec::new(7));
    let site = generate_site(1, &cfg, &u, SeedSpec::new(7)).unwrap();
    let prop = PropensityModel::constant(0.5).unwrap();
    let mut rows: Vec<(f64, f64)> = site
        .rows()
        .map(|(y, z, x)| (x[0], transform_outcome(y, z, x, &prop)))
        .collect();
    rows.sort_by(|a, b| a.0.total_cmp(&b.0));
    let per_bin = rows.len() / 10;
    let mut worst = 0.0f64;
    for bin in rows.chunks(per_bin).take(10) {
        let m = bin.len() as f64;
        let mean = bin.iter().map(|r| r.1).sum::<f64>() / m;
        let tau = bin.iter().map(|r| r.0.max(0.0)).sum::<f64>() / m;
        let sd = (bin.iter().map(|r| (r.1 - mean).powi(2)).sum::<f64>() / (m - 1.0)).sqrt();
        worst = worst.max((mean - tau).abs() / (sd / m.sqrt()));
    }
    outcome(
        worst <= SE_MULTIPLE,
        format!("largest decile gap {worst:.2} standard errors (<= {SE_MULTIPLE})"),
    )
}

fn table_with_subjects(rng: &mut ChaCha8Rng, min: usize) -> fedtree_core::ensemble::AugmentedTable {
    loop {
        let table = support::random_table(rng);
        if table.n_subjects() >= min {
            return table;
        }
    }
}

fn random_exchange_model(rng: &mut ChaCha8Rng, i: usize) -> (ExchangeModel, FitParams) {
    let dim = rng.random_range(1..=4);
    match i % 5 {
        0 => {
            let slopes = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
            let tau = OracleTau::Affine {
                intercept: rng.random_range(-1.0..1.0),
                slopes,
            };
            (LocalModel::oracle(1, dim, 100, tau).into(), FitParams::single_tree())
        }
        1 | 2 => {
            let n = rng.random_range(60..300);
            let site = support::random_site(rng, i as u32 + 1, n, dim);
            let prop = PropensityModel::constant(0.5).unwrap();
            let learner = if i % 5 == 1 {
                LocalLearner::causal_tree()
            } else {
                LocalLearner::causal_forest(10)
            };
            let params = match &learner {
                LocalLearner::CausalTree(p) => p.clone(),
                LocalLearner::CausalForest { params, .. } => params.clone(),
                LocalLearner::Oracle(_) => unreachable!(),
            };
            (
                fit_local(&site, &learner, &prop, SeedSpec::new(rng.random()))
                    .unwrap()
                    .into(),
                params,
            )
        }
        3 => {
            let table = table_with_subjects(rng, 20);
            let params = FitParams::single_tree();
            (
                fit_et(&table, &params, SeedSpec::new(rng.random())).unwrap().into(),
                params,
            )
        }
        _ => {
            let table = table_with_subjects(rng, 20);
            let params = FitParams::forest();
            (
                fit_ef(&table, &params, 20, SeedSpec::new(rng.random())).unwrap().into(),
                params,
            )
        }
    }
}

fn exchange_round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(88);
    let (mut mismatched, mut accepted, mut audit_failures) = (0, 0, 0);
    for i in 0..100 {
        let (model, params) = random_exchange_model(&mut rng, i);
        let text = ModelEnvelope::of(&model).to_text();
        let back = ModelEnvelope::parse(&text).and_then(ModelEnvelope::into_model);
        let Ok(back) = back else {
            mismatched += 1;
            continue;
        };
        let dim = model.dim();
        for _ in 0..10_000 {
            let x: Vec<f64> = (0..dim).map(|_| rng.random_range(-4.0..4.0)).collect();
            if back.predict(&x).unwrap() != model.predict(&x).unwrap() {
                mismatched += 1;
                break;
            }
        }
        let body_len = text.rfind("checksum ").unwrap();
        for _ in 0..20 {
            let mut bytes = text.clone().into_bytes();
            let at = rng.random_range(0..body_len);
            bytes[at] = match bytes[at] {
                b'0'..=b'8' => bytes[at] + 1,
                b'9' => b'0',
                b'a'..=b'y' => bytes[at] + 1,
                _ => b'#',
            };
            let tampered = String::from_utf8_lossy(&bytes).into_owned();
            accepted += usize::from(ModelEnvelope::parse(&tampered).is_ok());
        }
        let cut = rng.random_range(0..text.len());
        accepted += usize::from(ModelEnvelope::parse(&text[..cut]).is_ok());
        if !audit_privacy(&ModelEnvelope::of(&model), &params).passed {
            audit_failures += 1;
        }
    }
    outcome(
        mismatched == 0 && accepted == 0 && audit_failures == 0,
        format!("{mismatched} models changed, {accepted} tampered payloads accepted, {audit_failures} audits failed"),
    )
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.toml");
    std::fs::write(
        &cfg,
        "K = 6\nn_k = 100\nc = [0.0, 1.0]\nn_te = 200\nreplicates = 8\nB = 40\nct_min_leaf = 10\nseed = 11\n",
    )
    .unwrap();
    let mut outputs = Vec::new();
    for (run, threads) in ["1", "1", "8", "8"].into_iter().enumerate() {
        let sub = dir.path().join(format!("run{run}"));
        std::fs::create_dir(&sub).unwrap();
        let out = sub.join("results.csv");
        let status = Command::new(env!("CARGO_BIN_EXE_fedtree"))
            .args(["simulate", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(&out)
            .args(["--threads", threads])
            .status()
            .unwrap();
        if !status.success() {
            return outcome(false, format!("simulate exited with {status}"));
        }
        outputs.push(std::fs::read(&out).unwrap());
    }
    let identical = outputs.windows(2).all(|w| w[0] == w[1]);
    outcome(
        identical,
        format!(
            "results.csv ({} bytes) {} across 1- and 8-thread runs",
            outputs[0].len(),
            if identical { "identical" } else { "differs" }
        ),
    )
}

fn observational(runs: &mut Runs) -> Outcome {
    let cfg = SimulationConfig {
        grouping: Grouping::Continuous,
        propensity: PropensityDesign::Observational,
        propensity_model: PropensityChoice::LogisticMisspecified,
        ..benchmark(0.6, 500)
    };
    let exp = runs.get(cfg);
    if let Err(e) = exp.check() {
        return outcome(false, e.to_string());
    }
    let ef = exp.mean_ratio(Estimator::Ef);
    outcome(
        ef < OBSERVATIONAL_CEILING,
        format!(
            "EF/LOC {ef:.3} (< {OBSERVATIONAL_CEILING}), {} failed replicates",
            exp.failure_count()
        ),
    )
}

fn main() -> ExitCode {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |n: usize| selected.is_empty() || selected.contains(&n);
    let mut runs = Runs(HashMap::new());
    let criteria: [(usize, &str, &mut dyn FnMut(&mut Runs) -> Outcome); 10] = [
        (1, "table cells at c=0 and c=2", &mut table_cells),
        (2, "sample-size trend", &mut sample_size_trend),
        (3, "orderings at c=1", &mut heterogeneity_orderings),
        (4, "homogeneity parity at c=0", &mut homogeneity_parity),
        (5, "weight simplex and kernel identity", &mut |_| weight_simplex()),
        (6, "brute-force split oracle", &mut |_| brute_force_oracle()),
        (7, "transformed outcome unbiasedness", &mut |_| transformed_outcome()),
        (8, "exchange round trip", &mut |_| exchange_round_trip()),
        (9, "thread-count determinism", &mut |_| determinism()),
        (10, "observational robustness", &mut observational),
    ];
    let mut failed = 0;
    for (n, name, check) in criteria {
        if !wanted(n) {
            continue;
        }
        let started = Instant::now();
        let o = check(&mut runs);
        failed += usize::from(!o.passed);
        println!(
            "{} criterion {n:>2} {name}: {} [{:.1?}]",
            if o.passed { "PASS" } else { "FAIL" },
            o.detail,
            started.elapsed()
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    }
}
