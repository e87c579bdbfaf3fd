mod support;

use fedtree_core::dataset::SiteDataset;
use fedtree_core::exchange::ModelEnvelope;
use fedtree_core::local::{
    expit, fit_local, fit_propensity, site_size_weights, transform_outcome, LocalLearner, LocalModel, OracleTau,
    PropensityKind, PropensityModel,
};
use fedtree_core::rng::SeedSpec;
use fedtree_core::sim::{draw_site_effects, generate_site, true_tau, SimulationConfig};
use fedtree_core::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn dataset(y: Vec<f64>, z: Vec<bool>, x: Vec<f64>, dim: usize) -> SiteDataset {
    SiteDataset::new(1, y, z, x, dim).unwrap()
}

fn coefficients(m: &PropensityModel) -> Vec<f64> {
    match &m.form {
        fedtree_core::local::PropensityForm::Logistic { coefficients, .. } => coefficients.clone(),
        other => panic!("expected a logistic model, got {other:?}"),
    }
}

#[test]
fn symmetric_design_gives_half_and_flat_slope() {
    let x = vec![-2.0, -2.0, -1.0, -1.0, 1.0, 1.0, 2.0, 2.0];
    let z = vec![false, true, false, true, false, true, false, true];
    let d = dataset(vec![0.0; 8], z, x, 1);
    let c = fit_propensity(&d, PropensityKind::Constant, &[]).unwrap();
    assert_eq!(c.probability(&[0.3]), 0.5);
    let l = fit_propensity(&d, PropensityKind::Logistic, &[0]).unwrap();
    let beta = coefficients(&l);
    assert!(beta[1].abs() < 1e-6, "slope {}", beta[1]);
    assert_eq!(expit(0.0), 0.5);
}

#[test]
fn eight_rows_match_irls() {
    let x = vec![-1.5, -0.7, -0.2, 0.1, 0.4, 0.9, 1.3, 2.2];
    let z = vec![false, false, true, false, true, false, true, true];
    let d = dataset(vec![0.0; 8], z.clone(), x.clone(), 1);
    let beta = coefficients(&fit_propensity(&d, PropensityKind::Logistic, &[0]).unwrap());
    let design: Vec<Vec<f64>> = x.iter().map(|&v| vec![1.0, v]).collect();
    let zf: Vec<f64> = z.iter().map(|&t| if t { 1.0 } else { 0.0 }).collect();
    let oracle = support::irls_logistic(&design, &zf, 50);
    for (a, b) in beta.iter().zip(&oracle) {
        assert!((a - b).abs() < 1e-6, "{beta:?} vs {oracle:?}");
    }
}

#[test]
fn separated_arms_are_reported() {
    let x = vec![-3.0, -2.0, -1.0, 1.0, 2.0, 3.0];
    let z = vec![false, false, false, true, true, true];
    let d = dataset(vec![0.0; 6], z, x, 1);
    let err = fit_propensity(&d, PropensityKind::Logistic, &[0]).unwrap_err();
    assert!(matches!(err, Error::Separation { .. }), "{err}");
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn single_arm_is_a_positivity_error() {
    let err = SiteDataset::new(1, vec![1.0, 2.0], vec![true, true], vec![0.0, 1.0], 1).unwrap_err();
    assert!(matches!(err, Error::Positivity(_)), "{err}");
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn transformed_outcome_cases() {
    let half = PropensityModel::constant(0.5).unwrap();
    assert_eq!(transform_outcome(2.0, true, &[0.0], &half), 4.0);
    assert_eq!(transform_outcome(2.0, false, &[0.0], &half), -4.0);
}

#[test]
fn transformed_outcome_is_locally_unbiased() {
    let cfg = SimulationConfig {
        k: 2,
        n_k: vec![100_000],
        ..SimulationConfig::default()
    };
    let u = draw_site_effects(&cfg, SeedSpec::new(1));
    let site = generate_site(1, &cfg, &u, SeedSpec::new(2)).unwrap();
    let prop = PropensityModel::constant(0.5).unwrap();
    let near: Vec<f64> = site
        .rows()
        .filter(|(_, _, x)| (x[0] - 1.0).abs() < 0.1)
        .map(|(y, z, x)| transform_outcome(y, z, x, &prop))
        .collect();
    let n = near.len() as f64;
    let mean = near.iter().sum::<f64>() / n;
    let sd = (near.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    assert!(
        (mean - 1.0).abs() < 3.0 * sd / n.sqrt(),
        "mean {mean}, se {}",
        sd / n.sqrt()
    );
    assert_eq!(true_tau(&[1.0, 0.0, 0.0, 0.0, 0.0], u[0], &cfg), 1.0);
}

#[test]
fn constant_effect_recovers_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 2000;
    let z: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
    let x: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let y: Vec<f64> = z
        .iter()
        .map(|&t| f64::from(u8::from(t)) + 0.25 * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let d = dataset(y, z, x, 1);
    let prop = PropensityModel::constant(0.5).unwrap();
    let m = fit_local(&d, &LocalLearner::causal_tree(), &prop, SeedSpec::new(9)).unwrap();
    for q in [-2.0, -0.5, 0.0, 0.7, 1.9] {
        let v = m.predict_tau(&[q]).unwrap();
        assert!((v - 1.0).abs() < 0.1, "tau_hat({q}) = {v}");
    }
}

#[test]
fn oracle_learner_passes_through() {
    let m = LocalModel::oracle(
        3,
        2,
        10,
        OracleTau::Affine {
            intercept: 0.0,
            slopes: vec![1.0, 0.0],
        },
    );
    assert_eq!(m.predict_tau(&[2.0, 5.0]).unwrap(), 2.0);
    let zero = LocalModel::oracle(1, 2, 10, OracleTau::constant(0.0));
    assert_eq!(zero.predict_tau(&[-4.0, 1.0]).unwrap(), 0.0);
    assert!(zero.predict_tau(&[1.0]).is_err());
}

#[test]
fn refits_serialize_identically() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 300;
    let x: Vec<f64> = (0..n * 2).map(|_| rng.sample(StandardNormal)).collect();
    let z: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
    let y: Vec<f64> = (0..n)
        .map(|i| x[2 * i] * f64::from(u8::from(z[i])) + rng.sample::<f64, _>(StandardNormal))
        .collect();
    let d = dataset(y, z, x, 2);
    let prop = fit_propensity(&d, PropensityKind::Logistic, &[0, 1]).unwrap();
    for learner in [LocalLearner::causal_tree(), LocalLearner::causal_forest(20)] {
        let a = fit_local(&d, &learner, &prop, SeedSpec::new(5)).unwrap();
        let b = fit_local(&d, &learner, &prop, SeedSpec::new(5)).unwrap();
        assert_eq!(ModelEnvelope::of(&a).to_text(), ModelEnvelope::of(&b).to_text());
    }
}

#[test]
fn site_weight_cases() {
    assert_eq!(site_size_weights(&[50, 50, 50]).unwrap().as_slice(), &[1.0, 1.0, 1.0]);
    assert_eq!(site_size_weights(&[300, 100]).unwrap().as_slice(), &[1.5, 0.5]);
    assert!(site_size_weights(&[10, 0]).is_err());
}

proptest! {
    #[test]
    fn logistic_fit_matches_irls(seed in any::<u64>(), n in 12usize..=50, dim in 1usize..=3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..n * dim).map(|_| rng.sample(StandardNormal)).collect();
        let z: Vec<bool> = (0..n).map(|i| rng.random_bool(expit(0.8 * x[i * dim]))).collect();
        prop_assume!(z.iter().any(|&t| t) && z.iter().any(|&t| !t));
        let d = dataset(vec![0.0; n], z.clone(), x.clone(), dim);
        let covs: Vec<usize> = (0..dim).collect();
        let fit = fit_propensity(&d, PropensityKind::Logistic, &covs);
        prop_assume!(!matches!(fit, Err(Error::Separation { .. })));
        let beta = coefficients(&fit.unwrap());
        let design: Vec<Vec<f64>> = (0..n).map(|i| {
            let mut row = vec![1.0];
            row.extend_from_slice(&x[i * dim..(i + 1) * dim]);
            row
        }).collect();
        let zf: Vec<f64> = z.iter().map(|&t| if t { 1.0 } else { 0.0 }).collect();
        let oracle = support::irls_logistic(&design, &zf, 60);
        for (a, b) in beta.iter().zip(&oracle) {
            prop_assert!((a - b).abs() < 1e-6, "{:?} vs {:?}", beta, oracle);
        }
    }

    #[test]
    fn clipping_bounds_the_transformed_outcome(y in -1e3f64..1e3, z in any::<bool>(), b in -50f64..50.0, x in -50f64..50.0) {
        let prop = PropensityModel::logistic(vec![0], vec![0.0, b]).unwrap();
        let (lo, hi) = prop.clip;
        let v = transform_outcome(y, z, &[x], &prop);
        prop_assert!(v.is_finite());
        prop_assert!(v.abs() <= y.abs() / (lo * (1.0 - hi)) * (1.0 + 1e-12));
    }

    #[test]
    fn site_weights_sum_to_k(sizes in prop::collection::vec(1usize..10_000, 1..30)) {
        let eta = site_size_weights(&sizes).unwrap();
        let sum: f64 = eta.as_slice().iter().sum();
        prop_assert!((sum - sizes.len() as f64).abs() <= 1e-12 * sizes.len() as f64);
        prop_assert!(eta.as_slice().iter().all(|&v| v > 0.0));
    }
}
