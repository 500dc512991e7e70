use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use rnpe_flows::{
    fit_density_estimator, finite_diff_nll_check, BnafModel, BnafSpec, Context, Error,
    SplineFlowModel, SplineFlowSpec, TrainConfig,
};

fn gaussian_rows(rng: &mut impl Rng, n: usize, dim: usize, mean: f64, sd: f64) -> Vec<f64> {
    let normal = Normal::new(mean, sd).unwrap();
    (0..n * dim).map(|_| normal.sample(rng)).collect()
}

#[test]
fn bnaf_fits_bivariate_standard_normal() {
    let mut rng = ChaCha12Rng::seed_from_u64(100);
    let data = gaussian_rows(&mut rng, 10_000, 2, 0.0, 1.0);
    let mut model = BnafModel::new(BnafSpec::new(2), 1).unwrap();
    let cfg = TrainConfig {
        max_epochs: 20,
        ..TrainConfig::bnaf_default(2)
    };
    let curve = fit_density_estimator(&mut model, &data, None, &cfg).unwrap();
    let best = curve
        .epochs
        .iter()
        .map(|e| e.val_nll)
        .fold(f64::INFINITY, f64::min);
    // Differential entropy of N(0, I_2) per point.
    let analytic = 2.0 * 0.918_938_533_204_672_7;
    assert!(
        (best - analytic).abs() < 0.1,
        "val NLL {best} vs analytic {analytic}"
    );
    let lp0 = model.log_prob(&[0.0, 0.0]).unwrap();
    assert!((lp0 - (-analytic)).abs() < 0.2, "log prob at origin {lp0}");
}

#[test]
fn bnaf_fits_univariate_standard_normal_density_at_zero() {
    let mut rng = ChaCha12Rng::seed_from_u64(200);
    let data = gaussian_rows(&mut rng, 10_000, 1, 0.0, 1.0);
    let mut model = BnafModel::new(BnafSpec::new(1), 3).unwrap();
    let cfg = TrainConfig {
        max_epochs: 20,
        ..TrainConfig::bnaf_default(4)
    };
    fit_density_estimator(&mut model, &data, None, &cfg).unwrap();
    let lp = model.log_prob(&[0.0]).unwrap();
    assert!((lp - (-0.9189)).abs() < 0.1, "log prob at zero: {lp}");
}

#[test]
fn conditional_spline_recovers_conjugate_posterior_mean() {
    // theta ~ N(0,1), x = theta + 0.1 * noise. Posterior mean at x=0 is 0,
    // with posterior sd ~ 0.0995.
    let mut rng = ChaCha12Rng::seed_from_u64(300);
    let n = 10_000;
    let noise = Normal::new(0.0, 0.1).unwrap();
    let mut theta = Vec::with_capacity(n);
    let mut x = Vec::with_capacity(n);
    let prior = Normal::new(0.0, 1.0).unwrap();
    for _ in 0..n {
        let t: f64 = prior.sample(&mut rng);
        theta.push(t);
        x.push(t + noise.sample(&mut rng));
    }
    let mut model = SplineFlowModel::new(SplineFlowSpec::new(1, 1), 5).unwrap();
    let cfg = TrainConfig {
        max_epochs: 30,
        ..TrainConfig::spline_default(6)
    };
    fit_density_estimator(&mut model, &theta, Some(&x), &cfg).unwrap();
    let draws = model
        .sample(10_000, &[0.0], &mut ChaCha12Rng::seed_from_u64(7))
        .unwrap();
    let mean: f64 = draws.iter().sum::<f64>() / draws.len() as f64;
    assert!(mean.abs() < 0.05, "posterior mean at x=0: {mean}");
}

#[test]
fn spline_flow_fits_shifted_gaussian_samples() {
    let mut rng = ChaCha12Rng::seed_from_u64(400);
    let n = 8_000;
    let data = gaussian_rows(&mut rng, n, 1, 3.0, 1.0);
    let ctx = vec![0.0; n];
    let mut model = SplineFlowModel::new(SplineFlowSpec::new(1, 1), 8).unwrap();
    // Context is constant here, which the standardizer rejects; give it a
    // tiny spread instead.
    let ctx: Vec<f64> = ctx
        .iter()
        .enumerate()
        .map(|(i, _)| (i % 7) as f64 * 0.1)
        .collect();
    let cfg = TrainConfig {
        max_epochs: 30,
        ..TrainConfig::spline_default(9)
    };
    fit_density_estimator(&mut model, &data, Some(&ctx), &cfg).unwrap();
    let draws = model
        .sample(10_000, &[0.3], &mut ChaCha12Rng::seed_from_u64(11))
        .unwrap();
    let mean: f64 = draws.iter().sum::<f64>() / draws.len() as f64;
    assert!((mean - 3.0).abs() < 0.1, "sample mean {mean}");
}

#[test]
fn flat_validation_stops_training_early() {
    // Zero learning rate cannot improve, so training must stop after
    // `patience` epochs rather than running to max_epochs.
    let mut rng = ChaCha12Rng::seed_from_u64(500);
    let data = gaussian_rows(&mut rng, 500, 1, 0.0, 1.0);
    let mut model = BnafModel::new(BnafSpec::new(1), 6).unwrap();
    let cfg = TrainConfig {
        learning_rate: 0.0,
        ..TrainConfig::bnaf_default(7)
    };
    let curve = fit_density_estimator(&mut model, &data, None, &cfg).unwrap();
    assert!(curve.stopped_early);
    assert_eq!(curve.epochs.len(), cfg.patience);
    assert_eq!(curve.best_epoch, 0);
}

#[test]
fn training_is_deterministic_given_seed() {
    let mut rng = ChaCha12Rng::seed_from_u64(600);
    let data = gaussian_rows(&mut rng, 2_000, 2, 0.5, 1.5);
    let cfg = TrainConfig {
        max_epochs: 3,
        ..TrainConfig::bnaf_default(8)
    };
    let mut a = BnafModel::new(BnafSpec::new(2), 9).unwrap();
    fit_density_estimator(&mut a, &data, None, &cfg).unwrap();
    let mut b = BnafModel::new(BnafSpec::new(2), 9).unwrap();
    fit_density_estimator(&mut b, &data, None, &cfg).unwrap();
    assert_eq!(a.params.data(), b.params.data());
}

#[test]
fn training_improves_on_initialization() {
    let mut rng = ChaCha12Rng::seed_from_u64(700);
    let data = gaussian_rows(&mut rng, 4_000, 1, -2.0, 0.5);
    let held_out = gaussian_rows(&mut rng, 2_000, 1, -2.0, 0.5);
    let fresh = BnafModel::new(BnafSpec::new(1), 10).unwrap();
    let mut trained = fresh.clone();
    let cfg = TrainConfig {
        max_epochs: 15,
        ..TrainConfig::bnaf_default(11)
    };
    let curve = fit_density_estimator(&mut trained, &data, None, &cfg).unwrap();
    let nll = |m: &BnafModel| -> f64 {
        let lp = m.log_prob_batch(&held_out).unwrap();
        -lp.iter().sum::<f64>() / lp.len() as f64
    };
    assert!(nll(&trained) < nll(&fresh) - 0.5);
    // Best validation NLL never exceeds the epoch-zero baseline.
    let best = curve
        .epochs
        .iter()
        .map(|e| e.val_nll)
        .fold(f64::INFINITY, f64::min);
    assert!(best.is_finite());
}

#[test]
fn poisoned_parameters_abort_with_location() {
    let mut rng = ChaCha12Rng::seed_from_u64(800);
    let data = gaussian_rows(&mut rng, 600, 1, 0.0, 1.0);
    let mut model = BnafModel::new(BnafSpec::new(1), 12).unwrap();
    for v in model.params.segment_values_mut("w1").unwrap() {
        *v = 1e300;
    }
    let cfg = TrainConfig::bnaf_default(13);
    match fit_density_estimator(&mut model, &data, None, &cfg) {
        Err(Error::NanLoss { epoch, batch }) => {
            assert_eq!(epoch, 1);
            assert_eq!(batch, 0);
        }
        other => panic!("expected NanLoss, got {other:?}"),
    }
}

#[test]
fn standardization_invariance_of_modeled_density() {
    // Density via standardize -> standardized-space density -> change of
    // variables must equal the raw-space contract.
    let mut rng = ChaCha12Rng::seed_from_u64(900);
    let data = gaussian_rows(&mut rng, 3_000, 2, 4.0, 2.5);
    let mut model = BnafModel::new(BnafSpec::new(2), 14).unwrap();
    let cfg = TrainConfig {
        max_epochs: 2,
        ..TrainConfig::bnaf_default(15)
    };
    fit_density_estimator(&mut model, &data, None, &cfg).unwrap();
    let ev = model.evaluator();
    let point = [3.2, 5.1];
    let direct = model.log_prob(&point).unwrap();
    let z = model.standardizer.apply_row(&point);
    let composed = ev.log_density_std(&z) + model.standardizer.log_det_correction();
    assert!((direct - composed).abs() < 1e-10);
}

#[test]
fn training_gradients_match_finite_differences() {
    // Spline flow loss gradient against central differences.
    let mut rng = ChaCha12Rng::seed_from_u64(1000);
    let n = 12;
    let theta: Vec<f64> = (0..n * 2).map(|_| rng.random_range(-2.0..2.0)).collect();
    let ctx: Vec<f64> = (0..n * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
    // Shrink the conditioner so the finite-difference loop stays fast.
    let mut spec = SplineFlowSpec::new(2, 2);
    spec.hidden_width = 12;
    let mut flow = SplineFlowModel::new(spec, 16).unwrap();
    perturb_params_seeded(&mut flow, 0.3, 17);
    let err = finite_diff_nll_check(&flow, &theta, Some(&ctx), 1e-5).unwrap();
    assert!(err < 1e-4, "spline flow param gradient rel err {err}");

    // Block autoregressive flow likewise.
    let bnaf = BnafModel::new(BnafSpec::new(2), 18).unwrap();
    let points: Vec<f64> = (0..n * 2).map(|_| rng.random_range(-2.0..2.0)).collect();
    let err = finite_diff_nll_check(&bnaf, &points, None, 1e-5).unwrap();
    assert!(err < 1e-4, "bnaf param gradient rel err {err}");
}

fn perturb_params_seeded(flow: &mut SplineFlowModel, scale: f64, seed: u64) {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    for v in flow.params.data_mut() {
        *v += rng.random_range(-scale..scale);
    }
}
