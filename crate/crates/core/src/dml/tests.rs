use nalgebra::{DMatrix, DVector};
use rand::Rng;

use super::*;
use crate::data::{gen_demand_iv, gen_linear_toy, DemandIvParams, LinearToyParams};
use crate::estimators::{DensitySpec, RegressorSpec};
use crate::rng::rng_from_seed;
use crate::score::{analytic_pair, pointwise_loss_batch, LinearToyProblem};

fn toy(n: usize, seed: u64) -> Dataset {
    gen_linear_toy(LinearToyParams::new(n, seed)).unwrap()
}

fn ridge_specs() -> NuisanceSpecs {
    let ridge = RegressorSpec::ridge(BasisMap::polynomial(1, 1), 1e-3);
    NuisanceSpecs {
        outcome: ridge.clone(),
        density: DensitySpec::GaussianRegression { mean: ridge },
    }
}

fn analytic_state(n: usize) -> CrossFitState {
    CrossFitState::single(n, analytic_pair(LinearToyProblem::default()))
}

fn slope(m: &StructuralModel) -> f64 {
    m.theta()[0]
}

#[test]
fn two_folds_train_on_halves_without_leakage() {
    let data = toy(1000, 1);
    let cfg = FitConfig {
        k_folds: 2,
        ..Default::default()
    };
    let state = crossfit_nuisances(&data, &cfg, &ridge_specs()).unwrap();
    assert_eq!(state.k(), 2);
    for k in 0..2 {
        assert_eq!(state.train_indices[k].len(), 500);
        let fold = &state.fold_plan.folds[k];
        assert!(state.train_indices[k].iter().all(|i| !fold.contains(i)));
    }
    let audit = state.audit();
    assert!(audit.passed, "{:?}", audit.problems);
    assert_eq!(state.nuisance_fits, 2);
}

#[test]
fn tampered_state_fails_audit() {
    let data = toy(200, 1);
    let cfg = FitConfig {
        k_folds: 4,
        ..Default::default()
    };
    let mut state = crossfit_nuisances(&data, &cfg, &ridge_specs()).unwrap();
    let leaked = state.fold_plan.folds[2][0];
    state.train_indices[2].push(leaked);
    let audit = state.audit();
    assert!(!audit.passed);
    assert!(audit.problems.iter().any(|p| p.contains("fold 2")));
}

#[test]
fn small_complement_names_the_fold() {
    let data = toy(40, 1);
    let cfg = FitConfig {
        k_folds: 2,
        ..Default::default()
    };
    let specs = NuisanceSpecs {
        outcome: RegressorSpec::trees(10, 100),
        density: ridge_specs().density,
    };
    let err = crossfit_nuisances(&data, &cfg, &specs).unwrap_err().to_string();
    assert!(err.contains("fold 0"), "{err}");
}

#[test]
fn outcome_nuisance_beats_constant_on_every_fold() {
    let data = gen_demand_iv(DemandIvParams::new(5000, 3)).unwrap();
    let cfg = FitConfig::default();
    let specs = NuisanceSpecs {
        outcome: RegressorSpec::trees(200, 50),
        density: DensitySpec::GaussianRegression {
            mean: RegressorSpec::ridge(BasisMap::polynomial(data.d_c(), 1), 1e-3),
        },
    };
    let state = crossfit_nuisances(&data, &cfg, &specs).unwrap();
    for (k, fold) in state.fold_plan.folds.iter().enumerate() {
        let ys: Vec<f64> = fold.iter().map(|&i| data.y()[i]).collect();
        let mean = ys.iter().sum::<f64>() / ys.len() as f64;
        let var = ys.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / ys.len() as f64;
        let mse = fold
            .iter()
            .map(|&i| (state.pairs[k].s.predict_one(&data.c_row(i)) - data.y()[i]).powi(2))
            .sum::<f64>()
            / fold.len() as f64;
        assert!(mse < var, "fold {k}: mse {mse} vs variance {var}");
    }
}

#[test]
fn closed_form_recovers_theta_with_exact_nuisances() {
    let data = toy(100_000, 11);
    let init = StructuralModel::zeros(BasisMap::identity(1));
    let fit = fit_dml_cmr(&data, &analytic_state(data.n()), &FitConfig::default(), init).unwrap();
    let t = slope(&fit.model);
    assert!((1.95..=2.05).contains(&t), "theta {t}");
    assert_eq!(fit.trajectory.len(), 1);
}

#[test]
fn zero_epochs_returns_init() {
    let data = toy(300, 2);
    let cfg = FitConfig {
        solver: Solver::Gradient,
        epochs: 0,
        k_folds: 3,
        ..Default::default()
    };
    let init = StructuralModel::linear(BasisMap::polynomial(1, 1), vec![0.3, -0.7]).unwrap();
    let state = crossfit_nuisances(&data, &cfg, &ridge_specs()).unwrap();
    let fit = fit_dml_cmr(&data, &state, &cfg, init.clone()).unwrap();
    assert_eq!(fit.model, init);
    let fit = fit_ce_dml_cmr(&data, &ridge_specs(), &cfg, init.clone()).unwrap();
    assert_eq!(fit.model, init);
    let fit = fit_naive_two_stage(&data, &ridge_specs(), &cfg, init.clone()).unwrap();
    assert_eq!(fit.model, init);
}

#[test]
fn closed_form_beats_random_parameters() {
    let data = toy(2000, 5);
    let cfg = FitConfig {
        k_folds: 5,
        ..Default::default()
    };
    let state = crossfit_nuisances(&data, &cfg, &ridge_specs()).unwrap();
    let init = StructuralModel::zeros(BasisMap::polynomial(1, 2));
    let fit = fit_dml_cmr(&data, &state, &cfg, init).unwrap();
    let mut rng = rng_from_seed(9);
    for _ in 0..100 {
        let theta: Vec<f64> = fit.model.theta().iter().map(|t| t + rng.random_range(-0.5..0.5)).collect();
        let other = StructuralModel::linear(BasisMap::polynomial(1, 2), theta).unwrap();
        let probe = fit_second_stage(
            &data,
            &state,
            &FitConfig {
                solver: Solver::Gradient,
                epochs: 0,
                ..cfg.clone()
            },
            other,
            ScoreKind::Orthogonal,
            Method::Custom,
        )
        .unwrap();
        assert!(fit.final_objective <= probe.final_objective + 1e-12);
    }
}

#[test]
fn closed_form_objective_matches_pointwise_scores() {
    let data = toy(1500, 8);
    let cfg = FitConfig {
        k_folds: 3,
        ..Default::default()
    };
    let state = crossfit_nuisances(&data, &cfg, &ridge_specs()).unwrap();
    let fit = fit_dml_cmr(&data, &state, &cfg, StructuralModel::zeros(BasisMap::polynomial(1, 1))).unwrap();
    let mc = McConfig {
        seed: fit.seeds.mc,
        ..cfg.mc
    };
    let mut total = 0.0;
    for (k, fold) in state.fold_plan.folds.iter().enumerate() {
        let sub = data.subset(fold);
        let ys: Vec<f64> = sub.y().iter().copied().collect();
        let loss = pointwise_loss_batch(ScoreKind::Orthogonal, &ys, sub.c(), &fit.model, &state.pairs[k], &mc).unwrap();
        total += loss.mean;
    }
    total /= state.k() as f64;
    assert!((total - fit.final_objective).abs() < 1e-8, "{total} vs {}", fit.final_objective);
}

#[test]
fn gradient_solver_descends_towards_closed_form() {
    let data = toy(2000, 4);
    let state = analytic_state(data.n());
    let cfg = FitConfig {
        solver: Solver::Gradient,
        learning_rate: 0.05,
        epochs: 100,
        ..Default::default()
    };
    let init = StructuralModel::zeros(BasisMap::identity(1));
    let fit = fit_dml_cmr(&data, &state, &cfg, init.clone()).unwrap();
    assert!(fit.final_objective <= fit.trajectory[0]);
    assert!(fit.trajectory.iter().all(|v| v.is_finite()));
    let exact = fit_dml_cmr(&data, &state, &FitConfig::default(), init).unwrap();
    assert!((slope(&fit.model) - slope(&exact.model)).abs() < 0.05);
}

#[test]
fn divergence_reports_epoch() {
    let data = toy(500, 4);
    let state = analytic_state(data.n());
    let cfg = FitConfig {
        solver: Solver::Gradient,
        learning_rate: 1e300,
        epochs: 50,
        early_stop_tol: 0.0,
        ..Default::default()
    };
    let init = StructuralModel::linear(BasisMap::polynomial(1, 3), vec![0.0; 4]).unwrap();
    match fit_dml_cmr(&data, &state, &cfg, init) {
        Err(Error::Divergence { epoch }) => assert!(epoch >= 1),
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn network_second_stage_runs() {
    let data = toy(400, 6);
    let state = analytic_state(data.n());
    let cfg = FitConfig {
        solver: Solver::Gradient,
        learning_rate: 1e-2,
        epochs: 20,
        mc: McConfig {
            draws: 10,
            ..Default::default()
        },
        ..Default::default()
    };
    let init = StructuralModel::feedforward(1, &[8], 3);
    let fit = fit_dml_cmr(&data, &state, &cfg, init.clone()).unwrap();
    assert!(fit.final_objective < fit.trajectory[0]);
    assert!(fit.model.predict_one(&[1.0]).is_finite());
    assert!(fit_dml_cmr(&data, &state, &FitConfig::default(), init).is_err());
}

#[test]
fn ce_variant_matches_kfold_and_fits_once() {
    let data = toy(100_000, 21);
    let cfg = FitConfig::default();
    let init = StructuralModel::zeros(BasisMap::identity(1));
    let state = crossfit_nuisances(&data, &cfg, &ridge_specs()).unwrap();
    let kfold = fit_dml_cmr(&data, &state, &cfg, init.clone()).unwrap();
    let ce = fit_ce_dml_cmr(&data, &ridge_specs(), &cfg, init).unwrap();
    assert!((slope(&kfold.model) - slope(&ce.model)).abs() < 0.05);
    assert_eq!(kfold.nuisance_fits, 10);
    assert_eq!(ce.nuisance_fits, 1);
    assert_eq!(kfold.method, Method::DmlCmr);
    assert_eq!(ce.method, Method::CeDmlCmr);
}

#[test]
fn naive_and_orthogonal_agree_with_exact_nuisances() {
    let data = toy(100_000, 13);
    let state = analytic_state(data.n());
    let init = StructuralModel::zeros(BasisMap::identity(1));
    let cfg = FitConfig::default();
    let orth = fit_second_stage(&data, &state, &cfg, init.clone(), ScoreKind::Orthogonal, Method::Custom).unwrap();
    let naive = fit_second_stage(&data, &state, &cfg, init, ScoreKind::Naive, Method::Custom).unwrap();
    assert!((slope(&orth.model) - slope(&naive.model)).abs() < 0.05);
    // the objectives differ by E[(y - s0)^2] > 0
    assert!(naive.final_objective > orth.final_objective);
}

#[test]
fn biased_nuisances_hurt_naive_more() {
    let b = 0.5;
    let (mut err_dml, mut err_naive) = (0.0, 0.0);
    let init = StructuralModel::zeros(BasisMap::identity(1));
    for seed in 0..20u64 {
        let data = toy(10_000, 100 + seed);
        let cfg = FitConfig::default().with_seed(seed);
        let state = crossfit_nuisances(&data, &cfg, &ridge_specs()).unwrap();
        let biased = state.map_pairs(|p| inject_bias(p, b));
        let d = fit_second_stage(&data, &biased, &cfg, init.clone(), ScoreKind::Orthogonal, Method::Custom).unwrap();
        let nv = fit_second_stage(&data, &biased, &cfg, init.clone(), ScoreKind::Naive, Method::Custom).unwrap();
        err_dml += slope(&d.model);
        err_naive += slope(&nv.model);
    }
    let (err_dml, err_naive) = ((err_dml / 20.0 - 2.0).abs(), (err_naive / 20.0 - 2.0).abs());
    assert!(err_naive > err_dml, "naive {err_naive} dml {err_dml}");
}

#[test]
fn predictions_and_round_trip() {
    let data = toy(500, 1);
    let state = analytic_state(data.n());
    let init = StructuralModel::zeros(BasisMap::identity(1));
    let mut fit = fit_dml_cmr(&data, &state, &FitConfig::default(), init).unwrap();
    fit.model = StructuralModel::linear(BasisMap::identity(1), vec![2.0]).unwrap();
    let p = predict_structural(&fit, &DMatrix::from_row_slice(1, 1, &[3.0])).unwrap();
    assert_eq!(p[0], 6.0);
    assert_eq!(predict_structural(&fit, &DMatrix::zeros(0, 1)).unwrap().len(), 0);
    assert!(predict_structural(&fit, &DMatrix::zeros(1, 2)).is_err());
    fit.model = StructuralModel::linear(BasisMap::polynomial(1, 0), vec![1.5]).unwrap();
    let grid = DMatrix::from_column_slice(4, 1, &[-2.0, 0.0, 1.0, 7.0]);
    assert_eq!(predict_structural(&fit, &grid).unwrap(), DVector::from_element(4, 1.5));

    let back = FittedCMR::from_json(&fit.to_json().unwrap()).unwrap();
    assert_eq!(back, fit);
    let mut bad: serde_json::Value = serde_json::from_str(&fit.to_json().unwrap()).unwrap();
    bad["format_version"] = 99.into();
    assert!(FittedCMR::from_json(&bad.to_string()).is_err());
}

#[test]
fn config_validation_lists_fields() {
    let cfg = FitConfig {
        k_folds: 1,
        batch_size: 0,
        ..Default::default()
    };
    let fields: Vec<_> = cfg.problems().into_iter().map(|(f, _)| f).collect();
    assert_eq!(fields, vec!["k_folds", "batch_size"]);
    let parsed: std::result::Result<FitConfig, _> = toml::from_str("k_folds = 5\nbogus = 1");
    assert!(parsed.is_err());
}

