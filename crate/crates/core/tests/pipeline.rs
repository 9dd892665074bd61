//! Public-API round trips: generate, persist, fit, reload, predict.

use dmlcmr::data::{read_dataset, write_dataset};
use dmlcmr::dml::{predict_structural, FitConfig, FittedCMR, NuisanceSpecs, Solver};
use dmlcmr::estimators::{BasisMap, DensitySpec, RegressorSpec};
use dmlcmr::eval::{evaluate_fit, fit_configured, GeneratorSpec, MethodConfig, MethodKind, PclEvalConfig, StructuralSpec};

fn ridge() -> RegressorSpec {
    RegressorSpec::ridge(BasisMap::polynomial(1, 1), 0.0)
}

fn method(kind: MethodKind) -> MethodConfig {
    MethodConfig {
        name: "m".into(),
        method: kind,
        nuisances: NuisanceSpecs {
            outcome: ridge(),
            density: DensitySpec::GaussianRegression { mean: ridge() },
        },
        structural: StructuralSpec::LinearInBasis {
            basis: BasisMap::polynomial(1, 1),
        },
        fit: FitConfig {
            solver: Solver::ClosedForm,
            k_folds: 4,
            ..FitConfig::default()
        },
    }
}

#[test]
fn csv_round_trip_gives_the_same_fit() {
    let g = GeneratorSpec::linear_toy();
    let data = g.generate(1500, 21).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("toy.csv");
    write_dataset(&data, &path).unwrap();
    let back = read_dataset(&path).unwrap();
    assert_eq!(back.n(), data.n());

    let (a, audit) = fit_configured(&method(MethodKind::DmlCmr), &data, 5, false).unwrap();
    let (b, _) = fit_configured(&method(MethodKind::DmlCmr), &back, 5, false).unwrap();
    assert_eq!(audit, Some(true));
    assert_eq!(a.predict_one(&[0.7]), b.predict_one(&[0.7]));
}

#[test]
fn saved_fit_predicts_identically() {
    let data = GeneratorSpec::linear_toy().generate(1000, 2).unwrap();
    for kind in [MethodKind::DmlCmr, MethodKind::CeDmlCmr, MethodKind::NaiveTwoStage] {
        let (fit, _) = fit_configured(&method(kind), &data, 9, true).unwrap();
        let loaded = FittedCMR::from_json(&fit.to_json().unwrap()).unwrap();
        let grid = nalgebra::DMatrix::from_column_slice(3, 1, &[-1.0, 0.0, 1.0]);
        assert_eq!(
            predict_structural(&fit, &grid).unwrap(),
            predict_structural(&loaded, &grid).unwrap()
        );
        // slope two in original units, despite standardised fitting
        let slope = (fit.predict_one(&[1.0]) - fit.predict_one(&[-1.0])) / 2.0;
        assert!((slope - 2.0).abs() < 0.3, "{kind:?}: slope {slope}");
    }
}

#[test]
fn error_against_truth_shrinks_with_n() {
    let g = GeneratorSpec::linear_toy();
    let pcl = PclEvalConfig::default();
    let mse = |n: usize| {
        let data = g.generate(n, 4).unwrap();
        let (fit, _) = fit_configured(&method(MethodKind::DmlCmr), &data, 4, false).unwrap();
        evaluate_fit(&fit, &data, &g, 2000, 99, &pcl).unwrap().mse
    };
    assert!(mse(8000) < mse(250));
}
