//! Ground-truth oracles, benchmarks, rate studies and the ill-posedness
//! diagnostic.

mod benchmark;
mod illposed;
mod pcl;
mod rates;

pub use benchmark::{
    benchmark, evaluate_fit, fit_configured, run_cell, write_benchmark, BenchmarkOutput, BenchmarkReport, BenchmarkSpec, CellFailure,
    CellResult, MethodConfig, MethodKind, PclEvalConfig, StructuralSpec,
};
pub use illposed::{
    ill_posedness_estimate, ill_posedness_from_thetas, ExcludedTheta, IllPosedProblem, IllPosednessReport,
};
pub use pcl::{pcl_a_grid, pcl_do_oracle, pcl_effect_curve, DoOracle};
pub use rates::{
    debias_study, nuisance_rate_study, rate_study, DebiasResult, DebiasStudyConfig, NuisanceProblem,
    NuisanceRateConfig, RateFlag, RateNuisances, RatePoint, RateStudyConfig, RateStudyResult,
};

use std::path::PathBuf;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{
    gen_demand_iv, gen_linear_toy, gen_pcl_demand, gen_semi_synthetic, ingest_covariates_csv, Dataset,
    DemandIvParams, LinearToyParams, PclDemandParams, SemiSyntheticParams, Truth,
};
use crate::dml::{predict_structural, FittedCMR};
use crate::rng::rng_from_seed;
use crate::{Error, Result};

// ---------------------------------------------------------------------------
// Generators addressed by configuration

fn two() -> f64 {
    2.0
}
fn one() -> f64 {
    1.0
}
fn rho_default() -> f64 {
    0.9
}
fn k_default() -> usize {
    3
}

/// A named data generator with its parameters (sample size and seed are
/// supplied per run).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum GeneratorSpec {
    LinearToy {
        #[serde(default = "two")]
        theta0: f64,
        #[serde(default = "one")]
        instrument_strength: f64,
    },
    DemandIv {
        #[serde(default = "rho_default")]
        rho: f64,
        #[serde(default = "one")]
        iv_strength: f64,
        #[serde(default)]
        ood_time: bool,
    },
    PclDemand,
    SemiSynthetic {
        covariates: PathBuf,
        #[serde(default)]
        columns: Option<Vec<String>>,
        #[serde(default = "k_default")]
        k_instruments: usize,
        #[serde(default)]
        fz_table: Option<Vec<f64>>,
    },
}

impl GeneratorSpec {
    pub fn linear_toy() -> Self {
        GeneratorSpec::LinearToy {
            theta0: 2.0,
            instrument_strength: 1.0,
        }
    }

    pub fn demand(iv_strength: f64) -> Self {
        GeneratorSpec::DemandIv {
            rho: 0.9,
            iv_strength,
            ood_time: false,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            GeneratorSpec::LinearToy { .. } => "linear-toy",
            GeneratorSpec::DemandIv { .. } => "demand-iv",
            GeneratorSpec::PclDemand => "pcl-demand",
            GeneratorSpec::SemiSynthetic { .. } => "semi-synthetic",
        }
    }

    pub fn generate(&self, n: usize, seed: u64) -> Result<Dataset> {
        match self {
            GeneratorSpec::LinearToy {
                theta0,
                instrument_strength,
            } => gen_linear_toy(LinearToyParams {
                n,
                seed,
                theta0: *theta0,
                instrument_strength: *instrument_strength,
            }),
            GeneratorSpec::DemandIv {
                rho,
                iv_strength,
                ood_time,
            } => gen_demand_iv(DemandIvParams {
                n,
                seed,
                rho: *rho,
                iv_strength: *iv_strength,
                ood_time: *ood_time,
            }),
            GeneratorSpec::PclDemand => gen_pcl_demand(PclDemandParams { n, seed }),
            GeneratorSpec::SemiSynthetic {
                covariates,
                columns,
                k_instruments,
                fz_table,
            } => {
                let (cov, names) = ingest_covariates_csv(covariates, columns.as_deref())?;
                if n > cov.nrows() {
                    return Err(Error::invalid(format!(
                        "requested {n} rows but the covariate file has {}",
                        cov.nrows()
                    )));
                }
                // a seeded subsample of the covariate rows
                let mut rows: Vec<usize> = (0..cov.nrows()).collect();
                rows.shuffle(&mut rng_from_seed(seed));
                rows.truncate(n);
                rows.sort_unstable();
                let params = SemiSyntheticParams {
                    covariates: cov.select_rows(&rows),
                    covariate_names: names,
                    k_instruments: *k_instruments,
                    seed,
                    fz_table: fz_table.clone(),
                };
                gen_semi_synthetic(&params)
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Truth oracles and MSE

/// Source of the target a fitted model is compared against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TruthOracle {
    /// Closed-form structural function evaluated at the structural input.
    AnalyticF0 { truth: Truth },
    /// Interventional mean `E[Y | do(A = a)]` by Monte Carlo.
    McDoIntervention { mc_n: usize, seed: u64 },
}

impl TruthOracle {
    pub fn for_dataset(data: &Dataset) -> Result<Self> {
        match data.truth() {
            None => Err(Error::invalid("dataset carries no ground truth")),
            Some(Truth::PclDemand) => Ok(TruthOracle::McDoIntervention {
                mc_n: 1_000_000,
                seed: 0,
            }),
            Some(t) => Ok(TruthOracle::AnalyticF0 { truth: t.clone() }),
        }
    }

    /// Target at one input: a structural row for analytic oracles, `[a]`
    /// for the interventional oracle.
    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        match self {
            TruthOracle::AnalyticF0 { truth } => truth
                .structural(x)
                .ok_or_else(|| Error::invalid("oracle has no closed-form structural function")),
            TruthOracle::McDoIntervention { mc_n, seed } => {
                if x.len() != 1 {
                    return Err(Error::shape("a single treatment value", x.len()));
                }
                Ok(pcl_do_oracle(x, *mc_n, *seed)?.values[0])
            }
        }
    }
}

/// Squared error of a fit against an oracle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MseReport {
    /// Mean of `(f̂ - f₀)²` in original units.
    pub mse: f64,
    /// The same divided by the outcome variance used for standardisation,
    /// when the fit was trained on standardised data.
    pub mse_standardised: Option<f64>,
    pub n_test: usize,
}

impl MseReport {
    pub(crate) fn from_original(mse: f64, n_test: usize, fit: &FittedCMR) -> Self {
        let scale = fit
            .standardiser
            .as_ref()
            .and_then(|s| s.stats(&fit.y_name))
            .map(|s| s.std * s.std);
        MseReport {
            mse,
            mse_standardised: scale.map(|v| mse / v),
            n_test,
        }
    }
}

/// Mean squared difference between the fit and an analytic oracle over the
/// rows of `test_x` (original units).
pub fn mse_vs_truth(fit: &FittedCMR, oracle: &TruthOracle, test_x: &DMatrix<f64>) -> Result<MseReport> {
    if !matches!(oracle, TruthOracle::AnalyticF0 { .. }) {
        return Err(Error::invalid(
            "interventional oracles compare treatment curves; use the proxy-effect evaluation",
        ));
    }
    if test_x.nrows() == 0 {
        return Err(Error::EmptyInput("no test points".into()));
    }
    let pred = predict_structural(fit, test_x)?;
    let mut row = vec![0.0; test_x.ncols()];
    let mut total = 0.0;
    for i in 0..test_x.nrows() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = test_x[(i, j)];
        }
        total += (pred[i] - oracle.eval(&row)?).powi(2);
    }
    let mse = total / test_x.nrows() as f64;
    if !mse.is_finite() {
        return Err(Error::Fit("non-finite test error".into()));
    }
    Ok(MseReport::from_original(mse, test_x.nrows(), fit))
}

// ---------------------------------------------------------------------------
// Small statistics helpers

/// Linear-interpolation quantile of sorted data (`q` in `[0, 1]`).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Ordinary least squares `y ≈ a + b x`; returns `(b, a)`.
pub fn ols_slope(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let b = sxy / sxx;
    (b, my - b * mx)
}
