use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{gen_linear_toy, LinearToyParams};
use crate::dml::{
    crossfit_nuisances, fit_dml_cmr, fit_second_stage, inject_bias, CrossFitState, FitConfig, Method, NuisanceSpecs,
    StructuralModel,
};
use crate::estimators::{fit_regressor, BasisMap, DensitySpec, RegressorSpec};
use crate::rng::{derive_seed, stream};
use crate::score::{analytic_pair, AnalyticProblem, DemandProblem, LinearToyProblem, ScoreKind};
use crate::{Error, Result};

use super::{ols_slope, quantile_sorted};

/// Whether a nuisance estimator converges fast enough for the second stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum RateFlag {
    Pass,
    Fail,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatePoint {
    pub n: usize,
    /// One error per seed.
    pub errors: Vec<f64>,
    /// Root mean square of `errors`.
    pub rms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateStudyResult {
    pub study: String,
    pub n_grid: Vec<usize>,
    pub points: Vec<RatePoint>,
    /// OLS slope of `log rms` on `log n`.
    pub slope: f64,
    pub intercept: f64,
    /// Percentile bootstrap interval for the slope (seeds resampled per n).
    pub slope_ci: [f64; 2],
    pub flag: Option<RateFlag>,
    /// Number of cross-fitted states whose leakage audit passed, out of `fits`.
    pub audits_passed: usize,
    pub fits: usize,
}

fn default_bootstrap() -> usize {
    1000
}

fn check_grid(n_grid: &[usize], seeds: usize) -> Result<()> {
    if n_grid.len() < 3 {
        return Err(Error::invalid(format!("need at least 3 grid points, got {}", n_grid.len())));
    }
    if n_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid("n_grid must be strictly increasing"));
    }
    if seeds == 0 {
        return Err(Error::invalid("need at least one seed"));
    }
    Ok(())
}

fn rms(v: &[f64]) -> f64 {
    (v.iter().map(|e| e * e).sum::<f64>() / v.len() as f64).sqrt()
}

/// Assemble per-n errors into a slope with a bootstrap interval.
fn summarise(
    study: &str,
    n_grid: &[usize],
    errors: Vec<Vec<f64>>,
    bootstrap: usize,
    seed: u64,
) -> Result<(Vec<RatePoint>, f64, f64, [f64; 2])> {
    let points: Vec<RatePoint> = n_grid
        .iter()
        .zip(errors)
        .map(|(&n, errors)| RatePoint {
            n,
            rms: rms(&errors),
            errors,
        })
        .collect();
    if points.iter().any(|p| !(p.rms.is_finite() && p.rms > 0.0)) {
        return Err(Error::Fit(format!("{study}: error must be positive and finite at every n")));
    }
    let lx: Vec<f64> = n_grid.iter().map(|&n| (n as f64).ln()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.rms.ln()).collect();
    let (slope, intercept) = ols_slope(&lx, &ly);
    let mut rng = stream(seed, "rate/bootstrap", 0);
    let mut slopes = Vec::with_capacity(bootstrap);
    for _ in 0..bootstrap {
        let ly: Vec<f64> = points
            .iter()
            .map(|p| {
                let k = p.errors.len();
                let resampled: Vec<f64> = (0..k).map(|_| p.errors[rng.random_range(0..k)]).collect();
                rms(&resampled).max(f64::MIN_POSITIVE).ln()
            })
            .collect();
        slopes.push(ols_slope(&lx, &ly).0);
    }
    slopes.sort_by(f64::total_cmp);
    let ci = if slopes.is_empty() {
        [slope, slope]
    } else {
        [quantile_sorted(&slopes, 0.025), quantile_sorted(&slopes, 0.975)]
    };
    Ok((points, slope, intercept, ci))
}

// ---------------------------------------------------------------------------
// Second-stage rate on the linear toy

/// Nuisances used by the second-stage rate study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum RateNuisances {
    Fitted(NuisanceSpecs),
    /// The true `s₀` and conditional law.
    Analytic,
}

fn toy_ridge_specs() -> NuisanceSpecs {
    let ridge = RegressorSpec::ridge(BasisMap::polynomial(1, 1), 1e-3);
    NuisanceSpecs {
        outcome: ridge.clone(),
        density: DensitySpec::GaussianRegression { mean: ridge },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateStudyConfig {
    pub n_grid: Vec<usize>,
    pub seeds: usize,
    #[serde(default = "default_rate_nuisances")]
    pub nuisances: RateNuisances,
    #[serde(default)]
    pub fit: FitConfig,
    #[serde(default)]
    pub problem: LinearToyProblem,
    #[serde(default = "default_bootstrap")]
    pub bootstrap: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_rate_nuisances() -> RateNuisances {
    RateNuisances::Fitted(toy_ridge_specs())
}

impl Default for RateStudyConfig {
    fn default() -> Self {
        RateStudyConfig {
            n_grid: vec![500, 1000, 2000, 4000, 8000],
            seeds: 20,
            nuisances: default_rate_nuisances(),
            fit: FitConfig::default(),
            problem: LinearToyProblem::default(),
            bootstrap: default_bootstrap(),
            seed: 0,
        }
    }
}

/// RMS of `|θ̂ - θ₀|` against `n` for the closed-form second stage on the
/// linear toy with `f_θ(a) = θa`.
pub fn rate_study(cfg: &RateStudyConfig) -> Result<RateStudyResult> {
    check_grid(&cfg.n_grid, cfg.seeds)?;
    cfg.fit.validate()?;
    let cells: Vec<(usize, usize)> = (0..cfg.n_grid.len())
        .flat_map(|i| (0..cfg.seeds).map(move |s| (i, s)))
        .collect();
    let results: Vec<(f64, bool)> = cells
        .par_iter()
        .map(|&(i, s)| {
            let n = cfg.n_grid[i];
            let data_seed = derive_seed(derive_seed(cfg.seed, "rate/data", n as u64), "seed", s as u64);
            let data = gen_linear_toy(LinearToyParams {
                n,
                seed: data_seed,
                theta0: cfg.problem.theta0,
                instrument_strength: cfg.problem.instrument_strength,
            })?;
            let fit_cfg = cfg.fit.clone().with_seed(data_seed);
            let state = match &cfg.nuisances {
                RateNuisances::Fitted(specs) => crossfit_nuisances(&data, &fit_cfg, specs)?,
                RateNuisances::Analytic => CrossFitState::single(n, analytic_pair(cfg.problem)),
            };
            let init = StructuralModel::zeros(BasisMap::identity(1));
            let fit = fit_dml_cmr(&data, &state, &fit_cfg, init)?;
            let audit_ok = state.cross_fitted && fit.audit.passed;
            Ok(((fit.model.theta()[0] - cfg.problem.theta0).abs(), audit_ok))
        })
        .collect::<Result<_>>()?;
    let mut errors = vec![Vec::with_capacity(cfg.seeds); cfg.n_grid.len()];
    let mut audits = 0;
    for (&(i, _), (e, ok)) in cells.iter().zip(&results) {
        errors[i].push(*e);
        audits += usize::from(*ok);
    }
    let fits = match cfg.nuisances {
        RateNuisances::Fitted(_) => cells.len(),
        RateNuisances::Analytic => 0,
    };
    let (points, slope, intercept, slope_ci) = summarise("rate study", &cfg.n_grid, errors, cfg.bootstrap, cfg.seed)?;
    Ok(RateStudyResult {
        study: "second-stage".into(),
        n_grid: cfg.n_grid.clone(),
        points,
        slope,
        intercept,
        slope_ci,
        flag: None,
        audits_passed: audits,
        fits,
    })
}

// ---------------------------------------------------------------------------
// Nuisance convergence rate

/// Problems with a closed-form outcome mean `s₀(c)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum NuisanceProblem {
    LinearToy(LinearToyProblem),
    DemandIv(DemandProblem),
}

impl NuisanceProblem {
    /// The problem behind this spec.
    pub fn as_problem(&self) -> &dyn AnalyticProblem {
        match self {
            NuisanceProblem::LinearToy(p) => p,
            NuisanceProblem::DemandIv(p) => p,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuisanceRateConfig {
    pub estimator: RegressorSpec,
    pub problem: NuisanceProblem,
    pub n_grid: Vec<usize>,
    pub seeds: usize,
    #[serde(default = "default_n_test")]
    pub n_test: usize,
    #[serde(default = "default_bootstrap")]
    pub bootstrap: usize,
    #[serde(default)]
    pub seed: u64,
    /// Slopes below this pass.
    #[serde(default = "default_threshold")]
    pub pass_below: f64,
}

fn default_n_test() -> usize {
    10_000
}
fn default_threshold() -> f64 {
    -0.25
}

impl NuisanceRateConfig {
    pub fn new(estimator: RegressorSpec, problem: NuisanceProblem) -> Self {
        NuisanceRateConfig {
            estimator,
            problem,
            n_grid: vec![500, 1000, 2000, 4000, 8000],
            seeds: 20,
            n_test: default_n_test(),
            bootstrap: default_bootstrap(),
            seed: 0,
            pass_below: default_threshold(),
        }
    }
}

fn sample_problem(p: &dyn AnalyticProblem, n: usize, seed: u64) -> (nalgebra::DMatrix<f64>, nalgebra::DVector<f64>) {
    let mut rng = stream(seed, "nuisance-rate/sample", 0);
    let d = p.d_c();
    let mut cs = Vec::with_capacity(n * d);
    let mut ys = Vec::with_capacity(n);
    for _ in 0..n {
        let (y, _, c) = p.sample(&mut rng);
        ys.push(y);
        cs.extend(c);
    }
    (
        nalgebra::DMatrix::from_row_slice(n, d, &cs),
        nalgebra::DVector::from_vec(ys),
    )
}

/// L2 error `‖ŝ - s₀‖` on fresh test points against `n`, flagged PASS when
/// the fitted log-log slope is below `pass_below`.
pub fn nuisance_rate_study(cfg: &NuisanceRateConfig) -> Result<RateStudyResult> {
    check_grid(&cfg.n_grid, cfg.seeds)?;
    if cfg.n_test == 0 {
        return Err(Error::invalid("n_test must be positive"));
    }
    let problem = cfg.problem.as_problem();
    let (test_c, _) = sample_problem(problem, cfg.n_test, derive_seed(cfg.seed, "nuisance-rate/test", 0));
    let truth: Vec<f64> = (0..cfg.n_test)
        .map(|i| problem.s0(&test_c.row(i).iter().copied().collect::<Vec<_>>()))
        .collect();
    let cells: Vec<(usize, usize)> = (0..cfg.n_grid.len())
        .flat_map(|i| (0..cfg.seeds).map(move |s| (i, s)))
        .collect();
    let errs: Vec<f64> = cells
        .par_iter()
        .map(|&(i, s)| {
            let n = cfg.n_grid[i];
            let seed = derive_seed(derive_seed(cfg.seed, "nuisance-rate/data", n as u64), "seed", s as u64);
            let (c, y) = sample_problem(problem, n, seed);
            let model = fit_regressor(&cfg.estimator.reseeded(seed), &c, &y)?;
            let pred = model.predict(&test_c)?;
            let mse = pred.iter().zip(&truth).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / cfg.n_test as f64;
            Ok(mse.sqrt())
        })
        .collect::<Result<_>>()?;
    let mut errors = vec![Vec::with_capacity(cfg.seeds); cfg.n_grid.len()];
    for (&(i, _), e) in cells.iter().zip(errs) {
        errors[i].push(e);
    }
    let (points, slope, intercept, slope_ci) =
        summarise("nuisance rate study", &cfg.n_grid, errors, cfg.bootstrap, cfg.seed)?;
    Ok(RateStudyResult {
        study: format!("nuisance/{}", problem.name()),
        n_grid: cfg.n_grid.clone(),
        points,
        slope,
        intercept,
        slope_ci,
        flag: Some(if slope < cfg.pass_below { RateFlag::Pass } else { RateFlag::Fail }),
        audits_passed: 0,
        fits: 0,
    })
}

// ---------------------------------------------------------------------------
// Sensitivity to injected nuisance bias

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DebiasStudyConfig {
    pub b_grid: Vec<f64>,
    pub seeds: usize,
    pub n: usize,
    #[serde(default = "toy_ridge_specs")]
    pub nuisances: NuisanceSpecs,
    #[serde(default)]
    pub fit: FitConfig,
    #[serde(default)]
    pub problem: LinearToyProblem,
    #[serde(default)]
    pub seed: u64,
}

impl Default for DebiasStudyConfig {
    fn default() -> Self {
        DebiasStudyConfig {
            b_grid: vec![0.1, 0.2, 0.4],
            seeds: 20,
            n: 20_000,
            nuisances: toy_ridge_specs(),
            fit: FitConfig::default(),
            problem: LinearToyProblem::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DebiasResult {
    pub b_grid: Vec<f64>,
    /// `|mean θ̂ - θ₀|` over seeds, per bias magnitude.
    pub err_dml: Vec<f64>,
    pub err_naive: Vec<f64>,
    pub mean_theta_dml: Vec<f64>,
    pub mean_theta_naive: Vec<f64>,
    /// Log-log slopes of error against `b`.
    pub slope_dml: f64,
    pub slope_naive: f64,
    pub audits_passed: usize,
    pub fits: usize,
}

/// Cross-fit ridge nuisances, corrupt them with [`inject_bias`] at each `b`,
/// and compare the orthogonal and naive second stages on matched seeds.
pub fn debias_study(cfg: &DebiasStudyConfig) -> Result<DebiasResult> {
    if cfg.b_grid.len() < 2 || cfg.b_grid.iter().any(|b| !(*b > 0.0)) {
        return Err(Error::invalid("b_grid needs at least two positive magnitudes"));
    }
    if cfg.seeds == 0 {
        return Err(Error::invalid("need at least one seed"));
    }
    let per_seed: Vec<(Vec<f64>, Vec<f64>, bool)> = (0..cfg.seeds)
        .into_par_iter()
        .map(|s| {
            let seed = derive_seed(cfg.seed, "debias/data", s as u64);
            let data = gen_linear_toy(LinearToyParams {
                n: cfg.n,
                seed,
                theta0: cfg.problem.theta0,
                instrument_strength: cfg.problem.instrument_strength,
            })?;
            let fit_cfg = cfg.fit.clone().with_seed(seed);
            let state = crossfit_nuisances(&data, &fit_cfg, &cfg.nuisances)?;
            let audit = state.audit().passed;
            let init = StructuralModel::zeros(BasisMap::identity(1));
            let mut dml = Vec::new();
            let mut naive = Vec::new();
            for &b in &cfg.b_grid {
                let biased = state.map_pairs(|p| inject_bias(p, b));
                let d = fit_second_stage(&data, &biased, &fit_cfg, init.clone(), ScoreKind::Orthogonal, Method::Custom)?;
                let nv = fit_second_stage(&data, &biased, &fit_cfg, init.clone(), ScoreKind::Naive, Method::Custom)?;
                dml.push(d.model.theta()[0]);
                naive.push(nv.model.theta()[0]);
            }
            Ok((dml, naive, audit))
        })
        .collect::<Result<_>>()?;
    let nb = cfg.b_grid.len();
    let mean_at = |pick: &dyn Fn(&(Vec<f64>, Vec<f64>, bool)) -> &Vec<f64>, j: usize| {
        per_seed.iter().map(|r| pick(r)[j]).sum::<f64>() / cfg.seeds as f64
    };
    let mean_theta_dml: Vec<f64> = (0..nb).map(|j| mean_at(&|r| &r.0, j)).collect();
    let mean_theta_naive: Vec<f64> = (0..nb).map(|j| mean_at(&|r| &r.1, j)).collect();
    let theta0 = cfg.problem.theta0;
    let err_dml: Vec<f64> = mean_theta_dml.iter().map(|t| (t - theta0).abs()).collect();
    let err_naive: Vec<f64> = mean_theta_naive.iter().map(|t| (t - theta0).abs()).collect();
    let lb: Vec<f64> = cfg.b_grid.iter().map(|b| b.ln()).collect();
    let log = |v: &[f64]| v.iter().map(|e| e.max(f64::MIN_POSITIVE).ln()).collect::<Vec<_>>();
    let slope_dml = ols_slope(&lb, &log(&err_dml)).0;
    let slope_naive = ols_slope(&lb, &log(&err_naive)).0;
    Ok(DebiasResult {
        b_grid: cfg.b_grid.clone(),
        err_dml,
        err_naive,
        mean_theta_dml,
        mean_theta_naive,
        slope_dml,
        slope_naive,
        audits_passed: per_seed.iter().filter(|r| r.2).count(),
        fits: cfg.seeds,
    })
}
