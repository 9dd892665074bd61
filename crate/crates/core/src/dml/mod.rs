//! The cross-fitted estimator, its single-fit variant and the naive
//! two-stage baseline.
//!
//! All three share one second stage: given a [`CrossFitState`] that assigns
//! a nuisance pair to every row, minimise
//! `(1/K) Σ_k mean_{i ∈ fold k} (t_i - ĝ_k(f_θ, c_i))²`
//! where `t_i = ŝ_k(c_i)` for the orthogonal score and `t_i = y_i` for the
//! naive one.

mod bias;
mod crossfit;
mod model;

pub use bias::{inject_bias, shift_density};
pub use crossfit::{crossfit_nuisances, full_data_nuisances, AuditReport, CrossFitState, NuisanceSpecs};
pub use model::StructuralModel;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Standardiser};
use crate::estimators::{ridge_solve, AdamW, BasisMap};
use crate::rng::{derive_seed, stream};
use crate::score::{DrawSet, McConfig, NuisancePair, ScoreKind};
use crate::{Error, Result};

pub const FIT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Solver {
    /// Exact weighted least squares on pseudo-features (linear-in-basis only).
    #[default]
    ClosedForm,
    /// Mini-batch AdamW, folds visited round-robin.
    Gradient,
}

/// Second-stage settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    #[serde(default = "d_k")]
    pub k_folds: usize,
    #[serde(default)]
    pub mc: McConfig,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_lr")]
    pub learning_rate: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "d_score")]
    pub score: ScoreKind,
    #[serde(default)]
    pub solver: Solver,
    /// Ridge penalty of the closed-form solver (constant feature unpenalised).
    #[serde(default)]
    pub ridge_lambda: f64,
    #[serde(default = "d_tol")]
    pub early_stop_tol: f64,
    #[serde(default = "d_window")]
    pub early_stop_window: usize,
    #[serde(default)]
    pub seed: u64,
}

fn d_k() -> usize {
    10
}
fn d_batch() -> usize {
    128
}
fn d_epochs() -> usize {
    200
}
fn d_lr() -> f64 {
    1e-3
}
fn d_score() -> ScoreKind {
    ScoreKind::Orthogonal
}
fn d_tol() -> f64 {
    1e-5
}
fn d_window() -> usize {
    10
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            k_folds: d_k(),
            mc: McConfig::default(),
            batch_size: d_batch(),
            epochs: d_epochs(),
            learning_rate: d_lr(),
            weight_decay: 0.0,
            score: d_score(),
            solver: Solver::ClosedForm,
            ridge_lambda: 0.0,
            early_stop_tol: d_tol(),
            early_stop_window: d_window(),
            seed: 0,
        }
    }
}

impl FitConfig {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Field-level problems, empty when the config is valid.
    pub fn problems(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        if self.k_folds < 2 {
            out.push(("k_folds", format!("must be >= 2, got {}", self.k_folds)));
        }
        if self.mc.draws < 1 {
            out.push(("mc.draws", "must be >= 1".to_string()));
        }
        if self.batch_size < 1 {
            out.push(("batch_size", "must be >= 1".to_string()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            out.push(("learning_rate", format!("must be positive, got {}", self.learning_rate)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            out.push(("weight_decay", format!("must be >= 0, got {}", self.weight_decay)));
        }
        if !(self.ridge_lambda >= 0.0 && self.ridge_lambda.is_finite()) {
            out.push(("ridge_lambda", format!("must be >= 0, got {}", self.ridge_lambda)));
        }
        if !(self.early_stop_tol >= 0.0) {
            out.push(("early_stop_tol", "must be >= 0".to_string()));
        }
        if self.early_stop_window < 1 {
            out.push(("early_stop_window", "must be >= 1".to_string()));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        match self.problems().first() {
            None => Ok(()),
            Some((field, msg)) => Err(Error::invalid(format!("{field}: {msg}"))),
        }
    }

    /// Monte Carlo settings with the seed derived from the fit seed.
    fn mc_for_fit(&self) -> McConfig {
        McConfig {
            seed: derive_seed(self.seed, "mc", 0),
            ..self.mc
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    DmlCmr,
    CeDmlCmr,
    NaiveTwoStage,
    /// Second stage run on a caller-supplied nuisance state.
    Custom,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::DmlCmr => "dml-cmr",
            Method::CeDmlCmr => "ce-dml-cmr",
            Method::NaiveTwoStage => "naive-two-stage",
            Method::Custom => "custom",
        }
    }
}

/// Every seed that influenced a fit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedLedger {
    pub root: u64,
    pub folds: u64,
    pub nuisances: Vec<u64>,
    pub mc: u64,
    pub batches: u64,
}

/// A fitted structural function with its provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedCMR {
    pub format_version: u32,
    pub method: Method,
    pub model: StructuralModel,
    /// Full objective at initialisation and after each epoch (gradient), or
    /// at the solution (closed form).
    pub trajectory: Vec<f64>,
    pub selected_epoch: usize,
    pub final_objective: f64,
    pub config: FitConfig,
    pub seeds: SeedLedger,
    pub nuisance_fits: usize,
    pub audit: AuditReport,
    pub x_names: Vec<String>,
    pub y_name: String,
    /// Present when the model was fitted on standardised data; predictions
    /// are then mapped back to original units.
    #[serde(default)]
    pub standardiser: Option<Standardiser>,
}

impl FittedCMR {
    pub fn with_standardiser(mut self, st: Standardiser) -> Self {
        self.standardiser = Some(st);
        self
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let fit: FittedCMR = serde_json::from_str(text)?;
        if fit.format_version != FIT_FORMAT_VERSION {
            return Err(Error::invalid(format!(
                "unsupported fit format version {}",
                fit.format_version
            )));
        }
        Ok(fit)
    }

    /// Prediction at one input row given in original units.
    pub fn predict_one(&self, x: &[f64]) -> f64 {
        match &self.standardiser {
            None => self.model.predict_one(x),
            Some(st) => {
                let mut xs = x.to_vec();
                st.forward_x(&self.x_names, &mut xs);
                st.inverse(&self.y_name, self.model.predict_one(&xs))
            }
        }
    }
}

/// Evaluate a fit on a grid of inputs (rows, original units).
pub fn predict_structural(fit: &FittedCMR, x_grid: &DMatrix<f64>) -> Result<DVector<f64>> {
    let d = fit.model.input_dim();
    if x_grid.nrows() > 0 && x_grid.ncols() != d {
        return Err(Error::shape(format!("{d} input columns"), x_grid.ncols()));
    }
    let mut row = vec![0.0; x_grid.ncols()];
    Ok(DVector::from_iterator(
        x_grid.nrows(),
        (0..x_grid.nrows()).map(|i| {
            for (j, v) in row.iter_mut().enumerate() {
                *v = x_grid[(i, j)];
            }
            fit.predict_one(&row)
        }),
    ))
}

// ---------------------------------------------------------------------------
// Public entry points

/// K-fold cross-fitted estimator on a prepared nuisance state.
pub fn fit_dml_cmr(data: &Dataset, state: &CrossFitState, cfg: &FitConfig, init: StructuralModel) -> Result<FittedCMR> {
    let method = if state.cross_fitted { Method::DmlCmr } else { Method::Custom };
    fit_second_stage(data, state, cfg, init, cfg.score, method)
}

/// Nuisances fitted once on all rows, then the orthogonal second stage.
pub fn fit_ce_dml_cmr(data: &Dataset, specs: &NuisanceSpecs, cfg: &FitConfig, init: StructuralModel) -> Result<FittedCMR> {
    let state = full_data_nuisances(data, cfg, specs, true)?;
    fit_second_stage(data, &state, cfg, init, ScoreKind::Orthogonal, Method::CeDmlCmr)
}

/// Density fitted on all rows, second stage regresses `y` on `ĝ(f, c)`.
pub fn fit_naive_two_stage(
    data: &Dataset,
    specs: &NuisanceSpecs,
    cfg: &FitConfig,
    init: StructuralModel,
) -> Result<FittedCMR> {
    let state = full_data_nuisances(data, cfg, specs, false)?;
    fit_second_stage(data, &state, cfg, init, ScoreKind::Naive, Method::NaiveTwoStage)
}

// ---------------------------------------------------------------------------
// Second stage

/// Per-row quantities that stay fixed while θ moves.
struct RowCache {
    targets: Vec<f64>,
    /// `m_i = Σ_j w_j φ(x_ij)` for linear-in-basis models.
    pseudo: Option<Vec<Vec<f64>>>,
    /// Raw draws for nonlinear models.
    draws: Option<Vec<DrawSet>>,
}

fn row_pair<'a>(state: &'a CrossFitState, fold_of: &[usize], i: usize) -> &'a NuisancePair {
    &state.pairs[fold_of[i]]
}

fn pseudo_features(basis: &BasisMap, ds: &DrawSet) -> Vec<f64> {
    let mut m = vec![0.0; basis.output_dim()];
    let mut phi = Vec::with_capacity(m.len());
    for j in 0..ds.len() {
        basis.eval_into(ds.row(j), &mut phi);
        for (a, p) in m.iter_mut().zip(&phi) {
            *a += ds.weights[j] * p;
        }
    }
    m
}

fn build_cache(
    data: &Dataset,
    state: &CrossFitState,
    kind: ScoreKind,
    mc: &McConfig,
    model: &StructuralModel,
) -> RowCache {
    let fold_of = state.fold_plan.assignment();
    let basis = match model {
        StructuralModel::LinearInBasis { basis, .. } => Some(basis),
        StructuralModel::FeedForward { .. } => None,
    };
    let per_row: Vec<(f64, Option<Vec<f64>>, Option<DrawSet>)> = (0..data.n())
        .into_par_iter()
        .map(|i| {
            let c = data.c_row(i);
            let pair = row_pair(state, &fold_of, i);
            let t = pair.target(kind, data.y()[i], &c);
            let ds = pair.input_draws(&c, mc);
            match basis {
                Some(b) => (t, Some(pseudo_features(b, &ds)), None),
                None => (t, None, Some(ds)),
            }
        })
        .collect();
    let mut targets = Vec::with_capacity(per_row.len());
    let mut pseudo = basis.map(|_| Vec::with_capacity(per_row.len()));
    let mut draws = basis.is_none().then(|| Vec::with_capacity(per_row.len()));
    for (t, m, d) in per_row {
        targets.push(t);
        if let (Some(p), Some(m)) = (pseudo.as_mut(), m) {
            p.push(m);
        }
        if let (Some(v), Some(d)) = (draws.as_mut(), d) {
            v.push(d);
        }
    }
    RowCache {
        targets,
        pseudo,
        draws,
    }
}

impl RowCache {
    fn g_hat(&self, model: &StructuralModel, i: usize) -> f64 {
        match (&self.pseudo, &self.draws) {
            (Some(p), _) => p[i].iter().zip(model.theta()).map(|(a, b)| a * b).sum(),
            (_, Some(d)) => d[i].expectation(model),
            _ => unreachable!("row cache holds pseudo-features or draws"),
        }
    }

    /// `(1/K) Σ_k mean_{i ∈ fold k} (t_i - ĝ(f, c_i))²`.
    fn objective(&self, model: &StructuralModel, plan_folds: &[Vec<usize>]) -> f64 {
        let k = plan_folds.len() as f64;
        plan_folds
            .par_iter()
            .map(|fold| {
                let s: f64 = fold
                    .iter()
                    .map(|&i| {
                        let r = self.targets[i] - self.g_hat(model, i);
                        r * r
                    })
                    .sum();
                s / fold.len() as f64
            })
            .sum::<f64>()
            / k
    }

    /// Gradient of the batch-mean loss.
    fn batch_gradient(&self, model: &StructuralModel, batch: &[usize], grad: &mut [f64]) {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let scale = 1.0 / batch.len() as f64;
        match (&self.pseudo, &self.draws) {
            (Some(p), _) => {
                for &i in batch {
                    let r = self.targets[i] - self.g_hat(model, i);
                    for (g, m) in grad.iter_mut().zip(&p[i]) {
                        *g -= 2.0 * r * m * scale;
                    }
                }
            }
            (_, Some(d)) => {
                let mut ws = match model {
                    StructuralModel::FeedForward { net } => net.workspace(),
                    _ => Default::default(),
                };
                for &i in batch {
                    let ds = &d[i];
                    let r = self.targets[i] - ds.expectation(model);
                    for j in 0..ds.len() {
                        let w = -2.0 * r * ds.weights[j] * scale;
                        model.accumulate_gradient(ds.row(j), w, grad, &mut ws);
                    }
                }
            }
            _ => unreachable!("row cache holds pseudo-features or draws"),
        }
    }
}

fn check_init(data: &Dataset, init: &StructuralModel) -> Result<()> {
    if init.input_dim() != data.d_x() {
        return Err(Error::shape(
            format!("structural model over {} inputs", data.d_x()),
            init.input_dim(),
        ));
    }
    if init.theta().iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("initial parameters must be finite"));
    }
    Ok(())
}

/// The shared second stage. `kind` selects the score target.
pub fn fit_second_stage(
    data: &Dataset,
    state: &CrossFitState,
    cfg: &FitConfig,
    init: StructuralModel,
    kind: ScoreKind,
    method: Method,
) -> Result<FittedCMR> {
    cfg.validate()?;
    crossfit::check_compatible(data, state)?;
    check_init(data, &init)?;
    let mc = cfg.mc_for_fit();
    let batch_seed = derive_seed(cfg.seed, "batches", 0);
    let cache = build_cache(data, state, kind, &mc, &init);
    if cache.targets.iter().any(|t| !t.is_finite()) {
        return Err(Error::Fit("non-finite score target".into()));
    }
    let folds = &state.fold_plan.folds;

    let (model, trajectory, selected_epoch) = match cfg.solver {
        Solver::ClosedForm => {
            let basis = match &init {
                StructuralModel::LinearInBasis { basis, .. } => basis.clone(),
                StructuralModel::FeedForward { .. } => {
                    return Err(Error::invalid("the closed-form solver needs a linear-in-basis model"))
                }
            };
            let pseudo = cache.pseudo.as_ref().expect("linear model caches pseudo-features");
            let d = basis.output_dim();
            let n = data.n();
            let mut phi = DMatrix::zeros(n, d);
            for (i, m) in pseudo.iter().enumerate() {
                for (j, v) in m.iter().enumerate() {
                    phi[(i, j)] = *v;
                }
            }
            let k = folds.len() as f64;
            let mut weights = vec![0.0; n];
            for fold in folds {
                for &i in fold {
                    weights[i] = 1.0 / (k * fold.len() as f64);
                }
            }
            let t = DVector::from_column_slice(&cache.targets);
            let theta = ridge_solve(&phi, &t, Some(&weights), cfg.ridge_lambda, &basis.constant_features())?;
            let model = StructuralModel::LinearInBasis {
                basis,
                theta: theta.iter().copied().collect(),
            };
            let obj = cache.objective(&model, folds);
            if !obj.is_finite() {
                return Err(Error::Divergence { epoch: 0 });
            }
            (model, vec![obj], 0)
        }
        Solver::Gradient => gradient_solve(&cache, folds, cfg, init, batch_seed)?,
    };

    let final_objective = trajectory[selected_epoch];
    Ok(FittedCMR {
        format_version: FIT_FORMAT_VERSION,
        method,
        model,
        trajectory,
        selected_epoch,
        final_objective,
        config: cfg.clone(),
        seeds: SeedLedger {
            root: cfg.seed,
            folds: state.fold_seed,
            nuisances: state.nuisance_seeds.clone(),
            mc: mc.seed,
            batches: batch_seed,
        },
        nuisance_fits: state.nuisance_fits,
        audit: state.audit(),
        x_names: data.x_names().to_vec(),
        y_name: data.y_name().to_string(),
        standardiser: None,
    })
}

fn gradient_solve(
    cache: &RowCache,
    folds: &[Vec<usize>],
    cfg: &FitConfig,
    init: StructuralModel,
    batch_seed: u64,
) -> Result<(StructuralModel, Vec<f64>, usize)> {
    let mut model = init;
    let obj0 = cache.objective(&model, folds);
    if !obj0.is_finite() {
        return Err(Error::Divergence { epoch: 0 });
    }
    let mut trajectory = vec![obj0];
    let mut best = (obj0, model.clone(), 0usize);
    let n_params = model.theta().len();
    let mut opt = AdamW::new(n_params, cfg.learning_rate, cfg.weight_decay);
    let mut grad = vec![0.0; n_params];
    let mut order: Vec<Vec<usize>> = folds.to_vec();

    for epoch in 1..=cfg.epochs {
        let mut rng = stream(batch_seed, "epoch", epoch as u64);
        for fold in order.iter_mut() {
            fold.shuffle(&mut rng);
        }
        let rounds = order.iter().map(|f| f.len().div_ceil(cfg.batch_size)).max().unwrap_or(0);
        for r in 0..rounds {
            // Algorithm order: one batch from each fold in turn
            for fold in &order {
                let start = r * cfg.batch_size;
                if start >= fold.len() {
                    continue;
                }
                let batch = &fold[start..(start + cfg.batch_size).min(fold.len())];
                cache.batch_gradient(&model, batch, &mut grad);
                if grad.iter().any(|g| !g.is_finite()) {
                    return Err(Error::Divergence { epoch });
                }
                opt.step(model.theta_mut(), &grad);
            }
        }
        let obj = cache.objective(&model, folds);
        if !obj.is_finite() {
            return Err(Error::Divergence { epoch });
        }
        trajectory.push(obj);
        if obj < best.0 {
            best = (obj, model.clone(), epoch);
        }
        let w = cfg.early_stop_window;
        if epoch >= w {
            let old = trajectory[epoch - w];
            if (old - obj) / old.abs().max(f64::MIN_POSITIVE) < cfg.early_stop_tol {
                break;
            }
        }
    }
    Ok((best.1, trajectory, best.2))
}

#[cfg(test)]
mod tests;
