//! Central-difference Gateaux derivatives of the expected score along
//! nuisance perturbations, on problems whose true nuisances are known.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{DensityNuisance, McConfig, NuisancePair, OutcomeNuisance, ScoreKind};
use crate::data::{demand_f0, demand_psi, XLayout, XSource};
use crate::estimators::{
    fit_conditional_density, fit_regressor, BasisMap, ConditionalLaw, DensitySpec, DrawScheme,
    GaussianMixtureParams, RegressorSpec,
};
use crate::rng::{stream, SeededRng};
use crate::{Error, Result};

/// A data-generating process with closed-form structural function, outcome
/// mean and conditional law of the endogenous input.
pub trait AnalyticProblem: Sync {
    fn name(&self) -> String;
    fn d_c(&self) -> usize;
    fn layout(&self) -> XLayout;
    /// One draw of `(y, endogenous input, c)`.
    fn sample(&self, rng: &mut SeededRng) -> (f64, f64, Vec<f64>);
    fn f0(&self, x: &[f64]) -> f64;
    /// `E[Y | C = c]`.
    fn s0(&self, c: &[f64]) -> f64;
    /// Law of the endogenous input given `C = c`.
    fn law0(&self, c: &[f64]) -> ConditionalLaw;
}

/// The true nuisance pair `(s₀, F₀)` of an analytic problem.
pub fn analytic_pair<P: AnalyticProblem + Clone + Send + 'static>(problem: P) -> NuisancePair {
    let layout = problem.layout();
    let d_c = problem.d_c();
    let p2 = problem.clone();
    NuisancePair::new(
        Arc::new(super::OutcomeFn(move |c: &[f64]| problem.s0(c))),
        Arc::new(super::DensityFn(move |c: &[f64]| p2.law0(c))),
        layout,
        d_c,
    )
}

/// `Z, U, δ ~ N(0,1)`, `A = λZ + U + δ`, `Y = θ₀A + U`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearToyProblem {
    pub theta0: f64,
    pub instrument_strength: f64,
}

impl Default for LinearToyProblem {
    fn default() -> Self {
        LinearToyProblem {
            theta0: 2.0,
            instrument_strength: 1.0,
        }
    }
}

impl AnalyticProblem for LinearToyProblem {
    fn name(&self) -> String {
        "linear-toy".into()
    }
    fn d_c(&self) -> usize {
        1
    }
    fn layout(&self) -> XLayout {
        XLayout::single_endogenous()
    }
    fn sample(&self, rng: &mut SeededRng) -> (f64, f64, Vec<f64>) {
        let z: f64 = rng.sample(StandardNormal);
        let u: f64 = rng.sample(StandardNormal);
        let d: f64 = rng.sample(StandardNormal);
        let a = self.instrument_strength * z + u + d;
        (self.theta0 * a + u, a, vec![z])
    }
    fn f0(&self, x: &[f64]) -> f64 {
        self.theta0 * x[0]
    }
    fn s0(&self, c: &[f64]) -> f64 {
        self.theta0 * self.instrument_strength * c[0]
    }
    fn law0(&self, c: &[f64]) -> ConditionalLaw {
        ConditionalLaw::Mixture(GaussianMixtureParams::single(
            self.instrument_strength * c[0],
            std::f64::consts::SQRT_2,
        ))
    }
}

/// The ticket-demand model with conditioning `c = (z, t, s)` and structural
/// input `x = (p, t, s)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DemandProblem {
    pub rho: f64,
    pub iv_strength: f64,
}

impl DemandProblem {
    fn price_mean(&self, c: &[f64]) -> f64 {
        25.0 + (self.iv_strength * c[0] + 3.0) * demand_psi(c[1])
    }
}

impl AnalyticProblem for DemandProblem {
    fn name(&self) -> String {
        "demand-iv".into()
    }
    fn d_c(&self) -> usize {
        3
    }
    fn layout(&self) -> XLayout {
        XLayout {
            sources: vec![XSource::Endogenous, XSource::Condition(1), XSource::Condition(2)],
        }
    }
    fn sample(&self, rng: &mut SeededRng) -> (f64, f64, Vec<f64>) {
        let s = rng.random_range(1..=7) as f64;
        let t = rng.random_range(0.0..10.0);
        let z: f64 = rng.sample(StandardNormal);
        let omega: f64 = rng.sample(StandardNormal);
        let xi: f64 = rng.sample(StandardNormal);
        let eps = self.rho * omega + (1.0 - self.rho * self.rho).sqrt() * xi;
        let c = vec![z, t, s];
        let p = self.price_mean(&c) + omega;
        (demand_f0(t, s, p) + eps, p, c)
    }
    fn f0(&self, x: &[f64]) -> f64 {
        demand_f0(x[1], x[2], x[0])
    }
    fn s0(&self, c: &[f64]) -> f64 {
        // f0 is affine in p and the noise is mean zero given c
        demand_f0(c[1], c[2], self.price_mean(c))
    }
    fn law0(&self, c: &[f64]) -> ConditionalLaw {
        ConditionalLaw::Mixture(GaussianMixtureParams::single(self.price_mean(c), 1.0))
    }
}

/// Direction `(ds, dg)` along which the nuisances are moved:
/// `s_r = s₀ + r·ds` and `g_r(f₀, ·) = g₀(f₀, ·) + r·dg`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PerturbationDirection {
    /// Constant shifts.
    Constant { ds: f64, dg: f64 },
    /// Linear in `c`: `ds(c) = a·c`, `dg(c) = b·c`.
    Linear { ds: Vec<f64>, dg: Vec<f64> },
    /// Difference between nuisances fitted on `n_fit` fresh samples and the
    /// truth: ridge for `ŝ`, a Gaussian around a ridge fit for `F̂`.
    FittedDelta { n_fit: usize, seed: u64 },
}

impl PerturbationDirection {
    /// The three directions used by the certificate.
    pub fn basket(d_c: usize) -> Vec<PerturbationDirection> {
        vec![
            PerturbationDirection::Constant { ds: 0.5, dg: 1.0 },
            PerturbationDirection::Linear {
                ds: vec![0.0; d_c],
                dg: {
                    let mut v = vec![0.0; d_c];
                    v[0] = 1.0;
                    v
                },
            },
            PerturbationDirection::FittedDelta { n_fit: 200, seed: 1 },
        ]
    }

    pub fn label(&self) -> String {
        match self {
            PerturbationDirection::Constant { .. } => "constant".into(),
            PerturbationDirection::Linear { .. } => "linear".into(),
            PerturbationDirection::FittedDelta { .. } => "fitted-delta".into(),
        }
    }
}

type DirectionFn<'a> = Box<dyn Fn(&[f64]) -> (f64, f64) + Sync + 'a>;

fn resolve<'a>(direction: &PerturbationDirection, problem: &'a dyn AnalyticProblem) -> Result<DirectionFn<'a>> {
    let d_c = problem.d_c();
    match direction.clone() {
        PerturbationDirection::Constant { ds, dg } => Ok(Box::new(move |_| (ds, dg))),
        PerturbationDirection::Linear { ds, dg } => {
            if ds.len() != d_c || dg.len() != d_c {
                return Err(Error::shape(format!("{d_c} direction coefficients"), ds.len().max(dg.len())));
            }
            Ok(Box::new(move |c: &[f64]| {
                let a: f64 = ds.iter().zip(c).map(|(u, v)| u * v).sum();
                let b: f64 = dg.iter().zip(c).map(|(u, v)| u * v).sum();
                (a, b)
            }))
        }
        PerturbationDirection::FittedDelta { n_fit, seed } => {
            if n_fit < 10 {
                return Err(Error::invalid("fitted direction needs n_fit >= 10"));
            }
            let mut rng = stream(seed, "gateaux/fitted-delta", 0);
            let mut ys = Vec::with_capacity(n_fit);
            let mut xs = Vec::with_capacity(n_fit);
            let mut cs = Vec::with_capacity(n_fit * d_c);
            for _ in 0..n_fit {
                let (y, x, c) = problem.sample(&mut rng);
                ys.push(y);
                xs.push(x);
                cs.extend(c);
            }
            let c = DMatrix::from_row_slice(n_fit, d_c, &cs);
            let ridge = RegressorSpec::ridge(BasisMap::polynomial(d_c, 1), 1e-3);
            let s_hat = fit_regressor(&ridge, &c, &DVector::from_vec(ys))?;
            let density = fit_conditional_density(
                &DensitySpec::GaussianRegression { mean: ridge },
                &c,
                &DVector::from_vec(xs),
            )?;
            let pair = NuisancePair::new(
                Arc::new(s_hat) as Arc<dyn OutcomeNuisance>,
                Arc::new(density) as Arc<dyn DensityNuisance>,
                problem.layout(),
                d_c,
            );
            let mc = McConfig {
                draws: 200,
                scheme: DrawScheme::Stratified,
                seed,
            };
            Ok(Box::new(move |c: &[f64]| {
                let f0 = |x: &[f64]| problem.f0(x);
                let s_true = problem.s0(c);
                (pair.s.predict_one(c) - s_true, pair.g_hat(&f0, c, &mc) - s_true)
            }))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateauxConfig {
    /// Symmetric, nonzero step sizes.
    #[serde(default = "default_r_grid")]
    pub r_grid: Vec<f64>,
    #[serde(default = "default_mc_n")]
    pub mc_n: usize,
    /// Independent draws from the true law per point for the estimate of
    /// `g₀(f₀, c)`.
    #[serde(default = "default_inner")]
    pub inner_draws: usize,
    #[serde(default = "default_bootstrap")]
    pub bootstrap: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_r_grid() -> Vec<f64> {
    vec![-0.1, -0.03, -0.01, 0.01, 0.03, 0.1]
}
fn default_mc_n() -> usize {
    1_000_000
}
fn default_inner() -> usize {
    1
}
fn default_bootstrap() -> usize {
    200
}

impl Default for GateauxConfig {
    fn default() -> Self {
        GateauxConfig {
            r_grid: default_r_grid(),
            mc_n: default_mc_n(),
            inner_draws: default_inner(),
            bootstrap: default_bootstrap(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    /// `|derivative| <= 3 stderr`.
    Orthogonal,
    /// `|derivative| > 5 stderr`.
    NonOrthogonal,
    Inconclusive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateauxReport {
    pub kind: ScoreKind,
    pub problem: String,
    pub direction: PerturbationDirection,
    pub direction_label: String,
    pub r_grid: Vec<f64>,
    pub derivative: f64,
    pub stderr: f64,
    pub verdict: Verdict,
    /// Central difference for each positive step.
    pub derivative_by_r: Vec<(f64, f64)>,
    /// `(Ψ(r) - 2Ψ(0) + Ψ(-r)) / r²` at the largest step.
    pub second_derivative: f64,
    /// Mean of the score at the true nuisances, with its standard error.
    pub score_at_truth: f64,
    pub score_at_truth_stderr: f64,
    pub mc_n: usize,
    pub seed: u64,
}

const CHUNK: usize = 10_000;

struct PointTerms {
    /// `target - ĝ₀` at the truth
    resid: f64,
    /// `d target/dr - d ĝ/dr`
    slope: f64,
}

pub fn gateaux_derivative(
    kind: ScoreKind,
    problem: &dyn AnalyticProblem,
    direction: &PerturbationDirection,
    cfg: &GateauxConfig,
) -> Result<GateauxReport> {
    if cfg.r_grid.is_empty() || cfg.r_grid.iter().any(|r| *r == 0.0 || !r.is_finite()) {
        return Err(Error::invalid("r_grid must be nonempty and must not contain 0"));
    }
    let mut positive: Vec<f64> = cfg.r_grid.iter().filter(|r| **r > 0.0).copied().collect();
    positive.sort_by(f64::total_cmp);
    if positive.len() * 2 != cfg.r_grid.len() || positive.iter().any(|r| !cfg.r_grid.contains(&-r)) {
        return Err(Error::invalid("r_grid must be symmetric around 0"));
    }
    if cfg.mc_n < 2 || cfg.inner_draws == 0 || cfg.bootstrap < 2 {
        return Err(Error::invalid("need mc_n >= 2, inner_draws >= 1 and bootstrap >= 2"));
    }
    let dir = resolve(direction, problem)?;
    let n_chunks = cfg.mc_n.div_ceil(CHUNK);
    let terms: Vec<PointTerms> = (0..n_chunks)
        .into_par_iter()
        .flat_map_iter(|chunk| {
            let mut rng = stream(cfg.seed, "gateaux/points", chunk as u64);
            let len = CHUNK.min(cfg.mc_n - chunk * CHUNK);
            let layout = problem.layout();
            let mut x = vec![0.0; layout.width()];
            let mut draws = Vec::new();
            let dir = &dir;
            (0..len)
                .map(|_| {
                    let (y, _, c) = problem.sample(&mut rng);
                    let law = problem.law0(&c);
                    law.draws(cfg.inner_draws, DrawScheme::Iid, &mut rng, &mut draws);
                    let g0: f64 = draws
                        .iter()
                        .map(|(v, w)| {
                            layout.assemble(*v, &c, &mut x);
                            w * problem.f0(&x)
                        })
                        .sum();
                    let (ds, dg) = dir(&c);
                    match kind {
                        ScoreKind::Orthogonal => PointTerms {
                            resid: problem.s0(&c) - g0,
                            slope: ds - dg,
                        },
                        ScoreKind::Naive => PointTerms { resid: y - g0, slope: -dg },
                    }
                })
                .collect::<Vec<_>>()
        })
        .collect();
    let n = terms.len() as f64;
    let psi = |t: &PointTerms, r: f64| (t.resid + r * t.slope).powi(2);
    let mean_psi = |r: f64| terms.iter().map(|t| psi(t, r)).sum::<f64>() / n;

    // per point central difference averaged over the steps
    let point_derivative: Vec<f64> = terms
        .iter()
        .map(|t| {
            positive
                .iter()
                .map(|&r| (psi(t, r) - psi(t, -r)) / (2.0 * r))
                .sum::<f64>()
                / positive.len() as f64
        })
        .collect();
    let derivative = point_derivative.iter().sum::<f64>() / n;
    let derivative_by_r = positive
        .iter()
        .map(|&r| (r, (mean_psi(r) - mean_psi(-r)) / (2.0 * r)))
        .collect();
    let r_max = *positive.last().unwrap();
    let second_derivative = (mean_psi(r_max) - 2.0 * mean_psi(0.0) + mean_psi(-r_max)) / (r_max * r_max);

    let boot: Vec<f64> = (0..cfg.bootstrap)
        .into_par_iter()
        .map(|b| {
            let mut rng = stream(cfg.seed, "gateaux/bootstrap", b as u64);
            let m = point_derivative.len();
            (0..m).map(|_| point_derivative[rng.random_range(0..m)]).sum::<f64>() / m as f64
        })
        .collect();
    let stderr = sample_std(&boot);

    let at_truth: Vec<f64> = terms.iter().map(|t| t.resid * t.resid).collect();
    let score_at_truth = at_truth.iter().sum::<f64>() / n;
    let score_at_truth_stderr = sample_std(&at_truth) / n.sqrt();

    let verdict = if derivative.abs() <= 3.0 * stderr {
        Verdict::Orthogonal
    } else if derivative.abs() > 5.0 * stderr {
        Verdict::NonOrthogonal
    } else {
        Verdict::Inconclusive
    };
    Ok(GateauxReport {
        kind,
        problem: problem.name(),
        direction: direction.clone(),
        direction_label: direction.label(),
        r_grid: cfg.r_grid.clone(),
        derivative,
        stderr,
        verdict,
        derivative_by_r,
        second_derivative,
        score_at_truth,
        score_at_truth_stderr,
        mc_n: cfg.mc_n,
        seed: cfg.seed,
    })
}

fn sample_std(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}
