use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::demand_psi;
use crate::estimators::DrawScheme;
use crate::rng::{stream, rng_from_seed};
use crate::score::{AnalyticProblem, DemandProblem, LinearToyProblem};
use crate::{Error, Result};

/// A problem together with a linear-in-basis family `f_θ = θᵀφ` that
/// contains the true structural function at `θ₀`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum IllPosedProblem {
    /// `φ(a) = a`.
    LinearToy(LinearToyProblem),
    /// `φ(p,t,s) = (1, p, sψ(t), p·sψ(t), t, s, p·t, p·s)`.
    DemandIv(DemandProblem),
}

impl IllPosedProblem {
    fn problem(&self) -> &dyn AnalyticProblem {
        match self {
            IllPosedProblem::LinearToy(p) => p,
            IllPosedProblem::DemandIv(p) => p,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            IllPosedProblem::LinearToy(_) => 1,
            IllPosedProblem::DemandIv(_) => 8,
        }
    }

    pub fn theta0(&self) -> Vec<f64> {
        match self {
            IllPosedProblem::LinearToy(p) => vec![p.theta0],
            IllPosedProblem::DemandIv(_) => vec![100.0, -2.0, 10.0, 1.0, 0.0, 0.0, 0.0, 0.0],
        }
    }

    pub fn features(&self, x: &[f64]) -> Vec<f64> {
        match self {
            IllPosedProblem::LinearToy(_) => vec![x[0]],
            IllPosedProblem::DemandIv(_) => {
                let (p, t, s) = (x[0], x[1], x[2]);
                let sp = s * demand_psi(t);
                vec![1.0, p, sp, p * sp, t, s, p * t, p * s]
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExcludedTheta {
    pub theta: Vec<f64>,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IllPosednessReport {
    /// Largest `‖f₀ - f_θ‖₂ / ‖E[f₀(X) - f_θ(X) | C]‖₂` over evaluated θ.
    pub nu: f64,
    pub theta_argmax: Vec<f64>,
    pub evaluated: usize,
    pub excluded: Vec<ExcludedTheta>,
    pub mc_n: usize,
    pub inner_draws: usize,
    pub seed: u64,
}

const INNER_DRAWS: usize = 64;

/// Second moments of `φ(X)` and of `E[φ(X) | C]` by Monte Carlo.
fn moment_matrices(problem: &IllPosedProblem, mc_n: usize, seed: u64) -> (DMatrix<f64>, DMatrix<f64>) {
    let p = problem.problem();
    let layout = p.layout();
    let d = problem.dim();
    let mut rng = stream(seed, "ill-posedness/sample", 0);
    let mut a = DMatrix::zeros(d, d);
    let mut b = DMatrix::zeros(d, d);
    let mut x = vec![0.0; layout.width()];
    let mut draws = Vec::with_capacity(INNER_DRAWS);
    for i in 0..mc_n {
        let (_, endog, c) = p.sample(&mut rng);
        layout.assemble(endog, &c, &mut x);
        let phi = problem.features(&x);
        // conditional mean of φ under the true law at c
        let mut inner = rng_from_seed(crate::rng::derive_seed(seed, "ill-posedness/inner", i as u64));
        p.law0(&c).draws(INNER_DRAWS, DrawScheme::Stratified, &mut inner, &mut draws);
        let mut psi = vec![0.0; d];
        for &(v, w) in &draws {
            layout.assemble(v, &c, &mut x);
            for (acc, f) in psi.iter_mut().zip(problem.features(&x)) {
                *acc += w * f;
            }
        }
        for r in 0..d {
            for s in 0..d {
                a[(r, s)] += phi[r] * phi[s];
                b[(r, s)] += psi[r] * psi[s];
            }
        }
    }
    (a / mc_n as f64, b / mc_n as f64)
}

fn quad(m: &DMatrix<f64>, v: &[f64]) -> f64 {
    let mut s = 0.0;
    for r in 0..v.len() {
        for c in 0..v.len() {
            s += v[r] * m[(r, c)] * v[c];
        }
    }
    s
}

/// The ratio at each supplied θ, maximised. `θ = θ₀` and directions with a
/// vanishing projected norm are excluded and listed.
pub fn ill_posedness_from_thetas(
    problem: &IllPosedProblem,
    thetas: &[Vec<f64>],
    mc_n: usize,
    seed: u64,
) -> Result<IllPosednessReport> {
    if mc_n < 2 {
        return Err(Error::invalid("mc_n must be at least 2"));
    }
    let d = problem.dim();
    if let Some(t) = thetas.iter().find(|t| t.len() != d) {
        return Err(Error::shape(format!("{d} coefficients"), t.len()));
    }
    let (a, b) = moment_matrices(problem, mc_n, seed);
    let theta0 = problem.theta0();
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut excluded = Vec::new();
    let mut evaluated = 0;
    for theta in thetas {
        let delta: Vec<f64> = theta0.iter().zip(theta).map(|(a, b)| a - b).collect();
        let num2 = quad(&a, &delta);
        let den2 = quad(&b, &delta);
        if !(den2.max(0.0).sqrt() >= 1e-12) {
            let reason = if delta.iter().all(|v| *v == 0.0) {
                "equal to the true parameter (0/0)"
            } else {
                "projected norm below 1e-12 (near-unidentified)"
            };
            excluded.push(ExcludedTheta {
                theta: theta.clone(),
                reason: reason.into(),
            });
            continue;
        }
        evaluated += 1;
        let ratio = (num2.max(0.0) / den2).sqrt();
        if best.as_ref().is_none_or(|(r, _)| ratio > *r) {
            best = Some((ratio, theta.clone()));
        }
    }
    let (nu, theta_argmax) = best.ok_or_else(|| Error::Fit("every sampled parameter was excluded".into()))?;
    Ok(IllPosednessReport {
        nu,
        theta_argmax,
        evaluated,
        excluded,
        mc_n,
        inner_draws: INNER_DRAWS,
        seed,
    })
}

/// Sample `theta_samples` parameters around `θ₀` (Gaussian steps scaled by
/// the spread of each feature) and return the largest ratio.
pub fn ill_posedness_estimate(
    problem: &IllPosedProblem,
    theta_samples: usize,
    mc_n: usize,
    seed: u64,
) -> Result<IllPosednessReport> {
    if theta_samples < 100 {
        return Err(Error::invalid(format!("theta_samples must be at least 100, got {theta_samples}")));
    }
    let (a, _) = moment_matrices(problem, mc_n.min(10_000), seed);
    let scale: Vec<f64> = (0..problem.dim())
        .map(|j| {
            let s = a[(j, j)].sqrt();
            if s > 0.0 {
                1.0 / s
            } else {
                1.0
            }
        })
        .collect();
    let theta0 = problem.theta0();
    let mut rng = stream(seed, "ill-posedness/theta", 0);
    let thetas: Vec<Vec<f64>> = (0..theta_samples)
        .map(|_| {
            theta0
                .iter()
                .zip(&scale)
                .map(|(t, s)| t + s * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();
    ill_posedness_from_thetas(problem, &thetas, mc_n, seed)
}
