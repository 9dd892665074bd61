//! Score functions for the second stage and a numerical check of their
//! sensitivity to nuisance perturbations.
//!
//! For a sample `(y, c)`, a structural function `f` and nuisances
//! `(ŝ, F̂)` with `ĝ(f, c) = E_{X ~ F̂(·|c)}[f(X)]`:
//!
//! * orthogonal score: `(ŝ(c) - ĝ(f, c))²`
//! * naive score: `(y - ĝ(f, c))²`

mod gateaux;

pub use gateaux::{
    analytic_pair, gateaux_derivative, AnalyticProblem, DemandProblem, GateauxConfig, GateauxReport, LinearToyProblem,
    PerturbationDirection, Verdict,
};

use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::XLayout;
use crate::estimators::{ConditionalDensity, ConditionalLaw, DrawScheme, Regressor};
use crate::rng::{derive_seed, rng_from_seed};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreKind {
    Orthogonal,
    Naive,
}

/// Anything that evaluates a structural function at one input row.
pub trait Structural: Sync {
    fn value(&self, x: &[f64]) -> f64;
}

impl<F: Fn(&[f64]) -> f64 + Sync> Structural for F {
    fn value(&self, x: &[f64]) -> f64 {
        self(x)
    }
}

/// Estimate of `E[Y | C = c]`.
pub trait OutcomeNuisance: Send + Sync {
    fn predict_one(&self, c: &[f64]) -> f64;
}

/// Estimate of the law of the endogenous input given `C = c`.
pub trait DensityNuisance: Send + Sync {
    fn law_at(&self, c: &[f64]) -> ConditionalLaw;
}

impl OutcomeNuisance for Regressor {
    fn predict_one(&self, c: &[f64]) -> f64 {
        Regressor::predict_one(self, c)
    }
}

impl DensityNuisance for ConditionalDensity {
    fn law_at(&self, c: &[f64]) -> ConditionalLaw {
        ConditionalDensity::law_at(self, c)
    }
}

/// Closure-backed outcome nuisance (analytic truths, perturbed fits).
pub struct OutcomeFn<F>(pub F);

impl<F: Fn(&[f64]) -> f64 + Send + Sync> OutcomeNuisance for OutcomeFn<F> {
    fn predict_one(&self, c: &[f64]) -> f64 {
        (self.0)(c)
    }
}

/// Closure-backed density nuisance.
pub struct DensityFn<F>(pub F);

impl<F: Fn(&[f64]) -> ConditionalLaw + Send + Sync> DensityNuisance for DensityFn<F> {
    fn law_at(&self, c: &[f64]) -> ConditionalLaw {
        (self.0)(c)
    }
}

/// Monte Carlo settings for `ĝ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct McConfig {
    #[serde(default = "default_draws")]
    pub draws: usize,
    #[serde(default)]
    pub scheme: DrawScheme,
    #[serde(default)]
    pub seed: u64,
}

fn default_draws() -> usize {
    100
}

impl Default for McConfig {
    fn default() -> Self {
        McConfig {
            draws: default_draws(),
            scheme: DrawScheme::Stratified,
            seed: 0,
        }
    }
}

/// Weighted draws of the full structural input at one conditioning point.
#[derive(Debug, Clone, Default)]
pub struct DrawSet {
    pub width: usize,
    pub xs: Vec<f64>,
    pub weights: Vec<f64>,
}

impl DrawSet {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.xs[j * self.width..(j + 1) * self.width]
    }

    pub fn expectation<F: Structural + ?Sized>(&self, f: &F) -> f64 {
        (0..self.len()).map(|j| self.weights[j] * f.value(self.row(j))).sum()
    }
}

/// Seed for the draws at one conditioning point. Draws depend only on the
/// point itself, so repeated rows see identical draws.
fn point_seed(seed: u64, c: &[f64]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in c {
        for b in v.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    derive_seed(seed, "ghat", h)
}

/// The nuisance pair `(ŝ, F̂)` with the layout that rebuilds structural
/// inputs from endogenous draws.
#[derive(Clone)]
pub struct NuisancePair {
    pub s: Arc<dyn OutcomeNuisance>,
    pub density: Arc<dyn DensityNuisance>,
    pub layout: XLayout,
    pub d_c: usize,
}

impl std::fmt::Debug for NuisancePair {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("NuisancePair")
            .field("layout", &self.layout)
            .field("d_c", &self.d_c)
            .finish_non_exhaustive()
    }
}

impl NuisancePair {
    pub fn new(
        s: Arc<dyn OutcomeNuisance>,
        density: Arc<dyn DensityNuisance>,
        layout: XLayout,
        d_c: usize,
    ) -> Self {
        NuisancePair { s, density, layout, d_c }
    }

    pub fn input_draws(&self, c: &[f64], mc: &McConfig) -> DrawSet {
        let law = self.density.law_at(c);
        let mut rng = rng_from_seed(point_seed(mc.seed, c));
        let mut raw = Vec::new();
        law.draws(mc.draws, mc.scheme, &mut rng, &mut raw);
        let width = self.layout.width();
        let mut xs = vec![0.0; raw.len() * width];
        for (j, (v, _)) in raw.iter().enumerate() {
            self.layout.assemble(*v, c, &mut xs[j * width..(j + 1) * width]);
        }
        DrawSet {
            width,
            xs,
            weights: raw.into_iter().map(|(_, w)| w).collect(),
        }
    }

    /// `ĝ(f, c)`.
    pub fn g_hat<F: Structural + ?Sized>(&self, f: &F, c: &[f64], mc: &McConfig) -> f64 {
        self.input_draws(c, mc).expectation(f)
    }

    /// Score target: `ŝ(c)` for the orthogonal score, `y` for the naive one.
    pub fn target(&self, kind: ScoreKind, y: f64, c: &[f64]) -> f64 {
        match kind {
            ScoreKind::Orthogonal => self.s.predict_one(c),
            ScoreKind::Naive => y,
        }
    }
}

pub fn score_value<F: Structural + ?Sized>(
    kind: ScoreKind,
    y: f64,
    c: &[f64],
    f: &F,
    nuisance: &NuisancePair,
    mc: &McConfig,
) -> Result<f64> {
    if c.len() != nuisance.d_c {
        return Err(Error::shape(format!("{} conditioning values", nuisance.d_c), c.len()));
    }
    let r = nuisance.target(kind, y, c) - nuisance.g_hat(f, c, mc);
    Ok(r * r)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchLoss {
    pub values: Vec<f64>,
    pub mean: f64,
}

/// Pointwise scores of a batch and their arithmetic mean.
pub fn pointwise_loss_batch<F: Structural + ?Sized>(
    kind: ScoreKind,
    y: &[f64],
    c: &DMatrix<f64>,
    f: &F,
    nuisance: &NuisancePair,
    mc: &McConfig,
) -> Result<BatchLoss> {
    if y.is_empty() {
        return Err(Error::EmptyInput("score batch has no samples".into()));
    }
    if c.nrows() != y.len() {
        return Err(Error::shape(format!("{} conditioning rows", y.len()), c.nrows()));
    }
    let mut values = Vec::with_capacity(y.len());
    let mut row = vec![0.0; c.ncols()];
    for i in 0..y.len() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = c[(i, j)];
        }
        values.push(score_value(kind, y[i], &row, f, nuisance, mc)?);
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Fit("non-finite score in batch".into()));
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    Ok(BatchLoss { values, mean })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::GaussianMixtureParams;

    /// `ŝ(c) = 2c`, `X | c ~ N(c, 1)`, so with `f(x) = 2x` both sides agree.
    fn pair(scale: f64) -> NuisancePair {
        NuisancePair::new(
            Arc::new(OutcomeFn(move |c: &[f64]| scale * 2.0 * c[0])),
            Arc::new(DensityFn(|c: &[f64]| ConditionalLaw::Mixture(GaussianMixtureParams::single(c[0], 1.0)))),
            XLayout::single_endogenous(),
            1,
        )
    }

    fn f(x: &[f64]) -> f64 {
        2.0 * x[0]
    }

    #[test]
    fn orthogonal_score_vanishes_when_nuisances_agree() {
        let atoms = NuisancePair::new(
            Arc::new(OutcomeFn(|c: &[f64]| 2.0 * c[0])),
            Arc::new(DensityFn(|c: &[f64]| ConditionalLaw::Atoms {
                values: vec![c[0] - 1.0, c[0] + 1.0],
                probs: vec![0.5, 0.5],
            })),
            XLayout::single_endogenous(),
            1,
        );
        let v = score_value(ScoreKind::Orthogonal, 0.0, &[1.5], &f, &atoms, &McConfig::default()).unwrap();
        assert_eq!(v, 0.0);
        let c = DMatrix::from_column_slice(3, 1, &[0.0, 1.0, -2.0]);
        let b = pointwise_loss_batch(ScoreKind::Orthogonal, &[1.0, 2.0, 3.0], &c, &f, &atoms, &McConfig::default()).unwrap();
        assert_eq!(b.mean, 0.0);
    }

    #[test]
    fn naive_score_vanishes_at_the_fitted_mean_and_values_are_squares() {
        let constant = NuisancePair::new(
            Arc::new(OutcomeFn(|_: &[f64]| 3.0)),
            Arc::new(DensityFn(|_: &[f64]| ConditionalLaw::Atoms {
                values: vec![1.0],
                probs: vec![1.0],
            })),
            XLayout::single_endogenous(),
            1,
        );
        let id = |x: &[f64]| x[0];
        let mc = McConfig::default();
        assert_eq!(score_value(ScoreKind::Naive, 1.0, &[0.0], &id, &constant, &mc).unwrap(), 0.0);
        assert_eq!(score_value(ScoreKind::Orthogonal, 1.0, &[0.0], &id, &constant, &mc).unwrap(), 4.0);
        assert!(score_value(ScoreKind::Naive, 1.0, &[0.0, 1.0], &id, &constant, &mc).is_err());
    }

    #[test]
    fn batch_means_are_consistent() {
        let p = pair(1.3);
        let mc = McConfig::default();
        let one = DMatrix::from_column_slice(1, 1, &[0.7]);
        let single = pointwise_loss_batch(ScoreKind::Orthogonal, &[0.0], &one, &f, &p, &mc).unwrap();
        let direct = score_value(ScoreKind::Orthogonal, 0.0, &[0.7], &f, &p, &mc).unwrap();
        assert_eq!(single.mean, direct);
        let c = DMatrix::from_column_slice(2, 1, &[0.3, -1.1]);
        let dup = DMatrix::from_column_slice(4, 1, &[0.3, -1.1, 0.3, -1.1]);
        let a = pointwise_loss_batch(ScoreKind::Naive, &[1.0, 2.0], &c, &f, &p, &mc).unwrap();
        let b = pointwise_loss_batch(ScoreKind::Naive, &[1.0, 2.0, 1.0, 2.0], &dup, &f, &p, &mc).unwrap();
        assert!((a.mean - b.mean).abs() < 1e-15);
        assert!(pointwise_loss_batch(ScoreKind::Naive, &[], &DMatrix::zeros(0, 1), &f, &p, &mc).is_err());
    }

    #[test]
    fn scaling_both_nuisances_scales_the_score_quadratically() {
        let a = 2.5;
        let base = pair(1.2);
        let mc = McConfig::default();
        let scaled = NuisancePair::new(
            Arc::new(OutcomeFn(move |c: &[f64]| a * 1.2 * 2.0 * c[0])),
            base.density.clone(),
            XLayout::single_endogenous(),
            1,
        );
        let fa = move |x: &[f64]| a * f(x);
        for c in [-1.0, 0.4, 2.0] {
            let s0 = score_value(ScoreKind::Orthogonal, 0.0, &[c], &f, &base, &mc).unwrap();
            let s1 = score_value(ScoreKind::Orthogonal, 0.0, &[c], &fa, &scaled, &mc).unwrap();
            assert!((s1 - a * a * s0).abs() < 1e-9 * (1.0 + s1));
            assert!(s0 >= 0.0);
        }
    }
}
