use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{pcl_draw, pcl_g, XSource};
use crate::dml::FittedCMR;
use crate::rng::stream;
use crate::{Error, Result};

use super::quantile_sorted;

/// Monte Carlo estimate of `E[Y | do(A = a)]` on a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoOracle {
    pub a_grid: Vec<f64>,
    pub values: Vec<f64>,
    pub stderr: Vec<f64>,
    /// Share of draws where `exp((W - a)/10)` hit the cap of 5.
    pub clamp_fraction: Vec<f64>,
    pub mc_n: usize,
    pub seed: u64,
}

/// `E_{U,ε}[a·min(exp((W - a)/10), 5) - 5g(U)]` with `W = 7g(U) + 45 + ε`.
///
/// Every grid point reuses the same draws, so the curve is smooth in `a`
/// and fully determined by `seed`.
pub fn pcl_do_oracle(a_grid: &[f64], mc_n: usize, seed: u64) -> Result<DoOracle> {
    if a_grid.is_empty() {
        return Err(Error::EmptyInput("treatment grid is empty".into()));
    }
    if mc_n < 10_000 {
        return Err(Error::invalid(format!("mc_n must be at least 10000, got {mc_n}")));
    }
    if a_grid.iter().any(|a| !a.is_finite()) {
        return Err(Error::invalid("treatment grid must be finite"));
    }
    let mut rng = stream(seed, "pcl/do-oracle", 0);
    let mut w = Vec::with_capacity(mc_n);
    let mut g = Vec::with_capacity(mc_n);
    for _ in 0..mc_n {
        let u: f64 = rng.random_range(0.0..10.0);
        let gu = pcl_g(u);
        let e: f64 = rng.sample(StandardNormal);
        w.push(7.0 * gu + 45.0 + e);
        g.push(gu);
    }
    let n = mc_n as f64;
    let mut values = Vec::with_capacity(a_grid.len());
    let mut stderr = Vec::with_capacity(a_grid.len());
    let mut clamp_fraction = Vec::with_capacity(a_grid.len());
    for &a in a_grid {
        let (mut s, mut s2, mut clamped) = (0.0, 0.0, 0usize);
        for (wi, gi) in w.iter().zip(&g) {
            let e = ((wi - a) / 10.0).exp();
            if e >= 5.0 {
                clamped += 1;
            }
            let v = a * e.min(5.0) - 5.0 * gi;
            s += v;
            s2 += v * v;
        }
        let mean = s / n;
        let var = (s2 / n - mean * mean).max(0.0) * n / (n - 1.0);
        values.push(mean);
        stderr.push((var / n).sqrt());
        clamp_fraction.push(clamped as f64 / n);
    }
    Ok(DoOracle {
        a_grid: a_grid.to_vec(),
        values,
        stderr,
        clamp_fraction,
        mc_n,
        seed,
    })
}

/// `points` equally spaced treatments between the 5th and 95th percentiles
/// of `A` in a `sample_n` draw from the proxy demand model.
pub fn pcl_a_grid(points: usize, sample_n: usize, seed: u64) -> Result<Vec<f64>> {
    if points < 2 || sample_n < 2 {
        return Err(Error::invalid("grid needs at least 2 points and 2 samples"));
    }
    let mut rng = stream(seed, "pcl/a-grid", 0);
    let mut a: Vec<f64> = (0..sample_n).map(|_| pcl_draw(&mut rng)[4]).collect();
    a.sort_by(f64::total_cmp);
    let (lo, hi) = (quantile_sorted(&a, 0.05), quantile_sorted(&a, 0.95));
    Ok((0..points)
        .map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64)
        .collect())
}

/// `E_W[ĥ(a, W)]` for each `a`, averaging over the supplied `W` values.
///
/// The fit must take `(treatment, proxy)` rows, treatment first.
pub fn pcl_effect_curve(fit: &FittedCMR, a_grid: &[f64], w_samples: &[f64]) -> Result<Vec<f64>> {
    if w_samples.is_empty() {
        return Err(Error::EmptyInput("no proxy samples".into()));
    }
    if fit.model.input_dim() != 2 {
        return Err(Error::shape("a model over (treatment, proxy)", fit.model.input_dim()));
    }
    let out: Vec<f64> = a_grid
        .iter()
        .map(|&a| w_samples.iter().map(|&w| fit.predict_one(&[a, w])).sum::<f64>() / w_samples.len() as f64)
        .collect();
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Fit("non-finite treatment effect".into()));
    }
    Ok(out)
}

/// The proxy column of a proxy-demand dataset.
pub(crate) fn proxy_samples(data: &crate::data::Dataset) -> Result<Vec<f64>> {
    let j = data
        .x_sources()
        .iter()
        .position(|s| *s == XSource::Endogenous)
        .ok_or_else(|| Error::invalid("dataset has no proxy column"))?;
    Ok(data.x().column(j).iter().copied().collect())
}
