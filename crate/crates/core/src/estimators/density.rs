//! Conditional density estimators for the endogenous input given the
//! conditioning variables, and Monte Carlo expectations under them.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use super::mlp::{Activation, AdamW, Mlp};
use super::regressor::{fit_regressor, Regressor, RegressorSpec, MODEL_FORMAT_VERSION};
use crate::rng::{rng_from_seed, stream};
use crate::{Error, Result};

/// Floor on mixture standard deviations, in standardised response units.
pub const SIGMA_MIN: f64 = 1e-3;

/// A one-dimensional Gaussian mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixtureParams {
    pub weights: Vec<f64>,
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

impl GaussianMixtureParams {
    pub fn new(weights: Vec<f64>, means: Vec<f64>, stds: Vec<f64>) -> Result<Self> {
        let p = GaussianMixtureParams { weights, means, stds };
        p.validate()?;
        Ok(p)
    }

    pub fn single(mean: f64, std: f64) -> Self {
        GaussianMixtureParams {
            weights: vec![1.0],
            means: vec![mean],
            stds: vec![std],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.weights.len();
        if m == 0 || self.means.len() != m || self.stds.len() != m {
            return Err(Error::invalid("mixture needs matching, non-empty weights, means and stds"));
        }
        if self.weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::invalid("mixture weights must be nonnegative"));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-8 {
            return Err(Error::invalid(format!("mixture weights sum to {total}, not 1")));
        }
        if self.stds.iter().any(|s| !(*s > 0.0) || !s.is_finite()) || self.means.iter().any(|m| !m.is_finite()) {
            return Err(Error::invalid("mixture stds must be positive and means finite"));
        }
        Ok(())
    }

    pub fn mean(&self) -> f64 {
        self.weights.iter().zip(&self.means).map(|(w, m)| w * m).sum()
    }

    /// Components reordered by increasing mean.
    pub fn sorted_by_mean(mut self) -> Self {
        let mut idx: Vec<usize> = (0..self.weights.len()).collect();
        idx.sort_by(|&a, &b| self.means[a].total_cmp(&self.means[b]));
        self.weights = idx.iter().map(|&i| self.weights[i]).collect();
        self.means = idx.iter().map(|&i| self.means[i]).collect();
        self.stds = idx.iter().map(|&i| self.stds[i]).collect();
        self
    }

    fn sample(&self, rng: &mut impl Rng) -> f64 {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut k = self.weights.len() - 1;
        for (j, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                k = j;
                break;
            }
        }
        let z: f64 = rng.sample(StandardNormal);
        self.means[k] + self.stds[k] * z
    }
}

/// The law of the endogenous input at one conditioning point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ConditionalLaw {
    Mixture(GaussianMixtureParams),
    /// Finitely many values with probabilities (expectations are exact).
    Atoms { values: Vec<f64>, probs: Vec<f64> },
}

/// How Monte Carlo draws from a Gaussian mixture are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DrawScheme {
    /// One uniform per stratum `[j/M, (j+1)/M)` pushed through the inverse
    /// CDF of each component, with draws allotted in proportion to weight.
    #[default]
    Stratified,
    /// Independent draws.
    Iid,
}

impl ConditionalLaw {
    pub fn mean(&self) -> f64 {
        match self {
            ConditionalLaw::Mixture(p) => p.mean(),
            ConditionalLaw::Atoms { values, probs } => values.iter().zip(probs).map(|(v, p)| v * p).sum(),
        }
    }

    /// Shift every location by `delta`.
    pub fn shifted(mut self, delta: f64) -> Self {
        match &mut self {
            ConditionalLaw::Mixture(p) => p.means.iter_mut().for_each(|m| *m += delta),
            ConditionalLaw::Atoms { values, .. } => values.iter_mut().for_each(|v| *v += delta),
        }
        self
    }

    /// Weighted draws `(value, weight)` whose weights sum to one; the
    /// weighted average of `f` over them estimates `E[f(X)]`. Atom laws
    /// return their support exactly.
    pub fn draws(&self, mc: usize, scheme: DrawScheme, rng: &mut impl Rng, out: &mut Vec<(f64, f64)>) {
        out.clear();
        let mc = mc.max(1);
        match self {
            ConditionalLaw::Atoms { values, probs } => {
                out.extend(values.iter().zip(probs).filter(|(_, p)| **p > 0.0).map(|(v, p)| (*v, *p)));
            }
            ConditionalLaw::Mixture(p) => match scheme {
                DrawScheme::Iid => {
                    let w = 1.0 / mc as f64;
                    out.extend((0..mc).map(|_| (p.sample(rng), w)));
                }
                DrawScheme::Stratified => {
                    let unit = Normal::standard();
                    for k in 0..p.weights.len() {
                        if p.weights[k] == 0.0 {
                            continue;
                        }
                        let m_k = ((mc as f64 * p.weights[k]).round() as usize).max(1);
                        let w = p.weights[k] / m_k as f64;
                        for j in 0..m_k {
                            let u = (j as f64 + rng.random::<f64>()) / m_k as f64;
                            let u = u.clamp(1e-12, 1.0 - 1e-12);
                            out.push((p.means[k] + p.stds[k] * unit.inverse_cdf(u), w));
                        }
                    }
                }
            },
        }
    }
}

/// Independent Monte Carlo average of `f` over `mc_samples` mixture draws.
pub fn mixture_expectation(
    params: &GaussianMixtureParams,
    f: impl Fn(f64) -> f64,
    mc_samples: usize,
    seed: u64,
) -> Result<f64> {
    params.validate()?;
    if mc_samples == 0 {
        return Err(Error::invalid("mc_samples must be at least 1"));
    }
    let mut rng = rng_from_seed(seed);
    let total: f64 = (0..mc_samples).map(|_| f(params.sample(&mut rng))).sum();
    Ok(total / mc_samples as f64)
}

// ---------------------------------------------------------------------------
// Specs
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureNetParams {
    #[serde(default = "default_components")]
    pub components: usize,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_components() -> usize {
    10
}
fn default_hidden() -> Vec<usize> {
    vec![128, 64, 32]
}
fn default_epochs() -> usize {
    100
}
fn default_batch() -> usize {
    128
}
fn default_lr() -> f64 {
    1e-3
}
fn default_wd() -> f64 {
    1e-4
}

impl Default for MixtureNetParams {
    fn default() -> Self {
        MixtureNetParams {
            components: default_components(),
            hidden: default_hidden(),
            epochs: default_epochs(),
            batch_size: default_batch(),
            learning_rate: default_lr(),
            weight_decay: default_wd(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinnedParams {
    /// Equal-frequency bins on the response (distinct values are used
    /// directly when there are no more of them than this).
    #[serde(default = "default_response_bins")]
    pub response_bins: usize,
    /// Equal-frequency cells per conditioning column (same rule).
    #[serde(default = "default_condition_bins")]
    pub condition_bins: usize,
}

fn default_response_bins() -> usize {
    32
}
fn default_condition_bins() -> usize {
    8
}

impl Default for BinnedParams {
    fn default() -> Self {
        BinnedParams {
            response_bins: default_response_bins(),
            condition_bins: default_condition_bins(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DensitySpec {
    MixtureNet(MixtureNetParams),
    Binned(BinnedParams),
    /// Gaussian around a fitted regression of the response on the
    /// conditioning variables, with the residual standard deviation.
    GaussianRegression { mean: RegressorSpec },
}

impl DensitySpec {
    pub fn min_rows(&self) -> usize {
        match self {
            DensitySpec::MixtureNet(_) => 2,
            DensitySpec::Binned(_) => 1,
            DensitySpec::GaussianRegression { mean } => mean.min_rows().max(2),
        }
    }

    pub fn reseeded(&self, seed: u64) -> Self {
        match self {
            DensitySpec::MixtureNet(p) => DensitySpec::MixtureNet(MixtureNetParams { seed, ..p.clone() }),
            DensitySpec::GaussianRegression { mean } => DensitySpec::GaussianRegression {
                mean: mean.reseeded(seed),
            },
            other => other.clone(),
        }
    }
}

// ---------------------------------------------------------------------------
// Fitted density
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Grid {
    /// Cut points per conditioning column; cell coordinate is the number of
    /// cuts strictly below the value.
    cuts: Vec<Vec<f64>>,
}

impl Grid {
    fn cell(&self, c: &[f64]) -> usize {
        let mut idx = 0;
        for (j, cuts) in self.cuts.iter().enumerate() {
            idx = idx * (cuts.len() + 1) + cuts.partition_point(|&t| t < c[j]);
        }
        idx
    }

    fn n_cells(&self) -> usize {
        self.cuts.iter().map(|c| c.len() + 1).product()
    }
}

/// Cut points: midpoints between distinct values when there are at most
/// `bins` of them, otherwise equal-frequency quantile cuts.
fn cut_points(values: &[f64], bins: usize) -> Vec<f64> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut uniq = sorted.clone();
    uniq.dedup();
    if uniq.len() <= bins {
        return uniq.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
    }
    let n = sorted.len();
    let mut cuts: Vec<f64> = (1..bins)
        .map(|q| {
            let pos = q * n / bins;
            0.5 * (sorted[pos - 1] + sorted[pos])
        })
        .collect();
    cuts.dedup();
    cuts
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
enum DensityState {
    MixtureNet {
        net: Mlp,
        components: usize,
        c_mean: Vec<f64>,
        c_std: Vec<f64>,
        y_mean: f64,
        y_std: f64,
    },
    Binned {
        atoms: Vec<f64>,
        grid: Grid,
        /// Per cell probabilities over atoms; empty for cells without data.
        cells: Vec<Vec<f64>>,
        marginal: Vec<f64>,
    },
    GaussianRegression {
        mean: Regressor,
        sigma: f64,
    },
}

/// Fitted conditional density of the endogenous input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalDensity {
    pub format_version: u32,
    pub spec: DensitySpec,
    pub d_c: usize,
    /// Full-data negative log-likelihood at each accepted epoch boundary
    /// (mixture net only; index 0 is the initialisation).
    pub nll_trajectory: Vec<f64>,
    state: DensityState,
}

pub fn fit_conditional_density(
    spec: &DensitySpec,
    conditioning: &DMatrix<f64>,
    responses: &DVector<f64>,
) -> Result<ConditionalDensity> {
    let (n, d_c) = conditioning.shape();
    if responses.len() != n {
        return Err(Error::shape(format!("{n} responses"), responses.len()));
    }
    if n < spec.min_rows() {
        return Err(Error::Fit(format!("{n} rows, density needs at least {}", spec.min_rows())));
    }
    if conditioning.iter().chain(responses.iter()).any(|v| !v.is_finite()) {
        return Err(Error::invalid("density inputs must be finite"));
    }
    let mut nll_trajectory = Vec::new();
    let state = match spec {
        DensitySpec::MixtureNet(p) => fit_mixture_net(p, conditioning, responses, &mut nll_trajectory)?,
        DensitySpec::Binned(p) => fit_binned(p, conditioning, responses)?,
        DensitySpec::GaussianRegression { mean } => {
            let model = fit_regressor(mean, conditioning, responses)?;
            let mu = responses.mean();
            let spread = responses.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n as f64;
            let floor = SIGMA_MIN * spread.sqrt().max(1.0);
            DensityState::GaussianRegression {
                sigma: model.train_mse.sqrt().max(floor),
                mean: model,
            }
        }
    };
    Ok(ConditionalDensity {
        format_version: MODEL_FORMAT_VERSION,
        spec: spec.clone(),
        d_c,
        nll_trajectory,
        state,
    })
}

fn fit_binned(p: &BinnedParams, cond: &DMatrix<f64>, resp: &DVector<f64>) -> Result<DensityState> {
    if p.response_bins == 0 || p.condition_bins == 0 {
        return Err(Error::invalid("bin counts must be positive"));
    }
    let n = resp.len();
    let resp_cuts = cut_points(resp.as_slice(), p.response_bins);
    let n_atoms = resp_cuts.len() + 1;
    let atom_of: Vec<usize> = resp.iter().map(|v| resp_cuts.partition_point(|&t| t < *v)).collect();
    let mut sums = vec![0.0; n_atoms];
    let mut counts = vec![0usize; n_atoms];
    for (i, &a) in atom_of.iter().enumerate() {
        sums[a] += resp[i];
        counts[a] += 1;
    }
    let atoms: Vec<f64> = sums.iter().zip(&counts).map(|(s, &c)| s / c.max(1) as f64).collect();
    let grid = Grid {
        cuts: cond
            .column_iter()
            .map(|col| cut_points(col.as_slice(), p.condition_bins))
            .collect(),
    };
    if grid.n_cells() > 1_000_000 {
        return Err(Error::invalid("conditioning grid has more than 10^6 cells"));
    }
    let mut cell_counts = vec![Vec::new(); grid.n_cells()];
    let mut row = vec![0.0; cond.ncols()];
    for i in 0..n {
        for (j, v) in row.iter_mut().enumerate() {
            *v = cond[(i, j)];
        }
        let cell = &mut cell_counts[grid.cell(&row)];
        if cell.is_empty() {
            cell.resize(n_atoms, 0usize);
        }
        cell[atom_of[i]] += 1;
    }
    let normalise = |c: &[usize]| -> Vec<f64> {
        let total: usize = c.iter().sum();
        c.iter().map(|&k| k as f64 / total as f64).collect()
    };
    Ok(DensityState::Binned {
        atoms,
        cells: cell_counts
            .iter()
            .map(|c| if c.is_empty() { Vec::new() } else { normalise(c) })
            .collect(),
        marginal: normalise(&counts),
        grid,
    })
}

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Negative log-likelihood of `y` under the raw network output, and
/// optionally its gradient with respect to that output.
fn mixture_nll(out: &[f64], m: usize, y: f64, grad: Option<&mut [f64]>) -> f64 {
    let logits = &out[..m];
    let max_logit = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse_logit = max_logit + logits.iter().map(|l| (l - max_logit).exp()).sum::<f64>().ln();
    let mut comp = [0.0f64; 64];
    let mut sig = [0.0f64; 64];
    let half_ln_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
    for k in 0..m {
        let s = SIGMA_MIN + softplus(out[2 * m + k]);
        let r = (y - out[m + k]) / s;
        sig[k] = s;
        comp[k] = logits[k] - lse_logit - half_ln_2pi - s.ln() - 0.5 * r * r;
    }
    let max_c = comp[..m].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max_c + comp[..m].iter().map(|c| (c - max_c).exp()).sum::<f64>().ln();
    if let Some(g) = grad {
        for k in 0..m {
            let gamma = (comp[k] - lse).exp();
            let pi = (logits[k] - lse_logit).exp();
            let s = sig[k];
            let diff = y - out[m + k];
            g[k] = pi - gamma;
            g[m + k] = -gamma * diff / (s * s);
            g[2 * m + k] = gamma * (1.0 / s - diff * diff / (s * s * s)) * sigmoid(out[2 * m + k]);
        }
    }
    -lse
}

fn fit_mixture_net(
    p: &MixtureNetParams,
    cond: &DMatrix<f64>,
    resp: &DVector<f64>,
    trajectory: &mut Vec<f64>,
) -> Result<DensityState> {
    let m = p.components;
    if m == 0 || m > 64 {
        return Err(Error::invalid("mixture components must lie in 1..=64"));
    }
    if p.batch_size == 0 || p.hidden.contains(&0) {
        return Err(Error::invalid("network batch size and widths must be positive"));
    }
    let (n, d) = cond.shape();
    let mut c_mean = Vec::with_capacity(d);
    let mut c_std = Vec::with_capacity(d);
    for col in cond.column_iter() {
        let mu = col.sum() / n as f64;
        let var = col.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n as f64;
        c_mean.push(mu);
        c_std.push(if var > 0.0 { var.sqrt() } else { 1.0 });
    }
    let y_mean = resp.mean();
    let y_var = resp.iter().map(|v| (v - y_mean).powi(2)).sum::<f64>() / n as f64;
    let y_std = if y_var > 0.0 { y_var.sqrt() } else { 1.0 };
    let xs: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..d).map(|j| (cond[(i, j)] - c_mean[j]) / c_std[j]).collect())
        .collect();
    let ys: Vec<f64> = resp.iter().map(|v| (v - y_mean) / y_std).collect();

    let mut sizes = vec![d];
    sizes.extend(&p.hidden);
    sizes.push(3 * m);
    let mut rng = stream(p.seed, "density/mixture-net", 0);
    let mut net = Mlp::new(&sizes, Activation::Relu, &mut rng);
    // spread the initial means over the response range
    let n_params = net.n_params();
    let bias_start = n_params - 3 * m;
    for k in 0..m {
        net.params[bias_start + m + k] = -1.5 + 3.0 * (k as f64 + 0.5) / m as f64;
        net.params[bias_start + 2 * m + k] = (0.5f64.exp() - 1.0).ln();
    }
    let mut ws = net.workspace();
    let full_nll = |net: &Mlp, ws: &mut super::mlp::Workspace| -> f64 {
        let mut total = 0.0;
        for i in 0..n {
            let out = net.forward(&xs[i], ws);
            total += mixture_nll(out, m, ys[i], None);
        }
        total / n as f64
    };
    let mut best = full_nll(&net, &mut ws);
    if !best.is_finite() {
        return Err(Error::Fit("initial negative log-likelihood is not finite".into()));
    }
    trajectory.push(best);
    let mut opt = AdamW::new(n_params, p.learning_rate, p.weight_decay);
    let mut grad = vec![0.0; n_params];
    let mut g_out = vec![0.0; 3 * m];
    let mut order: Vec<usize> = (0..n).collect();
    for _epoch in 0..p.epochs {
        let snapshot = (net.params.clone(), opt.clone());
        order.shuffle(&mut rng);
        for batch in order.chunks(p.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let out = net.forward(&xs[i], &mut ws);
                mixture_nll(out, m, ys[i], Some(&mut g_out));
                g_out.iter_mut().for_each(|g| *g *= scale);
                net.backward(&mut ws, &g_out, &mut grad);
            }
            opt.step(&mut net.params, &grad);
        }
        let nll = full_nll(&net, &mut ws);
        if nll.is_finite() && nll <= best {
            best = nll;
            trajectory.push(nll);
        } else if !nll.is_finite() && opt.lr < 1e-12 {
            return Err(Error::Fit("negative log-likelihood is not finite".into()));
        } else {
            // reject the epoch and retry with a smaller step
            net.params = snapshot.0;
            opt = snapshot.1;
            opt.lr *= 0.5;
            trajectory.push(best);
        }
    }
    Ok(DensityState::MixtureNet {
        net,
        components: m,
        c_mean,
        c_std,
        y_mean,
        y_std,
    })
}

impl ConditionalDensity {
    /// The fitted law at conditioning point `c`.
    pub fn law_at(&self, c: &[f64]) -> ConditionalLaw {
        match &self.state {
            DensityState::MixtureNet {
                net,
                components,
                c_mean,
                c_std,
                y_mean,
                y_std,
            } => {
                let m = *components;
                let z: Vec<f64> = c.iter().enumerate().map(|(j, v)| (v - c_mean[j]) / c_std[j]).collect();
                let out = net.predict(&z);
                let max_logit = out[..m].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = out[..m].iter().map(|l| (l - max_logit).exp()).collect();
                let total: f64 = e.iter().sum();
                let params = GaussianMixtureParams {
                    weights: e.iter().map(|v| v / total).collect(),
                    means: (0..m).map(|k| y_mean + y_std * out[m + k]).collect(),
                    stds: (0..m).map(|k| y_std * (SIGMA_MIN + softplus(out[2 * m + k]))).collect(),
                };
                ConditionalLaw::Mixture(params.sorted_by_mean())
            }
            DensityState::Binned {
                atoms,
                grid,
                cells,
                marginal,
            } => {
                let cell = &cells[grid.cell(c)];
                ConditionalLaw::Atoms {
                    values: atoms.clone(),
                    probs: if cell.is_empty() { marginal.clone() } else { cell.clone() },
                }
            }
            DensityState::GaussianRegression { mean, sigma } => {
                ConditionalLaw::Mixture(GaussianMixtureParams::single(mean.predict_one(c), *sigma))
            }
        }
    }

    /// Mixture parameters at `c`; atom laws have no mixture form.
    pub fn mixture_at(&self, c: &[f64]) -> Option<GaussianMixtureParams> {
        match self.law_at(c) {
            ConditionalLaw::Mixture(p) => Some(p),
            ConditionalLaw::Atoms { .. } => None,
        }
    }

    /// Average negative log-likelihood of `responses` (Gaussian kinds only).
    pub fn nll(&self, conditioning: &DMatrix<f64>, responses: &DVector<f64>) -> Option<f64> {
        let mut total = 0.0;
        for i in 0..responses.len() {
            let c: Vec<f64> = conditioning.row(i).iter().copied().collect();
            let p = self.mixture_at(&c)?;
            let y = responses[i];
            let dens: f64 = (0..p.weights.len())
                .map(|k| {
                    let r = (y - p.means[k]) / p.stds[k];
                    p.weights[k] * (-0.5 * r * r).exp() / (p.stds[k] * (2.0 * std::f64::consts::PI).sqrt())
                })
                .sum();
            total -= dens.ln();
        }
        Some(total / responses.len().max(1) as f64)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let d: ConditionalDensity = serde_json::from_str(text)?;
        if d.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::invalid(format!("unsupported model format version {}", d.format_version)));
        }
        Ok(d)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::basis::BasisMap;
    use proptest::prelude::*;
    use rand::Rng;

    fn small_net(components: usize, epochs: usize) -> DensitySpec {
        DensitySpec::MixtureNet(MixtureNetParams {
            components,
            hidden: vec![16, 16],
            epochs,
            batch_size: 256,
            learning_rate: 5e-3,
            ..MixtureNetParams::default()
        })
    }

    #[test]
    fn nll_gradient_matches_finite_differences() {
        let mut rng = rng_from_seed(21);
        for _ in 0..20 {
            let m = 3;
            let out: Vec<f64> = (0..3 * m).map(|_| rng.random_range(-1.5..1.5)).collect();
            let y = rng.random_range(-2.0..2.0);
            let mut g = vec![0.0; 3 * m];
            mixture_nll(&out, m, y, Some(&mut g));
            for k in 0..3 * m {
                let (mut up, mut down) = (out.clone(), out.clone());
                up[k] += 1e-6;
                down[k] -= 1e-6;
                let fd = (mixture_nll(&up, m, y, None) - mixture_nll(&down, m, y, None)) / 2e-6;
                assert!((fd - g[k]).abs() < 1e-6 * (1.0 + fd.abs()), "{k}: {fd} vs {}", g[k]);
            }
        }
    }

    #[test]
    fn expectation_examples() {
        let p = GaussianMixtureParams::new(vec![0.5, 0.5], vec![1.0, 3.0], vec![1.0, 1.0]).unwrap();
        let e = mixture_expectation(&p, |x| x, 100_000, 1).unwrap();
        assert!((e - 2.0).abs() < 0.02, "{e}");
        for mc in [1, 3, 17, 1000] {
            assert_eq!(mixture_expectation(&p, |_| 7.0, mc, 4).unwrap(), 7.0);
        }
        let q = GaussianMixtureParams::single(2.0, 3.0);
        let e2 = mixture_expectation(&q, |x| x * x, 1_000_000, 2).unwrap();
        assert!((e2 - 13.0).abs() < 0.15, "{e2}");
        // brute-force quadrature of the same integral
        let h = 1e-3;
        let quad: f64 = (-40_000..40_000)
            .map(|i| {
                let x = 2.0 + i as f64 * h;
                let r = (x - 2.0) / 3.0;
                x * x * (-0.5 * r * r).exp() / (3.0 * (2.0 * std::f64::consts::PI).sqrt()) * h
            })
            .sum();
        assert!((quad - 13.0).abs() < 1e-6);
        assert!(mixture_expectation(&q, |x| x, 0, 1).is_err());
    }

    #[test]
    fn stratified_draws_have_exact_weights_and_low_error() {
        let law = ConditionalLaw::Mixture(GaussianMixtureParams::new(vec![0.3, 0.7], vec![-1.0, 2.0], vec![0.5, 1.0]).unwrap());
        let mut rng = rng_from_seed(3);
        let mut out = Vec::new();
        law.draws(100, DrawScheme::Stratified, &mut rng, &mut out);
        let w: f64 = out.iter().map(|d| d.1).sum();
        assert!((w - 1.0).abs() < 1e-12);
        let mean: f64 = out.iter().map(|(x, w)| x * w).sum();
        assert!((mean - law.mean()).abs() < 0.02);
    }

    #[test]
    fn linear_expectation_error_is_within_the_clt_bound() {
        let p = GaussianMixtureParams::new(vec![0.2, 0.8], vec![-2.0, 1.0], vec![1.0, 2.0]).unwrap();
        let var: f64 = (0..2).map(|k| p.weights[k] * (p.stds[k].powi(2) + p.means[k].powi(2))).sum::<f64>() - p.mean().powi(2);
        for seed in 0..50 {
            let mc = 2000;
            let e = mixture_expectation(&p, |x| x, mc, seed).unwrap();
            assert!((e - p.mean()).abs() <= 4.0 * var.sqrt() / (mc as f64).sqrt());
        }
    }

    #[test]
    fn one_component_recovers_a_shifted_gaussian() {
        let mut rng = rng_from_seed(8);
        let n = 50_000;
        let c = DMatrix::from_fn(n, 1, |_, _| rng.random_range(-2.0..2.0));
        let y = DVector::from_fn(n, |i, _| c[(i, 0)] + rng.sample::<f64, _>(StandardNormal));
        let spec = DensitySpec::MixtureNet(MixtureNetParams {
            components: 1,
            hidden: vec![32, 32],
            epochs: 40,
            ..MixtureNetParams::default()
        });
        let d = fit_conditional_density(&spec, &c, &y).unwrap();
        let p = d.mixture_at(&[0.0]).unwrap();
        assert!(p.means[0].abs() < 0.05, "{:?}", p);
        assert!((p.stds[0] - 1.0).abs() < 0.05, "{:?}", p);
        assert!(d.nll_trajectory.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn two_components_split_evenly() {
        let mut rng = rng_from_seed(9);
        let n = 10_000;
        let c = DMatrix::from_element(n, 1, 0.0);
        let y = DVector::from_fn(n, |i, _| {
            let centre = if i % 2 == 0 { -3.0 } else { 3.0 };
            centre + 0.5 * rng.sample::<f64, _>(StandardNormal)
        });
        let d = fit_conditional_density(&small_net(2, 60), &c, &y).unwrap();
        let p = d.mixture_at(&[0.0]).unwrap();
        assert!(p.weights.iter().all(|w| (0.45..=0.55).contains(w)), "{:?}", p);
        assert!(p.means[0] < p.means[1]);
    }

    #[test]
    fn constant_responses_clamp_the_spread() {
        let c = DMatrix::from_fn(200, 1, |i, _| i as f64);
        let y = DVector::from_element(200, 4.0);
        let d = fit_conditional_density(&small_net(3, 5), &c, &y).unwrap();
        let p = d.mixture_at(&[10.0]).unwrap();
        assert!(p.stds.iter().all(|s| *s >= SIGMA_MIN));
    }

    #[test]
    fn binned_probabilities_are_conditional_frequencies() {
        // discrete response in {0, 1}, conditioning on a binary column
        let c = DMatrix::from_column_slice(8, 1, &[0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
        let y = DVector::from_vec(vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 1.0]);
        let d = fit_conditional_density(&DensitySpec::Binned(BinnedParams::default()), &c, &y).unwrap();
        match d.law_at(&[0.0]) {
            ConditionalLaw::Atoms { values, probs } => {
                assert_eq!(values, vec![0.0, 1.0]);
                assert!((probs[0] - 0.75).abs() < 1e-12 && (probs[1] - 0.25).abs() < 1e-12);
            }
            other => panic!("{other:?}"),
        }
        match d.law_at(&[1.0]) {
            ConditionalLaw::Atoms { probs, .. } => assert!((probs[1] - 0.75).abs() < 1e-12),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn gaussian_regression_uses_residual_spread() {
        let mut rng = rng_from_seed(12);
        let n = 5000;
        let c = DMatrix::from_fn(n, 1, |_, _| rng.random_range(-1.0..1.0));
        let y = DVector::from_fn(n, |i, _| 3.0 * c[(i, 0)] + 0.5 * rng.sample::<f64, _>(StandardNormal));
        let spec = DensitySpec::GaussianRegression {
            mean: RegressorSpec::ridge(BasisMap::polynomial(1, 1), 0.0),
        };
        let d = fit_conditional_density(&spec, &c, &y).unwrap();
        let p = d.mixture_at(&[0.5]).unwrap();
        assert!((p.means[0] - 1.5).abs() < 0.05 && (p.stds[0] - 0.5).abs() < 0.02);
        let back = ConditionalDensity::from_json(&d.to_json().unwrap()).unwrap();
        assert_eq!(back.law_at(&[0.3]), d.law_at(&[0.3]));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn mixture_outputs_are_valid_everywhere(q in -1e3f64..1e3) {
            thread_local! {
                static FIT: ConditionalDensity = {
                    let c = DMatrix::from_fn(300, 1, |i, _| i as f64 / 30.0);
                    let y = DVector::from_fn(300, |i, _| (i % 7) as f64);
                    fit_conditional_density(&small_net(4, 3), &c, &y).unwrap()
                };
            }
            FIT.with(|d| {
                let p = d.mixture_at(&[q]).unwrap();
                let total: f64 = p.weights.iter().sum();
                prop_assert!((total - 1.0).abs() < 1e-8);
                prop_assert!(p.weights.iter().all(|w| *w >= 0.0));
                prop_assert!(p.stds.iter().all(|s| *s > SIGMA_MIN * 0.999));
                Ok(())
            })?;
        }
    }
}
