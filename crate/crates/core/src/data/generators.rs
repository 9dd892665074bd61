use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Dataset, DatasetBuilder, DatasetMeta, Truth, XSource};
use crate::rng::{rng_from_seed, stream};
use crate::{Error, Result};

/// Seasonal price sensitivity of the ticket demand model.
pub fn demand_psi(t: f64) -> f64 {
    2.0 * ((t - 5.0).powi(4) / 600.0 + (-4.0 * (t - 5.0).powi(2)).exp() + t / 10.0 - 2.0)
}

/// Structural demand function at time `t`, customer type `s` and price `p`.
pub fn demand_f0(t: f64, s: f64, p: f64) -> f64 {
    100.0 + (10.0 + p) * s * demand_psi(t) - 2.0 * p
}

/// Confounder response of the proxy demand model; same shape as [`demand_psi`].
pub fn pcl_g(u: f64) -> f64 {
    demand_psi(u)
}

/// Noise-free outcome of the semi-synthetic model.
pub fn semi_synthetic_f0(a: f64, x: &[f64]) -> f64 {
    let d = x.len() as f64;
    9.0 * a * a - 1.5 * a + x.iter().sum::<f64>() / d + (x[0] * x[1]).abs()
        - (10.0 + x[1] * x[2]).sin()
}

fn gaussian(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

// ---------------------------------------------------------------------------
// Linear-Gaussian toy
// ---------------------------------------------------------------------------

/// `Z, U, δ ~ N(0,1)`, `A = λZ + U + δ`, `Y = θ₀A + U`.
///
/// The conditional law of `A` given `Z` is `N(λz, 2)` and
/// `E[Y | Z] = θ₀λZ`, so every nuisance has a closed form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearToyParams {
    pub n: usize,
    pub seed: u64,
    #[serde(default = "default_theta0")]
    pub theta0: f64,
    #[serde(default = "one")]
    pub instrument_strength: f64,
}

fn default_theta0() -> f64 {
    2.0
}
fn one() -> f64 {
    1.0
}

impl LinearToyParams {
    pub fn new(n: usize, seed: u64) -> Self {
        LinearToyParams {
            n,
            seed,
            theta0: 2.0,
            instrument_strength: 1.0,
        }
    }
}

pub fn gen_linear_toy(params: LinearToyParams) -> Result<Dataset> {
    if params.n == 0 {
        return Err(Error::invalid("n must be at least 1"));
    }
    let mut rng = rng_from_seed(params.seed);
    let n = params.n;
    let (mut y, mut a, mut z, mut u) = (
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
    );
    for _ in 0..n {
        let zi = gaussian(&mut rng);
        let ui = gaussian(&mut rng);
        let di = gaussian(&mut rng);
        let ai = params.instrument_strength * zi + ui + di;
        y.push(params.theta0 * ai + ui);
        a.push(ai);
        z.push(zi);
        u.push(ui);
    }
    DatasetBuilder {
        y: DVector::from_vec(y),
        x: DMatrix::from_vec(n, 1, a),
        c: DMatrix::from_vec(n, 1, z),
        y_name: "y".into(),
        x_names: vec!["a".into()],
        c_names: vec!["z".into()],
        x_sources: vec![XSource::Endogenous],
        truth: Some(Truth::LinearToy {
            theta0: params.theta0,
            instrument_strength: params.instrument_strength,
        }),
        meta: DatasetMeta {
            generator: "linear-toy".into(),
            params: serde_json::to_value(params)?,
            seed: Some(params.seed),
        },
        latent: vec![("u".into(), DVector::from_vec(u))],
    }
    .build()
}

// ---------------------------------------------------------------------------
// Ticket demand with an instrument
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DemandIvParams {
    pub n: usize,
    pub seed: u64,
    /// Correlation between price and sales noise.
    #[serde(default = "default_rho")]
    pub rho: f64,
    /// Multiplier on the fuel-price effect; 0 makes the instrument irrelevant.
    #[serde(default = "one")]
    pub iv_strength: f64,
    /// Draw time of year from `Unif(1, 11)` instead of `Unif(0, 10)`.
    #[serde(default)]
    pub ood_time: bool,
}

fn default_rho() -> f64 {
    0.9
}

impl DemandIvParams {
    pub fn new(n: usize, seed: u64) -> Self {
        DemandIvParams {
            n,
            seed,
            rho: 0.9,
            iv_strength: 1.0,
            ood_time: false,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::invalid("n must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::invalid(format!("rho = {} outside [0, 1]", self.rho)));
        }
        if !(self.iv_strength >= 0.0 && self.iv_strength.is_finite()) {
            return Err(Error::invalid(format!(
                "iv_strength = {} must be finite and non-negative",
                self.iv_strength
            )));
        }
        Ok(())
    }
}

/// Roles: `y = sales`, `x = (price, time, customer_type)`,
/// `c = (fuel_price, time, customer_type)`.
///
/// Per sample the draw order is `s, t, z, ω, ξ` with `ε = ρω + √(1-ρ²)ξ`.
pub fn gen_demand_iv(params: DemandIvParams) -> Result<Dataset> {
    params.validate()?;
    let n = params.n;
    let mut rng = rng_from_seed(params.seed);
    let (t_lo, t_hi) = if params.ood_time { (1.0, 11.0) } else { (0.0, 10.0) };
    let noise_scale = (1.0 - params.rho * params.rho).sqrt();

    let mut sales = Vec::with_capacity(n);
    let mut x = DMatrix::zeros(n, 3);
    let mut c = DMatrix::zeros(n, 3);
    let mut omega = Vec::with_capacity(n);
    let mut eps = Vec::with_capacity(n);
    for i in 0..n {
        let s = rng.random_range(1..=7u32) as f64;
        let t = rng.random_range(t_lo..t_hi);
        let z = gaussian(&mut rng);
        let w = gaussian(&mut rng);
        let e = params.rho * w + noise_scale * gaussian(&mut rng);
        let p = 25.0 + (params.iv_strength * z + 3.0) * demand_psi(t) + w;
        sales.push(demand_f0(t, s, p) + e);
        x[(i, 0)] = p;
        x[(i, 1)] = t;
        x[(i, 2)] = s;
        c[(i, 0)] = z;
        c[(i, 1)] = t;
        c[(i, 2)] = s;
        omega.push(w);
        eps.push(e);
    }
    DatasetBuilder {
        y: DVector::from_vec(sales),
        x,
        c,
        y_name: "sales".into(),
        x_names: vec!["price".into(), "time".into(), "customer_type".into()],
        c_names: vec!["fuel_price".into(), "time".into(), "customer_type".into()],
        x_sources: vec![XSource::Endogenous, XSource::Condition(1), XSource::Condition(2)],
        truth: Some(Truth::DemandIv {
            rho: params.rho,
            iv_strength: params.iv_strength,
        }),
        meta: DatasetMeta {
            generator: "demand-iv".into(),
            params: serde_json::to_value(params)?,
            seed: Some(params.seed),
        },
        latent: vec![
            ("omega".into(), DVector::from_vec(omega)),
            ("epsilon".into(), DVector::from_vec(eps)),
        ],
    }
    .build()
}

// ---------------------------------------------------------------------------
// Ticket demand with proxies of a hidden confounder
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PclDemandParams {
    pub n: usize,
    pub seed: u64,
}

/// One draw of the proxy demand system: `(U, V1, V2, W, A, Y)`.
pub(crate) fn pcl_draw(rng: &mut impl Rng) -> [f64; 6] {
    let u = rng.random_range(0.0..10.0);
    let phase = 2.0 * std::f64::consts::PI * u / 10.0;
    let v1 = 2.0 * phase.sin() + gaussian(rng);
    let v2 = 2.0 * phase.cos() + gaussian(rng);
    let gu = pcl_g(u);
    let w = 7.0 * gu + 45.0 + gaussian(rng);
    let a = 35.0 + (v1 + 3.0) * gu + v2 + gaussian(rng);
    let y = a * ((w - a) / 10.0).exp().min(5.0) - 5.0 * gu + gaussian(rng);
    [u, v1, v2, w, a, y]
}

/// Roles: `y = sales`, `x = (price, views)`, `c = (price, fuel_1, fuel_2)`.
/// The density models `views` given `c`; price is passed through.
pub fn gen_pcl_demand(params: PclDemandParams) -> Result<Dataset> {
    if params.n == 0 {
        return Err(Error::invalid("n must be at least 1"));
    }
    let n = params.n;
    let mut rng = rng_from_seed(params.seed);
    let mut y = Vec::with_capacity(n);
    let mut x = DMatrix::zeros(n, 2);
    let mut c = DMatrix::zeros(n, 3);
    let mut demand = Vec::with_capacity(n);
    for i in 0..n {
        let [u, v1, v2, w, a, yi] = pcl_draw(&mut rng);
        y.push(yi);
        x[(i, 0)] = a;
        x[(i, 1)] = w;
        c[(i, 0)] = a;
        c[(i, 1)] = v1;
        c[(i, 2)] = v2;
        demand.push(u);
    }
    DatasetBuilder {
        y: DVector::from_vec(y),
        x,
        c,
        y_name: "sales".into(),
        x_names: vec!["price".into(), "views".into()],
        c_names: vec!["price".into(), "fuel_1".into(), "fuel_2".into()],
        x_sources: vec![XSource::Condition(0), XSource::Endogenous],
        truth: Some(Truth::PclDemand),
        meta: DatasetMeta {
            generator: "pcl-demand".into(),
            params: serde_json::to_value(params)?,
            seed: Some(params.seed),
        },
        latent: vec![("demand".into(), DVector::from_vec(demand))],
    }
    .build()
}

// ---------------------------------------------------------------------------
// Semi-synthetic instrument and outcome on real covariates
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemiSyntheticParams {
    /// `n × d_X` covariate matrix, `d_X >= 3`.
    #[serde(skip)]
    pub covariates: DMatrix<f64>,
    #[serde(default)]
    pub covariate_names: Vec<String>,
    #[serde(default = "default_k")]
    pub k_instruments: usize,
    pub seed: u64,
    /// Per-category offsets; defaults to `0, 1, ..., K-1`.
    #[serde(default)]
    pub fz_table: Option<Vec<f64>>,
}

fn default_k() -> usize {
    3
}

impl SemiSyntheticParams {
    pub fn new(covariates: DMatrix<f64>, seed: u64) -> Self {
        SemiSyntheticParams {
            covariates,
            covariate_names: Vec::new(),
            k_instruments: 3,
            seed,
            fz_table: None,
        }
    }

    fn fz(&self) -> Vec<f64> {
        self.fz_table
            .clone()
            .unwrap_or_else(|| (0..self.k_instruments).map(|k| k as f64).collect())
    }
}

/// `Z` uniform over `1..=K`; mixing weights `w_iz ~ Unif(-1, 1)` are drawn
/// once per run from a stream separate from the per-sample noise.
/// `ε ~ N(0, 0.1)` is read as variance 0.1.
pub fn gen_semi_synthetic(params: &SemiSyntheticParams) -> Result<Dataset> {
    let cov = &params.covariates;
    let (n, d) = (cov.nrows(), cov.ncols());
    if d < 3 {
        return Err(Error::invalid(format!(
            "semi-synthetic outcome needs at least 3 covariates, got {d}"
        )));
    }
    if n == 0 {
        return Err(Error::invalid("covariate matrix has no rows"));
    }
    if cov.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("covariates contain non-finite entries"));
    }
    let k = params.k_instruments;
    if k < 2 {
        return Err(Error::invalid("k_instruments must be at least 2"));
    }
    let fz = params.fz();
    if fz.len() != k {
        return Err(Error::invalid(format!(
            "fz_table has {} entries, expected {k}",
            fz.len()
        )));
    }

    let mut wrng = stream(params.seed, "semi-synthetic/weights", 0);
    // weights[z][i]
    let weights: Vec<Vec<f64>> = (0..k)
        .map(|_| (0..d).map(|_| wrng.random_range(-1.0..1.0)).collect())
        .collect();
    let eps_dist = Normal::new(0.0, 0.1f64.sqrt()).expect("valid normal");
    let mut rng = stream(params.seed, "semi-synthetic/samples", 0);

    let names: Vec<String> = if params.covariate_names.len() == d {
        params.covariate_names.clone()
    } else {
        (1..=d).map(|i| format!("x{i}")).collect()
    };

    let mut y = Vec::with_capacity(n);
    let mut x = DMatrix::zeros(n, d + 1);
    let mut c = DMatrix::zeros(n, d + 1);
    let mut row = vec![0.0; d];
    for r in 0..n {
        let z = rng.random_range(0..k);
        let eps = eps_dist.sample(&mut rng);
        let delta_a = gaussian(&mut rng);
        let delta_y = gaussian(&mut rng);
        for (i, v) in row.iter_mut().enumerate() {
            *v = cov[(r, i)];
        }
        let a: f64 = row
            .iter()
            .zip(&weights[z])
            .map(|(xi, w)| w * (xi + 0.2 * eps + fz[z]))
            .sum::<f64>()
            + delta_a;
        y.push(semi_synthetic_f0(a, &row) + 2.0 * eps + delta_y);
        x[(r, 0)] = a;
        c[(r, 0)] = (z + 1) as f64;
        for i in 0..d {
            x[(r, i + 1)] = row[i];
            c[(r, i + 1)] = row[i];
        }
    }
    let mut x_names = vec!["action".to_string()];
    x_names.extend(names.iter().cloned());
    let mut c_names = vec!["instrument".to_string()];
    c_names.extend(names.iter().cloned());
    let mut x_sources = vec![XSource::Endogenous];
    x_sources.extend((1..=d).map(XSource::Condition));

    DatasetBuilder {
        y: DVector::from_vec(y),
        x,
        c,
        y_name: "outcome".into(),
        x_names,
        c_names,
        x_sources,
        truth: Some(Truth::SemiSynthetic { d_x: d }),
        meta: DatasetMeta {
            generator: "semi-synthetic".into(),
            params: serde_json::to_value(params)?,
            seed: Some(params.seed),
        },
        latent: vec![],
    }
    .build()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn closed_form_values() {
        assert_abs_diff_eq!(demand_psi(5.0), -1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(demand_f0(5.0, 1.0, 25.0), 15.0, epsilon = 1e-12);
        assert_abs_diff_eq!(pcl_g(5.0), -1.0, epsilon = 1e-15);
        // W = 7 g(5) + 45 and A = 35 + (0 + 3) g(5) + 0 with zero noise.
        assert_abs_diff_eq!(7.0 * pcl_g(5.0) + 45.0, 38.0, epsilon = 1e-12);
        assert_abs_diff_eq!(35.0 + 3.0 * pcl_g(5.0), 32.0, epsilon = 1e-12);
        assert_abs_diff_eq!(semi_synthetic_f0(0.0, &[0.0; 3]), 0.544_021_110_889_369_8, epsilon = 1e-12);
        assert_abs_diff_eq!(semi_synthetic_f0(1.0, &[0.0; 3]), 8.044_021_110_889_37, epsilon = 1e-12);
    }

    #[test]
    fn generators_reject_bad_params() {
        assert!(gen_demand_iv(DemandIvParams::new(0, 1)).is_err());
        let mut p = DemandIvParams::new(10, 1);
        p.rho = 1.5;
        assert!(gen_demand_iv(p).is_err());
        p.rho = -0.1;
        assert!(gen_demand_iv(p).is_err());
        assert!(gen_pcl_demand(PclDemandParams { n: 0, seed: 1 }).is_err());
        assert!(gen_linear_toy(LinearToyParams::new(0, 1)).is_err());
        let narrow = SemiSyntheticParams::new(DMatrix::zeros(10, 2), 1);
        assert!(gen_semi_synthetic(&narrow).is_err());
        let mut bad = SemiSyntheticParams::new(DMatrix::zeros(10, 3), 1);
        bad.covariates[(3, 1)] = f64::INFINITY;
        assert!(gen_semi_synthetic(&bad).is_err());
        let mut short = SemiSyntheticParams::new(DMatrix::zeros(10, 3), 1);
        short.fz_table = Some(vec![0.0, 1.0]);
        assert!(gen_semi_synthetic(&short).is_err());
    }

    #[test]
    fn zero_strength_instrument_drops_out_of_price() {
        let mut p = DemandIvParams::new(500, 3);
        p.iv_strength = 0.0;
        let d = gen_demand_iv(p).unwrap();
        let omega = d.latent("omega").unwrap();
        for i in 0..d.n() {
            let t = d.x()[(i, 1)];
            let expected = 25.0 + 3.0 * demand_psi(t) + omega[i];
            assert_abs_diff_eq!(d.x()[(i, 0)], expected, epsilon = 1e-12);
        }
    }

    #[test]
    fn ood_time_shifts_support() {
        let mut p = DemandIvParams::new(2000, 5);
        p.ood_time = true;
        let d = gen_demand_iv(p).unwrap();
        let t = d.x().column(1);
        assert!(t.iter().all(|&v| (1.0..11.0).contains(&v)));
        assert!(t.iter().any(|&v| v > 10.0));
    }

    #[test]
    fn semi_synthetic_noise_free_part_matches_f0() {
        let cov = DMatrix::from_fn(50, 4, |i, j| ((i * 7 + j * 3) % 11) as f64 / 5.0 - 1.0);
        let d = gen_semi_synthetic(&SemiSyntheticParams::new(cov, 9)).unwrap();
        let truth = d.truth().unwrap();
        let x0 = d.x_row(0);
        assert_abs_diff_eq!(
            truth.structural(&x0).unwrap(),
            semi_synthetic_f0(x0[0], &x0[1..]),
            epsilon = 0.0
        );
        assert!(d.c().column(0).iter().all(|&z| (1.0..=3.0).contains(&z)));
    }
}
