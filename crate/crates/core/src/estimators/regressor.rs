//! Scalar regressors used for the outcome nuisance `E[Y | C]`.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::basis::BasisMap;
use super::gbt::{GbtParams, GradientBoostedTrees};
use super::linalg::ridge_solve;
use super::mlp::{Activation, AdamW, Mlp};
use crate::rng::stream;
use crate::{Error, Result};

/// Version tag written into serialised models.
pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetParams {
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
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

impl Default for NetParams {
    fn default() -> Self {
        NetParams {
            hidden: default_hidden(),
            activation: Activation::Relu,
            epochs: default_epochs(),
            batch_size: default_batch(),
            learning_rate: default_lr(),
            weight_decay: default_wd(),
            seed: 0,
        }
    }
}

/// Hyperparameters of a regressor, tagged by kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum RegressorSpec {
    Ridge {
        basis: BasisMap,
        #[serde(default)]
        lambda: f64,
    },
    BoostedTrees(GbtParams),
    FeedForward(NetParams),
}

impl RegressorSpec {
    pub fn ridge(basis: BasisMap, lambda: f64) -> Self {
        RegressorSpec::Ridge { basis, lambda }
    }

    pub fn trees(n_trees: usize, min_samples_leaf: usize) -> Self {
        RegressorSpec::BoostedTrees(GbtParams {
            n_trees,
            min_samples_leaf,
            ..GbtParams::default()
        })
    }

    /// Fewest rows this estimator accepts.
    pub fn min_rows(&self) -> usize {
        match self {
            RegressorSpec::Ridge { .. } => 1,
            RegressorSpec::BoostedTrees(p) => p.min_samples_leaf.max(1),
            RegressorSpec::FeedForward(_) => 2,
        }
    }

    /// Copy with a different internal seed (only the net uses one).
    pub fn reseeded(&self, seed: u64) -> Self {
        match self {
            RegressorSpec::FeedForward(p) => RegressorSpec::FeedForward(NetParams { seed, ..p.clone() }),
            other => other.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
enum State {
    Ridge {
        coef: Vec<f64>,
    },
    BoostedTrees(GradientBoostedTrees),
    FeedForward {
        net: Mlp,
        x_mean: Vec<f64>,
        x_std: Vec<f64>,
        y_mean: f64,
        y_std: f64,
    },
}

/// A fitted regressor. Immutable after [`fit_regressor`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Regressor {
    pub format_version: u32,
    pub spec: RegressorSpec,
    pub n_features: usize,
    /// Training MSE at the end of fitting.
    pub train_mse: f64,
    state: State,
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

pub fn fit_regressor(spec: &RegressorSpec, inputs: &DMatrix<f64>, targets: &DVector<f64>) -> Result<Regressor> {
    let (n, d) = inputs.shape();
    if targets.len() != n {
        return Err(Error::shape(format!("{n} targets"), targets.len()));
    }
    if n < spec.min_rows() {
        return Err(Error::Fit(format!("{n} rows, estimator needs at least {}", spec.min_rows())));
    }
    if inputs.iter().chain(targets.iter()).any(|v| !v.is_finite()) {
        return Err(Error::invalid("regressor inputs must be finite"));
    }
    let state = match spec {
        RegressorSpec::Ridge { basis, lambda } => {
            basis.validate()?;
            if basis.input_dim() != d {
                return Err(Error::shape(format!("basis input width {}", basis.input_dim()), d));
            }
            let mut phi = DMatrix::zeros(n, basis.output_dim());
            let mut buf = Vec::new();
            for i in 0..n {
                let row: Vec<f64> = inputs.row(i).iter().copied().collect();
                basis.eval_into(&row, &mut buf);
                phi.row_mut(i).copy_from_slice(&buf);
            }
            let coef = ridge_solve(&phi, targets, None, *lambda, &basis.constant_features())?;
            State::Ridge {
                coef: coef.iter().copied().collect(),
            }
        }
        RegressorSpec::BoostedTrees(p) => {
            let model = GradientBoostedTrees::fit(&rows_of(inputs), targets.as_slice(), p)?;
            State::BoostedTrees(model)
        }
        RegressorSpec::FeedForward(p) => fit_net(p, inputs, targets)?,
    };
    let mut model = Regressor {
        format_version: MODEL_FORMAT_VERSION,
        spec: spec.clone(),
        n_features: d,
        train_mse: 0.0,
        state,
    };
    let pred = model.predict(inputs)?;
    model.train_mse = (pred - targets).norm_squared() / n as f64;
    if !model.train_mse.is_finite() {
        return Err(Error::Fit("training loss is not finite".into()));
    }
    Ok(model)
}

fn column_moments(inputs: &DMatrix<f64>) -> (Vec<f64>, Vec<f64>) {
    let n = inputs.nrows() as f64;
    let mut mean = Vec::new();
    let mut std = Vec::new();
    for col in inputs.column_iter() {
        let m = col.sum() / n;
        let v = col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
        mean.push(m);
        std.push(if v > 0.0 { v.sqrt() } else { 1.0 });
    }
    (mean, std)
}

fn fit_net(p: &NetParams, inputs: &DMatrix<f64>, targets: &DVector<f64>) -> Result<State> {
    if p.batch_size == 0 || p.hidden.contains(&0) {
        return Err(Error::invalid("network batch size and widths must be positive"));
    }
    let (n, d) = inputs.shape();
    let (x_mean, x_std) = column_moments(inputs);
    let y_mean = targets.mean();
    let y_var = targets.iter().map(|v| (v - y_mean).powi(2)).sum::<f64>() / n as f64;
    let y_std = if y_var > 0.0 { y_var.sqrt() } else { 1.0 };
    let xs: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..d).map(|j| (inputs[(i, j)] - x_mean[j]) / x_std[j]).collect())
        .collect();
    let ys: Vec<f64> = targets.iter().map(|v| (v - y_mean) / y_std).collect();

    let mut sizes = vec![d];
    sizes.extend(&p.hidden);
    sizes.push(1);
    let mut rng = stream(p.seed, "regressor/net", 0);
    let mut net = Mlp::new(&sizes, p.activation, &mut rng);
    let mut opt = AdamW::new(net.n_params(), p.learning_rate, p.weight_decay);
    let mut ws = net.workspace();
    let mut grad = vec![0.0; net.n_params()];
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..p.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(p.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let scale = 2.0 / batch.len() as f64;
            for &i in batch {
                let out = net.forward(&xs[i], &mut ws)[0];
                net.backward(&mut ws, &[scale * (out - ys[i])], &mut grad);
            }
            opt.step(&mut net.params, &grad);
        }
        if net.params.iter().any(|v| !v.is_finite()) {
            return Err(Error::Fit("network parameters diverged".into()));
        }
    }
    Ok(State::FeedForward {
        net,
        x_mean,
        x_std,
        y_mean,
        y_std,
    })
}

impl Regressor {
    /// Prediction for one input row. The caller guarantees the width.
    pub fn predict_one(&self, x: &[f64]) -> f64 {
        match &self.state {
            State::Ridge { coef } => {
                let RegressorSpec::Ridge { basis, .. } = &self.spec else {
                    unreachable!()
                };
                basis.eval(x).iter().zip(coef).map(|(a, b)| a * b).sum()
            }
            State::BoostedTrees(m) => m.predict_row(x),
            State::FeedForward {
                net,
                x_mean,
                x_std,
                y_mean,
                y_std,
            } => {
                let z: Vec<f64> = x.iter().enumerate().map(|(j, v)| (v - x_mean[j]) / x_std[j]).collect();
                y_mean + y_std * net.predict(&z)[0]
            }
        }
    }

    pub fn predict(&self, inputs: &DMatrix<f64>) -> Result<DVector<f64>> {
        if inputs.ncols() != self.n_features && inputs.nrows() > 0 {
            return Err(Error::shape(format!("{} input columns", self.n_features), inputs.ncols()));
        }
        let mut row = vec![0.0; inputs.ncols()];
        Ok(DVector::from_iterator(
            inputs.nrows(),
            (0..inputs.nrows()).map(|i| {
                for (j, v) in row.iter_mut().enumerate() {
                    *v = inputs[(i, j)];
                }
                self.predict_one(&row)
            }),
        ))
    }

    /// Ridge coefficients, if this is a ridge model.
    pub fn coefficients(&self) -> Option<&[f64]> {
        match &self.state {
            State::Ridge { coef } => Some(coef),
            _ => None,
        }
    }

    /// Stagewise training loss of a boosted-tree model.
    pub fn stage_loss(&self) -> Option<&[f64]> {
        match &self.state {
            State::BoostedTrees(m) => Some(&m.stage_loss),
            _ => None,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: Regressor = serde_json::from_str(text)?;
        if model.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::invalid(format!(
                "unsupported model format version {}",
                model.format_version
            )));
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_demand_iv, DemandIvParams};
    use crate::rng::rng_from_seed;
    use rand::Rng;

    fn line() -> (DMatrix<f64>, DVector<f64>) {
        let x = DMatrix::from_column_slice(5, 1, &[0.0, 1.0, 2.0, 3.0, 4.0]);
        let y = DVector::from_vec(vec![0.0, 2.0, 4.0, 6.0, 8.0]);
        (x, y)
    }

    #[test]
    fn ridge_interpolates_a_line_and_predicts() {
        let (x, y) = line();
        let m = fit_regressor(&RegressorSpec::ridge(BasisMap::identity(1), 0.0), &x, &y).unwrap();
        assert!((m.coefficients().unwrap()[0] - 2.0).abs() < 1e-10);
        let p = m.predict(&DMatrix::from_row_slice(1, 1, &[3.0])).unwrap();
        assert!((p[0] - 6.0).abs() < 1e-10);
        assert_eq!(m.predict(&DMatrix::zeros(0, 1)).unwrap().len(), 0);
        let again = m.predict(&x).unwrap();
        assert_eq!(again, m.predict(&x).unwrap());
    }

    #[test]
    fn huge_penalty_leaves_only_the_intercept() {
        let (x, y) = line();
        let m = fit_regressor(&RegressorSpec::ridge(BasisMap::polynomial(1, 1), 1e12), &x, &y).unwrap();
        let c = m.coefficients().unwrap();
        assert!(c[1].abs() < 1e-9);
        assert!((c[0] - 4.0).abs() < 1e-6);
    }

    #[test]
    fn ridge_is_optimal_against_random_perturbations() {
        let mut rng = rng_from_seed(5);
        let x = DMatrix::from_fn(50, 2, |_, _| rng.random_range(-1.0..1.0));
        let y = DVector::from_fn(50, |i, _| x[(i, 0)] - 2.0 * x[(i, 1)] + rng.random_range(-0.3..0.3));
        let basis = BasisMap::polynomial(2, 2);
        let lambda = 0.5;
        let m = fit_regressor(&RegressorSpec::ridge(basis.clone(), lambda), &x, &y).unwrap();
        let pen = basis.constant_features();
        let objective = |coef: &[f64]| {
            let mut r = 0.0;
            for i in 0..50 {
                let phi = basis.eval(&[x[(i, 0)], x[(i, 1)]]);
                let p: f64 = phi.iter().zip(coef).map(|(a, b)| a * b).sum();
                r += (y[i] - p).powi(2);
            }
            r + lambda * coef.iter().zip(&pen).filter(|(_, c)| !**c).map(|(v, _)| v * v).sum::<f64>()
        };
        let best = objective(m.coefficients().unwrap());
        for _ in 0..100 {
            let pert: Vec<f64> = m.coefficients().unwrap().iter().map(|c| c + rng.random_range(-0.1..0.1)).collect();
            assert!(best <= objective(&pert) + 1e-12);
        }
    }

    #[test]
    fn width_mismatch_is_a_shape_error() {
        let (x, y) = line();
        let m = fit_regressor(&RegressorSpec::ridge(BasisMap::identity(1), 0.0), &x, &y).unwrap();
        assert!(matches!(m.predict(&DMatrix::zeros(2, 3)), Err(Error::Shape { .. })));
    }

    #[test]
    fn trees_beat_the_constant_on_demand() {
        let d = gen_demand_iv(DemandIvParams::new(5000, 1)).unwrap();
        let m = fit_regressor(&RegressorSpec::trees(500, 100), d.c(), d.y()).unwrap();
        let var = d.y().variance();
        assert!(m.train_mse < var, "{} vs {}", m.train_mse, var);
    }

    #[test]
    fn json_round_trip_is_bit_exact() {
        let d = gen_demand_iv(DemandIvParams::new(400, 2)).unwrap();
        let specs = [
            RegressorSpec::trees(20, 10),
            RegressorSpec::ridge(BasisMap::polynomial(3, 2), 0.1),
            RegressorSpec::FeedForward(NetParams {
                hidden: vec![8],
                epochs: 3,
                ..NetParams::default()
            }),
        ];
        for spec in specs {
            let m = fit_regressor(&spec, d.c(), d.y()).unwrap();
            let back = Regressor::from_json(&m.to_json().unwrap()).unwrap();
            let a = m.predict(d.c()).unwrap();
            let b = back.predict(d.c()).unwrap();
            assert!(a.iter().zip(b.iter()).all(|(u, v)| u.to_bits() == v.to_bits()));
        }
    }

    #[test]
    fn net_learns_a_smooth_function() {
        let mut rng = rng_from_seed(9);
        let x = DMatrix::from_fn(800, 1, |_, _| rng.random_range(-2.0..2.0));
        let y = DVector::from_fn(800, |i, _| (x[(i, 0)] * 1.5f64).sin());
        let spec = RegressorSpec::FeedForward(NetParams {
            hidden: vec![32, 16],
            epochs: 150,
            learning_rate: 5e-3,
            ..NetParams::default()
        });
        let m = fit_regressor(&spec, &x, &y).unwrap();
        assert!(m.train_mse < 0.05 * y.variance(), "{}", m.train_mse);
    }
}
