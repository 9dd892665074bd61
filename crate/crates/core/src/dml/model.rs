use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::estimators::{Activation, BasisMap, Mlp, Workspace};
use crate::rng::stream;
use crate::score::Structural;
use crate::{Error, Result};

/// The parameterised structural function `f_θ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "kebab-case")]
pub enum StructuralModel {
    /// `f_θ(x) = θᵀφ(x)`.
    LinearInBasis { basis: BasisMap, theta: Vec<f64> },
    /// Dense network; `θ` is the flattened parameter vector.
    FeedForward { net: Mlp },
}

impl StructuralModel {
    pub fn linear(basis: BasisMap, theta: Vec<f64>) -> Result<Self> {
        basis.validate()?;
        if theta.len() != basis.output_dim() {
            return Err(Error::shape(format!("{} coefficients", basis.output_dim()), theta.len()));
        }
        Ok(StructuralModel::LinearInBasis { basis, theta })
    }

    /// Linear-in-basis model with all coefficients zero.
    pub fn zeros(basis: BasisMap) -> Self {
        let theta = vec![0.0; basis.output_dim()];
        StructuralModel::LinearInBasis { basis, theta }
    }

    pub fn feedforward(input_dim: usize, hidden: &[usize], seed: u64) -> Self {
        let mut sizes = vec![input_dim];
        sizes.extend(hidden);
        sizes.push(1);
        let mut rng = stream(seed, "structural/init", 0);
        StructuralModel::FeedForward {
            net: Mlp::new(&sizes, Activation::Relu, &mut rng),
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            StructuralModel::LinearInBasis { basis, .. } => basis.input_dim(),
            StructuralModel::FeedForward { net } => net.input_dim(),
        }
    }

    pub fn theta(&self) -> &[f64] {
        match self {
            StructuralModel::LinearInBasis { theta, .. } => theta,
            StructuralModel::FeedForward { net } => &net.params,
        }
    }

    pub fn theta_mut(&mut self) -> &mut [f64] {
        match self {
            StructuralModel::LinearInBasis { theta, .. } => theta,
            StructuralModel::FeedForward { net } => &mut net.params,
        }
    }

    pub fn predict_one(&self, x: &[f64]) -> f64 {
        match self {
            StructuralModel::LinearInBasis { basis, theta } => {
                basis.eval(x).iter().zip(theta).map(|(a, b)| a * b).sum()
            }
            StructuralModel::FeedForward { net } => net.predict(x)[0],
        }
    }

    pub fn predict(&self, x: &DMatrix<f64>) -> Result<DVector<f64>> {
        if x.nrows() > 0 && x.ncols() != self.input_dim() {
            return Err(Error::shape(format!("{} input columns", self.input_dim()), x.ncols()));
        }
        let mut row = vec![0.0; x.ncols()];
        Ok(DVector::from_iterator(
            x.nrows(),
            (0..x.nrows()).map(|i| {
                for (j, v) in row.iter_mut().enumerate() {
                    *v = x[(i, j)];
                }
                self.predict_one(&row)
            }),
        ))
    }

    /// Add `scale · ∂f/∂θ (x)` into `grad` and return `f(x)`.
    pub(crate) fn accumulate_gradient(&self, x: &[f64], scale: f64, grad: &mut [f64], ws: &mut Workspace) -> f64 {
        match self {
            StructuralModel::LinearInBasis { basis, theta } => {
                let phi = basis.eval(x);
                for (g, p) in grad.iter_mut().zip(&phi) {
                    *g += scale * p;
                }
                phi.iter().zip(theta).map(|(a, b)| a * b).sum()
            }
            StructuralModel::FeedForward { net } => {
                let out = net.forward(x, ws)[0];
                net.backward(ws, &[scale], grad);
                out
            }
        }
    }
}

impl Structural for StructuralModel {
    fn value(&self, x: &[f64]) -> f64 {
        self.predict_one(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_model_predictions() {
        let m = StructuralModel::linear(BasisMap::identity(1), vec![2.0]).unwrap();
        let p = m.predict(&DMatrix::from_row_slice(1, 1, &[3.0])).unwrap();
        assert_eq!(p[0], 6.0);
        assert_eq!(m.predict(&DMatrix::zeros(0, 1)).unwrap().len(), 0);
        let constant = StructuralModel::linear(BasisMap::polynomial(2, 0), vec![4.5]).unwrap();
        let p = constant.predict(&DMatrix::from_row_slice(3, 2, &[1.0, 2.0, -3.0, 0.0, 9.0, 9.0])).unwrap();
        assert!(p.iter().all(|v| *v == 4.5));
        assert!(m.predict(&DMatrix::zeros(2, 2)).is_err());
        assert!(StructuralModel::linear(BasisMap::identity(2), vec![1.0]).is_err());
    }
}
