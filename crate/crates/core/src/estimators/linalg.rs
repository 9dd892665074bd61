use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};

/// Weighted ridge solution of `min Σ w_i (y_i - θ·φ_i)^2 + λ Σ_{j penalised} θ_j^2`.
///
/// `phi` is `n × d`. Features flagged in `unpenalised` (typically the
/// constant column) carry no penalty. The normal equations are solved by
/// Cholesky; a Gram matrix that is not positive definite is a fit error.
pub fn ridge_solve(
    phi: &DMatrix<f64>,
    y: &DVector<f64>,
    weights: Option<&[f64]>,
    lambda: f64,
    unpenalised: &[bool],
) -> Result<DVector<f64>> {
    let (n, d) = phi.shape();
    if y.len() != n {
        return Err(Error::shape(n, y.len()));
    }
    if n == 0 {
        return Err(Error::Fit("no rows".into()));
    }
    if !(lambda >= 0.0) {
        return Err(Error::invalid(format!("ridge penalty must be >= 0, got {lambda}")));
    }
    let (gram, rhs) = match weights {
        None => (phi.tr_mul(phi), phi.tr_mul(y)),
        Some(w) => {
            if w.len() != n {
                return Err(Error::shape(n, w.len()));
            }
            let mut scaled = phi.clone();
            for (i, mut row) in scaled.row_iter_mut().enumerate() {
                row *= w[i].sqrt();
            }
            let yw = DVector::from_iterator(n, y.iter().zip(w).map(|(v, wi)| v * wi.sqrt()));
            (scaled.tr_mul(&scaled), scaled.tr_mul(&yw))
        }
    };
    let mut gram = gram;
    for j in 0..d {
        if !unpenalised.get(j).copied().unwrap_or(false) {
            gram[(j, j)] += lambda;
        }
    }
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::Fit("regularised Gram matrix is singular".into()))?;
    let theta = chol.solve(&rhs);
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(Error::Fit("ridge solution is not finite".into()));
    }
    Ok(theta)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_line_without_penalty() {
        let phi = DMatrix::from_column_slice(4, 1, &[1.0, 2.0, 3.0, 4.0]);
        let y = DVector::from_vec(vec![2.0, 4.0, 6.0, 8.0]);
        let t = ridge_solve(&phi, &y, None, 0.0, &[false]).unwrap();
        assert!((t[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn singular_without_penalty_is_an_error() {
        let phi = DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 2.0, 2.0, 3.0, 3.0]);
        let y = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        assert!(ridge_solve(&phi, &y, None, 0.0, &[false, false]).is_err());
        assert!(ridge_solve(&phi, &y, None, 1e-3, &[false, false]).is_ok());
    }

    #[test]
    fn weights_match_row_duplication() {
        let phi = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 1.0, 1.0, 1.0, 2.0]);
        let y = DVector::from_vec(vec![0.0, 1.5, 1.0]);
        let w = [1.0, 2.0, 1.0];
        let a = ridge_solve(&phi, &y, Some(&w), 0.1, &[true, false]).unwrap();
        let dup = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0, 2.0]);
        let ydup = DVector::from_vec(vec![0.0, 1.5, 1.5, 1.0]);
        let b = ridge_solve(&dup, &ydup, None, 0.1, &[true, false]).unwrap();
        assert!((a - b).norm() < 1e-12);
    }
}
