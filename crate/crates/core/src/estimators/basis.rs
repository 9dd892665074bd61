use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// One-dimensional feature families used as tensor-product factors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Basis1d {
    /// `1, u, u^2, ..., u^degree` with `u = (v - offset) / scale`.
    Poly {
        degree: usize,
        #[serde(default)]
        offset: f64,
        #[serde(default = "unit")]
        scale: f64,
    },
    /// Constant plus Gaussian bumps `exp(-(v - c)^2 / (2 w^2))`.
    Rbf { centers: Vec<f64>, width: f64 },
    /// Indicator of each level (exact match).
    OneHot { levels: Vec<f64> },
}

fn unit() -> f64 {
    1.0
}

impl Basis1d {
    fn dim(&self) -> usize {
        match self {
            Basis1d::Poly { degree, .. } => degree + 1,
            Basis1d::Rbf { centers, .. } => centers.len() + 1,
            Basis1d::OneHot { levels } => levels.len(),
        }
    }

    fn eval(&self, v: f64, out: &mut Vec<f64>) {
        match self {
            Basis1d::Poly {
                degree,
                offset,
                scale,
            } => {
                let u = (v - offset) / scale;
                let mut p = 1.0;
                for _ in 0..=*degree {
                    out.push(p);
                    p *= u;
                }
            }
            Basis1d::Rbf { centers, width } => {
                out.push(1.0);
                let denom = 2.0 * width * width;
                out.extend(centers.iter().map(|c| (-(v - c).powi(2) / denom).exp()));
            }
            Basis1d::OneHot { levels } => {
                out.extend(levels.iter().map(|&l| if v == l { 1.0 } else { 0.0 }));
            }
        }
    }

    /// Position of the constant feature, if any.
    fn constant_index(&self) -> Option<usize> {
        match self {
            Basis1d::Poly { .. } | Basis1d::Rbf { .. } => Some(0),
            Basis1d::OneHot { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Factor {
    pub column: usize,
    pub basis: Basis1d,
}

/// Feature map `φ` for linear-in-basis models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BasisMap {
    /// The raw input vector, no intercept.
    Identity { input_dim: usize },
    /// All monomials of total degree `<= degree` in the standardised inputs
    /// `(x_j - offset_j) / scale_j`, constant first.
    Polynomial {
        input_dim: usize,
        degree: usize,
        #[serde(default)]
        offset: Vec<f64>,
        #[serde(default)]
        scale: Vec<f64>,
    },
    /// Constant plus isotropic Gaussian bumps on the given centres.
    Radial { centers: Vec<Vec<f64>>, width: f64 },
    /// Tensor product of one-dimensional bases on selected columns.
    Tensor { input_dim: usize, factors: Vec<Factor> },
}

fn monomials(dim: usize, degree: usize) -> Vec<Vec<usize>> {
    // exponent vectors ordered by total degree, then lexicographically
    let mut out = Vec::new();
    for total in 0..=degree {
        let mut cur = vec![0; dim];
        fn rec(j: usize, left: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
            if j + 1 == cur.len() {
                cur[j] = left;
                out.push(cur.clone());
                return;
            }
            for e in (0..=left).rev() {
                cur[j] = e;
                rec(j + 1, left - e, cur, out);
            }
        }
        if dim == 0 {
            if total == 0 {
                out.push(vec![]);
            }
            continue;
        }
        rec(0, total, &mut cur, &mut out);
    }
    out
}

impl BasisMap {
    pub fn identity(input_dim: usize) -> Self {
        BasisMap::Identity { input_dim }
    }

    pub fn polynomial(input_dim: usize, degree: usize) -> Self {
        BasisMap::Polynomial {
            input_dim,
            degree,
            offset: vec![0.0; input_dim],
            scale: vec![1.0; input_dim],
        }
    }

    /// Polynomial basis whose inputs are centred and scaled by the given
    /// per-column mean and standard deviation.
    pub fn polynomial_scaled(degree: usize, offset: Vec<f64>, scale: Vec<f64>) -> Self {
        BasisMap::Polynomial {
            input_dim: offset.len(),
            degree,
            offset,
            scale,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            BasisMap::Identity { input_dim } if *input_dim == 0 => {
                Err(Error::invalid("identity basis needs input_dim >= 1"))
            }
            BasisMap::Polynomial {
                input_dim,
                offset,
                scale,
                ..
            } => {
                if (!offset.is_empty() && offset.len() != *input_dim)
                    || (!scale.is_empty() && scale.len() != *input_dim)
                {
                    return Err(Error::invalid("polynomial offset/scale length mismatch"));
                }
                if scale.iter().any(|s| !(*s > 0.0)) {
                    return Err(Error::invalid("polynomial scales must be positive"));
                }
                Ok(())
            }
            BasisMap::Radial { centers, width } => {
                if !(*width > 0.0) {
                    return Err(Error::invalid("radial width must be positive"));
                }
                let d = centers.first().map_or(0, Vec::len);
                if centers.iter().any(|c| c.len() != d) {
                    return Err(Error::invalid("radial centres have mixed dimensions"));
                }
                Ok(())
            }
            BasisMap::Tensor { input_dim, factors } => {
                if factors.is_empty() {
                    return Err(Error::invalid("tensor basis needs at least one factor"));
                }
                if factors.iter().any(|f| f.column >= *input_dim) {
                    return Err(Error::invalid("tensor factor references a missing column"));
                }
                if factors.iter().any(|f| f.basis.dim() == 0) {
                    return Err(Error::invalid("tensor factor with empty basis"));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            BasisMap::Identity { input_dim }
            | BasisMap::Polynomial { input_dim, .. }
            | BasisMap::Tensor { input_dim, .. } => *input_dim,
            BasisMap::Radial { centers, .. } => centers.first().map_or(0, Vec::len),
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            BasisMap::Identity { input_dim } => *input_dim,
            BasisMap::Polynomial {
                input_dim, degree, ..
            } => monomials(*input_dim, *degree).len(),
            BasisMap::Radial { centers, .. } => centers.len() + 1,
            BasisMap::Tensor { factors, .. } => factors.iter().map(|f| f.basis.dim()).product(),
        }
    }

    /// Features that are identically one (left unpenalised by ridge).
    pub fn constant_features(&self) -> Vec<bool> {
        let mut out = vec![false; self.output_dim()];
        match self {
            BasisMap::Identity { .. } => {}
            BasisMap::Polynomial { .. } | BasisMap::Radial { .. } => out[0] = true,
            BasisMap::Tensor { factors, .. } => {
                if factors.iter().all(|f| f.basis.constant_index().is_some()) {
                    let mut idx = 0;
                    for f in factors {
                        idx = idx * f.basis.dim() + f.basis.constant_index().unwrap();
                    }
                    out[idx] = true;
                }
            }
        }
        out
    }

    /// Append `φ(x)` to `out` (cleared first).
    pub fn eval_into(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        match self {
            BasisMap::Identity { .. } => out.extend_from_slice(x),
            BasisMap::Polynomial {
                input_dim,
                degree,
                offset,
                scale,
            } => {
                let u: Vec<f64> = (0..*input_dim)
                    .map(|j| {
                        let o = offset.get(j).copied().unwrap_or(0.0);
                        let s = scale.get(j).copied().unwrap_or(1.0);
                        (x[j] - o) / s
                    })
                    .collect();
                for exps in monomials(*input_dim, *degree) {
                    out.push(exps.iter().zip(&u).map(|(&e, &v)| v.powi(e as i32)).product());
                }
            }
            BasisMap::Radial { centers, width } => {
                out.push(1.0);
                let denom = 2.0 * width * width;
                for c in centers {
                    let d2: f64 = c.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum();
                    out.push((-d2 / denom).exp());
                }
            }
            BasisMap::Tensor { factors, .. } => {
                out.push(1.0);
                let mut scratch = Vec::new();
                let mut next = Vec::new();
                for f in factors {
                    scratch.clear();
                    f.basis.eval(x[f.column], &mut scratch);
                    next.clear();
                    for &a in out.iter() {
                        next.extend(scratch.iter().map(|b| a * b));
                    }
                    std::mem::swap(out, &mut next);
                }
            }
        }
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.output_dim());
        self.eval_into(x, &mut out);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn polynomial_dimensions() {
        assert_eq!(BasisMap::polynomial(1, 3).output_dim(), 4);
        assert_eq!(BasisMap::polynomial(2, 2).output_dim(), 6);
        assert_eq!(BasisMap::polynomial(3, 0).output_dim(), 1);
        let phi = BasisMap::polynomial(2, 2).eval(&[2.0, 3.0]);
        assert_eq!(phi, vec![1.0, 2.0, 3.0, 4.0, 6.0, 9.0]);
    }

    #[test]
    fn tensor_product_layout() {
        let b = BasisMap::Tensor {
            input_dim: 2,
            factors: vec![
                Factor {
                    column: 1,
                    basis: Basis1d::OneHot {
                        levels: vec![1.0, 2.0],
                    },
                },
                Factor {
                    column: 0,
                    basis: Basis1d::Poly {
                        degree: 1,
                        offset: 0.0,
                        scale: 1.0,
                    },
                },
            ],
        };
        assert_eq!(b.output_dim(), 4);
        assert_eq!(b.eval(&[5.0, 2.0]), vec![0.0, 0.0, 1.0, 5.0]);
        assert_eq!(b.constant_features(), vec![false; 4]);
        let c = BasisMap::Tensor {
            input_dim: 1,
            factors: vec![Factor {
                column: 0,
                basis: Basis1d::Rbf {
                    centers: vec![0.0, 1.0],
                    width: 0.5,
                },
            }],
        };
        assert_eq!(c.constant_features(), vec![true, false, false]);
    }

    proptest! {
        #[test]
        fn finite_for_finite_input(x in proptest::collection::vec(-50.0f64..50.0, 3)) {
            let maps = [
                BasisMap::polynomial_scaled(3, vec![1.0, 2.0, 3.0], vec![2.0, 2.0, 2.0]),
                BasisMap::Radial { centers: vec![vec![0.0; 3], vec![1.0; 3]], width: 1.0 },
                BasisMap::identity(3),
            ];
            for m in &maps {
                let phi = m.eval(&x);
                prop_assert_eq!(phi.len(), m.output_dim());
                prop_assert!(phi.iter().all(|v| v.is_finite()));
            }
        }
    }
}
