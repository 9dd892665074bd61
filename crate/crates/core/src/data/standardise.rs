use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnStats {
    pub name: String,
    pub mean: f64,
    /// Population standard deviation (denominator `n`), strictly positive.
    pub std: f64,
}

/// Per-variable affine transform `v -> (v - mean) / std`.
///
/// Variables are addressed by name, so a variable that appears in both `x`
/// and `c` is transformed consistently in both places.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardiser {
    pub columns: Vec<ColumnStats>,
}

fn column_values(data: &Dataset, name: &str) -> Option<Vec<f64>> {
    if data.y_name() == name {
        return Some(data.y().iter().copied().collect());
    }
    if let Some(j) = data.x_names().iter().position(|n| n == name) {
        return Some(data.x().column(j).iter().copied().collect());
    }
    data.c_names()
        .iter()
        .position(|n| n == name)
        .map(|j| data.c().column(j).iter().copied().collect())
}

pub fn fit_standardiser(data: &Dataset, columns: &[&str]) -> Result<Standardiser> {
    let mut stats = Vec::with_capacity(columns.len());
    for &name in columns {
        let values = column_values(data, name).ok_or_else(|| Error::Schema {
            column: name.to_string(),
            message: "is not a variable of the dataset".into(),
        })?;
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        if !(std > 0.0) || std <= 1e-12 * mean.abs().max(1.0) {
            return Err(Error::ZeroVariance {
                column: name.to_string(),
            });
        }
        stats.push(ColumnStats {
            name: name.to_string(),
            mean,
            std,
        });
    }
    Ok(Standardiser { columns: stats })
}

impl Standardiser {
    pub fn stats(&self, name: &str) -> Option<&ColumnStats> {
        self.columns.iter().find(|c| c.name == name)
    }

    pub fn forward(&self, name: &str, v: f64) -> f64 {
        match self.stats(name) {
            Some(s) => (v - s.mean) / s.std,
            None => v,
        }
    }

    pub fn inverse(&self, name: &str, v: f64) -> f64 {
        match self.stats(name) {
            Some(s) => v * s.std + s.mean,
            None => v,
        }
    }

    fn map(&self, data: &Dataset, f: impl Fn(&ColumnStats, f64) -> f64) -> Result<Dataset> {
        let mut b = data.clone().into_builder();
        for s in &self.columns {
            if b.y_name == s.name {
                b.y.iter_mut().for_each(|v| *v = f(s, *v));
            }
            if let Some(j) = b.x_names.iter().position(|n| *n == s.name) {
                b.x.column_mut(j).iter_mut().for_each(|v| *v = f(s, *v));
            }
            if let Some(j) = b.c_names.iter().position(|n| *n == s.name) {
                b.c.column_mut(j).iter_mut().for_each(|v| *v = f(s, *v));
            }
        }
        b.build()
    }

    pub fn apply(&self, data: &Dataset) -> Result<Dataset> {
        self.map(data, |s, v| (v - s.mean) / s.std)
    }

    pub fn invert(&self, data: &Dataset) -> Result<Dataset> {
        self.map(data, |s, v| v * s.std + s.mean)
    }

    /// Transform a structural input row laid out like the dataset's `x`.
    pub fn forward_x(&self, x_names: &[String], x: &mut [f64]) {
        for (v, name) in x.iter_mut().zip(x_names) {
            *v = self.forward(name, *v);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{DatasetBuilder, DatasetMeta, XSource};
    use nalgebra::{DMatrix, DVector};
    use proptest::prelude::*;

    fn dataset(y: Vec<f64>, a: Vec<f64>) -> Dataset {
        let n = y.len();
        DatasetBuilder {
            y: DVector::from_vec(y),
            x: DMatrix::from_vec(n, 1, a.clone()),
            c: DMatrix::from_vec(n, 1, a),
            y_name: "y".into(),
            x_names: vec!["a".into()],
            c_names: vec!["a".into()],
            x_sources: vec![XSource::Condition(0)],
            truth: None,
            meta: DatasetMeta::external("test"),
            latent: vec![],
        }
        .build()
        .unwrap()
    }

    #[test]
    fn population_convention() {
        let d = dataset(vec![1.0, 2.0, 3.0], vec![0.0, 1.0, 5.0]);
        let s = fit_standardiser(&d, &["y"]).unwrap();
        assert_eq!(s.columns[0].mean, 2.0);
        assert!((s.columns[0].std - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
        let t = s.apply(&d).unwrap();
        assert!(t.y().mean().abs() < 1e-15);
    }

    #[test]
    fn constant_column_is_rejected() {
        let d = dataset(vec![4.0; 5], vec![0.0, 1.0, 2.0, 3.0, 4.0]);
        match fit_standardiser(&d, &["y"]) {
            Err(Error::ZeroVariance { column }) => assert_eq!(column, "y"),
            other => panic!("{other:?}"),
        }
        assert!(matches!(fit_standardiser(&d, &["nope"]), Err(Error::Schema { .. })));
    }

    #[test]
    fn shared_variable_transformed_in_both_roles() {
        let d = dataset(vec![1.0, 2.0, 4.0], vec![0.0, 1.0, 5.0]);
        let s = fit_standardiser(&d, &["a"]).unwrap();
        let t = s.apply(&d).unwrap();
        assert_eq!(t.x(), t.c());
    }

    proptest! {
        #[test]
        fn moments_and_round_trip(values in proptest::collection::vec(-1e3f64..1e3, 3..60)) {
            let spread = values.iter().cloned().fold(f64::MIN, f64::max) - values.iter().cloned().fold(f64::MAX, f64::min);
            prop_assume!(spread > 1e-3);
            let a: Vec<f64> = values.iter().map(|v| v * 0.5 + 1.0).collect();
            let d = dataset(values.clone(), a);
            let s = fit_standardiser(&d, &["y", "a"]).unwrap();
            let t = s.apply(&d).unwrap();
            let n = t.n() as f64;
            let mean = t.y().sum() / n;
            let std = (t.y().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            prop_assert!(mean.abs() < 1e-10);
            prop_assert!((std - 1.0).abs() < 1e-10);
            let back = s.invert(&t).unwrap();
            for (u, v) in back.y().iter().zip(d.y().iter()) {
                prop_assert!((u - v).abs() < 1e-12 * v.abs().max(1.0));
            }
            for (u, v) in back.x().iter().zip(d.x().iter()) {
                prop_assert!((u - v).abs() < 1e-12 * v.abs().max(1.0));
            }
        }
    }
}
