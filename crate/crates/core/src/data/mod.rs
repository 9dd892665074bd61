//! Datasets, seeded generators, CSV ingestion, fold plans and standardisation.
//!
//! A [`Dataset`] holds the three roles of a conditional moment restriction:
//! the outcome `y`, the structural input `x` and the conditioning variables
//! `c`. Columns of `x` are either *endogenous* (modelled by the conditional
//! density) or copies of a conditioning column (context that is observed on
//! both sides of the restriction, such as time of year in the demand model).

mod csv_io;
mod folds;
mod generators;
mod standardise;

pub use csv_io::{ingest_covariates_csv, ingest_csv, read_dataset, write_dataset, RoleSchema};
pub use folds::{make_fold_plan, FoldPlan};
pub use generators::{
    demand_f0, demand_psi, gen_demand_iv, gen_linear_toy, gen_pcl_demand, gen_semi_synthetic,
    pcl_g, semi_synthetic_f0, DemandIvParams, LinearToyParams, PclDemandParams,
    SemiSyntheticParams,
};
pub use standardise::{fit_standardiser, ColumnStats, Standardiser};
pub(crate) use generators::pcl_draw;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Where a column of the structural input comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum XSource {
    /// Drawn from the conditional density of `x` given `c`.
    Endogenous,
    /// Copied from conditioning column `i`.
    Condition(usize),
}

/// Ground truth attached to synthetic datasets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Truth {
    LinearToy {
        theta0: f64,
        instrument_strength: f64,
    },
    DemandIv {
        rho: f64,
        iv_strength: f64,
    },
    /// The target is an interventional mean, see `eval::pcl_do_oracle`.
    PclDemand,
    SemiSynthetic {
        d_x: usize,
    },
}

impl Truth {
    /// Structural function at `x` when it has a closed form.
    pub fn structural(&self, x: &[f64]) -> Option<f64> {
        match self {
            Truth::LinearToy { theta0, .. } => Some(theta0 * x[0]),
            Truth::DemandIv { .. } => Some(demand_f0(x[1], x[2], x[0])),
            Truth::SemiSynthetic { .. } => Some(semi_synthetic_f0(x[0], &x[1..])),
            Truth::PclDemand => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub generator: String,
    pub params: serde_json::Value,
    pub seed: Option<u64>,
}

impl DatasetMeta {
    pub fn external(source: &str) -> Self {
        DatasetMeta {
            generator: "external".into(),
            params: serde_json::json!({ "source": source }),
            seed: None,
        }
    }
}

/// Immutable table of samples with role mapping.
#[derive(Debug, Clone)]
pub struct Dataset {
    y: DVector<f64>,
    x: DMatrix<f64>,
    c: DMatrix<f64>,
    y_name: String,
    x_names: Vec<String>,
    c_names: Vec<String>,
    x_sources: Vec<XSource>,
    truth: Option<Truth>,
    meta: DatasetMeta,
    latent: Vec<(String, DVector<f64>)>,
}

#[derive(Debug, Clone)]
pub struct DatasetBuilder {
    pub y: DVector<f64>,
    pub x: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub y_name: String,
    pub x_names: Vec<String>,
    pub c_names: Vec<String>,
    pub x_sources: Vec<XSource>,
    pub truth: Option<Truth>,
    pub meta: DatasetMeta,
    pub latent: Vec<(String, DVector<f64>)>,
}

impl DatasetBuilder {
    pub fn build(self) -> Result<Dataset> {
        let n = self.y.len();
        if self.x.nrows() != n || self.c.nrows() != n {
            return Err(Error::shape(
                format!("{n} rows in every role"),
                format!("x: {}, c: {}", self.x.nrows(), self.c.nrows()),
            ));
        }
        if self.x.ncols() == 0 || self.c.ncols() == 0 {
            return Err(Error::invalid("x and c need at least one column each"));
        }
        if self.x_names.len() != self.x.ncols()
            || self.c_names.len() != self.c.ncols()
            || self.x_sources.len() != self.x.ncols()
        {
            return Err(Error::invalid("column names/sources do not match matrix widths"));
        }
        for (j, src) in self.x_sources.iter().enumerate() {
            if let XSource::Condition(i) = *src {
                if i >= self.c.ncols() {
                    return Err(Error::invalid(format!(
                        "x column `{}` copies missing condition column {i}",
                        self.x_names[j]
                    )));
                }
            }
        }
        let check = |name: &str, v: &[f64]| -> Result<()> {
            if v.iter().any(|a| !a.is_finite()) {
                return Err(Error::invalid(format!("non-finite entry in {name}")));
            }
            Ok(())
        };
        check("y", self.y.as_slice())?;
        check("x", self.x.as_slice())?;
        check("c", self.c.as_slice())?;
        for (name, col) in &self.latent {
            if col.len() != n {
                return Err(Error::shape(n, format!("latent `{name}` of length {}", col.len())));
            }
        }
        Ok(Dataset {
            y: self.y,
            x: self.x,
            c: self.c,
            y_name: self.y_name,
            x_names: self.x_names,
            c_names: self.c_names,
            x_sources: self.x_sources,
            truth: self.truth,
            meta: self.meta,
            latent: self.latent,
        })
    }
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.y.len()
    }
    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }
    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }
    pub fn c(&self) -> &DMatrix<f64> {
        &self.c
    }
    pub fn d_x(&self) -> usize {
        self.x.ncols()
    }
    pub fn d_c(&self) -> usize {
        self.c.ncols()
    }
    pub fn y_name(&self) -> &str {
        &self.y_name
    }
    pub fn x_names(&self) -> &[String] {
        &self.x_names
    }
    pub fn c_names(&self) -> &[String] {
        &self.c_names
    }
    pub fn x_sources(&self) -> &[XSource] {
        &self.x_sources
    }
    pub fn truth(&self) -> Option<&Truth> {
        self.truth.as_ref()
    }
    pub fn meta(&self) -> &DatasetMeta {
        &self.meta
    }

    /// Unobserved variables kept for diagnostics (noise terms, confounders).
    pub fn latent(&self, name: &str) -> Option<&DVector<f64>> {
        self.latent.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    pub fn x_row(&self, i: usize) -> Vec<f64> {
        self.x.row(i).iter().copied().collect()
    }

    pub fn c_row(&self, i: usize) -> Vec<f64> {
        self.c.row(i).iter().copied().collect()
    }

    /// Index of the single endogenous column of `x`.
    pub fn endogenous_column(&self) -> Result<usize> {
        let endo: Vec<usize> = self
            .x_sources
            .iter()
            .enumerate()
            .filter(|(_, s)| **s == XSource::Endogenous)
            .map(|(j, _)| j)
            .collect();
        match endo.as_slice() {
            [j] => Ok(*j),
            [] => Err(Error::invalid("dataset has no endogenous x column")),
            _ => Err(Error::invalid(format!(
                "conditional density supports one endogenous column, found {}",
                endo.len()
            ))),
        }
    }

    /// The endogenous column as a vector (the response of the density model).
    pub fn endogenous(&self) -> Result<DVector<f64>> {
        let j = self.endogenous_column()?;
        Ok(self.x.column(j).into_owned())
    }

    pub fn layout(&self) -> XLayout {
        XLayout {
            sources: self.x_sources.clone(),
        }
    }

    /// Rows `indices` in the given order; ground truth and metadata are kept.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let y = DVector::from_iterator(indices.len(), indices.iter().map(|&i| self.y[i]));
        let x = self.x.select_rows(indices);
        let c = self.c.select_rows(indices);
        let latent = self
            .latent
            .iter()
            .map(|(n, v)| {
                (
                    n.clone(),
                    DVector::from_iterator(indices.len(), indices.iter().map(|&i| v[i])),
                )
            })
            .collect();
        Dataset {
            y,
            x,
            c,
            y_name: self.y_name.clone(),
            x_names: self.x_names.clone(),
            c_names: self.c_names.clone(),
            x_sources: self.x_sources.clone(),
            truth: self.truth.clone(),
            meta: self.meta.clone(),
            latent,
        }
    }

    pub(crate) fn into_builder(self) -> DatasetBuilder {
        DatasetBuilder {
            y: self.y,
            x: self.x,
            c: self.c,
            y_name: self.y_name,
            x_names: self.x_names,
            c_names: self.c_names,
            x_sources: self.x_sources,
            truth: self.truth,
            meta: self.meta,
            latent: self.latent,
        }
    }
}

/// Rebuilds a structural input row from one endogenous draw and a
/// conditioning row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct XLayout {
    pub sources: Vec<XSource>,
}

impl XLayout {
    pub fn single_endogenous() -> Self {
        XLayout {
            sources: vec![XSource::Endogenous],
        }
    }

    pub fn width(&self) -> usize {
        self.sources.len()
    }

    #[inline]
    pub fn assemble(&self, endogenous: f64, c: &[f64], out: &mut [f64]) {
        for (slot, src) in out.iter_mut().zip(&self.sources) {
            *slot = match *src {
                XSource::Endogenous => endogenous,
                XSource::Condition(i) => c[i],
            };
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> DatasetBuilder {
        DatasetBuilder {
            y: DVector::from_vec(vec![1.0, 2.0]),
            x: DMatrix::from_row_slice(2, 2, &[0.5, 1.0, 0.7, 2.0]),
            c: DMatrix::from_row_slice(2, 2, &[3.0, 1.0, 4.0, 2.0]),
            y_name: "y".into(),
            x_names: vec!["a".into(), "t".into()],
            c_names: vec!["z".into(), "t".into()],
            x_sources: vec![XSource::Endogenous, XSource::Condition(1)],
            truth: None,
            meta: DatasetMeta::external("test"),
            latent: vec![],
        }
    }

    #[test]
    fn builder_rejects_bad_shapes_and_values() {
        let mut b = tiny();
        b.y = DVector::from_vec(vec![1.0]);
        assert!(b.build().is_err());
        let mut b = tiny();
        b.c[(0, 0)] = f64::NAN;
        assert!(b.build().is_err());
        let mut b = tiny();
        b.x_sources[1] = XSource::Condition(5);
        assert!(b.build().is_err());
    }

    #[test]
    fn layout_assembles_passthrough_columns() {
        let d = tiny().build().unwrap();
        assert_eq!(d.endogenous_column().unwrap(), 0);
        let mut out = [0.0; 2];
        d.layout().assemble(9.0, &d.c_row(1), &mut out);
        assert_eq!(out, [9.0, 2.0]);
        let s = d.subset(&[1]);
        assert_eq!(s.n(), 1);
        assert_eq!(s.x_row(0), vec![0.7, 2.0]);
    }
}
