use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{Dataset, DatasetBuilder, DatasetMeta, Truth, XSource};
use crate::io::{write_atomic, write_json_atomic};
use crate::{Error, Result};

/// Which CSV columns play which role. A name listed in both `x` and `c` is
/// treated as context observed on both sides; every other `x` column is
/// endogenous.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoleSchema {
    pub y: String,
    pub x: Vec<String>,
    pub c: Vec<String>,
}

struct Table {
    headers: Vec<String>,
    rows: Vec<Vec<f64>>,
}

fn read_table(path: &Path, wanted: &[&str]) -> Result<Table> {
    let text = std::fs::read_to_string(path)?;
    if text.trim().is_empty() {
        return Err(Error::EmptyInput(format!("{} is empty", path.display())));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let mut positions = Vec::with_capacity(wanted.len());
    for name in wanted {
        let pos = headers.iter().position(|h| h == name).ok_or_else(|| Error::Schema {
            column: name.to_string(),
            message: "is missing from the header".into(),
        })?;
        positions.push(pos);
    }
    let mut rows = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record?;
        let mut row = Vec::with_capacity(wanted.len());
        for (name, &pos) in wanted.iter().zip(&positions) {
            let cell = record.get(pos).unwrap_or("");
            let parsed: f64 = cell.parse().map_err(|_| Error::Parse {
                row: r + 1,
                column: name.to_string(),
                message: format!("`{cell}` is not a number"),
            })?;
            if !parsed.is_finite() {
                return Err(Error::Parse {
                    row: r + 1,
                    column: name.to_string(),
                    message: format!("`{cell}` is not finite"),
                });
            }
            row.push(parsed);
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::EmptyInput(format!("{} has a header but no rows", path.display())));
    }
    Ok(Table {
        headers: wanted.iter().map(|s| s.to_string()).collect(),
        rows,
    })
}

/// Load a dataset from a CSV file. Row order is preserved; rows are
/// numbered from 1 (the first line after the header) in parse errors.
pub fn ingest_csv(path: &Path, schema: &RoleSchema) -> Result<Dataset> {
    if schema.x.is_empty() || schema.c.is_empty() {
        return Err(Error::invalid("schema needs at least one x and one c column"));
    }
    let mut wanted: Vec<&str> = vec![schema.y.as_str()];
    for name in schema.x.iter().chain(&schema.c) {
        if !wanted.contains(&name.as_str()) {
            wanted.push(name);
        }
    }
    let table = read_table(path, &wanted)?;
    let col = |name: &str| table.headers.iter().position(|h| h == name).expect("wanted column");
    let n = table.rows.len();
    let y = DVector::from_iterator(n, table.rows.iter().map(|r| r[col(&schema.y)]));
    let x = DMatrix::from_fn(n, schema.x.len(), |i, j| table.rows[i][col(&schema.x[j])]);
    let c = DMatrix::from_fn(n, schema.c.len(), |i, j| table.rows[i][col(&schema.c[j])]);
    let x_sources = schema
        .x
        .iter()
        .map(|name| match schema.c.iter().position(|cn| cn == name) {
            Some(i) => XSource::Condition(i),
            None => XSource::Endogenous,
        })
        .collect();
    DatasetBuilder {
        y,
        x,
        c,
        y_name: schema.y.clone(),
        x_names: schema.x.clone(),
        c_names: schema.c.clone(),
        x_sources,
        truth: None,
        meta: DatasetMeta::external(&path.display().to_string()),
        latent: vec![],
    }
    .build()
}

/// Read a numeric covariate matrix; all columns when `columns` is `None`.
pub fn ingest_covariates_csv(
    path: &Path,
    columns: Option<&[String]>,
) -> Result<(DMatrix<f64>, Vec<String>)> {
    let names: Vec<String> = match columns {
        Some(c) => c.to_vec(),
        None => {
            let text = std::fs::read_to_string(path)?;
            if text.trim().is_empty() {
                return Err(Error::EmptyInput(format!("{} is empty", path.display())));
            }
            let mut reader = csv::ReaderBuilder::new()
                .trim(csv::Trim::All)
                .from_reader(text.as_bytes());
            reader.headers()?.iter().map(str::to_string).collect()
        }
    };
    let wanted: Vec<&str> = names.iter().map(String::as_str).collect();
    let table = read_table(path, &wanted)?;
    let m = DMatrix::from_fn(table.rows.len(), names.len(), |i, j| table.rows[i][j]);
    Ok((m, names))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Sidecar {
    generator: String,
    params: serde_json::Value,
    seed: Option<u64>,
    roles: RoleSchema,
    truth: Option<Truth>,
    n: usize,
}

fn sidecar_path(csv: &Path) -> PathBuf {
    let mut name = csv.file_name().map(|s| s.to_os_string()).unwrap_or_default();
    name.push(".meta.json");
    csv.with_file_name(name)
}

/// Write the dataset as CSV (each variable once, headed by its name) plus a
/// `<file>.meta.json` sidecar with roles, generator, params and seed.
pub fn write_dataset(data: &Dataset, path: &Path) -> Result<()> {
    let mut columns: Vec<(String, Vec<f64>)> = vec![(data.y_name().to_string(), data.y().iter().copied().collect())];
    let mut push = |name: &str, values: Vec<f64>| {
        if !columns.iter().any(|(n, _)| n == name) {
            columns.push((name.to_string(), values));
        }
    };
    for (j, name) in data.x_names().iter().enumerate() {
        push(name, data.x().column(j).iter().copied().collect());
    }
    for (j, name) in data.c_names().iter().enumerate() {
        push(name, data.c().column(j).iter().copied().collect());
    }
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer.write_record(columns.iter().map(|(n, _)| n.as_str()))?;
    for i in 0..data.n() {
        writer.write_record(columns.iter().map(|(_, v)| format!("{}", v[i])))?;
    }
    let bytes = writer.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    write_atomic(path, &bytes)?;

    let sidecar = Sidecar {
        generator: data.meta().generator.clone(),
        params: data.meta().params.clone(),
        seed: data.meta().seed,
        roles: RoleSchema {
            y: data.y_name().to_string(),
            x: data.x_names().to_vec(),
            c: data.c_names().to_vec(),
        },
        truth: data.truth().cloned(),
        n: data.n(),
    };
    write_json_atomic(&sidecar_path(path), &sidecar)
}

/// Read a dataset written by [`write_dataset`], restoring roles, metadata and
/// ground truth from the sidecar. Latent columns are not exported.
pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let sidecar: Sidecar = serde_json::from_slice(&std::fs::read(sidecar_path(path))?)?;
    let mut builder = ingest_csv(path, &sidecar.roles)?.into_builder();
    builder.truth = sidecar.truth;
    builder.meta = DatasetMeta {
        generator: sidecar.generator,
        params: sidecar.params,
        seed: sidecar.seed,
    };
    builder.build()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_demand_iv, DemandIvParams};

    fn schema() -> RoleSchema {
        RoleSchema {
            y: "y".into(),
            x: vec!["a".into()],
            c: vec!["z".into()],
        }
    }

    fn write(dir: &tempfile::TempDir, body: &str) -> PathBuf {
        let p = dir.path().join("d.csv");
        std::fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn three_rows_with_roles() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "y,a,z\n1,2,3\n4,5,6\n7,8,9\n");
        let d = ingest_csv(&p, &schema()).unwrap();
        assert_eq!(d.n(), 3);
        assert_eq!(d.y().as_slice(), &[1.0, 4.0, 7.0]);
        assert_eq!(d.x_sources(), &[XSource::Endogenous]);
        assert_eq!(d.c()[(2, 0)], 9.0);
    }

    #[test]
    fn nan_literal_reports_coordinates() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "y,a,z\n1,2,3\n4,NaN,6\n");
        match ingest_csv(&p, &schema()) {
            Err(Error::Parse { row, column, .. }) => {
                assert_eq!(row, 2);
                assert_eq!(column, "a");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
        let p = write(&dir, "y,a,z\n1,2,3\n4,five,6\n");
        assert!(matches!(ingest_csv(&p, &schema()), Err(Error::Parse { row: 2, .. })));
    }

    #[test]
    fn missing_column_and_empty_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "y,a\n1,2\n");
        match ingest_csv(&p, &schema()) {
            Err(Error::Schema { column, .. }) => assert_eq!(column, "z"),
            other => panic!("expected schema error, got {other:?}"),
        }
        let p = write(&dir, "");
        assert!(matches!(ingest_csv(&p, &schema()), Err(Error::EmptyInput(_))));
        let p = write(&dir, "y,a,z\n");
        assert!(matches!(ingest_csv(&p, &schema()), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn export_round_trip_keeps_roles_and_values() {
        let dir = tempfile::tempdir().unwrap();
        let d = gen_demand_iv(DemandIvParams::new(25, 4)).unwrap();
        let p = dir.path().join("demand.csv");
        write_dataset(&d, &p).unwrap();
        let back = read_dataset(&p).unwrap();
        assert_eq!(back.x_sources(), d.x_sources());
        assert_eq!(back.truth(), d.truth());
        assert_eq!(back.meta().seed, Some(4));
        assert_eq!(back.y(), d.y());
        assert_eq!(back.x(), d.x());
        assert_eq!(back.c(), d.c());
    }
}
