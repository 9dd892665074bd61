//! Python bindings. Specs go in as JSON strings (the same shapes the CLI
//! reads from TOML) and results come back as plain Python objects.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyAny;
use serde::de::DeserializeOwned;
use serde::Serialize;

use dmlcmr_core::data::{read_dataset, Dataset};
use dmlcmr_core::dml::{FittedCMR, StructuralModel};
use dmlcmr_core::eval::{self, BenchmarkSpec, GeneratorSpec, IllPosedProblem, MethodConfig, NuisanceProblem};
use dmlcmr_core::score::{self, GateauxConfig, PerturbationDirection, ScoreKind};

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn from_json<T: DeserializeOwned>(what: &str, text: &str) -> PyResult<T> {
    serde_json::from_str(text).map_err(|e| PyValueError::new_err(format!("{what}: {e}")))
}

/// Serialise through `json.loads` so callers get dicts and lists.
fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(err)?;
    py.import("json")?.call_method1("loads", (text,))
}

/// A fitted structural function.
#[pyclass(name = "Fitted", module = "dmlcmr")]
struct PyFitted {
    inner: FittedCMR,
}

#[pymethods]
impl PyFitted {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        FittedCMR::from_json(text).map(|inner| PyFitted { inner }).map_err(err)
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(err)
    }

    /// Predictions at rows given in original units.
    fn predict(&self, rows: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        let d = self.inner.model.input_dim();
        rows.iter()
            .map(|r| {
                if r.len() == d {
                    Ok(self.inner.predict_one(r))
                } else {
                    Err(PyValueError::new_err(format!("expected rows of width {d}, got {}", r.len())))
                }
            })
            .collect()
    }

    #[getter]
    fn method(&self) -> &'static str {
        self.inner.method.name()
    }

    /// Coefficients for linear-in-basis models, else `None`.
    #[getter]
    fn theta(&self) -> Option<Vec<f64>> {
        match &self.inner.model {
            StructuralModel::LinearInBasis { theta, .. } => Some(theta.iter().copied().collect()),
            _ => None,
        }
    }

    #[getter]
    fn final_objective(&self) -> f64 {
        self.inner.final_objective
    }

    #[getter]
    fn x_names(&self) -> Vec<String> {
        self.inner.x_names.clone()
    }

    fn __repr__(&self) -> String {
        format!("Fitted(method={}, x={:?})", self.inner.method.name(), self.inner.x_names)
    }
}

fn columns(data: &Dataset) -> serde_json::Value {
    let mut out = serde_json::Map::new();
    out.insert(data.y_name().into(), data.y().iter().copied().collect::<Vec<_>>().into());
    for (j, name) in data.x_names().iter().enumerate() {
        out.insert(name.clone(), data.x().column(j).iter().copied().collect::<Vec<_>>().into());
    }
    for (j, name) in data.c_names().iter().enumerate() {
        out.insert(name.clone(), data.c().column(j).iter().copied().collect::<Vec<_>>().into());
    }
    serde_json::json!({
        "columns": out,
        "y": data.y_name(),
        "x": data.x_names(),
        "c": data.c_names(),
        "meta": data.meta(),
    })
}

/// Draw `n` rows from a generator; returns `{columns, y, x, c, meta}`.
#[pyfunction]
fn generate<'py>(py: Python<'py>, generator: &str, n: usize, seed: u64) -> PyResult<Bound<'py, PyAny>> {
    let g: GeneratorSpec = from_json("generator", generator)?;
    let data = g.generate(n, seed).map_err(err)?;
    to_py(py, &columns(&data))
}

/// Fit one configured method on generated data (`generator`, `n`) or on a
/// CSV written by the CLI (`csv`).
#[pyfunction]
#[pyo3(signature = (method, seed, generator=None, n=None, csv=None, standardise=false))]
fn fit(
    method: &str,
    seed: u64,
    generator: Option<&str>,
    n: Option<usize>,
    csv: Option<&str>,
    standardise: bool,
) -> PyResult<PyFitted> {
    let m: MethodConfig = from_json("method", method)?;
    let data = match (generator, n, csv) {
        (Some(g), Some(n), None) => from_json::<GeneratorSpec>("generator", g)?
            .generate(n, seed)
            .map_err(err)?,
        (None, None, Some(path)) => read_dataset(std::path::Path::new(path)).map_err(err)?,
        _ => return Err(PyValueError::new_err("give either `generator` and `n`, or `csv`")),
    };
    let (inner, _) = eval::fit_configured(&m, &data, seed, standardise).map_err(err)?;
    Ok(PyFitted { inner })
}

/// Run a benchmark grid; returns the per-(method, n) reports.
#[pyfunction]
fn benchmark<'py>(py: Python<'py>, spec: &str) -> PyResult<Bound<'py, PyAny>> {
    let spec: BenchmarkSpec = from_json("spec", spec)?;
    let out = eval::benchmark(&spec).map_err(err)?;
    to_py(py, &out.reports)
}

/// Directional derivative of a score's expected loss at the true nuisances.
#[pyfunction]
#[pyo3(signature = (kind, direction, problem=None, config=None))]
fn gateaux<'py>(
    py: Python<'py>,
    kind: &str,
    direction: &str,
    problem: Option<&str>,
    config: Option<&str>,
) -> PyResult<Bound<'py, PyAny>> {
    let kind: ScoreKind = serde_json::from_value(serde_json::Value::String(kind.into())).map_err(err)?;
    let dir: PerturbationDirection = from_json("direction", direction)?;
    let problem: NuisanceProblem = match problem {
        Some(p) => from_json("problem", p)?,
        None => NuisanceProblem::LinearToy(Default::default()),
    };
    let cfg: GateauxConfig = match config {
        Some(c) => from_json("config", c)?,
        None => GateauxConfig::default(),
    };
    let report = score::gateaux_derivative(kind, problem.as_problem(), &dir, &cfg).map_err(err)?;
    to_py(py, &report)
}

#[pyfunction]
#[pyo3(signature = (problem, theta_samples=200, mc_n=100_000, seed=0))]
fn ill_posedness<'py>(
    py: Python<'py>,
    problem: &str,
    theta_samples: usize,
    mc_n: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let p: IllPosedProblem = from_json("problem", problem)?;
    let report = eval::ill_posedness_estimate(&p, theta_samples, mc_n, seed).map_err(err)?;
    to_py(py, &report)
}

/// Hash of a JSON document, as stamped on artifacts.
#[pyfunction]
fn config_hash(document: &str) -> PyResult<String> {
    let v: serde_json::Value = from_json("document", document)?;
    dmlcmr_core::io::config_hash(&v).map_err(err)
}

#[pymodule]
fn dmlcmr(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyFitted>()?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(benchmark, m)?)?;
    m.add_function(wrap_pyfunction!(gateaux, m)?)?;
    m.add_function(wrap_pyfunction!(ill_posedness, m)?)?;
    m.add_function(wrap_pyfunction!(config_hash, m)?)?;
    Ok(())
}
