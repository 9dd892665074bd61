use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{fit_standardiser, Dataset, Standardiser};
use crate::dml::{
    crossfit_nuisances, fit_ce_dml_cmr, fit_dml_cmr, fit_naive_two_stage, FitConfig, FittedCMR, NuisanceSpecs,
    StructuralModel,
};
use crate::estimators::{Basis1d, BasisMap, Factor};
use crate::io::{config_hash, write_atomic, write_json_atomic};
use crate::rng::derive_seed;
use crate::{Error, Result};

use super::pcl::proxy_samples;
use super::{
    mse_vs_truth, pcl_a_grid, pcl_do_oracle, pcl_effect_curve, quantile_sorted, DoOracle, GeneratorSpec, MseReport,
    TruthOracle,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MethodKind {
    DmlCmr,
    CeDmlCmr,
    NaiveTwoStage,
}

fn d_centers() -> usize {
    10
}
fn d_one() -> usize {
    1
}

/// How the structural model is built from the training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "kebab-case", deny_unknown_fields)]
pub enum StructuralSpec {
    /// A fixed feature map.
    LinearInBasis { basis: BasisMap },
    /// All monomials up to `degree` of the inputs, centred and scaled by
    /// their training moments.
    Polynomial { degree: usize },
    /// Indicator of customer type × Gaussian bumps in time × polynomial in
    /// price, for the ticket demand inputs `(price, time, customer_type)`.
    DemandTensor {
        #[serde(default = "d_centers")]
        time_centers: usize,
        #[serde(default = "d_one")]
        price_degree: usize,
    },
    /// Dense ReLU network.
    FeedForward { hidden: Vec<usize> },
}

fn column_moments(x: &DMatrix<f64>, j: usize) -> (f64, f64) {
    let col = x.column(j);
    let n = col.len() as f64;
    let m = col.sum() / n;
    let v = col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
    (m, if v > 0.0 { v.sqrt() } else { 1.0 })
}

fn position(names: &[String], want: &str) -> Result<usize> {
    names
        .iter()
        .position(|n| n == want)
        .ok_or_else(|| Error::Schema {
            column: want.into(),
            message: "is required by the structural basis".into(),
        })
}

impl StructuralSpec {
    pub fn build(&self, data: &Dataset, seed: u64) -> Result<StructuralModel> {
        let d = data.d_x();
        match self {
            StructuralSpec::LinearInBasis { basis } => {
                if basis.input_dim() != d {
                    return Err(Error::shape(format!("basis over {d} inputs"), basis.input_dim()));
                }
                Ok(StructuralModel::zeros(basis.clone()))
            }
            StructuralSpec::Polynomial { degree } => {
                let (offset, scale) = (0..d).map(|j| column_moments(data.x(), j)).unzip();
                Ok(StructuralModel::zeros(BasisMap::polynomial_scaled(*degree, offset, scale)))
            }
            StructuralSpec::DemandTensor {
                time_centers,
                price_degree,
            } => {
                let names = data.x_names();
                let (jp, jt, js) = (
                    position(names, "price")?,
                    position(names, "time")?,
                    position(names, "customer_type")?,
                );
                let x = data.x();
                let mut levels: Vec<f64> = x.column(js).iter().copied().collect();
                levels.sort_by(f64::total_cmp);
                levels.dedup();
                let (t_lo, t_hi) = x
                    .column(jt)
                    .iter()
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
                let m = (*time_centers).max(1);
                let spacing = if m > 1 { (t_hi - t_lo) / (m - 1) as f64 } else { (t_hi - t_lo).max(1.0) };
                let centers: Vec<f64> = (0..m).map(|i| t_lo + spacing * i as f64).collect();
                let (p_mean, p_sd) = column_moments(x, jp);
                let basis = BasisMap::Tensor {
                    input_dim: d,
                    factors: vec![
                        Factor {
                            column: js,
                            basis: Basis1d::OneHot { levels },
                        },
                        Factor {
                            column: jt,
                            basis: Basis1d::Rbf {
                                centers,
                                width: spacing.max(1e-6),
                            },
                        },
                        Factor {
                            column: jp,
                            basis: Basis1d::Poly {
                                degree: *price_degree,
                                offset: p_mean,
                                scale: p_sd,
                            },
                        },
                    ],
                };
                Ok(StructuralModel::zeros(basis))
            }
            StructuralSpec::FeedForward { hidden } => Ok(StructuralModel::feedforward(d, hidden, seed)),
        }
    }
}

/// One entry of the method list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodConfig {
    /// Label used in reports.
    pub name: String,
    pub method: MethodKind,
    pub nuisances: NuisanceSpecs,
    pub structural: StructuralSpec,
    #[serde(default)]
    pub fit: FitConfig,
}

fn d_points() -> usize {
    50
}
fn d_sample() -> usize {
    100_000
}
fn d_oracle_mc() -> usize {
    1_000_000
}

/// Evaluation grid for the proxy demand problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PclEvalConfig {
    #[serde(default = "d_points")]
    pub grid_points: usize,
    #[serde(default = "d_sample")]
    pub grid_sample: usize,
    #[serde(default = "d_oracle_mc")]
    pub oracle_mc: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for PclEvalConfig {
    fn default() -> Self {
        PclEvalConfig {
            grid_points: d_points(),
            grid_sample: d_sample(),
            oracle_mc: d_oracle_mc(),
            seed: 0,
        }
    }
}

fn d_n_test() -> usize {
    10_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkSpec {
    pub methods: Vec<MethodConfig>,
    pub generator: GeneratorSpec,
    pub n_grid: Vec<usize>,
    pub seeds: Vec<u64>,
    #[serde(default = "d_n_test")]
    pub n_test: usize,
    /// Standardise the action (first structural input) and the outcome on
    /// each training set.
    #[serde(default)]
    pub standardise: bool,
    #[serde(default)]
    pub test_seed: u64,
    #[serde(default)]
    pub pcl: PclEvalConfig,
}

impl BenchmarkSpec {
    pub fn problems(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        if self.methods.is_empty() {
            out.push(("methods".into(), "at least one method is required".into()));
        }
        if self.seeds.is_empty() {
            out.push(("seeds".into(), "at least one seed is required".into()));
        }
        if self.n_grid.is_empty() || self.n_grid.contains(&0) {
            out.push(("n_grid".into(), "needs at least one positive sample size".into()));
        }
        if self.n_test == 0 {
            out.push(("n_test".into(), "must be positive".into()));
        }
        for (i, m) in self.methods.iter().enumerate() {
            for (field, msg) in m.fit.problems() {
                out.push((format!("methods[{i}].fit.{field}"), msg));
            }
        }
        out
    }
}

/// Outcome of one (method, n, seed) run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub method: String,
    pub n: usize,
    pub seed: u64,
    pub mse: Option<f64>,
    pub mse_standardised: Option<f64>,
    pub audit_passed: Option<bool>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub seed: u64,
    pub error: String,
}

/// Aggregate over seeds for one method and sample size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub method: String,
    pub generator: String,
    pub params: serde_json::Value,
    pub n: usize,
    /// Seeds of successful runs, aligned with `mse`.
    pub seeds: Vec<u64>,
    pub mse: Vec<f64>,
    pub median: Option<f64>,
    pub q25: Option<f64>,
    pub q75: Option<f64>,
    pub mse_standardised: Vec<f64>,
    pub median_standardised: Option<f64>,
    /// Wall-clock totals live in `timing.json` so that reports stay
    /// byte-identical across runs.
    pub runtime_s: Option<f64>,
    pub config_hash: String,
    pub failures: Vec<CellFailure>,
    pub audits_passed: usize,
    pub units: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkOutput {
    pub config_hash: String,
    pub reports: Vec<BenchmarkReport>,
    pub cells: Vec<CellResult>,
    /// Seconds per cell, aligned with `cells`.
    pub runtimes: Vec<f64>,
    pub pcl_oracle: Option<DoOracle>,
}

impl BenchmarkOutput {
    /// Replace the spec hash with a caller's hash (for example one that also
    /// covers how the spec was derived), on the output and every report.
    pub fn restamp(&mut self, hash: &str) {
        self.config_hash = hash.to_string();
        for r in &mut self.reports {
            r.config_hash = hash.to_string();
        }
    }
}

/// What every cell is scored against.
enum EvalTarget {
    Analytic { oracle: TruthOracle, test_x: DMatrix<f64> },
    Pcl(DoOracle),
}

fn prepare_target(spec: &BenchmarkSpec) -> Result<EvalTarget> {
    target_for(&spec.generator, spec.n_test, spec.test_seed, &spec.pcl)
}

fn target_for(generator: &GeneratorSpec, n_test: usize, test_seed: u64, pcl: &PclEvalConfig) -> Result<EvalTarget> {
    if let GeneratorSpec::PclDemand = generator {
        let grid = pcl_a_grid(pcl.grid_points, pcl.grid_sample, pcl.seed)?;
        return Ok(EvalTarget::Pcl(pcl_do_oracle(&grid, pcl.oracle_mc, pcl.seed)?));
    }
    let test = generator.generate(n_test, derive_seed(test_seed, "benchmark/test", 0))?;
    Ok(EvalTarget::Analytic {
        oracle: TruthOracle::for_dataset(&test)?,
        test_x: test.x().clone(),
    })
}

/// Error of a fit against the ground truth of the generator that produced
/// `raw` (its training data, in original units).
pub fn evaluate_fit(
    fit: &FittedCMR,
    raw: &Dataset,
    generator: &GeneratorSpec,
    n_test: usize,
    test_seed: u64,
    pcl: &PclEvalConfig,
) -> Result<MseReport> {
    evaluate(fit, raw, &target_for(generator, n_test, test_seed, pcl)?)
}

/// Fit one method on `data` (already standardised when requested).
pub(crate) fn fit_method(method: &MethodConfig, data: &Dataset, seed: u64) -> Result<(FittedCMR, Option<bool>)> {
    let cfg = method.fit.clone().with_seed(derive_seed(seed, "fit", 0));
    let init = method.structural.build(data, derive_seed(seed, "init", 0))?;
    match method.method {
        MethodKind::DmlCmr => {
            let state = crossfit_nuisances(data, &cfg, &method.nuisances)?;
            let fit = fit_dml_cmr(data, &state, &cfg, init)?;
            let ok = fit.audit.passed;
            Ok((fit, Some(ok)))
        }
        MethodKind::CeDmlCmr => Ok((fit_ce_dml_cmr(data, &method.nuisances, &cfg, init)?, None)),
        MethodKind::NaiveTwoStage => Ok((fit_naive_two_stage(data, &method.nuisances, &cfg, init)?, None)),
    }
}

fn standardise(data: &Dataset) -> Result<(Dataset, Standardiser)> {
    let action = data.x_names()[0].clone();
    let st = fit_standardiser(data, &[data.y_name(), &action])?;
    Ok((st.apply(data)?, st))
}

fn evaluate(fit: &FittedCMR, data: &Dataset, target: &EvalTarget) -> Result<MseReport> {
    match target {
        EvalTarget::Analytic { oracle, test_x } => mse_vs_truth(fit, oracle, test_x),
        EvalTarget::Pcl(oracle) => {
            let w = proxy_samples(data)?;
            let curve = pcl_effect_curve(fit, &oracle.a_grid, &w)?;
            let mse = curve
                .iter()
                .zip(&oracle.values)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                / curve.len() as f64;
            Ok(MseReport::from_original(mse, curve.len(), fit))
        }
    }
}

/// Fit one configured method, standardising the action and outcome first
/// when asked. Returns the fit and, for cross-fitted methods, the audit.
pub fn fit_configured(
    method: &MethodConfig,
    data: &Dataset,
    seed: u64,
    standardise_inputs: bool,
) -> Result<(FittedCMR, Option<bool>)> {
    if !standardise_inputs {
        return fit_method(method, data, seed);
    }
    let (train, st) = standardise(data)?;
    let (fit, audit) = fit_method(method, &train, seed)?;
    Ok((fit.with_standardiser(st), audit))
}

fn run_one(spec: &BenchmarkSpec, method: &MethodConfig, n: usize, seed: u64, target: &EvalTarget) -> Result<(MseReport, Option<bool>)> {
    let raw = spec.generator.generate(n, seed)?;
    let (fit, audit) = fit_configured(method, &raw, seed, spec.standardise)?;
    Ok((evaluate(&fit, &raw, target)?, audit))
}

/// Run a single grid cell; failures are captured, never propagated.
pub fn run_cell(spec: &BenchmarkSpec, method_index: usize, n: usize, seed: u64) -> Result<CellResult> {
    let target = prepare_target(spec)?;
    Ok(cell(spec, method_index, n, seed, &target).0)
}

fn cell(spec: &BenchmarkSpec, mi: usize, n: usize, seed: u64, target: &EvalTarget) -> (CellResult, f64) {
    let method = &spec.methods[mi];
    let start = Instant::now();
    let out = run_one(spec, method, n, seed, target);
    let elapsed = start.elapsed().as_secs_f64();
    let result = match out {
        Ok((m, audit)) => CellResult {
            method: method.name.clone(),
            n,
            seed,
            mse: Some(m.mse),
            mse_standardised: m.mse_standardised,
            audit_passed: audit,
            error: None,
        },
        Err(e) => CellResult {
            method: method.name.clone(),
            n,
            seed,
            mse: None,
            mse_standardised: None,
            audit_passed: None,
            error: Some(e.to_string()),
        },
    };
    (result, elapsed)
}

fn percentiles(v: &[f64]) -> (Option<f64>, Option<f64>, Option<f64>) {
    if v.is_empty() {
        return (None, None, None);
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    (
        Some(quantile_sorted(&s, 0.25)),
        Some(quantile_sorted(&s, 0.5)),
        Some(quantile_sorted(&s, 0.75)),
    )
}

/// Full factorial method × n × seed grid with percentile aggregation.
pub fn benchmark(spec: &BenchmarkSpec) -> Result<BenchmarkOutput> {
    if let Some((field, msg)) = spec.problems().into_iter().next() {
        return Err(Error::invalid(format!("{field}: {msg}")));
    }
    let hash = config_hash(spec)?;
    let target = prepare_target(spec)?;
    let grid: Vec<(usize, usize, u64)> = (0..spec.methods.len())
        .flat_map(|m| spec.n_grid.iter().flat_map(move |&n| spec.seeds.iter().map(move |&s| (m, n, s))))
        .collect();
    let results: Vec<(CellResult, f64)> = grid
        .par_iter()
        .map(|&(m, n, s)| cell(spec, m, n, s, &target))
        .collect();
    let params = serde_json::to_value(&spec.generator)?;
    let units = if spec.standardise {
        "mse in original units; mse_standardised divides by the training outcome variance"
    } else {
        "mse in original units"
    };
    let mut reports = Vec::new();
    for method in &spec.methods {
        for &n in &spec.n_grid {
            let mine: Vec<&CellResult> = results
                .iter()
                .map(|(c, _)| c)
                .filter(|c| c.method == method.name && c.n == n)
                .collect();
            let ok: Vec<&&CellResult> = mine.iter().filter(|c| c.mse.is_some()).collect();
            let mse: Vec<f64> = ok.iter().map(|c| c.mse.unwrap()).collect();
            let mse_std: Vec<f64> = ok.iter().filter_map(|c| c.mse_standardised).collect();
            let (q25, median, q75) = percentiles(&mse);
            reports.push(BenchmarkReport {
                method: method.name.clone(),
                generator: spec.generator.name().into(),
                params: params.clone(),
                n,
                seeds: ok.iter().map(|c| c.seed).collect(),
                mse,
                median,
                q25,
                q75,
                median_standardised: percentiles(&mse_std).1,
                mse_standardised: mse_std,
                runtime_s: None,
                config_hash: hash.clone(),
                failures: mine
                    .iter()
                    .filter_map(|c| {
                        c.error.as_ref().map(|e| CellFailure {
                            seed: c.seed,
                            error: e.clone(),
                        })
                    })
                    .collect(),
                audits_passed: mine.iter().filter(|c| c.audit_passed == Some(true)).count(),
                units: units.into(),
            });
        }
    }
    let pcl_oracle = match target {
        EvalTarget::Pcl(o) => Some(o),
        EvalTarget::Analytic { .. } => None,
    };
    let (cells, runtimes) = results.into_iter().unzip();
    Ok(BenchmarkOutput {
        config_hash: hash,
        reports,
        cells,
        runtimes,
        pcl_oracle,
    })
}

// ---------------------------------------------------------------------------
// Artifacts

fn cells_csv(cells: &[CellResult], hash: &str) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["method", "n", "seed", "mse", "config_hash"])?;
    for c in cells {
        let mse = c.mse.map(|v| format!("{v:e}")).unwrap_or_default();
        w.write_record([c.method.as_str(), &c.n.to_string(), &c.seed.to_string(), &mse, hash])?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

const PALETTE: [&str; 6] = ["#1b6ca8", "#d1495b", "#2e933c", "#edae49", "#6a4c93", "#00798c"];

/// Median MSE against n per method with the interquartile band, log scales.
fn plot_svg(out: &BenchmarkOutput) -> String {
    let (w, h, m) = (640.0, 420.0, 60.0);
    let pts: Vec<&BenchmarkReport> = out.reports.iter().filter(|r| r.median.is_some()).collect();
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="20" text-anchor="middle">median MSE with interquartile band ({})</text>"#,
        w / 2.0,
        out.config_hash
    );
    if pts.is_empty() {
        s.push_str("</svg>\n");
        return s;
    }
    let xs: Vec<f64> = pts.iter().map(|r| (r.n as f64).log10()).collect();
    let ys: Vec<f64> = pts
        .iter()
        .flat_map(|r| [r.q25.unwrap(), r.q75.unwrap()])
        .map(|v| v.max(1e-300).log10())
        .collect();
    let (x0, x1) = bounds(&xs);
    let (y0, y1) = bounds(&ys);
    let px = |x: f64| m + (x - x0) / (x1 - x0) * (w - 2.0 * m);
    let py = |y: f64| h - m - (y - y0) / (y1 - y0) * (h - 2.0 * m);
    let _ = writeln!(
        s,
        r#"<line x1="{m}" y1="{}" x2="{}" y2="{}" stroke="black"/><line x1="{m}" y1="{m}" x2="{m}" y2="{}" stroke="black"/>"#,
        h - m,
        w - m,
        h - m,
        h - m
    );
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">log10 n</text>"#, w / 2.0, h - 15.0);
    let _ = writeln!(
        s,
        r#"<text x="15" y="{}" transform="rotate(-90 15 {})" text-anchor="middle">log10 MSE</text>"#,
        h / 2.0,
        h / 2.0
    );
    for (tick, v) in [(x0, x0), (x1, x1)] {
        let _ = writeln!(s, r#"<text x="{:.1}" y="{}" text-anchor="middle">{v:.2}</text>"#, px(tick), h - m + 16.0);
    }
    for v in [y0, y1] {
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{v:.2}</text>"#, m - 4.0, py(v));
    }
    let mut methods: Vec<&str> = Vec::new();
    for r in &pts {
        if !methods.contains(&r.method.as_str()) {
            methods.push(&r.method);
        }
    }
    for (k, name) in methods.iter().enumerate() {
        let colour = PALETTE[k % PALETTE.len()];
        let rs: Vec<&&BenchmarkReport> = pts.iter().filter(|r| r.method == *name).collect();
        let line = |q: fn(&BenchmarkReport) -> f64| -> Vec<(f64, f64)> {
            rs.iter()
                .map(|r| (px((r.n as f64).log10()), py(q(r).max(1e-300).log10())))
                .collect()
        };
        let upper = line(|r| r.q75.unwrap());
        let lower = line(|r| r.q25.unwrap());
        let med = line(|r| r.median.unwrap());
        let band: Vec<String> = upper
            .iter()
            .chain(lower.iter().rev())
            .map(|(x, y)| format!("{x:.1},{y:.1}"))
            .collect();
        let _ = writeln!(
            s,
            r#"<polygon points="{}" fill="{colour}" fill-opacity="0.2" stroke="none"/>"#,
            band.join(" ")
        );
        let path: Vec<String> = med.iter().map(|(x, y)| format!("{x:.1},{y:.1}")).collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{colour}" stroke-width="2"/>"#,
            path.join(" ")
        );
        for (x, y) in &med {
            let _ = writeln!(s, r#"<circle cx="{x:.1}" cy="{y:.1}" r="3" fill="{colour}"/>"#);
        }
        let ly = m + 16.0 * k as f64;
        let _ = writeln!(
            s,
            r#"<rect x="{}" y="{}" width="10" height="10" fill="{colour}"/><text x="{}" y="{}">{}</text>"#,
            w - m - 140.0,
            ly - 9.0,
            w - m - 125.0,
            ly,
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(v: &str) -> String {
    v.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn bounds(v: &[f64]) -> (f64, f64) {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo < 1e-9 {
        (lo - 0.5, hi + 0.5)
    } else {
        let pad = 0.05 * (hi - lo);
        (lo - pad, hi + pad)
    }
}

#[derive(Serialize)]
struct Timing<'a> {
    config_hash: &'a str,
    total_s: f64,
    cells: Vec<TimingCell<'a>>,
}

#[derive(Serialize)]
struct TimingCell<'a> {
    method: &'a str,
    n: usize,
    seed: u64,
    runtime_s: f64,
}

/// Write `report.json`, `cells.csv`, `timing.json` and `plot-<hash>.svg`.
/// Everything except the timing file is a pure function of the config.
pub fn write_benchmark(out: &BenchmarkOutput, dir: &Path) -> Result<Vec<PathBuf>> {
    let report = dir.join("report.json");
    write_json_atomic(&report, &out.reports)?;
    let csv_path = dir.join("cells.csv");
    write_atomic(&csv_path, &cells_csv(&out.cells, &out.config_hash)?)?;
    let plot = dir.join(format!("plot-{}.svg", out.config_hash));
    write_atomic(&plot, plot_svg(out).as_bytes())?;
    let timing = dir.join("timing.json");
    write_json_atomic(
        &timing,
        &Timing {
            config_hash: &out.config_hash,
            total_s: out.runtimes.iter().sum(),
            cells: out
                .cells
                .iter()
                .zip(&out.runtimes)
                .map(|(c, r)| TimingCell {
                    method: &c.method,
                    n: c.n,
                    seed: c.seed,
                    runtime_s: *r,
                })
                .collect(),
        },
    )?;
    let mut paths = vec![report, csv_path, plot, timing];
    if let Some(o) = &out.pcl_oracle {
        let p = dir.join("pcl-oracle.json");
        write_json_atomic(&p, o)?;
        paths.push(p);
    }
    Ok(paths)
}
