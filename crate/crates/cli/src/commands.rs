use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};

use dmlcmr::data::{read_dataset, write_dataset};
use dmlcmr::eval::{
    benchmark, debias_study, evaluate_fit, fit_configured, ill_posedness_estimate, nuisance_rate_study, rate_study,
    write_benchmark, PclEvalConfig,
};
use dmlcmr::io::write_json_atomic;
use dmlcmr::rng::derive_seed;
use dmlcmr::score::{gateaux_derivative, GateauxReport, ScoreKind, Verdict};

use crate::config::{
    BenchSection, FitSection, GenSection, NuSection, OrthoSection, RateSection, Resolved, Section,
};

/// A failure after the configuration was accepted.
#[derive(Debug)]
pub struct RuntimeFailure {
    pub message: String,
    /// Grid cells that failed, when the command runs a grid.
    pub cells: Vec<Value>,
}

impl From<dmlcmr::Error> for RuntimeFailure {
    fn from(e: dmlcmr::Error) -> Self {
        RuntimeFailure {
            message: e.to_string(),
            cells: Vec::new(),
        }
    }
}

type Outcome = Result<Vec<PathBuf>, RuntimeFailure>;

pub fn execute(run: &Resolved) -> Result<(), RuntimeFailure> {
    let artifacts = match &run.section {
        Section::Gen(s) => gen(run, s)?,
        Section::Fit(s) => fit(run, s)?,
        Section::Bench(s) => bench(run, s)?,
        Section::Ortho(s) => ortho(run, s)?,
        Section::Rate(s) => rate(run, s)?,
        Section::Nu(s) => nu(run, s)?,
    };
    write_manifest(run, &artifacts)?;
    Ok(())
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: crate::config::Command,
    config_hash: &'a str,
    seed: u64,
    artifacts: Vec<String>,
}

fn write_manifest(run: &Resolved, artifacts: &[PathBuf]) -> Result<(), RuntimeFailure> {
    let names = artifacts
        .iter()
        .map(|p| p.strip_prefix(&run.out).unwrap_or(p).display().to_string())
        .collect();
    write_json_atomic(
        &run.out.join("manifest.json"),
        &Manifest {
            command: run.command,
            config_hash: &run.hash,
            seed: run.seed,
            artifacts: names,
        },
    )?;
    Ok(())
}

/// JSON artifact stamped with the configuration hash.
fn stamped(run: &Resolved, path: &Path, body: Value) -> Result<PathBuf, RuntimeFailure> {
    let mut value = json!({ "config_hash": run.hash, "seed": run.seed });
    if let (Value::Object(dst), Value::Object(src)) = (&mut value, body) {
        dst.extend(src);
    }
    write_json_atomic(path, &value)?;
    Ok(path.to_path_buf())
}

// ---------------------------------------------------------------------------

fn gen(run: &Resolved, s: &GenSection) -> Outcome {
    let data = s.generator.generate(s.n, run.seed)?;
    let path = run.out.join(&s.file);
    write_dataset(&data, &path)?;
    let mut sidecar = path.clone().into_os_string();
    sidecar.push(".meta.json");
    Ok(vec![path, sidecar.into()])
}

fn fit(run: &Resolved, s: &FitSection) -> Outcome {
    let data = match (&s.data, &s.generator) {
        (Some(p), _) => read_dataset(p)?,
        (None, Some(g)) => g.generate(s.n.unwrap_or(0), derive_seed(run.seed, "fit/data", 0))?,
        (None, None) => unreachable!("validated"),
    };
    let (fitted, audit) = fit_configured(&s.method_config(), &data, run.seed, s.standardise)?;
    let mse = match &s.generator {
        Some(g) => {
            let pcl = PclEvalConfig {
                seed: derive_seed(run.seed, "fit/pcl", 0),
                ..PclEvalConfig::default()
            };
            Some(evaluate_fit(&fitted, &data, g, s.n_test, derive_seed(run.seed, "fit/test", 0), &pcl)?)
        }
        None => None,
    };
    let model_path = run.out.join("fit.json");
    dmlcmr::io::write_atomic(&model_path, fitted.to_json()?.as_bytes())?;
    let theta = match &fitted.model {
        dmlcmr::dml::StructuralModel::LinearInBasis { theta, .. } => Some(theta.clone()),
        _ => None,
    };
    let summary = stamped(
        run,
        &run.out.join("fit-summary.json"),
        json!({
            "method": fitted.method.name(),
            "n": data.n(),
            "theta": theta,
            "final_objective": fitted.final_objective,
            "selected_epoch": fitted.selected_epoch,
            "nuisance_fits": fitted.nuisance_fits,
            "audit_passed": audit,
            "mse": mse,
        }),
    )?;
    Ok(vec![model_path, summary])
}

fn bench(run: &Resolved, s: &BenchSection) -> Outcome {
    let spec = s.to_spec(run.seed);
    let mut out = benchmark(&spec)?;
    out.restamp(&run.hash);
    let artifacts = write_benchmark(&out, &run.out)?;
    let failed: Vec<Value> = out
        .cells
        .iter()
        .filter(|c| c.error.is_some())
        .map(|c| json!({ "method": c.method, "n": c.n, "seed": c.seed, "error": c.error }))
        .collect();
    if !failed.is_empty() {
        write_manifest(run, &artifacts)?;
        return Err(RuntimeFailure {
            message: format!("{} of {} benchmark cells failed", failed.len(), out.cells.len()),
            cells: failed,
        });
    }
    Ok(artifacts)
}

/// `pass` when every direction looks orthogonal, `fail` when any is clearly not.
fn verdict(reports: &[&GateauxReport]) -> &'static str {
    if reports.iter().all(|r| r.verdict == Verdict::Orthogonal) {
        "pass"
    } else if reports.iter().any(|r| r.verdict == Verdict::NonOrthogonal) {
        "fail"
    } else {
        "inconclusive"
    }
}

fn ortho(run: &Resolved, s: &OrthoSection) -> Outcome {
    let cfg = s.gateaux(run.seed);
    let problem = s.problem.as_problem();
    let mut reports = Vec::new();
    for &kind in &s.scores {
        for dir in s.directions() {
            reports.push(gateaux_derivative(kind, problem, &dir, &cfg)?);
        }
    }
    let mut verdicts = serde_json::Map::new();
    for &kind in &s.scores {
        let mine: Vec<&GateauxReport> = reports.iter().filter(|r| r.kind == kind).collect();
        let key = match kind {
            ScoreKind::Orthogonal => "orthogonal",
            ScoreKind::Naive => "naive",
        };
        verdicts.insert(key.into(), json!(verdict(&mine)));
    }
    let path = stamped(
        run,
        &run.out.join("ortho.json"),
        json!({ "problem": problem.name(), "verdicts": verdicts, "reports": reports }),
    )?;
    Ok(vec![path])
}

fn rate(run: &Resolved, s: &RateSection) -> Outcome {
    let body = match s {
        RateSection::SecondStage(cfg) => {
            let cfg = dmlcmr::eval::RateStudyConfig {
                seed: run.seed,
                ..cfg.clone()
            };
            json!({ "study": "second-stage", "result": rate_study(&cfg)? })
        }
        RateSection::Nuisance(cfg) => {
            let cfg = dmlcmr::eval::NuisanceRateConfig {
                seed: run.seed,
                ..cfg.clone()
            };
            json!({ "study": "nuisance", "result": nuisance_rate_study(&cfg)? })
        }
        RateSection::Debias(cfg) => {
            let cfg = dmlcmr::eval::DebiasStudyConfig {
                seed: run.seed,
                ..cfg.clone()
            };
            json!({ "study": "debias", "result": debias_study(&cfg)? })
        }
    };
    Ok(vec![stamped(run, &run.out.join("rate.json"), body)?])
}

fn nu(run: &Resolved, s: &NuSection) -> Outcome {
    let report = ill_posedness_estimate(&s.problem, s.theta_samples, s.mc_n, run.seed)?;
    for e in &report.excluded {
        eprintln!("warning: excluded parameter {:?}: {}", e.theta, e.reason);
    }
    Ok(vec![stamped(run, &run.out.join("nu.json"), json!({ "report": report }))?])
}
