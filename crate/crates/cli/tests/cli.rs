use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn dmlcmr(dir: &Path, args: &[&str], config: &str) -> Output {
    fs::write(dir.join("run.toml"), config).unwrap();
    Command::new(env!("CARGO_BIN_EXE_dmlcmr"))
        .current_dir(dir)
        .args(args)
        .args(["--config", "run.toml"])
        .output()
        .expect("binary runs")
}

fn stderr_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stderr).unwrap_or_else(|e| {
        panic!("stderr is not JSON ({e}): {}", String::from_utf8_lossy(&out.stderr))
    })
}

fn read_json(path: &Path) -> Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

const RIDGE: &str = r#"{ kind = "ridge", basis = { kind = "polynomial", input_dim = 1, degree = 1 } }"#;

fn toy_nuisances() -> String {
    format!("{{ outcome = {RIDGE}, density = {{ kind = \"gaussian-regression\", mean = {RIDGE} }} }}")
}

const GEN: &str = r#"
seed = 7
out = "o"
[gen]
n = 300
generator = { kind = "linear-toy" }
"#;

fn bench_config(method: &str, leaf: Option<usize>) -> String {
    let nuisances = match leaf {
        Some(l) => format!(
            "{{ outcome = {{ kind = \"boosted-trees\", min_samples_leaf = {l} }}, density = {{ kind = \"gaussian-regression\", mean = {RIDGE} }} }}"
        ),
        None => toy_nuisances(),
    };
    format!(
        r#"
seed = 11
out = "b"
[bench]
generator = {{ kind = "linear-toy" }}
n_grid = [200, 400]
seeds = 3
n_test = 500
[[bench.methods]]
name = "m"
method = "{method}"
nuisances = {nuisances}
structural = {{ arch = "linear-in-basis", basis = {{ kind = "polynomial", input_dim = 1, degree = 1 }} }}
fit = {{ solver = "closed-form", k_folds = 2 }}
"#
    )
}

// ---------------------------------------------------------------------------

#[test]
fn gen_is_reproducible_and_stamped() {
    let dir = tempfile::tempdir().unwrap();
    let a = dmlcmr(dir.path(), &["gen"], GEN);
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    let first = fs::read(dir.path().join("o/data.csv")).unwrap();
    let b = dmlcmr(dir.path(), &["gen", "--out", "o2"], GEN);
    assert!(b.status.success());
    assert_eq!(first, fs::read(dir.path().join("o2/data.csv")).unwrap());

    let manifest = read_json(&dir.path().join("o/manifest.json"));
    assert_eq!(manifest["command"], "gen");
    assert_eq!(manifest["seed"], 7);
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 16);
    assert_eq!(
        manifest["config_hash"],
        read_json(&dir.path().join("o2/manifest.json"))["config_hash"]
    );

    let other = dmlcmr(dir.path(), &["gen", "--seed", "8", "--out", "o3"], GEN);
    assert!(other.status.success());
    assert_ne!(first, fs::read(dir.path().join("o3/data.csv")).unwrap());
    assert_ne!(manifest["config_hash"], read_json(&dir.path().join("o3/manifest.json"))["config_hash"]);
}

#[test]
fn dry_run_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dmlcmr(dir.path(), &["gen", "--dry-run"], GEN);
    assert!(out.status.success());
    let plan: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(plan["status"], "valid");
    assert!(plan["config_hash"].is_string());
    let names: Vec<_> = fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(names, vec!["run.toml"]);
}

#[test]
fn unknown_method_is_a_field_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dmlcmr(dir.path(), &["bench"], &bench_config("magic", None));
    assert_eq!(out.status.code(), Some(2));
    let err = stderr_json(&out);
    assert_eq!(err["status"], "invalid-config");
    assert_eq!(err["errors"][0]["field"], "bench.methods[0].method");
    assert!(!dir.path().join("b").exists());
}

#[test]
fn unknown_top_level_field_and_missing_seed() {
    let dir = tempfile::tempdir().unwrap();
    let out = dmlcmr(dir.path(), &["nu"], "seed = 1\nbogus = 2\n");
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_json(&out)["errors"][0]["field"], "bogus");

    let out = dmlcmr(dir.path(), &["nu"], "out = \"x\"\n");
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_json(&out)["errors"][0]["field"], "seed");

    let out = dmlcmr(dir.path(), &["nu"], "seed = 1\n[nu]\ntheta_samples = 5\n");
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_json(&out)["errors"][0]["field"], "nu.theta_samples");
}

#[test]
fn bench_writes_stamped_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dmlcmr(dir.path(), &["bench", "--jobs", "1"], &bench_config("dml-cmr", None));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let b = dir.path().join("b");
    let manifest = read_json(&b.join("manifest.json"));
    let hash = manifest["config_hash"].as_str().unwrap();
    let report = read_json(&b.join("report.json"));
    assert_eq!(report.as_array().unwrap().len(), 2);
    assert!(report.as_array().unwrap().iter().all(|r| r["config_hash"] == hash));
    assert!(b.join(format!("plot-{hash}.svg")).exists());
    let cells = fs::read_to_string(b.join("cells.csv")).unwrap();
    assert_eq!(cells.lines().count(), 1 + 2 * 3);
    assert!(cells.lines().skip(1).all(|l| l.ends_with(hash)));
    assert!(manifest["artifacts"].as_array().unwrap().len() >= 3);
}

#[test]
fn failing_cells_exit_one() {
    // trees with a 1000-row leaf cannot fit folds of 100 rows
    let dir = tempfile::tempdir().unwrap();
    let out = dmlcmr(dir.path(), &["bench"], &bench_config("naive-two-stage", Some(1000)));
    assert_eq!(out.status.code(), Some(1));
    let err = stderr_json(&out);
    assert_eq!(err["status"], "error");
    assert!(!err["failed_cells"].as_array().unwrap().is_empty());
}

#[test]
fn fit_round_trip_from_generated_csv() {
    let dir = tempfile::tempdir().unwrap();
    assert!(dmlcmr(dir.path(), &["gen"], GEN).status.success());
    let cfg = format!(
        r#"
seed = 3
out = "f"
[fit]
data = "o/data.csv"
method = "dml-cmr"
nuisances = {}
structural = {{ arch = "linear-in-basis", basis = {{ kind = "polynomial", input_dim = 1, degree = 1 }} }}
config = {{ solver = "closed-form", k_folds = 2 }}
"#,
        toy_nuisances()
    );
    let out = dmlcmr(dir.path(), &["fit"], &cfg);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary = read_json(&dir.path().join("f/fit-summary.json"));
    let slope = summary["theta"][1].as_f64().unwrap();
    assert!((slope - 2.0).abs() < 0.3, "slope {slope}");
    assert!(dir.path().join("f/fit.json").exists());
}

#[test]
fn fit_with_missing_data_file_is_invalid() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = format!(
        "seed = 1\n[fit]\ndata = \"nope.csv\"\nmethod = \"dml-cmr\"\nnuisances = {}\nstructural = {{ arch = \"polynomial\", degree = 1 }}\n",
        toy_nuisances()
    );
    let out = dmlcmr(dir.path(), &["fit"], &cfg);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_json(&out)["errors"][0]["field"], "fit.data");
}

#[test]
fn ortho_check_on_the_toy() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = "seed = 5\nout = \"c\"\n[ortho-check]\nmc_n = 20000\ninner_draws = 50\nbootstrap = 100\n";
    let out = dmlcmr(dir.path(), &["ortho-check"], cfg);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = read_json(&dir.path().join("c/ortho.json"));
    assert_eq!(report["verdicts"]["orthogonal"], "pass");
    assert!(report["config_hash"].is_string());
}

#[test]
fn nu_and_rate_quick_runs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dmlcmr(dir.path(), &["nu"], "seed = 2\nout = \"n\"\n[nu]\nmc_n = 20000\n");
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let nu = read_json(&dir.path().join("n/nu.json"))["report"]["nu"].as_f64().unwrap();
    assert!((nu - 3f64.sqrt()).abs() < 0.2, "nu {nu}");

    let cfg = "seed = 2\nout = \"r\"\n[rate]\nstudy = \"second-stage\"\nn_grid = [200, 400, 800]\nseeds = 3\nbootstrap = 50\n";
    let out = dmlcmr(dir.path(), &["rate"], cfg);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rate = read_json(&dir.path().join("r/rate.json"));
    assert_eq!(rate["study"], "second-stage");
    assert!(rate["result"]["slope"].is_number());
    assert_eq!(rate["seed"], 2);
}
