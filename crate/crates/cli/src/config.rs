//! Run configuration: one TOML file with a section per subcommand.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use dmlcmr::dml::{FitConfig, NuisanceSpecs};
use dmlcmr::eval::{
    BenchmarkSpec, DebiasStudyConfig, GeneratorSpec, IllPosedProblem, MethodConfig, MethodKind, NuisanceProblem,
    NuisanceRateConfig, PclEvalConfig, RateStudyConfig, StructuralSpec,
};
use dmlcmr::rng::derive_seed;
use dmlcmr::score::{GateauxConfig, LinearToyProblem, PerturbationDirection, ScoreKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, clap::Subcommand)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Generate a synthetic dataset
    Gen,
    /// Fit one estimator
    Fit,
    /// Run a method x sample size x seed benchmark grid
    Bench,
    /// Gateaux-derivative check of the scores on an analytic problem
    OrthoCheck,
    /// Convergence-rate and bias-sensitivity studies
    Rate,
    /// Ill-posedness estimate
    Nu,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub jobs: Option<usize>,
    pub gen: Option<GenSection>,
    pub fit: Option<FitSection>,
    pub bench: Option<BenchSection>,
    #[serde(rename = "ortho-check")]
    pub ortho_check: Option<OrthoSection>,
    pub rate: Option<RateSection>,
    pub nu: Option<NuSection>,
}

fn d_file() -> String {
    "data.csv".into()
}
fn d_n_test() -> usize {
    10_000
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenSection {
    pub generator: GeneratorSpec,
    pub n: usize,
    #[serde(default = "d_file")]
    pub file: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitSection {
    /// A CSV written by `gen` (with its sidecar).
    #[serde(default)]
    pub data: Option<PathBuf>,
    /// Or generate the training data in place.
    #[serde(default)]
    pub generator: Option<GeneratorSpec>,
    #[serde(default)]
    pub n: Option<usize>,
    pub method: MethodKind,
    pub nuisances: NuisanceSpecs,
    pub structural: StructuralSpec,
    #[serde(default)]
    pub standardise: bool,
    #[serde(default)]
    pub config: FitConfig,
    /// Test points for the error against the truth (generated data only).
    #[serde(default = "d_n_test")]
    pub n_test: usize,
}

impl FitSection {
    pub fn method_config(&self) -> MethodConfig {
        MethodConfig {
            name: "fit".into(),
            method: self.method,
            nuisances: self.nuisances.clone(),
            structural: self.structural.clone(),
            fit: self.config.clone(),
        }
    }
}

/// Either a number of seeds (derived from the global seed) or an explicit list.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Seeds {
    Count(usize),
    List(Vec<u64>),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PclGrid {
    #[serde(default = "d_points")]
    pub grid_points: usize,
    #[serde(default = "d_sample")]
    pub grid_sample: usize,
    #[serde(default = "d_oracle_mc")]
    pub oracle_mc: usize,
}

fn d_points() -> usize {
    PclEvalConfig::default().grid_points
}
fn d_sample() -> usize {
    PclEvalConfig::default().grid_sample
}
fn d_oracle_mc() -> usize {
    PclEvalConfig::default().oracle_mc
}

impl Default for PclGrid {
    fn default() -> Self {
        PclGrid {
            grid_points: d_points(),
            grid_sample: d_sample(),
            oracle_mc: d_oracle_mc(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSection {
    pub methods: Vec<MethodConfig>,
    pub generator: GeneratorSpec,
    pub n_grid: Vec<usize>,
    pub seeds: Seeds,
    #[serde(default = "d_n_test")]
    pub n_test: usize,
    #[serde(default)]
    pub standardise: bool,
    #[serde(default)]
    pub pcl: PclGrid,
}

impl BenchSection {
    /// The benchmark grid with every random stream tied to `seed`.
    pub fn to_spec(&self, seed: u64) -> BenchmarkSpec {
        let seeds = match &self.seeds {
            Seeds::Count(k) => (0..*k as u64).map(|i| derive_seed(seed, "bench/seed", i)).collect(),
            Seeds::List(v) => v.clone(),
        };
        BenchmarkSpec {
            methods: self.methods.clone(),
            generator: self.generator.clone(),
            n_grid: self.n_grid.clone(),
            seeds,
            n_test: self.n_test,
            standardise: self.standardise,
            test_seed: derive_seed(seed, "bench/test", 0),
            pcl: PclEvalConfig {
                grid_points: self.pcl.grid_points,
                grid_sample: self.pcl.grid_sample,
                oracle_mc: self.pcl.oracle_mc,
                seed: derive_seed(seed, "bench/pcl", 0),
            },
        }
    }
}

fn d_problem() -> NuisanceProblem {
    NuisanceProblem::LinearToy(LinearToyProblem::default())
}
fn d_scores() -> Vec<ScoreKind> {
    vec![ScoreKind::Orthogonal, ScoreKind::Naive]
}
fn d_r_grid() -> Vec<f64> {
    GateauxConfig::default().r_grid
}
fn d_mc() -> usize {
    GateauxConfig::default().mc_n
}
fn d_inner() -> usize {
    GateauxConfig::default().inner_draws
}
fn d_boot() -> usize {
    GateauxConfig::default().bootstrap
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OrthoSection {
    #[serde(default = "d_problem")]
    pub problem: NuisanceProblem,
    #[serde(default = "d_scores")]
    pub scores: Vec<ScoreKind>,
    /// Defaults to the constant, linear and fitted-difference directions.
    #[serde(default)]
    pub directions: Option<Vec<PerturbationDirection>>,
    #[serde(default = "d_mc")]
    pub mc_n: usize,
    #[serde(default = "d_r_grid")]
    pub r_grid: Vec<f64>,
    #[serde(default = "d_inner")]
    pub inner_draws: usize,
    #[serde(default = "d_boot")]
    pub bootstrap: usize,
}

impl Default for OrthoSection {
    fn default() -> Self {
        OrthoSection {
            problem: d_problem(),
            scores: d_scores(),
            directions: None,
            mc_n: d_mc(),
            r_grid: d_r_grid(),
            inner_draws: d_inner(),
            bootstrap: d_boot(),
        }
    }
}

impl OrthoSection {
    pub fn gateaux(&self, seed: u64) -> GateauxConfig {
        GateauxConfig {
            r_grid: self.r_grid.clone(),
            mc_n: self.mc_n,
            inner_draws: self.inner_draws,
            bootstrap: self.bootstrap,
            seed,
        }
    }

    pub fn directions(&self) -> Vec<PerturbationDirection> {
        self.directions
            .clone()
            .unwrap_or_else(|| PerturbationDirection::basket(self.problem.as_problem().d_c()))
    }
}

/// Which study `rate` runs. A `seed` given inside the study is replaced by
/// the global seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "study", rename_all = "kebab-case")]
pub enum RateSection {
    SecondStage(RateStudyConfig),
    Nuisance(NuisanceRateConfig),
    Debias(DebiasStudyConfig),
}

impl Default for RateSection {
    fn default() -> Self {
        RateSection::SecondStage(RateStudyConfig::default())
    }
}

fn d_toy() -> IllPosedProblem {
    IllPosedProblem::LinearToy(LinearToyProblem::default())
}
fn d_theta_samples() -> usize {
    200
}
fn d_nu_mc() -> usize {
    100_000
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NuSection {
    #[serde(default = "d_toy")]
    pub problem: IllPosedProblem,
    #[serde(default = "d_theta_samples")]
    pub theta_samples: usize,
    #[serde(default = "d_nu_mc")]
    pub mc_n: usize,
}

impl Default for NuSection {
    fn default() -> Self {
        NuSection {
            problem: d_toy(),
            theta_samples: d_theta_samples(),
            mc_n: d_nu_mc(),
        }
    }
}

// ---------------------------------------------------------------------------
// Loading and validation

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl FieldError {
    pub fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        FieldError {
            field: field.into(),
            message: message.into(),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
}

/// The section a command runs with, after defaults.
#[derive(Debug, Clone, Serialize)]
#[serde(untagged)]
pub enum Section {
    Gen(GenSection),
    Fit(FitSection),
    Bench(BenchSection),
    Ortho(OrthoSection),
    Rate(RateSection),
    Nu(NuSection),
}

#[derive(Debug, Clone)]
pub struct Resolved {
    pub command: Command,
    pub seed: u64,
    pub out: PathBuf,
    pub jobs: Option<usize>,
    pub section: Section,
    pub hash: String,
}

/// Parse TOML text, reporting the path of the first offending field.
pub fn parse(text: &str) -> Result<RunConfig, FieldError> {
    let de = toml::de::Deserializer::parse(text).map_err(|e| FieldError::new("<file>", e.to_string().trim()))?;
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let field = if path == "." { "<root>".to_string() } else { path };
        FieldError::new(field, e.into_inner().message().trim())
    })
}

pub fn load(path: Option<&Path>) -> Result<RunConfig, FieldError> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| FieldError::new("--config", format!("cannot read {}: {e}", p.display())))?;
            parse(&text)
        }
    }
}

fn required<T: Clone>(v: &Option<T>, name: &str) -> Result<T, Vec<FieldError>> {
    v.clone()
        .ok_or_else(|| vec![FieldError::new(name, format!("the `[{name}]` section is required for this command"))])
}

fn fit_problems(prefix: &str, cfg: &FitConfig, errors: &mut Vec<FieldError>) {
    for (field, msg) in cfg.problems() {
        errors.push(FieldError::new(format!("{prefix}.{field}"), msg));
    }
}

fn check_generator(prefix: &str, g: &GeneratorSpec, errors: &mut Vec<FieldError>) {
    if let GeneratorSpec::SemiSynthetic { covariates, .. } = g {
        if !covariates.exists() {
            errors.push(FieldError::new(
                format!("{prefix}.covariates"),
                format!("{} does not exist", covariates.display()),
            ));
        }
    }
}

/// Apply overrides, pick the command's section and check it.
pub fn resolve(command: Command, cfg: RunConfig, over: &Overrides) -> Result<Resolved, Vec<FieldError>> {
    let seed = over.seed.or(cfg.seed).ok_or_else(|| {
        vec![FieldError::new(
            "seed",
            "no seed given; set `seed` in the config or pass --seed",
        )]
    })?;
    let jobs = over.jobs.or(cfg.jobs);
    let out = over.out.clone().or(cfg.out.clone()).unwrap_or_else(|| PathBuf::from("out"));
    let mut errors = Vec::new();
    if jobs == Some(0) {
        errors.push(FieldError::new("jobs", "must be at least 1"));
    }
    let section = match command {
        Command::Gen => {
            let s = required(&cfg.gen, "gen")?;
            if s.n == 0 {
                errors.push(FieldError::new("gen.n", "must be positive"));
            }
            if s.file.is_empty() || s.file.contains(['/', '\\']) {
                errors.push(FieldError::new("gen.file", "must be a plain file name"));
            }
            check_generator("gen.generator", &s.generator, &mut errors);
            Section::Gen(s)
        }
        Command::Fit => {
            let s = required(&cfg.fit, "fit")?;
            match (&s.data, &s.generator) {
                (Some(_), Some(_)) => errors.push(FieldError::new("fit.data", "give either `data` or `generator`, not both")),
                (None, None) => errors.push(FieldError::new("fit.data", "give `data` (a CSV) or `generator` and `n`")),
                (Some(p), None) if !p.exists() => {
                    errors.push(FieldError::new("fit.data", format!("{} does not exist", p.display())))
                }
                (None, Some(g)) => {
                    if s.n.unwrap_or(0) == 0 {
                        errors.push(FieldError::new("fit.n", "a positive `n` is required with `generator`"));
                    }
                    check_generator("fit.generator", g, &mut errors);
                }
                _ => {}
            }
            fit_problems("fit.config", &s.config, &mut errors);
            Section::Fit(s)
        }
        Command::Bench => {
            let s = required(&cfg.bench, "bench")?;
            for (field, msg) in s.to_spec(seed).problems() {
                errors.push(FieldError::new(format!("bench.{field}"), msg));
            }
            if matches!(s.seeds, Seeds::Count(0)) {
                errors.push(FieldError::new("bench.seeds", "at least one seed is required"));
            }
            check_generator("bench.generator", &s.generator, &mut errors);
            Section::Bench(s)
        }
        Command::OrthoCheck => {
            let s = cfg.ortho_check.clone().unwrap_or_default();
            if s.scores.is_empty() {
                errors.push(FieldError::new("ortho-check.scores", "list at least one score"));
            }
            Section::Ortho(s)
        }
        Command::Rate => {
            let s = cfg.rate.clone().unwrap_or_default();
            match &s {
                RateSection::SecondStage(r) => fit_problems("rate.fit", &r.fit, &mut errors),
                RateSection::Debias(r) => fit_problems("rate.fit", &r.fit, &mut errors),
                RateSection::Nuisance(_) => {}
            }
            Section::Rate(s)
        }
        Command::Nu => {
            let s = cfg.nu.clone().unwrap_or_default();
            if s.theta_samples < 100 {
                errors.push(FieldError::new("nu.theta_samples", "must be at least 100"));
            }
            if s.mc_n < 2 {
                errors.push(FieldError::new("nu.mc_n", "must be at least 2"));
            }
            Section::Nu(s)
        }
    };
    if !errors.is_empty() {
        return Err(errors);
    }
    let hash = dmlcmr::io::config_hash(&(command, seed, &section))
        .map_err(|e| vec![FieldError::new("<root>", e.to_string())])?;
    Ok(Resolved {
        command,
        seed,
        out,
        jobs,
        section,
        hash,
    })
}
