use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{make_fold_plan, Dataset, FoldPlan, XLayout};
use crate::estimators::{
    fit_conditional_density, fit_regressor, ConditionalDensity, DensitySpec, Regressor, RegressorSpec,
};
use crate::rng::derive_seed;
use crate::score::{DensityNuisance, NuisancePair, OutcomeFn, OutcomeNuisance};
use crate::{Error, Result};

use super::FitConfig;

/// Estimator choices for the two nuisances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuisanceSpecs {
    pub outcome: RegressorSpec,
    pub density: DensitySpec,
}

impl NuisanceSpecs {
    pub fn min_rows(&self) -> usize {
        self.outcome.min_rows().max(self.density.min_rows())
    }
}

/// Fold plan plus one nuisance pair per fold.
///
/// Row `i` of the data is scored with `pairs[assignment[i]]`. For a
/// cross-fitted state, pair `k` was trained on `train_indices[k]`, which is
/// the complement of fold `k`.
#[derive(Debug, Clone)]
pub struct CrossFitState {
    pub fold_plan: FoldPlan,
    pub pairs: Vec<NuisancePair>,
    pub train_indices: Vec<Vec<usize>>,
    pub outcome_fits: Vec<Option<Regressor>>,
    pub density_fits: Vec<Option<ConditionalDensity>>,
    /// Number of nuisance estimator fits performed to build this state.
    pub nuisance_fits: usize,
    pub cross_fitted: bool,
    pub fold_seed: u64,
    pub nuisance_seeds: Vec<u64>,
}

/// Outcome of the leakage audit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditReport {
    pub passed: bool,
    pub cross_fitted: bool,
    pub folds: usize,
    pub problems: Vec<String>,
}

impl CrossFitState {
    pub fn k(&self) -> usize {
        self.pairs.len()
    }

    pub fn n(&self) -> usize {
        self.fold_plan.n_total
    }

    /// A single pair used for every row, e.g. analytic nuisances.
    pub fn single(n: usize, pair: NuisancePair) -> Self {
        CrossFitState {
            fold_plan: FoldPlan {
                folds: vec![(0..n).collect()],
                k: 1,
                n_total: n,
            },
            pairs: vec![pair],
            train_indices: vec![Vec::new()],
            outcome_fits: vec![None],
            density_fits: vec![None],
            nuisance_fits: 0,
            cross_fitted: false,
            fold_seed: 0,
            nuisance_seeds: Vec::new(),
        }
    }

    /// Replace every pair by `f(pair)`, keeping folds and audit records.
    pub fn map_pairs(&self, f: impl Fn(&NuisancePair) -> NuisancePair) -> Self {
        let mut out = self.clone();
        out.pairs = self.pairs.iter().map(f).collect();
        out
    }

    /// Check that no pair saw a row of the fold it scores.
    pub fn audit(&self) -> AuditReport {
        let mut problems = Vec::new();
        if self.cross_fitted {
            if let Err(e) = self.fold_plan.validate() {
                problems.push(e.to_string());
            }
            for (k, fold) in self.fold_plan.folds.iter().enumerate() {
                let train = &self.train_indices[k];
                let mut mask = vec![false; self.fold_plan.n_total];
                for &i in train {
                    mask[i] = true;
                }
                let leaked = fold.iter().filter(|&&i| mask[i]).count();
                if leaked > 0 {
                    problems.push(format!("fold {k}: {leaked} training rows overlap the fold"));
                }
                if *train != self.fold_plan.complement(k) {
                    problems.push(format!("fold {k}: training rows differ from the complement"));
                }
            }
        }
        if self.pairs.len() != self.fold_plan.folds.len() {
            problems.push(format!(
                "{} nuisance pairs for {} folds",
                self.pairs.len(),
                self.fold_plan.folds.len()
            ));
        }
        AuditReport {
            passed: problems.is_empty(),
            cross_fitted: self.cross_fitted,
            folds: self.fold_plan.folds.len(),
            problems,
        }
    }
}

fn fit_pair(
    data: &Dataset,
    rows: &[usize],
    specs: &NuisanceSpecs,
    seed: u64,
    with_outcome: bool,
) -> Result<(NuisancePair, Option<Regressor>, ConditionalDensity)> {
    let sub = data.subset(rows);
    let endog = sub.endogenous()?;
    let density = fit_conditional_density(
        &specs.density.reseeded(derive_seed(seed, "density", 0)),
        sub.c(),
        &endog,
    )?;
    let outcome = if with_outcome {
        Some(fit_regressor(
            &specs.outcome.reseeded(derive_seed(seed, "outcome", 0)),
            sub.c(),
            sub.y(),
        )?)
    } else {
        None
    };
    let s: Arc<dyn OutcomeNuisance> = match &outcome {
        Some(r) => Arc::new(r.clone()),
        // the naive score never reads the outcome nuisance
        None => Arc::new(OutcomeFn(|_: &[f64]| f64::NAN)),
    };
    let d: Arc<dyn DensityNuisance> = Arc::new(density.clone());
    Ok((NuisancePair::new(s, d, data.layout(), data.d_c()), outcome, density))
}

/// Fit `K` nuisance pairs, pair `k` on the complement of fold `k`.
pub fn crossfit_nuisances(data: &Dataset, cfg: &FitConfig, specs: &NuisanceSpecs) -> Result<CrossFitState> {
    cfg.validate()?;
    let fold_seed = derive_seed(cfg.seed, "folds", 0);
    let plan = make_fold_plan(data.n(), cfg.k_folds, fold_seed)?;
    let need = specs.min_rows();
    let complements: Vec<Vec<usize>> = (0..plan.k).map(|k| plan.complement(k)).collect();
    for (k, comp) in complements.iter().enumerate() {
        if comp.len() < need {
            return Err(Error::Fit(format!(
                "fold {k}: complement has {} rows, the nuisance estimators need at least {need}",
                comp.len()
            )));
        }
    }
    let seeds: Vec<u64> = (0..plan.k).map(|k| derive_seed(cfg.seed, "nuisance", k as u64)).collect();
    let fits: Vec<_> = complements
        .par_iter()
        .zip(&seeds)
        .enumerate()
        .map(|(k, (comp, &seed))| {
            fit_pair(data, comp, specs, seed, true).map_err(|e| Error::Fit(format!("fold {k}: {e}")))
        })
        .collect::<Result<_>>()?;
    let mut pairs = Vec::with_capacity(plan.k);
    let mut outcome_fits = Vec::with_capacity(plan.k);
    let mut density_fits = Vec::with_capacity(plan.k);
    for (p, o, d) in fits {
        pairs.push(p);
        outcome_fits.push(o);
        density_fits.push(Some(d));
    }
    Ok(CrossFitState {
        nuisance_fits: plan.k,
        fold_plan: plan,
        pairs,
        train_indices: complements,
        outcome_fits,
        density_fits,
        cross_fitted: true,
        fold_seed,
        nuisance_seeds: seeds,
    })
}

/// One nuisance pair trained on every row. `with_outcome = false` skips the
/// outcome regression (the naive score does not use it).
pub fn full_data_nuisances(
    data: &Dataset,
    cfg: &FitConfig,
    specs: &NuisanceSpecs,
    with_outcome: bool,
) -> Result<CrossFitState> {
    cfg.validate()?;
    let need = specs.min_rows();
    if data.n() < need {
        return Err(Error::Fit(format!(
            "{} rows, the nuisance estimators need at least {need}",
            data.n()
        )));
    }
    let all: Vec<usize> = (0..data.n()).collect();
    let seed = derive_seed(cfg.seed, "nuisance", u64::MAX);
    let (pair, outcome, density) = fit_pair(data, &all, specs, seed, with_outcome)?;
    let mut state = CrossFitState::single(data.n(), pair);
    state.train_indices = vec![all];
    state.outcome_fits = vec![outcome];
    state.density_fits = vec![Some(density)];
    state.nuisance_fits = 1;
    state.nuisance_seeds = vec![seed];
    Ok(state)
}

/// Layout check used before scoring a dataset with a state.
pub(crate) fn check_compatible(data: &Dataset, state: &CrossFitState) -> Result<()> {
    if state.n() != data.n() {
        return Err(Error::shape(format!("state over {} rows", state.n()), data.n()));
    }
    let layout: XLayout = data.layout();
    for (k, p) in state.pairs.iter().enumerate() {
        if p.d_c != data.d_c() || p.layout != layout {
            return Err(Error::invalid(format!("nuisance pair {k} does not match the dataset roles")));
        }
    }
    Ok(())
}
