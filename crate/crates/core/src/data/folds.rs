use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::rng::rng_from_seed;
use crate::{Error, Result};

/// A random partition of `0..n_total` into `k` folds.
///
/// When `k` does not divide `n_total`, the first `n_total mod k` folds hold
/// one extra index. Indices within a fold are sorted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub folds: Vec<Vec<usize>>,
    pub k: usize,
    pub n_total: usize,
}

pub fn make_fold_plan(n: usize, k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 || k > n {
        return Err(Error::invalid(format!(
            "fold count must satisfy 2 <= k <= n, got k = {k}, n = {n}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_from_seed(seed));
    let (base, extra) = (n / k, n % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let size = base + usize::from(f < extra);
        let mut fold = order[start..start + size].to_vec();
        fold.sort_unstable();
        folds.push(fold);
        start += size;
    }
    Ok(FoldPlan {
        folds,
        k,
        n_total: n,
    })
}

impl FoldPlan {
    /// Sorted indices outside fold `k`.
    pub fn complement(&self, k: usize) -> Vec<usize> {
        let mut mask = vec![true; self.n_total];
        for &i in &self.folds[k] {
            mask[i] = false;
        }
        (0..self.n_total).filter(|&i| mask[i]).collect()
    }

    /// Check disjointness, coverage and balance.
    pub fn validate(&self) -> Result<()> {
        if self.folds.len() != self.k {
            return Err(Error::invalid("fold count mismatch"));
        }
        let mut seen = vec![false; self.n_total];
        for fold in &self.folds {
            for &i in fold {
                if i >= self.n_total || seen[i] {
                    return Err(Error::invalid(format!("index {i} repeated or out of range")));
                }
                seen[i] = true;
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::invalid("folds do not cover every index"));
        }
        let sizes = self.folds.iter().map(Vec::len);
        let (lo, hi) = sizes.fold((usize::MAX, 0), |(lo, hi), s| (lo.min(s), hi.max(s)));
        if hi - lo > 1 {
            return Err(Error::invalid("fold sizes differ by more than one"));
        }
        Ok(())
    }

    /// Fold id of every index.
    pub fn assignment(&self) -> Vec<usize> {
        let mut out = vec![0; self.n_total];
        for (k, fold) in self.folds.iter().enumerate() {
            for &i in fold {
                out[i] = k;
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn even_split() {
        let plan = make_fold_plan(10, 5, 1).unwrap();
        assert!(plan.folds.iter().all(|f| f.len() == 2));
        let mut all: Vec<usize> = plan.folds.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn remainder_goes_to_leading_folds() {
        let plan = make_fold_plan(10, 3, 1).unwrap();
        let sizes: Vec<usize> = plan.folds.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![4, 3, 3]);
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        assert_eq!(make_fold_plan(50, 4, 9).unwrap(), make_fold_plan(50, 4, 9).unwrap());
        assert_ne!(make_fold_plan(50, 4, 9).unwrap(), make_fold_plan(50, 4, 10).unwrap());
    }

    #[test]
    fn argument_errors() {
        assert!(make_fold_plan(10, 1, 0).is_err());
        assert!(make_fold_plan(3, 4, 0).is_err());
    }

    proptest! {
        #[test]
        fn partition_invariants(n in 2usize..400, k_frac in 0.0f64..1.0, seed in any::<u64>()) {
            let k = 2 + ((n - 2) as f64 * k_frac) as usize;
            let plan = make_fold_plan(n, k, seed).unwrap();
            prop_assert!(plan.validate().is_ok());
            for f in 0..k {
                let comp = plan.complement(f);
                prop_assert_eq!(comp.len() + plan.folds[f].len(), n);
                prop_assert!(comp.iter().all(|i| plan.folds[f].binary_search(i).is_err()));
            }
        }
    }
}
