//! Deliberate nuisance corruption for sensitivity experiments.

use std::sync::Arc;

use crate::score::{DensityFn, NuisancePair, OutcomeFn};

/// Bias both nuisances with magnitude `b`: each reads its conditioning input
/// scaled by `1 + b`, and the density is additionally shifted by `+b`.
///
/// On the linear toy this turns `ŝ(z) = θ₀z` into `θ₀(1+b)z` and the
/// conditional mean `z` into `(1+b)z + b`.
pub fn inject_bias(pair: &NuisancePair, b: f64) -> NuisancePair {
    let s = pair.s.clone();
    let d = pair.density.clone();
    let scale = 1.0 + b;
    NuisancePair::new(
        Arc::new(OutcomeFn(move |c: &[f64]| {
            let cs: Vec<f64> = c.iter().map(|v| v * scale).collect();
            s.predict_one(&cs)
        })),
        Arc::new(DensityFn(move |c: &[f64]| {
            let cs: Vec<f64> = c.iter().map(|v| v * scale).collect();
            d.law_at(&cs).shifted(b)
        })),
        pair.layout.clone(),
        pair.d_c,
    )
}

/// Shift only the conditional density by `delta`, leaving `ŝ` untouched.
pub fn shift_density(pair: &NuisancePair, delta: f64) -> NuisancePair {
    let d = pair.density.clone();
    NuisancePair::new(
        pair.s.clone(),
        Arc::new(DensityFn(move |c: &[f64]| d.law_at(c).shifted(delta))),
        pair.layout.clone(),
        pair.d_c,
    )
}
