//! Central finite-difference check of the analytic ELBO gradients.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::Result;

use super::elbo::{elbo, elbo_gradients, ParamId, ParamLayout};
use super::likelihood::ExpectationEngine;
use super::model::{Hyper, InducingModel, VariationalState};

/// A seeded random state around the prior: means and factor entries on the
/// prior scale, log-diagonal and hyper-parameters jittered.
pub fn random_state(model: &InducingModel, hyper: Hyper, seed: u64) -> Result<VariationalState> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = move || -> f64 { StandardNormal.sample(&mut r) };
    let mut state = VariationalState::prior(model, hyper)?;
    let prior_sd = model.kuu_diag(&state.hyper)?.map(f64::sqrt);
    for i in 0..state.mean.len() {
        state.mean[i] = 0.5 * normal() * prior_sd[i];
        for j in 0..i {
            state.cov_factor[(i, j)] = 0.2 * normal() * prior_sd[i];
        }
        state.cov_factor[(i, i)] = 0.7 * prior_sd[i] * (0.3 * normal()).exp();
    }
    if let Some(b) = state.hyper.log_beta.as_mut() {
        *b += 0.2 * normal();
    }
    state.hyper.log_variance += 0.2 * normal();
    if let Some(n) = state.hyper.log_noise.as_mut() {
        *n += 0.2 * normal();
    }
    Ok(state)
}

/// Tolerances for [`gradient_check`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradCheckTolerance {
    pub step: f64,
    pub relative: f64,
    pub absolute: f64,
}

impl Default for GradCheckTolerance {
    fn default() -> Self {
        Self {
            step: 1e-5,
            relative: 1e-4,
            absolute: 1e-7,
        }
    }
}

/// One row of a gradient-check report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckEntry {
    pub parameter: String,
    pub analytic: f64,
    pub numeric: f64,
    pub abs_error: f64,
    pub rel_error: f64,
    pub pass: bool,
}

/// Compare every analytic gradient component against central differences.
///
/// A component passes when the absolute difference is within
/// `tolerance.absolute` or the relative difference (against the larger
/// magnitude) is within `tolerance.relative`. `corrupt` perturbs the analytic
/// value of one parameter, for exercising failure paths.
#[allow(clippy::too_many_arguments)]
pub fn gradient_check(
    model: &InducingModel,
    state: &VariationalState,
    engine: &ExpectationEngine,
    x: &DMatrix<f64>,
    y: &[f64],
    n_total: usize,
    tolerance: GradCheckTolerance,
    corrupt: Option<(ParamId, f64)>,
) -> Result<Vec<GradCheckEntry>> {
    let layout = ParamLayout::new(model, state);
    let (_, grads) = elbo_gradients(model, state, engine, x, y, n_total)?;
    let mut analytic = layout.pack_gradients(&grads);
    if let Some((id, delta)) = corrupt {
        if let Some(k) = layout.ids().iter().position(|p| *p == id) {
            analytic[k] += delta;
        }
    }
    let base = layout.pack(model, state);
    let h = tolerance.step;
    let eval_at = |values: &nalgebra::DVector<f64>| -> Result<f64> {
        let mut m = model.clone();
        let mut s = state.clone();
        layout.unpack(values, &mut m, &mut s)?;
        Ok(elbo(&m, &s, engine, x, y, n_total)?.elbo)
    };
    let mut out = Vec::with_capacity(layout.len());
    for (k, id) in layout.ids().iter().enumerate() {
        let mut plus = base.clone();
        plus[k] += h;
        let mut minus = base.clone();
        minus[k] -= h;
        let numeric = (eval_at(&plus)? - eval_at(&minus)?) / (2.0 * h);
        let a = analytic[k];
        let abs_error = (a - numeric).abs();
        let scale = a.abs().max(numeric.abs());
        let rel_error = if scale > 0.0 { abs_error / scale } else { 0.0 };
        out.push(GradCheckEntry {
            parameter: id.name(),
            analytic: a,
            numeric,
            abs_error,
            rel_error,
            pass: abs_error <= tolerance.absolute || rel_error <= tolerance.relative,
        });
    }
    Ok(out)
}
