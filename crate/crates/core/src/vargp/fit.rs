//! Adam training loop over all trainable parameters.

use std::io::Write;
use std::time::Instant;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::data_io::{minibatches, SphereData};
use crate::error::{Error, Result};

use super::elbo::{elbo, elbo_gradients, ParamGroup, ParamId, ParamLayout};
use super::likelihood::ExpectationEngine;
use super::model::{InducingModel, VariationalState};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;
/// Bounds on the power-law exponent while training.
pub const BETA_BOUNDS: (f64, f64) = (0.05, 10.0);

/// Optimizer settings. A learning rate of zero freezes its group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub iterations: usize,
    /// Minibatch size; `0` or anything `≥ N` means full batch.
    pub batch_size: usize,
    pub lr_variational: f64,
    pub lr_hyper: f64,
    pub lr_phase: f64,
    /// Seeds the minibatch order.
    pub seed: u64,
    /// Record the ELBO every this many iterations (and at the last one).
    pub log_every: usize,
    /// Log the full-data ELBO instead of the minibatch estimate.
    pub full_data_trace: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            iterations: 1000,
            batch_size: 256,
            lr_variational: 1e-2,
            lr_hyper: 1e-3,
            lr_phase: 1e-3,
            seed: 0,
            log_every: 10,
            full_data_trace: false,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, lr) in [
            ("lr_variational", self.lr_variational),
            ("lr_hyper", self.lr_hyper),
            ("lr_phase", self.lr_phase),
        ] {
            if !(lr >= 0.0) || !lr.is_finite() {
                return Err(Error::Config(format!(
                    "{name} must be a finite non-negative number, got {lr}"
                )));
            }
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be at least 1".into()));
        }
        Ok(())
    }

    fn learning_rate(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Variational => self.lr_variational,
            ParamGroup::Hyper => self.lr_hyper,
            ParamGroup::Phase => self.lr_phase,
        }
    }
}

/// First and second moment estimates of Adam, in layout order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub first: Vec<f64>,
    pub second: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            first: vec![0.0; len],
            second: vec![0.0; len],
            step: 0,
        }
    }

    /// One ascent step on `params` given `grad` and per-parameter rates.
    pub fn ascend(&mut self, params: &mut DVector<f64>, grad: &DVector<f64>, rates: &[f64]) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - ADAM_BETA1.powi(t);
        let c2 = 1.0 - ADAM_BETA2.powi(t);
        for k in 0..params.len() {
            let g = grad[k];
            self.first[k] = ADAM_BETA1 * self.first[k] + (1.0 - ADAM_BETA1) * g;
            self.second[k] = ADAM_BETA2 * self.second[k] + (1.0 - ADAM_BETA2) * g * g;
            if rates[k] == 0.0 {
                continue;
            }
            let m_hat = self.first[k] / c1;
            let v_hat = self.second[k] / c2;
            params[k] += rates[k] * m_hat / (v_hat.sqrt() + ADAM_EPSILON);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub elbo: f64,
    pub wallclock_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingTrace {
    pub rows: Vec<TraceRow>,
}

impl TrainingTrace {
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "iteration,elbo,wallclock_s")?;
        for r in &self.rows {
            writeln!(out, "{},{:.16e},{:.6}", r.iteration, r.elbo, r.wallclock_s)?;
        }
        Ok(())
    }

    pub fn elbos(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.elbo).collect()
    }
}

/// Trailing moving average of `values` with the given window (shorter at
/// the start).
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut acc = 0.0;
    for i in 0..values.len() {
        acc += values[i];
        if i >= window {
            acc -= values[i - window];
        }
        out.push(acc / (i + 1).min(window) as f64);
    }
    out
}

/// Whether the moving average over `window` is non-decreasing (up to
/// `slack`, relative to the trace's range) over the final `tail_fraction`.
pub fn smoothed_non_decreasing(
    values: &[f64],
    window: usize,
    tail_fraction: f64,
    slack: f64,
) -> bool {
    let smooth = moving_average(values, window);
    let start = ((1.0 - tail_fraction) * smooth.len() as f64).floor() as usize;
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let tol = slack * (hi - lo).abs().max(f64::MIN_POSITIVE);
    smooth[start.min(smooth.len())..]
        .windows(2)
        .all(|w| w[1] >= w[0] - tol)
}

/// Result of [`fit`].
#[derive(Debug, Clone, PartialEq)]
pub struct FitOutcome {
    pub state: VariationalState,
    pub trace: TrainingTrace,
    pub optimizer: AdamState,
    /// Total iterations including any run before a resume.
    pub iterations: usize,
}

/// Maximize the ELBO with Adam from `state`.
///
/// Phase directions in `model` are updated in place and re-orthogonalized
/// after every step; `ln β` is clamped to [`BETA_BOUNDS`].
pub fn fit(
    model: &mut InducingModel,
    state: VariationalState,
    engine: &ExpectationEngine,
    data: &SphereData,
    config: &FitConfig,
) -> Result<FitOutcome> {
    fit_resume(model, state, engine, data, config, None, 0)
}

/// As [`fit`], continuing from saved optimizer moments after
/// `start_iteration` completed iterations.
pub fn fit_resume(
    model: &mut InducingModel,
    mut state: VariationalState,
    engine: &ExpectationEngine,
    data: &SphereData,
    config: &FitConfig,
    optimizer: Option<AdamState>,
    start_iteration: usize,
) -> Result<FitOutcome> {
    config.validate()?;
    state.check(model)?;
    if data.is_empty() {
        return Err(Error::Data("no training rows".into()));
    }
    if data.dimension() != model.dimension() {
        return Err(Error::DimensionMismatch {
            expected: model.dimension(),
            actual: data.dimension(),
        });
    }
    engine.likelihood().validate_targets(&data.y)?;

    let layout = ParamLayout::new(model, &state);
    let rates: Vec<f64> = layout
        .ids()
        .iter()
        .map(|id| config.learning_rate(id.group()))
        .collect();
    let beta_index = layout.ids().iter().position(|id| *id == ParamId::LogBeta);
    let mut adam = match optimizer {
        Some(a) if a.first.len() == layout.len() && a.second.len() == layout.len() => a,
        Some(a) => {
            return Err(Error::Checkpoint(format!(
                "optimizer state has {} entries, model has {} parameters",
                a.first.len(),
                layout.len()
            )))
        }
        None => AdamState::new(layout.len()),
    };

    let n = data.len();
    let batch_size = if config.batch_size == 0 {
        n
    } else {
        config.batch_size.min(n)
    };
    let batches_per_epoch = n.div_ceil(batch_size);
    let full_batch = batch_size == n;
    let mut trace = TrainingTrace::default();
    let clock = Instant::now();
    let mut epoch_batches: Vec<Vec<usize>> = Vec::new();
    let mut current_epoch = usize::MAX;

    for it in start_iteration..start_iteration + config.iterations {
        let epoch = it / batches_per_epoch;
        if epoch != current_epoch {
            let epoch_seed = config
                .seed
                .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                .wrapping_add(epoch as u64);
            epoch_batches = minibatches(n, batch_size, epoch_seed)?.collect();
            current_epoch = epoch;
        }
        let (x, y) = if full_batch {
            (data.x.clone(), data.y.clone())
        } else {
            data.batch(&epoch_batches[it % batches_per_epoch])
        };
        let (value, grads) =
            elbo_gradients(model, &state, engine, &x, &y, n).map_err(|e| divergence_or(e, it))?;
        let grad = layout.pack_gradients(&grads);
        if !value.elbo.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Divergence {
                iteration: it,
                detail: format!(
                    "elbo {} (data {}, kl {}), max |grad| {}, hyper {:?}",
                    value.elbo,
                    value.data_term,
                    value.kl,
                    grad.amax(),
                    state.hyper
                ),
            });
        }
        let last = it + 1 == start_iteration + config.iterations;
        if it % config.log_every == 0 || last {
            let logged = if config.full_data_trace && !full_batch {
                elbo(model, &state, engine, &data.x, &data.y, n)?.elbo
            } else {
                value.elbo
            };
            trace.rows.push(TraceRow {
                iteration: it,
                elbo: logged,
                wallclock_s: clock.elapsed().as_secs_f64(),
            });
        }

        let mut params = layout.pack(model, &state);
        adam.ascend(&mut params, &grad, &rates);
        if let Some(k) = beta_index {
            params[k] = params[k].clamp(BETA_BOUNDS.0.ln(), BETA_BOUNDS.1.ln());
        }
        layout
            .unpack(&params, model, &mut state)
            .map_err(|e| divergence_or(e, it))?;
    }
    Ok(FitOutcome {
        state,
        trace,
        optimizer: adam,
        iterations: start_iteration + config.iterations,
    })
}

fn divergence_or(e: Error, iteration: usize) -> Error {
    match e {
        Error::IndefiniteCovariance { .. }
        | Error::RankDeficient { .. }
        | Error::NotPositiveDefinite(_) => Error::Divergence {
            iteration,
            detail: e.to_string(),
        },
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_io::Task;
    use crate::harmonics::{points_matrix, PhaseTruncation, SpherePoint};
    use crate::kernels::poly_decay_spectrum;
    use crate::vargp::likelihood::Likelihood;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn toy_data(n: usize, d: usize, seed: u64) -> SphereData {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let pts: Vec<SpherePoint> = (0..n).map(|_| SpherePoint::random(d, &mut r)).collect();
        let x = points_matrix(&pts, d).unwrap();
        let y = (0..n)
            .map(|i| {
                let e: f64 = StandardNormal.sample(&mut r);
                x[(i, 0)] - 0.5 * x[(i, 1)] * x[(i, 2)] + 0.05 * e
            })
            .collect();
        SphereData {
            x,
            y,
            stored_norms: vec![1.0; n],
            bias: 1.0,
            task: Task::Regression,
        }
    }

    fn setup(d: usize) -> (InducingModel, VariationalState) {
        let spec = poly_decay_spectrum(1.0, d, 3).unwrap();
        let model = InducingModel::for_spectrum(spec, PhaseTruncation::AtMost(4), 2).unwrap();
        let state = VariationalState::prior(&model, model.initial_hyper(Some(0.1))).unwrap();
        (model, state)
    }

    #[test]
    fn zero_iterations_leave_state_unchanged() {
        let (mut model, state) = setup(4);
        let before = model.clone();
        let data = toy_data(30, 4, 1);
        let cfg = FitConfig {
            iterations: 0,
            ..FitConfig::default()
        };
        let out = fit(
            &mut model,
            state.clone(),
            &ExpectationEngine::new(Likelihood::Gaussian),
            &data,
            &cfg,
        )
        .unwrap();
        assert_eq!(out.state, state);
        assert_eq!(model, before);
        assert!(out.trace.rows.is_empty());
    }

    #[test]
    fn training_increases_elbo_and_is_deterministic() {
        let data = toy_data(80, 4, 3);
        let engine = ExpectationEngine::new(Likelihood::Gaussian);
        let cfg = FitConfig {
            iterations: 200,
            batch_size: 20,
            lr_variational: 0.03,
            lr_hyper: 0.01,
            lr_phase: 0.01,
            seed: 5,
            log_every: 1,
            full_data_trace: true,
        };
        let run = || {
            let (mut model, state) = setup(4);
            let out = fit(&mut model, state, &engine, &data, &cfg).unwrap();
            (model, out)
        };
        let (m1, o1) = run();
        let (m2, o2) = run();
        assert_eq!(o1.state, o2.state);
        assert_eq!(m1, m2);
        assert_eq!(o1.trace.elbos(), o2.trace.elbos());
        let e = o1.trace.elbos();
        assert_eq!(e.len(), 200);
        assert!(
            e[e.len() - 1] > e[0] + 10.0,
            "{} -> {}",
            e[0],
            e[e.len() - 1]
        );
        // Phases moved and stayed normalized.
        let (m0, _) = setup(4);
        assert_ne!(
            m0.basis().sets()[1].directions(),
            m1.basis().sets()[1].directions()
        );
        for set in m1.basis().sets() {
            for row in set.directions().row_iter() {
                assert!((row.norm() - 1.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let data = toy_data(40, 4, 9);
        let engine = ExpectationEngine::new(Likelihood::Gaussian);
        let cfg = FitConfig {
            iterations: 30,
            batch_size: 16,
            seed: 1,
            ..FitConfig::default()
        };
        let (mut ma, sa) = setup(4);
        let full = fit(&mut ma, sa, &engine, &data, &cfg).unwrap();
        let (mut mb, sb) = setup(4);
        let half = FitConfig {
            iterations: 12,
            ..cfg.clone()
        };
        let first = fit(&mut mb, sb, &engine, &data, &half).unwrap();
        let rest = FitConfig {
            iterations: 18,
            ..cfg.clone()
        };
        let second = fit_resume(
            &mut mb,
            first.state,
            &engine,
            &data,
            &rest,
            Some(first.optimizer),
            12,
        )
        .unwrap();
        assert_eq!(second.iterations, 30);
        assert_eq!(second.state, full.state);
        assert_eq!(mb, ma);
    }

    #[test]
    fn beta_stays_in_bounds() {
        let data = toy_data(30, 4, 2);
        let (mut model, mut state) = setup(4);
        state.hyper.log_beta = Some(BETA_BOUNDS.1.ln() - 1e-6);
        let cfg = FitConfig {
            iterations: 20,
            batch_size: 0,
            lr_hyper: 1.0,
            lr_variational: 0.0,
            lr_phase: 0.0,
            ..FitConfig::default()
        };
        let out = fit(
            &mut model,
            state,
            &ExpectationEngine::new(Likelihood::Gaussian),
            &data,
            &cfg,
        )
        .unwrap();
        let b = out.state.hyper.beta().unwrap();
        assert!((BETA_BOUNDS.0 - 1e-12..=BETA_BOUNDS.1 + 1e-12).contains(&b));
    }

    #[test]
    fn non_finite_objective_is_reported_as_divergence() {
        let mut data = toy_data(10, 4, 2);
        let (mut model, mut state) = setup(4);
        state.hyper.log_noise = Some(-800.0);
        data.y[0] = 1e200;
        let err = fit(
            &mut model,
            state,
            &ExpectationEngine::new(Likelihood::Gaussian),
            &data,
            &FitConfig {
                iterations: 3,
                ..FitConfig::default()
            },
        )
        .unwrap_err();
        assert!(
            matches!(err, Error::Divergence { iteration: 0, .. }),
            "{err}"
        );
    }

    #[test]
    fn trace_csv_and_smoothing() {
        let trace = TrainingTrace {
            rows: vec![
                TraceRow {
                    iteration: 0,
                    elbo: -3.0,
                    wallclock_s: 0.0,
                },
                TraceRow {
                    iteration: 1,
                    elbo: -1.5,
                    wallclock_s: 0.1,
                },
            ],
        };
        let mut buf = Vec::new();
        trace.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("iteration,elbo,wallclock_s\n0,"));
        assert_eq!(
            moving_average(&[1.0, 3.0, 5.0, 7.0], 2),
            vec![1.0, 2.0, 4.0, 6.0]
        );
        assert!(smoothed_non_decreasing(
            &[0.0, 1.0, 0.9, 2.0, 3.0],
            2,
            1.0,
            0.0
        ));
        assert!(!smoothed_non_decreasing(
            &[0.0, 1.0, 0.0, -1.0, 3.0],
            1,
            1.0,
            0.0
        ));
    }
}
