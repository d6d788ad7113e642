//! Held-out evaluation: RMSE and predictive NLL for regression, AUC and NLL
//! for binary classification.

use serde::{Deserialize, Serialize};

use crate::data_io::{SphereData, TargetScaler, Task};
use crate::error::{Error, Result};

use super::likelihood::{ExpectationEngine, Likelihood};
use super::model::{predict_matrix, InducingModel, VariationalState};

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const EVAL_CHUNK: usize = 4096;
/// Probabilities are kept inside `[ε, 1 − ε]` when scoring log loss.
const PROB_FLOOR: f64 = 1e-15;

/// Evaluation summary. Keys present depend on the task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub task: Task,
    pub n: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub rmse: Option<f64>,
    pub nll: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub auc: Option<f64>,
}

/// Per-point output, in original target units for regression.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointPrediction {
    pub target: f64,
    /// Predictive mean of `y` (regression) or `P(y = 1)` (binary).
    pub mean: f64,
    /// Predictive variance of `y` (regression) or of the latent (binary).
    pub variance: f64,
}

pub fn task_of(likelihood: Likelihood) -> Task {
    match likelihood {
        Likelihood::Gaussian => Task::Regression,
        Likelihood::Bernoulli(_) => Task::Binary,
    }
}

/// Predict on `data` and score the predictions.
///
/// `target_scaler` maps standardized regression targets back to original
/// units; use [`TargetScaler::identity`] when targets were not scaled.
pub fn evaluate(
    model: &InducingModel,
    state: &VariationalState,
    engine: &ExpectationEngine,
    data: &SphereData,
    target_scaler: TargetScaler,
) -> Result<(Metrics, Vec<PointPrediction>)> {
    let task = task_of(engine.likelihood());
    if data.task != task {
        return Err(Error::TaskMismatch {
            expected: task.name(),
            actual: data.task.name(),
        });
    }
    if data.is_empty() {
        return Err(Error::Data("no evaluation rows".into()));
    }
    if data.dimension() != model.dimension() {
        return Err(Error::DimensionMismatch {
            expected: model.dimension(),
            actual: data.dimension(),
        });
    }
    state.check(model)?;
    engine.likelihood().validate_targets(&data.y)?;
    let noise = state.hyper.noise().unwrap_or(0.0);
    let mut preds = Vec::with_capacity(data.len());
    for start in (0..data.len()).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(data.len());
        let x = data.x.rows(start, end - start).clone_owned();
        let p = predict_matrix(model, state, &x, false)?;
        for k in 0..end - start {
            let y = data.y[start + k];
            let (mu, var) = (p.mean[k], p.variance[k]);
            preds.push(match task {
                Task::Regression => PointPrediction {
                    target: target_scaler.unstandardize(y),
                    mean: target_scaler.unstandardize(mu),
                    variance: target_scaler.unstandardize_variance(var + noise),
                },
                Task::Binary => PointPrediction {
                    target: y,
                    mean: engine.predictive_probability(mu, var),
                    variance: var,
                },
            });
        }
    }
    let n = preds.len() as f64;
    let metrics = match task {
        Task::Regression => {
            let sq: f64 = preds.iter().map(|p| (p.target - p.mean).powi(2)).sum();
            let nll: f64 = preds
                .iter()
                .map(|p| {
                    0.5 * (LN_2PI + p.variance.ln())
                        + 0.5 * (p.target - p.mean).powi(2) / p.variance
                })
                .sum();
            Metrics {
                task,
                n: preds.len(),
                rmse: Some((sq / n).sqrt()),
                nll: nll / n,
                auc: None,
            }
        }
        Task::Binary => {
            let nll: f64 = preds
                .iter()
                .map(|p| {
                    let q = p.mean.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
                    if p.target == 1.0 {
                        -q.ln()
                    } else {
                        -(1.0 - q).ln()
                    }
                })
                .sum();
            let scores: Vec<f64> = preds.iter().map(|p| p.mean).collect();
            let labels: Vec<f64> = preds.iter().map(|p| p.target).collect();
            Metrics {
                task,
                n: preds.len(),
                rmse: None,
                nll: nll / n,
                auc: Some(auc(&scores, &labels)?),
            }
        }
    };
    Ok((metrics, preds))
}

/// Root mean squared error.
pub fn rmse(predicted: &[f64], truth: &[f64]) -> Result<f64> {
    if predicted.len() != truth.len() || predicted.is_empty() {
        return Err(Error::DimensionMismatch {
            expected: truth.len(),
            actual: predicted.len(),
        });
    }
    let sq: f64 = predicted
        .iter()
        .zip(truth)
        .map(|(p, t)| (p - t).powi(2))
        .sum();
    Ok((sq / truth.len() as f64).sqrt())
}

/// Area under the ROC curve with trapezoidal handling of tied scores,
/// computed from average ranks.
pub fn auc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: labels.len(),
            actual: scores.len(),
        });
    }
    let n_pos = labels.iter().filter(|&&y| y == 1.0).count();
    let n_neg = labels.iter().filter(|&&y| y == 0.0).count();
    if n_pos + n_neg != labels.len() {
        return Err(Error::Data("AUC labels must be 0 or 1".into()));
    }
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Data(format!(
            "AUC needs both classes; got {n_pos} positive and {n_neg} negative"
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Data("NaN score".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            if labels[k] == 1.0 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let (p, q) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * q))
}

/// Standard deviation of the AUC under random labels (no ties).
pub fn auc_null_std(n_pos: usize, n_neg: usize) -> f64 {
    let (p, q) = (n_pos as f64, n_neg as f64);
    ((p + q + 1.0) / (12.0 * p * q)).sqrt()
}
