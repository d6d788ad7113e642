//! Evidence lower bound, its analytic gradients, and a flat view of every
//! trainable scalar.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::kernels::EIGENVALUE_CLAMP;

use super::likelihood::ExpectationEngine;
use super::model::{kl_with, Hyper, InducingModel, VariationalState};

/// Gradient of the ELBO, mirroring [`VariationalState`].
#[derive(Debug, Clone, PartialEq)]
pub struct ElboGradients {
    pub mean: DVector<f64>,
    /// Strictly lower entries are `∂/∂L_ij`; the diagonal is `∂/∂ ln L_jj`.
    pub cov_factor: DMatrix<f64>,
    pub log_beta: Option<f64>,
    pub log_variance: f64,
    pub log_noise: Option<f64>,
    /// Per fundamental set (frequency `ℓ` at index `ℓ − 1`): gradient with
    /// respect to the direction rows; `0 × d` for fixed sets.
    pub phases: Vec<DMatrix<f64>>,
}

/// ELBO value with its parts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboValue {
    pub elbo: f64,
    /// Scaled expected log likelihood `(N / n) Σ E_q[log p(y_i | f_i)]`.
    pub data_term: f64,
    pub kl: f64,
}

fn check_batch(x: &DMatrix<f64>, y: &[f64], n_total: usize, model: &InducingModel) -> Result<()> {
    if x.nrows() == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if x.nrows() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.nrows(),
            actual: y.len(),
        });
    }
    if x.ncols() != model.dimension() {
        return Err(Error::DimensionMismatch {
            expected: model.dimension(),
            actual: x.ncols(),
        });
    }
    if n_total < x.nrows() {
        return Err(Error::InvalidArgument(format!(
            "total data size {n_total} is smaller than the batch ({})",
            x.nrows()
        )));
    }
    Ok(())
}

fn log_noise_of(engine: &ExpectationEngine, hyper: &Hyper) -> Result<f64> {
    match (engine.likelihood().has_noise(), hyper.log_noise) {
        (true, Some(v)) => Ok(v),
        (true, None) => Err(Error::InvalidArgument(
            "Gaussian likelihood needs a noise variance".into(),
        )),
        (false, None) => Ok(0.0),
        (false, Some(_)) => Err(Error::InvalidArgument(format!(
            "{} likelihood has no noise variance",
            engine.likelihood().name()
        ))),
    }
}

/// Quantities shared by the value and the gradient.
struct Forward {
    phi: DMatrix<f64>,
    lam: DVector<f64>,
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    mean: DVector<f64>,
    var: DVector<f64>,
    log_noise: f64,
}

fn forward(
    model: &InducingModel,
    state: &VariationalState,
    engine: &ExpectationEngine,
    x: &DMatrix<f64>,
    y: &[f64],
    n_total: usize,
) -> Result<Forward> {
    state.check(model)?;
    check_batch(x, y, n_total, model)?;
    engine.likelihood().validate_targets(y)?;
    let log_noise = log_noise_of(engine, &state.hyper)?;
    let lam = model.effective_lambda_per_feature(&state.hyper)?;
    let big_lam = model.effective_eigenvalues(&state.hyper)?;
    let prior_diag: f64 = model
        .diag_kernel_weights()
        .iter()
        .zip(&big_lam)
        .map(|(w, l)| w * l)
        .sum();
    let phi = model.basis().feature_matrix_from(x);
    let mut a = phi.clone();
    for (j, mut col) in a.column_iter_mut().enumerate() {
        col *= lam[j];
    }
    let mean = &a * &state.mean;
    let b = &a * &state.cov_factor;
    let n = x.nrows();
    let mut var = DVector::zeros(n);
    for i in 0..n {
        let explained: f64 = (0..lam.len())
            .map(|j| lam[j] * phi[(i, j)] * phi[(i, j)])
            .sum();
        let v = prior_diag - explained + b.row(i).norm_squared();
        if v < -EIGENVALUE_CLAMP {
            return Err(Error::IndefiniteCovariance { index: i, value: v });
        }
        var[i] = v.max(0.0);
    }
    Ok(Forward {
        phi,
        lam,
        a,
        b,
        mean,
        var,
        log_noise,
    })
}

/// `(N/n) Σ_batch E_q[log p(y_i | f_i)] − KL[q(u) ‖ p(u)]`.
pub fn elbo(
    model: &InducingModel,
    state: &VariationalState,
    engine: &ExpectationEngine,
    x: &DMatrix<f64>,
    y: &[f64],
    n_total: usize,
) -> Result<ElboValue> {
    let fwd = forward(model, state, engine, x, y, n_total)?;
    let scale = n_total as f64 / x.nrows() as f64;
    let data: f64 = (0..x.nrows())
        .map(|i| {
            engine
                .expected_log_lik(y[i], fwd.mean[i], fwd.var[i], fwd.log_noise)
                .value
        })
        .sum();
    let kl = kl_with(&fwd.lam, state);
    let data_term = scale * data;
    Ok(ElboValue {
        elbo: data_term - kl,
        data_term,
        kl,
    })
}

/// ELBO and its exact gradient with respect to every parameter.
pub fn elbo_gradients(
    model: &InducingModel,
    state: &VariationalState,
    engine: &ExpectationEngine,
    x: &DMatrix<f64>,
    y: &[f64],
    n_total: usize,
) -> Result<(ElboValue, ElboGradients)> {
    let fwd = forward(model, state, engine, x, y, n_total)?;
    let n = x.nrows();
    let m_feat = model.num_features();
    let scale = n_total as f64 / n as f64;

    let mut data = 0.0;
    let mut g_mu = DVector::zeros(n);
    let mut g_var = DVector::zeros(n);
    let mut g_log_noise = 0.0;
    for i in 0..n {
        let e = engine.expected_log_lik(y[i], fwd.mean[i], fwd.var[i], fwd.log_noise);
        data += e.value;
        g_mu[i] = scale * e.d_mean;
        g_var[i] = scale * e.d_var;
        g_log_noise += scale * e.d_log_noise;
    }
    let kl = kl_with(&fwd.lam, state);
    let value = ElboValue {
        elbo: scale * data - kl,
        data_term: scale * data,
        kl,
    };

    let lam = &fwd.lam;
    let l = &state.cov_factor;
    let m = &state.mean;

    // Mean: Aᵀ g_μ − λ̃ ∘ m.
    let g_mean = fwd.a.transpose() * &g_mu - lam.component_mul(m);

    // Covariance factor: 2 Aᵀ diag(g_v) B − diag(λ̃) L + diag(1 / L_jj).
    let mut scaled_b = fwd.b.clone();
    for (i, mut row) in scaled_b.row_iter_mut().enumerate() {
        row *= g_var[i];
    }
    let mut g_l = 2.0 * fwd.a.transpose() * &scaled_b;
    for j in 0..m_feat {
        for k in 0..m_feat {
            if k > j {
                g_l[(j, k)] = 0.0;
            } else {
                g_l[(j, k)] -= lam[j] * l[(j, k)];
            }
        }
        g_l[(j, j)] = (g_l[(j, j)] + 1.0 / l[(j, j)]) * l[(j, j)];
    }

    // C = A S = B Lᵀ.
    let c = &fwd.b * l.transpose();
    let phi = &fwd.phi;

    // Per-feature eigenvalue gradient.
    let mut g_lam = DVector::zeros(m_feat);
    for j in 0..m_feat {
        let mut acc = 0.0;
        for i in 0..n {
            let p = phi[(i, j)];
            acc += g_mu[i] * p * m[j] + g_var[i] * (2.0 * p * c[(i, j)] - p * p);
        }
        let s_jj: f64 = (0..=j).map(|k| l[(j, k)] * l[(j, k)]).sum();
        g_lam[j] = acc - 0.5 * (s_jj + m[j] * m[j] - 1.0 / lam[j]);
    }
    let freqs = model.basis().feature_frequencies();
    let weights = model.diag_kernel_weights();
    let total_g_var = g_var.sum();
    let mut g_big = weights
        .iter()
        .map(|w| w * total_g_var)
        .collect::<Vec<f64>>();
    for (j, &ell) in freqs.iter().enumerate() {
        g_big[ell] += g_lam[j];
    }
    let big_lam = model.effective_eigenvalues(&state.hyper)?;
    let g_log_variance: f64 = g_big.iter().zip(&big_lam).map(|(g, v)| g * v).sum();
    let g_log_beta = match state.hyper.log_beta {
        Some(_) => {
            let dl = model.eigenvalue_log_beta_derivatives(&state.hyper)?;
            let var = state.hyper.variance();
            Some(g_big.iter().zip(&dl).map(|(g, d)| g * var * d).sum())
        }
        None => None,
    };

    // Phase directions through the feature matrix.
    let offsets = model.basis().block_offsets();
    let phases = model
        .basis()
        .sets()
        .iter()
        .enumerate()
        .map(|(k, set)| {
            if !set.is_trainable() || set.phases() == 0 {
                return DMatrix::zeros(0, model.dimension());
            }
            let off = offsets[k + 1];
            let width = set.phases();
            let mut grad_phi = DMatrix::zeros(n, width);
            for jj in 0..width {
                let j = off + jj;
                for i in 0..n {
                    grad_phi[(i, jj)] =
                        lam[j] * (g_mu[i] * m[j] + 2.0 * g_var[i] * (c[(i, j)] - phi[(i, j)]));
                }
            }
            let block = phi.columns(off, width).clone_owned();
            set.backprop_directions(x, &block, &grad_phi)
        })
        .collect();

    Ok((
        value,
        ElboGradients {
            mean: g_mean,
            cov_factor: g_l,
            log_beta: g_log_beta,
            log_variance: g_log_variance,
            log_noise: state.hyper.log_noise.map(|_| g_log_noise),
            phases,
        },
    ))
}

/// Which optimizer group a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Variational,
    Hyper,
    Phase,
}

/// One trainable scalar.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamId {
    Mean(usize),
    /// `L_ij` for `i > j`, `ln L_jj` for `i == j`.
    CovFactor(usize, usize),
    LogBeta,
    LogVariance,
    LogNoise,
    /// Entry `(row, col)` of the directions of fundamental set `set`
    /// (frequency `set + 1`).
    Phase {
        set: usize,
        row: usize,
        col: usize,
    },
}

impl ParamId {
    pub fn group(&self) -> ParamGroup {
        match self {
            ParamId::Mean(_) | ParamId::CovFactor(..) => ParamGroup::Variational,
            ParamId::LogBeta | ParamId::LogVariance | ParamId::LogNoise => ParamGroup::Hyper,
            ParamId::Phase { .. } => ParamGroup::Phase,
        }
    }

    pub fn name(&self) -> String {
        match self {
            ParamId::Mean(j) => format!("mean[{j}]"),
            ParamId::CovFactor(i, j) if i == j => format!("log_cov_factor[{i},{j}]"),
            ParamId::CovFactor(i, j) => format!("cov_factor[{i},{j}]"),
            ParamId::LogBeta => "log_beta".into(),
            ParamId::LogVariance => "log_variance".into(),
            ParamId::LogNoise => "log_noise".into(),
            ParamId::Phase { set, row, col } => format!("phase[l={}][{row},{col}]", set + 1),
        }
    }
}

/// Flat ordering of every trainable scalar of a model/state pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamLayout {
    ids: Vec<ParamId>,
}

impl ParamLayout {
    pub fn new(model: &InducingModel, state: &VariationalState) -> Self {
        let m = model.num_features();
        let mut ids: Vec<ParamId> = (0..m).map(ParamId::Mean).collect();
        for i in 0..m {
            for j in 0..=i {
                ids.push(ParamId::CovFactor(i, j));
            }
        }
        if state.hyper.log_beta.is_some() {
            ids.push(ParamId::LogBeta);
        }
        ids.push(ParamId::LogVariance);
        if state.hyper.log_noise.is_some() {
            ids.push(ParamId::LogNoise);
        }
        for (k, set) in model.basis().sets().iter().enumerate() {
            if set.is_trainable() {
                for row in 0..set.phases() {
                    for col in 0..set.dimension() {
                        ids.push(ParamId::Phase { set: k, row, col });
                    }
                }
            }
        }
        Self { ids }
    }

    pub fn ids(&self) -> &[ParamId] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn pack(&self, model: &InducingModel, state: &VariationalState) -> DVector<f64> {
        DVector::from_iterator(
            self.ids.len(),
            self.ids.iter().map(|id| match *id {
                ParamId::Mean(j) => state.mean[j],
                ParamId::CovFactor(i, j) if i == j => state.cov_factor[(i, i)].ln(),
                ParamId::CovFactor(i, j) => state.cov_factor[(i, j)],
                ParamId::LogBeta => state.hyper.log_beta.unwrap_or(f64::NAN),
                ParamId::LogVariance => state.hyper.log_variance,
                ParamId::LogNoise => state.hyper.log_noise.unwrap_or(f64::NAN),
                ParamId::Phase { set, row, col } => {
                    model.basis().sets()[set].directions()[(row, col)]
                }
            }),
        )
    }

    pub fn pack_gradients(&self, grads: &ElboGradients) -> DVector<f64> {
        DVector::from_iterator(
            self.ids.len(),
            self.ids.iter().map(|id| match *id {
                ParamId::Mean(j) => grads.mean[j],
                ParamId::CovFactor(i, j) => grads.cov_factor[(i, j)],
                ParamId::LogBeta => grads.log_beta.unwrap_or(0.0),
                ParamId::LogVariance => grads.log_variance,
                ParamId::LogNoise => grads.log_noise.unwrap_or(0.0),
                ParamId::Phase { set, row, col } => grads.phases[set][(row, col)],
            }),
        )
    }

    /// Write `values` back. Touched fundamental sets are renormalized and
    /// refactored.
    pub fn unpack(
        &self,
        values: &DVector<f64>,
        model: &mut InducingModel,
        state: &mut VariationalState,
    ) -> Result<()> {
        if values.len() != self.ids.len() {
            return Err(Error::DimensionMismatch {
                expected: self.ids.len(),
                actual: values.len(),
            });
        }
        let mut touched = vec![false; model.basis().sets().len()];
        for (id, &v) in self.ids.iter().zip(values.iter()) {
            match *id {
                ParamId::Mean(j) => state.mean[j] = v,
                ParamId::CovFactor(i, j) if i == j => state.cov_factor[(i, i)] = v.exp(),
                ParamId::CovFactor(i, j) => state.cov_factor[(i, j)] = v,
                ParamId::LogBeta => state.hyper.log_beta = Some(v),
                ParamId::LogVariance => state.hyper.log_variance = v,
                ParamId::LogNoise => state.hyper.log_noise = Some(v),
                ParamId::Phase { set, row, col } => {
                    model.basis_mut().sets_mut()[set].directions_mut()[(row, col)] = v;
                    touched[set] = true;
                }
            }
        }
        for (k, t) in touched.into_iter().enumerate() {
            if t {
                model.basis_mut().sets_mut()[k].refactor()?;
            }
        }
        Ok(())
    }
}
