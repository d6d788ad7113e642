//! Inducing model, variational state, prior/posterior covariances.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harmonics::{
    addition_scale, points_matrix, HarmonicBasis, PhaseTruncation, SpherePoint,
};
use crate::kernels::{Spectrum, SpectrumSource, EIGENVALUE_CLAMP};
use crate::special_math::gegenbauer_at_one;

/// Relative eigenvalue size treated as an exact zero when choosing features.
pub const NEGLIGIBLE_EIGENVALUE: f64 = 1e-13;

/// Trainable kernel and likelihood hyper-parameters, all in log space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    /// `ln β` for power-law spectra; `None` for fixed (quadrature) spectra.
    pub log_beta: Option<f64>,
    /// `ln σ²`, the radial variance.
    pub log_variance: f64,
    /// `ln σ_n²` for Gaussian likelihoods.
    pub log_noise: Option<f64>,
}

impl Hyper {
    pub fn beta(&self) -> Option<f64> {
        self.log_beta.map(f64::exp)
    }

    pub fn variance(&self) -> f64 {
        self.log_variance.exp()
    }

    pub fn noise(&self) -> Option<f64> {
        self.log_noise.map(f64::exp)
    }
}

/// Harmonic basis plus the spectrum that weights it.
///
/// The prior covariance of the inducing variables is diagonal,
/// `K_uu = diag(1 / (σ² λ_ℓ(j)))`, and is only ever stored as that diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct InducingModel {
    basis: HarmonicBasis,
    spectrum: Spectrum,
}

impl InducingModel {
    pub fn new(basis: HarmonicBasis, spectrum: Spectrum) -> Result<Self> {
        if basis.dimension() != spectrum.dimension() {
            return Err(Error::DimensionMismatch {
                expected: spectrum.dimension(),
                actual: basis.dimension(),
            });
        }
        if basis.max_frequency() != spectrum.max_frequency() {
            return Err(Error::InvalidArgument(format!(
                "basis covers frequencies 0..={} but spectrum covers 0..={}",
                basis.max_frequency(),
                spectrum.max_frequency()
            )));
        }
        for (ell, &count) in basis.phase_counts().iter().enumerate() {
            if count > 0 && !(spectrum.eigenvalue(ell) > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "frequency {ell} has λ = {} but carries {count} features",
                    spectrum.eigenvalue(ell)
                )));
            }
        }
        Ok(Self { basis, spectrum })
    }

    /// Build a basis matched to `spectrum`. Frequencies whose eigenvalue is
    /// zero up to quadrature noise (`≤ NEGLIGIBLE_EIGENVALUE · max λ`) get no
    /// features.
    pub fn for_spectrum(
        spectrum: Spectrum,
        truncation: PhaseTruncation,
        seed: u64,
    ) -> Result<Self> {
        let cutoff =
            NEGLIGIBLE_EIGENVALUE * spectrum.eigenvalues().iter().cloned().fold(0.0, f64::max);
        let zeros: Vec<usize> = spectrum
            .eigenvalues()
            .iter()
            .enumerate()
            .skip(1)
            .filter(|(_, &v)| v <= cutoff)
            .map(|(l, _)| l)
            .collect();
        let counts = HarmonicBasis::truncated_counts(
            spectrum.dimension(),
            spectrum.max_frequency(),
            truncation,
            &zeros,
        )?;
        let basis = HarmonicBasis::build_with_phase_counts(spectrum.dimension(), &counts, seed)?;
        Self::new(basis, spectrum)
    }

    pub fn basis(&self) -> &HarmonicBasis {
        &self.basis
    }

    pub fn basis_mut(&mut self) -> &mut HarmonicBasis {
        &mut self.basis
    }

    /// Spectrum as constructed (initial hyper-parameters).
    pub fn base_spectrum(&self) -> &Spectrum {
        &self.spectrum
    }

    pub fn dimension(&self) -> usize {
        self.basis.dimension()
    }

    pub fn num_features(&self) -> usize {
        self.basis.total_features()
    }

    /// Hyper-parameters matching the stored spectrum.
    pub fn initial_hyper(&self, noise: Option<f64>) -> Hyper {
        Hyper {
            log_beta: self.spectrum.beta().map(f64::ln),
            log_variance: self.spectrum.radial_variance().ln(),
            log_noise: noise.map(f64::ln),
        }
    }

    fn check_hyper(&self, hyper: &Hyper) -> Result<()> {
        match (self.spectrum.source(), hyper.log_beta) {
            (SpectrumSource::PolyDecay { .. }, None) => Err(Error::InvalidArgument(
                "power-law spectrum needs a β hyper-parameter".into(),
            )),
            (SpectrumSource::FunkHecke { .. }, Some(_)) => Err(Error::InvalidArgument(
                "quadrature spectra have no β hyper-parameter".into(),
            )),
            _ => Ok(()),
        }
    }

    /// Raw eigenvalues `λ_ℓ(β)` under `hyper`.
    pub fn frequency_eigenvalues(&self, hyper: &Hyper) -> Result<Vec<f64>> {
        self.check_hyper(hyper)?;
        Ok(match (self.spectrum.source(), hyper.log_beta) {
            (SpectrumSource::PolyDecay { lambda0, .. }, Some(log_beta)) => {
                let beta = log_beta.exp();
                std::iter::once(*lambda0)
                    .chain((1..=self.spectrum.max_frequency()).map(|l| (l as f64).powf(-beta)))
                    .collect()
            }
            _ => self.spectrum.eigenvalues().to_vec(),
        })
    }

    /// `∂λ_ℓ / ∂ ln β`; zero for fixed spectra.
    pub(crate) fn eigenvalue_log_beta_derivatives(&self, hyper: &Hyper) -> Result<Vec<f64>> {
        let lam = self.frequency_eigenvalues(hyper)?;
        Ok(match hyper.log_beta {
            Some(log_beta) => {
                let beta = log_beta.exp();
                lam.iter()
                    .enumerate()
                    .map(|(l, v)| {
                        if l == 0 {
                            0.0
                        } else {
                            -beta * (l as f64).ln() * v
                        }
                    })
                    .collect()
            }
            None => vec![0.0; lam.len()],
        })
    }

    /// `σ² λ_ℓ(β)` per frequency.
    pub fn effective_eigenvalues(&self, hyper: &Hyper) -> Result<Vec<f64>> {
        let variance = hyper.variance();
        Ok(self
            .frequency_eigenvalues(hyper)?
            .into_iter()
            .map(|v| variance * v)
            .collect())
    }

    /// Raw `λ_ℓ(j)` for every feature `j`.
    pub fn lambda_per_feature(&self, hyper: &Hyper) -> Result<DVector<f64>> {
        let lam = self.frequency_eigenvalues(hyper)?;
        Ok(DVector::from_iterator(
            self.num_features(),
            self.basis.feature_frequencies().into_iter().map(|l| lam[l]),
        ))
    }

    /// `σ² λ_ℓ(j)` for every feature `j`.
    pub fn effective_lambda_per_feature(&self, hyper: &Hyper) -> Result<DVector<f64>> {
        Ok(self.lambda_per_feature(hyper)? * hyper.variance())
    }

    /// Spectrum with the current hyper-parameters applied.
    pub fn spectrum_for(&self, hyper: &Hyper) -> Result<Spectrum> {
        let eigenvalues = self.frequency_eigenvalues(hyper)?;
        let source = match (self.spectrum.source(), hyper.log_beta) {
            (SpectrumSource::PolyDecay { lambda0, .. }, Some(lb)) => SpectrumSource::PolyDecay {
                beta: lb.exp(),
                lambda0: *lambda0,
            },
            (s, _) => s.clone(),
        };
        Spectrum::from_eigenvalues(self.dimension(), eigenvalues, source, hyper.variance())
    }

    /// `∂k(x,x)/∂(σ²λ_ℓ)` per frequency, i.e. `((ℓ+α)/α) C_ℓ(1)`.
    pub(crate) fn diag_kernel_weights(&self) -> Vec<f64> {
        let alpha = self.basis.alpha();
        (0..=self.basis.max_frequency())
            .map(|l| {
                addition_scale(alpha, l) * gegenbauer_at_one(self.dimension(), l).expect("d >= 3")
            })
            .collect()
    }

    /// Prior variance `k(x, x)`, constant on the sphere.
    pub fn prior_variance(&self, hyper: &Hyper) -> Result<f64> {
        Ok(self.spectrum_for(hyper)?.kernel_value(1.0))
    }

    /// Covariance between `f(x)` and every inducing variable: the features.
    pub fn kuf(&self, x: &SpherePoint) -> Result<DVector<f64>> {
        self.basis.features(x)
    }

    /// Diagonal of `K_uu`: `1 / (σ² λ_ℓ(j))`.
    pub fn kuu_diag(&self, hyper: &Hyper) -> Result<DVector<f64>> {
        let lam = self.effective_lambda_per_feature(hyper)?;
        if let Some(j) = lam.iter().position(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "feature {j} has non-positive eigenvalue {}",
                lam[j]
            )));
        }
        Ok(lam.map(|v| 1.0 / v))
    }
}

/// Gaussian `q(u) = N(m, S)` with `S = L Lᵀ`, plus hyper-parameters.
///
/// The diagonal of `L` is kept positive; optimizers see its logarithm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationalState {
    pub mean: DVector<f64>,
    pub cov_factor: DMatrix<f64>,
    pub hyper: Hyper,
}

impl VariationalState {
    /// `q(u) = p(u)`: zero mean, `S = K_uu`.
    pub fn prior(model: &InducingModel, hyper: Hyper) -> Result<Self> {
        let kuu = model.kuu_diag(&hyper)?;
        Ok(Self {
            mean: DVector::zeros(kuu.len()),
            cov_factor: DMatrix::from_diagonal(&kuu.map(f64::sqrt)),
            hyper,
        })
    }

    pub fn num_features(&self) -> usize {
        self.mean.len()
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        &self.cov_factor * self.cov_factor.transpose()
    }

    pub(crate) fn check(&self, model: &InducingModel) -> Result<()> {
        let m = model.num_features();
        if self.mean.len() != m {
            return Err(Error::DimensionMismatch {
                expected: m,
                actual: self.mean.len(),
            });
        }
        if self.cov_factor.nrows() != m || self.cov_factor.ncols() != m {
            return Err(Error::DimensionMismatch {
                expected: m,
                actual: self.cov_factor.nrows(),
            });
        }
        if let Some(j) = (0..m).find(|&j| !(self.cov_factor[(j, j)] > 0.0)) {
            return Err(Error::NotPositiveDefinite(format!(
                "covariance factor diagonal entry {j} is {}",
                self.cov_factor[(j, j)]
            )));
        }
        for i in 0..m {
            for j in (i + 1)..m {
                if self.cov_factor[(i, j)] != 0.0 {
                    return Err(Error::InvalidArgument(
                        "covariance factor must be lower triangular".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// `KL[q(u) ‖ p(u)]` with `p(u) = N(0, diag(1/λ̃))`:
/// `½(Σ λ̃_j S_jj + Σ λ̃_j m_j² − M − log det S − Σ log λ̃_j)`.
pub fn kl_term(model: &InducingModel, state: &VariationalState) -> Result<f64> {
    state.check(model)?;
    let lam = model.effective_lambda_per_feature(&state.hyper)?;
    Ok(kl_with(&lam, state))
}

pub(crate) fn kl_with(lam: &DVector<f64>, state: &VariationalState) -> f64 {
    let m = lam.len();
    let l = &state.cov_factor;
    let mut trace = 0.0;
    let mut quad = 0.0;
    let mut logdet = 0.0;
    let mut log_prior_prec = 0.0;
    for j in 0..m {
        let s_jj: f64 = (0..=j).map(|k| l[(j, k)] * l[(j, k)]).sum();
        trace += lam[j] * s_jj;
        quad += lam[j] * state.mean[j] * state.mean[j];
        logdet += 2.0 * l[(j, j)].ln();
        log_prior_prec += lam[j].ln();
    }
    0.5 * (trace + quad - m as f64 - logdet - log_prior_prec)
}

/// Predictive moments of the latent function.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub mean: DVector<f64>,
    pub variance: DVector<f64>,
    pub covariance: Option<DMatrix<f64>>,
}

fn clamp_variance(index: usize, v: f64) -> Result<f64> {
    if v >= 0.0 {
        Ok(v)
    } else if v >= -EIGENVALUE_CLAMP {
        Ok(0.0)
    } else {
        Err(Error::IndefiniteCovariance { index, value: v })
    }
}

/// Posterior `q(f)`: mean `Φᵀm`, covariance `k + Φᵀ(S − K_uu)Φ` with
/// `Φ = {σ²λ_ℓ φ_ℓ^m}`.
pub fn predict(
    model: &InducingModel,
    state: &VariationalState,
    points: &[SpherePoint],
    full_cov: bool,
) -> Result<Prediction> {
    state.check(model)?;
    let x = points_matrix(points, model.dimension())?;
    predict_matrix(model, state, &x, full_cov)
}

pub(crate) fn predict_matrix(
    model: &InducingModel,
    state: &VariationalState,
    x: &DMatrix<f64>,
    full_cov: bool,
) -> Result<Prediction> {
    let lam = model.effective_lambda_per_feature(&state.hyper)?;
    let spectrum = model.spectrum_for(&state.hyper)?;
    let phi = model.basis().feature_matrix_from(x);
    let mut a = phi.clone();
    for (j, mut col) in a.column_iter_mut().enumerate() {
        col *= lam[j];
    }
    let mean = &a * &state.mean;
    let b = &a * &state.cov_factor;
    let prior_diag = spectrum.kernel_value(1.0);
    let n = x.nrows();
    let mut variance = DVector::zeros(n);
    for i in 0..n {
        let explained: f64 = (0..lam.len())
            .map(|j| lam[j] * phi[(i, j)] * phi[(i, j)])
            .sum();
        let v = prior_diag - explained + b.row(i).norm_squared();
        variance[i] = clamp_variance(i, v)?;
    }
    let covariance = if full_cov {
        let mut k = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let t: f64 = x.row(i).dot(&x.row(j));
                let v = spectrum.kernel_value(t);
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
        }
        let explained = &a * phi.transpose();
        let mut cov = k - explained + &b * b.transpose();
        for i in 0..n {
            cov[(i, i)] = clamp_variance(i, cov[(i, i)])?;
        }
        Some(cov)
    } else {
        None
    };
    Ok(Prediction {
        mean,
        variance,
        covariance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{
        compose_shape, funk_hecke_spectrum, mercer_eval, poly_decay_spectrum, ShapeFunction,
    };
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn poly_model(d: usize, lmax: usize, trunc: PhaseTruncation) -> InducingModel {
        let spec = poly_decay_spectrum(2.0, d, lmax).unwrap();
        InducingModel::for_spectrum(spec, trunc, 3).unwrap()
    }

    #[test]
    fn kuu_diagonal_is_reciprocal_power_law() {
        let model = poly_model(3, 2, PhaseTruncation::Full);
        let hyper = model.initial_hyper(None);
        let kuu = model.kuu_diag(&hyper).unwrap();
        assert_eq!(kuu.len(), 9);
        assert_eq!(kuu[0], 1.0);
        assert!((1..4).all(|j| kuu[j] == 1.0));
        assert!((4..9).all(|j| kuu[j] == 4.0));
        // σ² scaling.
        let scaled = Hyper {
            log_variance: 3f64.ln(),
            ..hyper
        };
        let kuu3 = model.kuu_diag(&scaled).unwrap();
        for j in 0..9 {
            assert_relative_eq!(kuu3[j], kuu[j] / 3.0, max_relative = 1e-15);
        }
    }

    #[test]
    fn zero_eigenvalue_frequencies_carry_no_features() {
        let spec = funk_hecke_spectrum(&ShapeFunction::ReluArccos, 3, 5, 64).unwrap();
        let model = InducingModel::for_spectrum(spec.clone(), PhaseTruncation::Full, 1).unwrap();
        assert_eq!(model.basis().phase_counts(), vec![1, 3, 5, 0, 9, 0]);
        let full = HarmonicBasis::build(3, 5, PhaseTruncation::Full, 1).unwrap();
        assert!(InducingModel::new(full, spec).is_err());
    }

    #[test]
    fn kuf_is_independent_of_eigenvalues() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let x = SpherePoint::random(4, &mut r);
        let a = poly_model(4, 3, PhaseTruncation::Full);
        let spec = poly_decay_spectrum(0.7, 4, 3)
            .unwrap()
            .with_radial_variance(5.0)
            .unwrap();
        let b = InducingModel::new(a.basis().clone(), spec).unwrap();
        assert_eq!(a.kuf(&x).unwrap(), b.kuf(&x).unwrap());
        assert_eq!(a.kuf(&x).unwrap()[0], 1.0);
    }

    #[test]
    fn mercer_identity_through_features() {
        let spec = funk_hecke_spectrum(
            &compose_shape(ShapeFunction::ReluArccos, 2).unwrap(),
            4,
            4,
            64,
        )
        .unwrap()
        .with_radial_variance(1.7)
        .unwrap();
        let model = InducingModel::for_spectrum(spec.clone(), PhaseTruncation::Full, 2).unwrap();
        let hyper = model.initial_hyper(None);
        let lam = model.lambda_per_feature(&hyper).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let x = SpherePoint::random(4, &mut r);
            let y = SpherePoint::random(4, &mut r);
            let fx = model.kuf(&x).unwrap();
            let fy = model.kuf(&y).unwrap();
            let via_features: f64 = (0..lam.len()).map(|j| lam[j] * fx[j] * fy[j]).sum();
            assert_relative_eq!(
                1.7 * via_features,
                mercer_eval(&spec, &x, &y).unwrap(),
                max_relative = 1e-10
            );
            let self_term: f64 = (0..lam.len()).map(|j| lam[j] * fx[j] * fx[j]).sum();
            assert_relative_eq!(
                self_term,
                mercer_eval(&spec, &x, &x).unwrap() / 1.7,
                max_relative = 1e-10
            );
        }
    }

    #[test]
    fn prior_state_recovers_prior() {
        let model = poly_model(4, 3, PhaseTruncation::AtMost(5));
        let hyper = Hyper {
            log_variance: 0.4,
            ..model.initial_hyper(None)
        };
        let state = VariationalState::prior(&model, hyper).unwrap();
        assert!(kl_term(&model, &state).unwrap().abs() <= 1e-12);
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let pts: Vec<SpherePoint> = (0..12).map(|_| SpherePoint::random(4, &mut r)).collect();
        let pred = predict(&model, &state, &pts, true).unwrap();
        let spec = model.spectrum_for(&state.hyper).unwrap();
        let cov = pred.covariance.unwrap();
        for i in 0..12 {
            assert!(pred.mean[i].abs() <= 1e-15);
            for j in 0..12 {
                let k = mercer_eval(&spec, &pts[i], &pts[j]).unwrap();
                assert!((cov[(i, j)] - k).abs() <= 1e-10, "{} vs {k}", cov[(i, j)]);
            }
            assert_relative_eq!(pred.variance[i], cov[(i, i)], max_relative = 1e-12);
        }
    }

    #[test]
    fn kl_examples() {
        // One feature with λ = 1, m = 1, S = 1.
        let spec = Spectrum::from_eigenvalues(
            3,
            vec![1.0],
            SpectrumSource::PolyDecay {
                beta: 1.0,
                lambda0: 1.0,
            },
            1.0,
        )
        .unwrap();
        let model = InducingModel::new(
            HarmonicBasis::build(3, 0, PhaseTruncation::Full, 0).unwrap(),
            spec,
        )
        .unwrap();
        let state = VariationalState {
            mean: DVector::from_element(1, 1.0),
            cov_factor: DMatrix::from_element(1, 1, 1.0),
            hyper: model.initial_hyper(None),
        };
        assert_relative_eq!(kl_term(&model, &state).unwrap(), 0.5, epsilon = 1e-15);
    }

    /// Dense Gaussian KL: ½(tr(Σ₁⁻¹Σ₀) + μᵀΣ₁⁻¹μ − k + ln det Σ₁ − ln det Σ₀).
    fn dense_kl(mean: &DVector<f64>, s: &DMatrix<f64>, prior: &DMatrix<f64>) -> f64 {
        let k = mean.len() as f64;
        let pinv = prior.clone().try_inverse().unwrap();
        0.5 * ((&pinv * s).trace() + (mean.transpose() * &pinv * mean)[(0, 0)] - k
            + prior.determinant().ln()
            - s.determinant().ln())
    }

    #[test]
    fn kl_matches_dense_formula() {
        let model = poly_model(3, 1, PhaseTruncation::Full);
        let mut r = ChaCha8Rng::seed_from_u64(4);
        for trial in 0..20 {
            let hyper = Hyper {
                log_beta: Some(0.3 * trial as f64 - 2.0),
                log_variance: 0.1 * trial as f64 - 1.0,
                log_noise: None,
            };
            let mut state = VariationalState::prior(&model, hyper).unwrap();
            for i in 0..4 {
                state.mean[i] = {
                    let z: f64 = StandardNormal.sample(&mut r);
                    z
                };
                for j in 0..i {
                    state.cov_factor[(i, j)] = 0.5 * {
                        let z: f64 = StandardNormal.sample(&mut r);
                        z
                    };
                }
                state.cov_factor[(i, i)] = (0.5 * {
                    let z: f64 = StandardNormal.sample(&mut r);
                    z
                })
                .exp();
            }
            let kuu = model.kuu_diag(&state.hyper).unwrap();
            let dense = dense_kl(
                &state.mean,
                &state.covariance(),
                &DMatrix::from_diagonal(&kuu),
            );
            let kl = kl_term(&model, &state).unwrap();
            assert!(
                (kl - dense).abs() <= 1e-10 * dense.abs().max(1.0),
                "{kl} vs {dense}"
            );
            assert!(kl >= 0.0);
        }
    }

    #[test]
    fn shrunken_covariance_shrinks_predictive_variance() {
        let model = poly_model(4, 3, PhaseTruncation::Full);
        let hyper = model.initial_hyper(None);
        let prior = VariationalState::prior(&model, hyper).unwrap();
        let mut shrunk = prior.clone();
        shrunk.cov_factor *= 0.6;
        let mut r = ChaCha8Rng::seed_from_u64(8);
        let pts: Vec<SpherePoint> = (0..30).map(|_| SpherePoint::random(4, &mut r)).collect();
        let p0 = predict(&model, &prior, &pts, false).unwrap();
        let p1 = predict(&model, &shrunk, &pts, false).unwrap();
        for i in 0..30 {
            assert!(p1.variance[i] <= p0.variance[i] + 1e-12);
            assert!(p1.variance[i] >= 0.0);
        }
    }

    #[test]
    fn state_shape_checks() {
        let model = poly_model(3, 1, PhaseTruncation::Full);
        let mut state = VariationalState::prior(&model, model.initial_hyper(None)).unwrap();
        state.mean = DVector::zeros(3);
        assert!(predict(&model, &state, &[], false).is_err());
        let mut state = VariationalState::prior(&model, model.initial_hyper(None)).unwrap();
        state.cov_factor[(0, 0)] = 0.0;
        assert!(kl_term(&model, &state).is_err());
        let wrong_hyper = Hyper {
            log_beta: None,
            log_variance: 0.0,
            log_noise: None,
        };
        assert!(model.kuu_diag(&wrong_hyper).is_err());
    }
}
