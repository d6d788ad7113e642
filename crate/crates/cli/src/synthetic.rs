//! Synthetic datasets drawn from a truncated power-law prior.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sphgp_core::data_io::{project_rows, Dataset, Task};
use sphgp_core::harmonics::{HarmonicBasis, PhaseTruncation};
use sphgp_core::kernels::poly_decay_spectrum;
use sphgp_core::{Error, Result};

/// Settings for [`generate`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub task: Task,
    pub rows: usize,
    /// Raw input columns; the sphere dimension is one more.
    pub features: usize,
    pub beta: f64,
    pub max_frequency: usize,
    pub noise_std: f64,
    pub bias: f64,
    pub seed: u64,
}

/// Draw `f = Σ_j √λ_ℓ(j) w_j φ_j` with a full harmonic basis, so `f` has the
/// power-law kernel as covariance, evaluated at Gaussian raw inputs mapped to
/// the sphere.
///
/// Regression targets are `f + noise`; binary labels are `1[f + noise > 0]`.
pub fn generate(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.features < 2 {
        return Err(Error::Config(
            "synthetic data needs at least 2 features".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
    let raw = DMatrix::from_fn(spec.rows, spec.features, |_, _| normal());
    let names: Vec<String> = (1..=spec.features).map(|j| format!("x{j}")).collect();
    let placeholder = Dataset::new(names.clone(), raw.clone(), vec![0.0; spec.rows], spec.task)?;
    let sphere = project_rows(&placeholder, spec.bias)?;
    let d = sphere.dimension();

    let spectrum = poly_decay_spectrum(spec.beta, d, spec.max_frequency)?;
    let basis = HarmonicBasis::build(
        d,
        spec.max_frequency,
        PhaseTruncation::Full,
        spec.seed ^ 0x5EED,
    )?;
    let scale: DVector<f64> = DVector::from_iterator(
        basis.total_features(),
        basis
            .feature_frequencies()
            .iter()
            .map(|&l| spectrum.eigenvalue(l).sqrt()),
    );
    let weights = scale.component_mul(&DVector::from_fn(basis.total_features(), |_, _| normal()));
    let latent = basis.feature_matrix_from(&sphere.x) * weights;
    let targets = latent
        .iter()
        .map(|&f| {
            let y = f + spec.noise_std * normal();
            match spec.task {
                Task::Regression => y,
                Task::Binary => f64::from(y > 0.0),
            }
        })
        .collect();
    Dataset::new(names, raw, targets, spec.task)
}

/// Write a dataset as CSV with its feature names and a `y` target column.
pub fn write_csv(data: &Dataset, path: &std::path::Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = data.feature_names.clone();
    header.push("y".into());
    w.write_record(&header)?;
    for i in 0..data.len() {
        let mut rec: Vec<String> = data
            .inputs
            .row(i)
            .iter()
            .map(|v| format!("{v:e}"))
            .collect();
        rec.push(format!("{}", data.targets[i]));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
