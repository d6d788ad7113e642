//! Spherical-harmonic feature bases built from fundamental point sets.
//!
//! A frequency-`ℓ` block is spanned by the zonal functions
//! `x ↦ ((ℓ+α)/α) C_ℓ^{(α)}(vᵢᵀx)` for phase directions `vᵢ`. Whitening these
//! by the Cholesky factor of their Gram matrix
//! `A_ℓ = ((ℓ+α)/α) C_ℓ^{(α)}(V Vᵀ)` gives features that are orthonormal
//! under the uniform probability measure on the sphere. With a complete
//! set of `N(ℓ,d)` directions they reproduce the addition theorem exactly;
//! with fewer (phase truncation) they span an orthonormal subspace.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::special_math::{
    alpha_for_dimension, gegenbauer_unchecked, gegenbauer_with_derivative, num_harmonics,
};

/// Tolerance on `‖x‖₂ = 1` for points and directions.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-12;
/// Largest Gram condition number accepted when building a set.
pub const MAX_BUILD_CONDITION: f64 = 1e8;
/// Above this condition number `reorthogonalize` adds diagonal jitter.
pub const MAX_REORTH_CONDITION: f64 = 1e10;
const BUILD_ATTEMPTS: usize = 8;
const JITTER_LADDER: [f64; 7] = [1e-10, 1e-9, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4];

/// A point on the unit sphere `S^{d-1}` together with the norm the raw
/// vector had before projection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpherePoint {
    coords: Vec<f64>,
    stored_norm: f64,
}

impl SpherePoint {
    /// Project a non-zero vector onto the sphere.
    pub fn from_vector(raw: &[f64]) -> Result<Self> {
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::Domain(format!(
                "cannot project vector with norm {norm} onto the sphere"
            )));
        }
        Ok(Self {
            coords: raw.iter().map(|v| v / norm).collect(),
            stored_norm: norm,
        })
    }

    /// Wrap coordinates that are already unit norm.
    pub fn from_unit(coords: Vec<f64>) -> Result<Self> {
        let norm = coords.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
            return Err(Error::Domain(format!("point has norm {norm}, expected 1")));
        }
        Ok(Self {
            coords,
            stored_norm: 1.0,
        })
    }

    /// Uniformly distributed random point.
    pub fn random<R: Rng + ?Sized>(dimension: usize, rng: &mut R) -> Self {
        loop {
            let raw: Vec<f64> = (0..dimension).map(|_| rng.sample(StandardNormal)).collect();
            if let Ok(p) = Self::from_vector(&raw) {
                return Self {
                    coords: p.coords,
                    stored_norm: 1.0,
                };
            }
        }
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn stored_norm(&self) -> f64 {
        self.stored_norm
    }

    pub fn dimension(&self) -> usize {
        self.coords.len()
    }

    pub fn dot(&self, other: &SpherePoint) -> f64 {
        dot(&self.coords, &other.coords)
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Stack points into an `n × d` matrix.
pub fn points_matrix(points: &[SpherePoint], dimension: usize) -> Result<DMatrix<f64>> {
    let mut out = DMatrix::zeros(points.len(), dimension);
    for (i, p) in points.iter().enumerate() {
        if p.dimension() != dimension {
            return Err(Error::DimensionMismatch {
                expected: dimension,
                actual: p.dimension(),
            });
        }
        for (j, v) in p.coords.iter().enumerate() {
            out[(i, j)] = *v;
        }
    }
    Ok(out)
}

/// `(ℓ+α)/α`, the addition-theorem scale of frequency `ℓ`.
#[inline]
pub fn addition_scale(alpha: f64, frequency: usize) -> f64 {
    (frequency as f64 + alpha) / alpha
}

/// Phase directions of one frequency plus the Cholesky factor of their
/// Gegenbauer Gram matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FundamentalSet {
    frequency: usize,
    dimension: usize,
    alpha: f64,
    directions: DMatrix<f64>,
    gram_chol: DMatrix<f64>,
    jitter: f64,
    condition: f64,
    trainable: bool,
    warnings: Vec<String>,
}

impl FundamentalSet {
    /// Build a set of `phases` well-separated directions for frequency `ℓ ≥ 1`.
    ///
    /// Directions are picked greedily from a seeded random candidate pool,
    /// each new one minimizing its worst normalized Gegenbauer coherence
    /// `|C_ℓ(vᵀvᵢ)| / C_ℓ(1)` against those already chosen. A set is accepted
    /// once its Gram matrix factorizes with condition number below
    /// [`MAX_BUILD_CONDITION`]; otherwise the pool is redrawn.
    pub fn build(frequency: usize, dimension: usize, phases: usize, seed: u64) -> Result<Self> {
        let alpha = alpha_for_dimension(dimension)?;
        if frequency == 0 {
            return Err(Error::InvalidArgument(
                "frequency 0 is the constant feature and has no fundamental set".into(),
            ));
        }
        let full = num_harmonics(frequency, dimension)?;
        if phases == 0 || phases as u64 > full {
            return Err(Error::InvalidArgument(format!(
                "phase count {phases} outside 1..={full} for frequency {frequency}, dimension {dimension}"
            )));
        }
        let trainable = (phases as u64) < full;
        let mut best_condition = f64::INFINITY;
        for attempt in 0..BUILD_ATTEMPTS {
            let mut rng = ChaCha8Rng::seed_from_u64(
                seed ^ (frequency as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
                    ^ (attempt as u64).wrapping_mul(0xD1B5_4A32_D192_ED03),
            );
            let directions = greedy_directions(frequency, dimension, alpha, phases, &mut rng);
            let gram = gram_matrix(&directions, frequency, alpha);
            let condition = condition_number(&gram);
            if condition.is_finite() && condition < MAX_BUILD_CONDITION {
                if let Some(chol) = gram.clone().cholesky() {
                    return Ok(Self {
                        frequency,
                        dimension,
                        alpha,
                        directions,
                        gram_chol: chol.l(),
                        jitter: 0.0,
                        condition,
                        trainable,
                        warnings: Vec::new(),
                    });
                }
            }
            if condition < best_condition || best_condition.is_nan() {
                best_condition = condition;
            }
        }
        Err(Error::FundamentalSet {
            frequency,
            best_condition,
            attempts: BUILD_ATTEMPTS,
        })
    }

    /// A frequency block with no features, used for frequencies whose
    /// eigenvalue is zero.
    pub fn empty(frequency: usize, dimension: usize) -> Result<Self> {
        let alpha = alpha_for_dimension(dimension)?;
        Ok(Self {
            frequency,
            dimension,
            alpha,
            directions: DMatrix::zeros(0, dimension),
            gram_chol: DMatrix::zeros(0, 0),
            jitter: 0.0,
            condition: 1.0,
            trainable: false,
            warnings: Vec::new(),
        })
    }

    /// Assemble a set from explicit directions (rows of `directions`), then
    /// normalize and factorize as in [`FundamentalSet::reorthogonalize`].
    pub fn from_directions(
        frequency: usize,
        directions: DMatrix<f64>,
        trainable: bool,
    ) -> Result<Self> {
        let dimension = directions.ncols();
        let alpha = alpha_for_dimension(dimension)?;
        if frequency == 0 {
            return Err(Error::InvalidArgument(
                "frequency 0 has no fundamental set".into(),
            ));
        }
        if directions.nrows() == 0 {
            return Self::empty(frequency, dimension);
        }
        let full = num_harmonics(frequency, dimension)?;
        if directions.nrows() as u64 > full {
            return Err(Error::InvalidArgument(format!(
                "{} directions outside 1..={full} for frequency {frequency}",
                directions.nrows()
            )));
        }
        let mut set = Self {
            frequency,
            dimension,
            alpha,
            directions,
            gram_chol: DMatrix::zeros(0, 0),
            jitter: 0.0,
            condition: f64::NAN,
            trainable,
            warnings: Vec::new(),
        };
        set.refactor()?;
        Ok(set)
    }

    /// Renormalize the direction rows and recompute the Gram factor.
    ///
    /// If the Gram matrix fails to factorize or is worse conditioned than
    /// [`MAX_REORTH_CONDITION`], the smallest jitter from
    /// `{1e-10, …, 1e-4} · trace / m̂` that fixes it is added to the diagonal
    /// and a warning is recorded.
    pub fn reorthogonalize(&self) -> Result<FundamentalSet> {
        let mut out = self.clone();
        out.refactor()?;
        Ok(out)
    }

    /// In-place variant of [`FundamentalSet::reorthogonalize`].
    pub fn refactor(&mut self) -> Result<()> {
        if self.phases() == 0 {
            return Ok(());
        }
        for mut row in self.directions.row_iter_mut() {
            let norm = row.norm();
            if !(norm > 0.0) || !norm.is_finite() {
                return Err(Error::RankDeficient {
                    frequency: self.frequency,
                });
            }
            if (norm - 1.0).abs() > 4.0 * f64::EPSILON {
                row /= norm;
            }
        }
        let gram = gram_matrix(&self.directions, self.frequency, self.alpha);
        if gram.iter().any(|v| !v.is_finite()) {
            return Err(Error::RankDeficient {
                frequency: self.frequency,
            });
        }
        let condition = condition_number(&gram);
        if condition.is_finite() && condition <= MAX_REORTH_CONDITION {
            if let Some(chol) = gram.clone().cholesky() {
                self.gram_chol = chol.l();
                self.jitter = 0.0;
                self.condition = condition;
                return Ok(());
            }
        }
        let m = gram.nrows() as f64;
        let mean_diag = gram.trace() / m;
        for rung in JITTER_LADDER {
            let jitter = rung * mean_diag;
            let mut jittered = gram.clone();
            for i in 0..gram.nrows() {
                jittered[(i, i)] += jitter;
            }
            let jittered_condition = condition_number(&jittered);
            if !(jittered_condition <= MAX_REORTH_CONDITION) {
                continue;
            }
            if let Some(chol) = jittered.cholesky() {
                self.gram_chol = chol.l();
                self.jitter = jitter;
                self.condition = jittered_condition;
                self.warnings.push(format!(
                    "frequency {}: Gram condition {:.3e}, added diagonal jitter {:.3e}",
                    self.frequency, condition, jitter
                ));
                return Ok(());
            }
        }
        Err(Error::RankDeficient {
            frequency: self.frequency,
        })
    }

    pub fn frequency(&self) -> usize {
        self.frequency
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn phases(&self) -> usize {
        self.directions.nrows()
    }

    pub fn directions(&self) -> &DMatrix<f64> {
        &self.directions
    }

    /// Mutable access for optimizers; call [`FundamentalSet::refactor`]
    /// afterwards.
    pub fn directions_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.directions
    }

    pub fn gram_chol(&self) -> &DMatrix<f64> {
        &self.gram_chol
    }

    /// Diagonal jitter currently folded into the Gram factor.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn condition(&self) -> f64 {
        self.condition
    }

    /// Truncated sets carry trainable phases; complete ones do not.
    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    /// `A_ℓ` for the current directions (no jitter).
    pub fn gram(&self) -> DMatrix<f64> {
        gram_matrix(&self.directions, self.frequency, self.alpha)
    }

    /// Un-whitened zonal responses `g = ((ℓ+α)/α) C_ℓ(V x)` for each row of
    /// `points` (`n × d`), returned as `n × m̂`.
    fn zonal_responses(&self, points: &DMatrix<f64>) -> DMatrix<f64> {
        let scale = addition_scale(self.alpha, self.frequency);
        let mut t = points * self.directions.transpose();
        t.apply(|v| {
            let c = v.clamp(-1.0, 1.0);
            *v = scale * gegenbauer_unchecked(self.alpha, self.frequency, c);
        });
        t
    }

    /// Whitened features `L⁻¹ g` for each row of `points`, as `n × m̂`.
    pub fn feature_block(&self, points: &DMatrix<f64>) -> DMatrix<f64> {
        if self.phases() == 0 {
            return DMatrix::zeros(points.nrows(), 0);
        }
        let g = self.zonal_responses(points);
        let z = self
            .gram_chol
            .solve_lower_triangular(&g.transpose())
            .expect("Cholesky factor has a positive diagonal");
        z.transpose()
    }

    /// Gradient of a scalar objective with respect to the direction rows,
    /// given the objective's gradient `grad_features` (`n × m̂`) with respect
    /// to this block's features at `points` (`n × d`).
    ///
    /// Directions enter through `u = w / ‖w‖`, so the result is the
    /// derivative with respect to the stored rows `w` (tangent to the sphere
    /// when rows are unit norm).
    pub fn backprop_directions(
        &self,
        points: &DMatrix<f64>,
        features: &DMatrix<f64>,
        grad_features: &DMatrix<f64>,
    ) -> DMatrix<f64> {
        let m = self.phases();
        let d = self.dimension;
        if m == 0 {
            return DMatrix::zeros(0, d);
        }
        let alpha = self.alpha;
        let ell = self.frequency;
        let scale = addition_scale(alpha, ell);
        let l = &self.gram_chol;

        // y_i = L⁻¹ g_i. With b_i = L⁻ᵀ ȳ_i: ḡ_i = b_i, L̄ = -Σ b_i y_iᵀ.
        let b = l
            .transpose()
            .solve_upper_triangular(&grad_features.transpose())
            .expect("Cholesky factor has a positive diagonal"); // m̂ × n
        let l_bar = -(&b * features); // m̂ × m̂

        // Cholesky backward: Ā = L⁻ᵀ Φ(Lᵀ L̄) L⁻¹ with Φ = lower triangle,
        // halved diagonal; then symmetrize.
        let mut phi = l.transpose() * &l_bar;
        for i in 0..m {
            for j in (i + 1)..m {
                phi[(i, j)] = 0.0;
            }
            phi[(i, i)] *= 0.5;
        }
        let left = l
            .transpose()
            .solve_upper_triangular(&phi)
            .expect("Cholesky factor has a positive diagonal");
        let a_bar_t = l
            .transpose()
            .solve_upper_triangular(&left.transpose())
            .expect("Cholesky factor has a positive diagonal");
        let a_bar = a_bar_t.transpose();
        let a_sym = (&a_bar + a_bar.transpose()) * 0.5;

        let mut grad_u = DMatrix::zeros(m, d);
        // Gram entries: A_kl = s C(u_kᵀu_l), diagonal constant on the sphere.
        for k in 0..m {
            for j in 0..m {
                if j == k {
                    continue;
                }
                let t = dot_rows(&self.directions, k, &self.directions, j).clamp(-1.0, 1.0);
                let (_, dc) = gegenbauer_with_derivative(alpha, ell, t);
                let coef = 2.0 * a_sym[(k, j)] * scale * dc;
                for c in 0..d {
                    grad_u[(k, c)] += coef * self.directions[(j, c)];
                }
            }
        }
        // Zonal responses: g_ik = s C(u_kᵀ x_i).
        let t = points * self.directions.transpose(); // n × m̂
        for i in 0..points.nrows() {
            for k in 0..m {
                let (_, dc) = gegenbauer_with_derivative(alpha, ell, t[(i, k)].clamp(-1.0, 1.0));
                let coef = b[(k, i)] * scale * dc;
                if coef == 0.0 {
                    continue;
                }
                for c in 0..d {
                    grad_u[(k, c)] += coef * points[(i, c)];
                }
            }
        }
        // Through the normalization u = w / ‖w‖.
        for k in 0..m {
            let norm = self.directions.row(k).norm();
            let u = self.directions.row(k) / norm;
            let g = grad_u.row(k).clone_owned();
            let radial = g.dot(&u);
            let tangent = (g - u * radial) / norm;
            grad_u.set_row(k, &tangent);
        }
        grad_u
    }
}

#[inline]
fn dot_rows(a: &DMatrix<f64>, i: usize, b: &DMatrix<f64>, j: usize) -> f64 {
    (0..a.ncols()).map(|c| a[(i, c)] * b[(j, c)]).sum()
}

fn gram_matrix(directions: &DMatrix<f64>, frequency: usize, alpha: f64) -> DMatrix<f64> {
    let scale = addition_scale(alpha, frequency);
    let m = directions.nrows();
    let mut gram = DMatrix::zeros(m, m);
    let at_one = scale * gegenbauer_unchecked(alpha, frequency, 1.0);
    for i in 0..m {
        gram[(i, i)] = at_one;
        for j in 0..i {
            let t = dot_rows(directions, i, directions, j).clamp(-1.0, 1.0);
            let v = scale * gegenbauer_unchecked(alpha, frequency, t);
            gram[(i, j)] = v;
            gram[(j, i)] = v;
        }
    }
    gram
}

fn condition_number(sym: &DMatrix<f64>) -> f64 {
    let eig = SymmetricEigen::new(sym.clone());
    let max = eig
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let min = eig
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

fn greedy_directions(
    frequency: usize,
    dimension: usize,
    alpha: f64,
    phases: usize,
    rng: &mut ChaCha8Rng,
) -> DMatrix<f64> {
    let pool_size = (8 * phases).max(64);
    let pool: Vec<SpherePoint> = (0..pool_size)
        .map(|_| SpherePoint::random(dimension, rng))
        .collect();
    let at_one = gegenbauer_unchecked(alpha, frequency, 1.0);
    let mut worst = vec![0.0f64; pool_size];
    let mut taken = vec![false; pool_size];
    let mut chosen = Vec::with_capacity(phases);
    let mut next = 0usize;
    for _ in 0..phases {
        taken[next] = true;
        chosen.push(next);
        let v = pool[next].coords();
        let mut best = usize::MAX;
        let mut best_score = f64::INFINITY;
        for (c, cand) in pool.iter().enumerate() {
            if taken[c] {
                continue;
            }
            let coherence =
                (gegenbauer_unchecked(alpha, frequency, dot(v, cand.coords()).clamp(-1.0, 1.0))
                    / at_one)
                    .abs();
            if coherence > worst[c] {
                worst[c] = coherence;
            }
            if worst[c] < best_score {
                best_score = worst[c];
                best = c;
            }
        }
        next = best;
    }
    let mut out = DMatrix::zeros(phases, dimension);
    for (r, &idx) in chosen.iter().enumerate() {
        for (c, v) in pool[idx].coords().iter().enumerate() {
            out[(r, c)] = *v;
        }
    }
    out
}

/// How many phases to keep per frequency.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PhaseTruncation {
    /// All `N(ℓ,d)` harmonics of every frequency.
    Full,
    /// At most `m̂` phases per frequency.
    AtMost(usize),
}

/// A harmonic feature basis for frequencies `0..=ℓ̂`.
///
/// Feature layout: index 0 is the constant feature of frequency 0, followed
/// by the frequency-1 block, the frequency-2 block and so on.
#[derive(Debug, Clone, PartialEq)]
pub struct HarmonicBasis {
    dimension: usize,
    sets: Vec<FundamentalSet>,
}

impl HarmonicBasis {
    pub fn build(
        dimension: usize,
        max_frequency: usize,
        truncation: PhaseTruncation,
        seed: u64,
    ) -> Result<Self> {
        let counts = Self::truncated_counts(dimension, max_frequency, truncation, &[])?;
        Self::build_with_phase_counts(dimension, &counts, seed)
    }

    /// Build with an explicit phase count per frequency. `counts[0]` must be
    /// 1 (the constant feature); a zero count leaves that frequency empty.
    pub fn build_with_phase_counts(dimension: usize, counts: &[usize], seed: u64) -> Result<Self> {
        alpha_for_dimension(dimension)?;
        if counts.first() != Some(&1) {
            return Err(Error::InvalidArgument(
                "frequency 0 always carries exactly one feature".into(),
            ));
        }
        let sets = counts
            .iter()
            .enumerate()
            .skip(1)
            .map(|(ell, &phases)| {
                if phases == 0 {
                    FundamentalSet::empty(ell, dimension)
                } else {
                    FundamentalSet::build(ell, dimension, phases, seed)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { dimension, sets })
    }

    /// Phase counts for frequencies `0..=ℓ̂` under a truncation rule, with
    /// frequencies listed in `zero_frequencies` left empty.
    pub fn truncated_counts(
        dimension: usize,
        max_frequency: usize,
        truncation: PhaseTruncation,
        zero_frequencies: &[usize],
    ) -> Result<Vec<usize>> {
        let mut counts = vec![1usize];
        for ell in 1..=max_frequency {
            let full = num_harmonics(ell, dimension)?;
            let phases = match truncation {
                PhaseTruncation::Full => usize::try_from(full)
                    .map_err(|_| Error::Overflow(format!("N({ell}, {dimension})")))?,
                PhaseTruncation::AtMost(cap) => {
                    if cap == 0 {
                        return Err(Error::InvalidArgument(
                            "phase truncation must keep at least one phase".into(),
                        ));
                    }
                    (cap as u64).min(full) as usize
                }
            };
            counts.push(if zero_frequencies.contains(&ell) {
                0
            } else {
                phases
            });
        }
        Ok(counts)
    }

    /// Assemble from prebuilt sets, which must cover `1..=ℓ̂` in order.
    pub fn from_sets(dimension: usize, sets: Vec<FundamentalSet>) -> Result<Self> {
        alpha_for_dimension(dimension)?;
        for (i, s) in sets.iter().enumerate() {
            if s.frequency != i + 1 {
                return Err(Error::InvalidArgument(format!(
                    "fundamental sets must cover frequencies 1..=L contiguously; found {} at position {}",
                    s.frequency,
                    i
                )));
            }
            if s.dimension != dimension {
                return Err(Error::DimensionMismatch {
                    expected: dimension,
                    actual: s.dimension,
                });
            }
        }
        Ok(Self { dimension, sets })
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn max_frequency(&self) -> usize {
        self.sets.len()
    }

    pub fn alpha(&self) -> f64 {
        (self.dimension as f64 - 2.0) / 2.0
    }

    /// Fundamental sets for frequencies `1..=ℓ̂`.
    pub fn sets(&self) -> &[FundamentalSet] {
        &self.sets
    }

    pub fn sets_mut(&mut self) -> &mut [FundamentalSet] {
        &mut self.sets
    }

    /// Phase count per frequency, starting with 1 for frequency 0.
    pub fn phase_counts(&self) -> Vec<usize> {
        std::iter::once(1)
            .chain(self.sets.iter().map(|s| s.phases()))
            .collect()
    }

    pub fn total_features(&self) -> usize {
        1 + self.sets.iter().map(|s| s.phases()).sum::<usize>()
    }

    /// Frequency of every feature, in layout order.
    pub fn feature_frequencies(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.total_features());
        out.push(0);
        for s in &self.sets {
            out.extend(std::iter::repeat_n(s.frequency, s.phases()));
        }
        out
    }

    /// Offset of each frequency's block in the feature vector.
    pub fn block_offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(self.sets.len() + 1);
        let mut acc = 0;
        for count in self.phase_counts() {
            offsets.push(acc);
            acc += count;
        }
        offsets
    }

    pub fn features(&self, x: &SpherePoint) -> Result<DVector<f64>> {
        let m = self.feature_matrix(std::slice::from_ref(x))?;
        Ok(m.row(0).transpose())
    }

    /// Features of each point as the rows of an `n × M` matrix.
    pub fn feature_matrix(&self, points: &[SpherePoint]) -> Result<DMatrix<f64>> {
        let x = points_matrix(points, self.dimension)?;
        Ok(self.feature_matrix_from(&x))
    }

    /// As [`HarmonicBasis::feature_matrix`] for points already stacked as rows.
    pub fn feature_matrix_from(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let n = x.nrows();
        let mut out = DMatrix::zeros(n, self.total_features());
        out.column_mut(0).fill(1.0);
        let blocks: Vec<DMatrix<f64>> = self.sets.par_iter().map(|s| s.feature_block(x)).collect();
        let mut offset = 1;
        for block in blocks {
            out.view_mut((0, offset), (n, block.ncols()))
                .copy_from(&block);
            offset += block.ncols();
        }
        out
    }

    /// Renormalize and refactor every trainable set.
    pub fn reorthogonalize_trainable(&mut self) -> Result<()> {
        for set in self.sets.iter_mut().filter(|s| s.trainable) {
            set.refactor()?;
        }
        Ok(())
    }

    /// Accumulated warnings from all sets.
    pub fn warnings(&self) -> Vec<String> {
        self.sets
            .iter()
            .flat_map(|s| s.warnings.iter().cloned())
            .collect()
    }

    /// Text serialization: versioned header, dimension, maximum frequency,
    /// then for each frequency its phase count, trainable flag and
    /// row-major directions in 17-significant-digit scientific notation.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{BASIS_MAGIC} {BASIS_VERSION}").unwrap();
        writeln!(s, "dimension {}", self.dimension).unwrap();
        writeln!(s, "max_frequency {}", self.max_frequency()).unwrap();
        for set in &self.sets {
            writeln!(
                s,
                "frequency {} {} {}",
                set.frequency,
                set.phases(),
                if set.trainable { "trainable" } else { "fixed" }
            )
            .unwrap();
            for row in set.directions.row_iter() {
                let line: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
                writeln!(s, "{}", line.join(" ")).unwrap();
            }
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |msg: &str| Error::Checkpoint(format!("basis section: {msg}"));
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| bad("empty"))?;
        let mut parts = header.split_whitespace();
        if parts.next() != Some(BASIS_MAGIC) {
            return Err(bad("missing header"));
        }
        let version: u32 = parts
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad("missing version"))?;
        if version != BASIS_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let mut field = |name: &str| -> Result<usize> {
            let line = lines.next().ok_or_else(|| bad("truncated"))?;
            let mut it = line.split_whitespace();
            if it.next() != Some(name) {
                return Err(bad(&format!("expected {name}")));
            }
            it.next()
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| bad(&format!("bad {name}")))
        };
        let dimension = field("dimension")?;
        let max_frequency = field("max_frequency")?;
        let mut sets = Vec::with_capacity(max_frequency);
        for _ in 0..max_frequency {
            let line = lines.next().ok_or_else(|| bad("truncated"))?;
            let it: Vec<&str> = line.split_whitespace().collect();
            if it.len() != 4 || it[0] != "frequency" {
                return Err(bad("expected frequency line"));
            }
            let frequency: usize = it[1].parse().map_err(|_| bad("bad frequency"))?;
            let phases: usize = it[2].parse().map_err(|_| bad("bad phase count"))?;
            let trainable = match it[3] {
                "trainable" => true,
                "fixed" => false,
                _ => return Err(bad("bad trainable flag")),
            };
            let mut directions = DMatrix::zeros(phases, dimension);
            for r in 0..phases {
                let row = lines.next().ok_or_else(|| bad("truncated directions"))?;
                let vals: Vec<f64> = row
                    .split_whitespace()
                    .map(|v| v.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| bad("bad direction value"))?;
                if vals.len() != dimension {
                    return Err(bad("direction row length"));
                }
                for (c, v) in vals.into_iter().enumerate() {
                    directions[(r, c)] = v;
                }
            }
            sets.push(FundamentalSet::from_directions(
                frequency, directions, trainable,
            )?);
        }
        Self::from_sets(dimension, sets)
    }
}

const BASIS_MAGIC: &str = "sphgp-basis";
const BASIS_VERSION: u32 = 1;

/// Empirical `E[φ(x)φ(x)ᵀ]` for uniform `x` on the sphere.
pub fn monte_carlo_gram(
    basis: &HarmonicBasis,
    n_samples: usize,
    seed: u64,
) -> Result<DMatrix<f64>> {
    if n_samples == 0 {
        return Err(Error::InvalidArgument("n_samples must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = basis.total_features();
    let mut acc = DMatrix::zeros(m, m);
    let chunk = 4096;
    let mut remaining = n_samples;
    while remaining > 0 {
        let take = remaining.min(chunk);
        let points: Vec<SpherePoint> = (0..take)
            .map(|_| SpherePoint::random(basis.dimension(), &mut rng))
            .collect();
        let phi = basis.feature_matrix(&points)?;
        acc += phi.transpose() * &phi;
        remaining -= take;
    }
    Ok(acc / n_samples as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::special_math::gegenbauer_at_one;
    use approx::assert_relative_eq;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn sphere_point_projection() {
        let p = SpherePoint::from_vector(&[3.0, 4.0, 0.0]).unwrap();
        assert_relative_eq!(p.coords()[0], 0.6);
        assert_eq!(p.stored_norm(), 5.0);
        assert!(SpherePoint::from_vector(&[0.0, 0.0, 0.0]).is_err());
        assert!(SpherePoint::from_unit(vec![1.0, 1.0, 0.0]).is_err());
    }

    #[test]
    fn full_first_frequency_on_two_sphere() {
        let set = FundamentalSet::build(1, 3, 3, 7).unwrap();
        assert_eq!(set.phases(), 3);
        assert!(!set.is_trainable());
        assert!(set.condition() < MAX_BUILD_CONDITION);
        // Rank 3: all pivots positive.
        assert!(set.gram_chol().diagonal().iter().all(|&v| v > 1e-6));
    }

    #[test]
    fn single_phase_scalar_gram() {
        let set = FundamentalSet::build(1, 3, 1, 3).unwrap();
        assert!(set.is_trainable());
        assert_relative_eq!(set.gram()[(0, 0)], 3.0, epsilon = 1e-14);
        assert_relative_eq!(set.gram_chol()[(0, 0)], 3f64.sqrt(), epsilon = 1e-14);
        let v = SpherePoint::from_unit(set.directions().row(0).iter().cloned().collect()).unwrap();
        let basis = HarmonicBasis::from_sets(3, vec![set]).unwrap();
        let phi = basis.features(&v).unwrap();
        assert_eq!(phi[0], 1.0);
        assert_relative_eq!(phi[1], 3f64.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn build_rejects_invalid_phase_counts() {
        assert!(FundamentalSet::build(1, 3, 0, 1).is_err());
        assert!(FundamentalSet::build(1, 3, 4, 1).is_err());
        assert!(FundamentalSet::build(0, 3, 1, 1).is_err());
    }

    #[test]
    fn full_second_frequency_reproduces_legendre_kernel() {
        let basis = HarmonicBasis::build(3, 2, PhaseTruncation::Full, 11).unwrap();
        assert_eq!(basis.phase_counts(), vec![1, 3, 5]);
        let offsets = basis.block_offsets();
        let mut r = rng(5);
        for _ in 0..20 {
            let x = SpherePoint::random(3, &mut r);
            let y = SpherePoint::random(3, &mut r);
            let fx = basis.features(&x).unwrap();
            let fy = basis.features(&y).unwrap();
            let t = x.dot(&y);
            let block: f64 = (offsets[2]..offsets[2] + 5).map(|j| fx[j] * fy[j]).sum();
            let p2 = 0.5 * (3.0 * t * t - 1.0);
            assert_relative_eq!(block, 5.0 * p2, epsilon = 1e-10);
        }
    }

    #[test]
    fn whitened_gram_is_identity() {
        for &(ell, d, m) in &[(3usize, 5usize, 7usize), (6, 4, 10), (2, 8, 30)] {
            let set = FundamentalSet::build(ell, d, m, 1).unwrap();
            let l = set.gram_chol();
            let a = set.gram();
            let linv_a = l.solve_lower_triangular(&a).unwrap();
            let ident = l.solve_lower_triangular(&linv_a.transpose()).unwrap();
            let err = (&ident - DMatrix::<f64>::identity(m, m)).amax();
            assert!(err <= 1e-10, "ℓ={ell} d={d}: {err}");
        }
    }

    #[test]
    fn reorthogonalize_is_idempotent() {
        let set = FundamentalSet::build(3, 4, 6, 2).unwrap();
        let again = set.reorthogonalize().unwrap();
        let twice = again.reorthogonalize().unwrap();
        assert!((set.gram_chol() - again.gram_chol()).amax() <= 1e-14);
        assert!((again.gram_chol() - twice.gram_chol()).amax() <= 1e-14);
        assert!((set.directions() - again.directions()).amax() <= 1e-15);
    }

    #[test]
    fn reorthogonalize_normalizes_rows_first() {
        let set = FundamentalSet::build(2, 4, 4, 9).unwrap();
        let mut scaled = set.clone();
        *scaled.directions_mut() *= 2.0;
        let fixed = scaled.reorthogonalize().unwrap();
        assert!((fixed.gram_chol() - set.gram_chol()).amax() <= 1e-13);
        for row in fixed.directions().row_iter() {
            assert!((row.norm() - 1.0).abs() <= UNIT_NORM_TOLERANCE);
        }
    }

    #[test]
    fn nearly_coincident_directions_get_jitter() {
        let eps: f64 = 1e-12;
        // Angle θ with cos θ = 1 - eps.
        let theta = (1.0 - eps).acos();
        let dirs = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, theta.cos(), theta.sin(), 0.0]);
        let set = FundamentalSet::from_directions(1, dirs, true).unwrap();
        assert!(set.jitter() > 0.0);
        assert_eq!(set.warnings().len(), 1);
        let gram = set.gram();
        assert!(gram.determinant().abs() < 1e-9);

        let collapsed = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let set = FundamentalSet::from_directions(1, collapsed, true).unwrap();
        assert!(set.jitter() > 0.0);
    }

    #[test]
    fn degenerate_rows_are_unrecoverable() {
        let dirs = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let err = FundamentalSet::from_directions(1, dirs, true).unwrap_err();
        assert!(matches!(err, Error::RankDeficient { frequency: 1 }));
        let dirs = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, f64::NAN, 0.0, 0.0]);
        assert!(FundamentalSet::from_directions(1, dirs, true).is_err());
    }

    #[test]
    fn constant_block_and_layout() {
        let basis = HarmonicBasis::build(5, 3, PhaseTruncation::AtMost(4), 0).unwrap();
        assert_eq!(basis.phase_counts(), vec![1, 4, 4, 4]);
        assert_eq!(basis.total_features(), 13);
        assert_eq!(basis.feature_frequencies()[..6], [0, 1, 1, 1, 1, 2]);
        let mut r = rng(1);
        for _ in 0..5 {
            let x = SpherePoint::random(5, &mut r);
            assert_eq!(basis.features(&x).unwrap()[0], 1.0);
        }
        let wrong = SpherePoint::random(4, &mut r);
        assert!(matches!(
            basis.features(&wrong),
            Err(Error::DimensionMismatch {
                expected: 5,
                actual: 4
            })
        ));
        // d = 5, ℓ = 1 has exactly 5 harmonics; cap 4 truncates it.
        assert!(basis.sets()[0].is_trainable());
    }

    #[test]
    fn empty_frequencies_carry_no_features() {
        let basis = HarmonicBasis::build_with_phase_counts(3, &[1, 3, 0, 2], 4).unwrap();
        assert_eq!(basis.phase_counts(), vec![1, 3, 0, 2]);
        assert_eq!(basis.total_features(), 6);
        assert_eq!(basis.feature_frequencies(), vec![0, 1, 1, 1, 3, 3]);
        let mut r = rng(2);
        let x = SpherePoint::random(3, &mut r);
        assert_eq!(basis.features(&x).unwrap().len(), 6);
        let back = HarmonicBasis::from_text(&basis.to_text()).unwrap();
        assert_eq!(back.phase_counts(), basis.phase_counts());
        assert!(HarmonicBasis::build_with_phase_counts(3, &[0, 3], 4).is_err());
        let counts =
            HarmonicBasis::truncated_counts(5, 4, PhaseTruncation::AtMost(10), &[3]).unwrap();
        assert_eq!(counts, vec![1, 5, 10, 0, 10]);
    }

    #[test]
    fn monte_carlo_gram_constant_only() {
        let basis = HarmonicBasis::build(4, 0, PhaseTruncation::Full, 0).unwrap();
        let g = monte_carlo_gram(&basis, 10, 1).unwrap();
        assert_eq!(g[(0, 0)], 1.0);
        assert!(monte_carlo_gram(&basis, 0, 1).is_err());
    }

    #[test]
    fn monte_carlo_gram_first_frequency_is_identity() {
        let basis = HarmonicBasis::build(3, 1, PhaseTruncation::Full, 4).unwrap();
        let n = 1_000_000;
        let g = monte_carlo_gram(&basis, n, 21).unwrap();
        let tol = 5.0 / (n as f64).sqrt();
        let err = (&g - DMatrix::<f64>::identity(4, 4)).amax();
        assert!(err <= tol, "{err} > {tol}");
    }

    #[test]
    fn truncated_block_stays_orthonormal_and_frequencies_orthogonal() {
        let basis = HarmonicBasis::build(4, 3, PhaseTruncation::AtMost(3), 8).unwrap();
        let n = 200_000;
        let g = monte_carlo_gram(&basis, n, 3).unwrap();
        let m = basis.total_features();
        let ident = DMatrix::<f64>::identity(m, m);
        // Entry variance is bounded by E[φ_i² φ_j²] ≤ max-norm products; use
        // a generous CLT multiple of the largest feature second moment.
        let tol = 5.0 * gegenbauer_at_one(4, 3).unwrap() * 4.0 / (n as f64).sqrt();
        let err = (&g - ident).amax();
        assert!(err <= tol, "{err} > {tol}");
    }

    #[test]
    fn serialization_round_trip() {
        let basis = HarmonicBasis::build(4, 4, PhaseTruncation::AtMost(5), 13).unwrap();
        let text = basis.to_text();
        let back = HarmonicBasis::from_text(&text).unwrap();
        assert_eq!(back.phase_counts(), basis.phase_counts());
        assert_eq!(back.dimension(), 4);
        for (a, b) in basis.sets().iter().zip(back.sets()) {
            assert_eq!(a.directions(), b.directions());
            assert_eq!(a.is_trainable(), b.is_trainable());
            assert!((a.gram_chol() - b.gram_chol()).amax() <= 1e-14);
        }
        assert_eq!(back.to_text(), text);
        assert!(HarmonicBasis::from_text("sphgp-basis 9\n").is_err());
        assert!(HarmonicBasis::from_text("nonsense").is_err());
    }

    #[test]
    fn direction_gradient_matches_finite_differences() {
        let set = FundamentalSet::build(3, 4, 4, 5).unwrap();
        let mut r = rng(77);
        let pts: Vec<SpherePoint> = (0..6).map(|_| SpherePoint::random(4, &mut r)).collect();
        let x = points_matrix(&pts, 4).unwrap();
        let weights = DMatrix::from_fn(6, 4, |i, j| ((i * 7 + j * 3) as f64).sin());
        let objective = |s: &FundamentalSet| s.feature_block(&x).component_mul(&weights).sum();
        let feats = set.feature_block(&x);
        let grad = set.backprop_directions(&x, &feats, &weights);
        let h = 1e-6;
        for k in 0..4 {
            for c in 0..4 {
                let mut plus = set.clone();
                plus.directions_mut()[(k, c)] += h;
                plus.refactor().unwrap();
                let mut minus = set.clone();
                minus.directions_mut()[(k, c)] -= h;
                minus.refactor().unwrap();
                let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
                assert_relative_eq!(grad[(k, c)], fd, max_relative = 1e-5, epsilon = 1e-7);
            }
        }
    }
}
