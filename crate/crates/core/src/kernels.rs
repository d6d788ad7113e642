//! Shape functions, their eigenvalue spectra, and truncated Mercer kernels.
//!
//! A zonal kernel on `S^{d-1}` is `k(x, x') = σ² κ(xᵀx')` for a shape
//! function `κ`. Expanding `κ` in Gegenbauer polynomials gives
//! `κ(t) = Σ_ℓ ((ℓ+α)/α) λ_ℓ C_ℓ^{(α)}(t)`, where `λ_ℓ` are the eigenvalues
//! of the kernel's integral operator under the uniform probability measure.
//! A [`Spectrum`] stores `λ_0..=λ_ℓ̂` directly, either obtained from a shape
//! function by Funk–Hecke quadrature or prescribed as the power law
//! `λ_ℓ = ℓ^{-β}`.

use std::f64::consts::PI;
use std::fmt;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harmonics::{addition_scale, SpherePoint};
use crate::special_math::{
    alpha_for_dimension, clamp_unit, funk_hecke_constant, gauss_legendre, gegenbauer_at_one,
    gegenbauer_sequence, gegenbauer_unchecked,
};

/// Eigenvalues within this distance below zero are treated as roundoff.
pub const EIGENVALUE_CLAMP: f64 = 1e-10;

/// Shape function `κ: [-1, 1] → ℝ` of a zonal kernel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ShapeFunction {
    /// Normalized arc-cosine kernel of degree one (infinite-width ReLU layer).
    ReluArccos,
    /// `base ∘ ⋯ ∘ base` with `depth` factors.
    Composed {
        base: Box<ShapeFunction>,
        depth: usize,
    },
    /// ReLU neural tangent kernel with `depth` hidden layers, normalized to
    /// one at `t = 1`.
    NtkRelu { depth: usize },
    /// Piecewise-linear interpolation of samples on an ascending grid
    /// spanning `[-1, 1]`.
    Tabulated { grid: Vec<f64>, values: Vec<f64> },
    /// Power series `Σ_k c_k t^k`.
    Polynomial(Vec<f64>),
    /// Gegenbauer series `Σ_ℓ ((ℓ+α)/α) λ_ℓ C_ℓ^{(α)}(t)` for `α = (d-2)/2`.
    MercerSeries {
        dimension: usize,
        eigenvalues: Vec<f64>,
    },
}

impl fmt::Display for ShapeFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ShapeFunction::ReluArccos => write!(f, "relu_arccos"),
            ShapeFunction::Composed { base, depth } => write!(f, "composed({base},{depth})"),
            ShapeFunction::NtkRelu { depth } => write!(f, "ntk_relu({depth})"),
            ShapeFunction::Tabulated { grid, .. } => write!(f, "tabulated({})", grid.len()),
            ShapeFunction::Polynomial(c) => {
                write!(f, "polynomial(degree {})", c.len().saturating_sub(1))
            }
            ShapeFunction::MercerSeries {
                dimension,
                eigenvalues,
            } => write!(
                f,
                "mercer_series(d={dimension}, L={})",
                eigenvalues.len().saturating_sub(1)
            ),
        }
    }
}

/// `κ(t) = (t(π − arccos t) + √(1−t²)) / π`.
pub fn relu_shape(t: f64) -> Result<f64> {
    Ok(relu_unchecked(clamp_unit(t)?))
}

#[inline]
fn relu_unchecked(t: f64) -> f64 {
    (t * (PI - t.acos()) + (1.0 - t * t).max(0.0).sqrt()) / PI
}

/// `κ̇(t) = (π − arccos t) / π`, the derivative of [`relu_shape`].
#[inline]
fn relu_derivative_unchecked(t: f64) -> f64 {
    (PI - t.acos()) / PI
}

/// Compose a normalized shape function with itself: `κ^L = κ ∘ ⋯ ∘ κ`.
pub fn compose_shape(base: ShapeFunction, depth: usize) -> Result<ShapeFunction> {
    if depth < 1 {
        return Err(Error::InvalidArgument(
            "composition depth must be >= 1".into(),
        ));
    }
    let at_one = base.eval(1.0)?;
    if (at_one - 1.0).abs() > 1e-12 {
        return Err(Error::InvalidArgument(format!(
            "composition needs a normalized base shape, got κ(1) = {at_one}"
        )));
    }
    Ok(ShapeFunction::Composed {
        base: Box::new(base),
        depth,
    })
}

/// ReLU NTK shape with `depth ≥ 1` layers.
pub fn ntk_relu_shape(depth: usize) -> Result<ShapeFunction> {
    if depth < 1 {
        return Err(Error::InvalidArgument("NTK depth must be >= 1".into()));
    }
    Ok(ShapeFunction::NtkRelu { depth })
}

impl ShapeFunction {
    pub fn eval(&self, t: f64) -> Result<f64> {
        let t = clamp_unit(t)?;
        Ok(self.eval_unchecked(t))
    }

    fn eval_unchecked(&self, t: f64) -> f64 {
        match self {
            ShapeFunction::ReluArccos => relu_unchecked(t),
            ShapeFunction::Composed { base, depth } => {
                let mut v = t;
                for _ in 0..*depth {
                    v = base.eval_unchecked(v.clamp(-1.0, 1.0));
                }
                v
            }
            ShapeFunction::NtkRelu { depth } => {
                // Σ⁰ = Θ⁰ = t; Σˡ = κ(Σˡ⁻¹); Θˡ = Σˡ + Θˡ⁻¹ κ̇(Σˡ⁻¹).
                let mut sigma = t;
                let mut theta = t;
                for _ in 0..*depth {
                    let s = sigma.clamp(-1.0, 1.0);
                    let next_sigma = relu_unchecked(s);
                    theta = next_sigma + theta * relu_derivative_unchecked(s);
                    sigma = next_sigma;
                }
                theta / (*depth as f64 + 1.0)
            }
            ShapeFunction::Tabulated { grid, values } => {
                let idx = grid.partition_point(|&g| g <= t);
                if idx == 0 {
                    values[0]
                } else if idx >= grid.len() {
                    values[grid.len() - 1]
                } else {
                    let (g0, g1) = (grid[idx - 1], grid[idx]);
                    let w = (t - g0) / (g1 - g0);
                    values[idx - 1] * (1.0 - w) + values[idx] * w
                }
            }
            ShapeFunction::Polynomial(coeffs) => {
                coeffs.iter().rev().fold(0.0, |acc, c| acc * t + c)
            }
            ShapeFunction::MercerSeries {
                dimension,
                eigenvalues,
            } => {
                let alpha = (*dimension as f64 - 2.0) / 2.0;
                let mut c = vec![0.0; eigenvalues.len()];
                gegenbauer_sequence(alpha, t, &mut c);
                eigenvalues
                    .iter()
                    .enumerate()
                    .map(|(l, lam)| addition_scale(alpha, l) * lam * c[l])
                    .sum()
            }
        }
    }

    /// Sample on `n ≥ 2` equispaced points of `[-1, 1]`.
    pub fn tabulate(&self, n: usize) -> Result<ShapeFunction> {
        if n < 2 {
            return Err(Error::InvalidArgument(
                "tabulation needs at least 2 points".into(),
            ));
        }
        let grid: Vec<f64> = (0..n)
            .map(|i| (-1.0 + 2.0 * i as f64 / (n - 1) as f64).clamp(-1.0, 1.0))
            .collect();
        let values = grid.iter().map(|&t| self.eval_unchecked(t)).collect();
        Ok(ShapeFunction::Tabulated { grid, values })
    }
}

/// Where a spectrum's eigenvalues came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SpectrumSource {
    FunkHecke {
        shape: ShapeFunction,
        quad_order: usize,
    },
    PolyDecay {
        beta: f64,
        lambda0: f64,
    },
}

/// Per-frequency eigenvalues `λ_0..=λ_ℓ̂` plus a constant radial variance `σ²`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    dimension: usize,
    eigenvalues: Vec<f64>,
    source: SpectrumSource,
    radial_variance: f64,
}

impl Spectrum {
    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn alpha(&self) -> f64 {
        (self.dimension as f64 - 2.0) / 2.0
    }

    pub fn max_frequency(&self) -> usize {
        self.eigenvalues.len() - 1
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn eigenvalue(&self, frequency: usize) -> f64 {
        self.eigenvalues[frequency]
    }

    pub fn source(&self) -> &SpectrumSource {
        &self.source
    }

    pub fn radial_variance(&self) -> f64 {
        self.radial_variance
    }

    /// Continuous-depth exponent, if this is a power-law spectrum.
    pub fn beta(&self) -> Option<f64> {
        match self.source {
            SpectrumSource::PolyDecay { beta, .. } => Some(beta),
            _ => None,
        }
    }

    pub fn with_radial_variance(mut self, variance: f64) -> Result<Self> {
        if !(variance > 0.0) || !variance.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "radial variance must be positive, got {variance}"
            )));
        }
        self.radial_variance = variance;
        Ok(self)
    }

    /// Multiply every eigenvalue by `c > 0`.
    pub fn scaled(&self, c: f64) -> Result<Self> {
        if !(c > 0.0) || !c.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "scale must be positive, got {c}"
            )));
        }
        let mut out = self.clone();
        out.eigenvalues.iter_mut().for_each(|v| *v *= c);
        Ok(out)
    }

    /// Build from explicit eigenvalues (tagged as a power law with the given
    /// provenance only if `source` says so).
    pub fn from_eigenvalues(
        dimension: usize,
        eigenvalues: Vec<f64>,
        source: SpectrumSource,
        radial_variance: f64,
    ) -> Result<Self> {
        alpha_for_dimension(dimension)?;
        if eigenvalues.is_empty() {
            return Err(Error::InvalidArgument("spectrum needs at least λ_0".into()));
        }
        if let Some((l, &v)) = eigenvalues
            .iter()
            .enumerate()
            .find(|(_, v)| !(**v >= 0.0) || !v.is_finite())
        {
            return Err(Error::NegativeEigenvalue {
                frequency: l,
                value: v,
            });
        }
        if !eigenvalues.iter().any(|&v| v > 0.0) {
            return Err(Error::InvalidArgument(
                "spectrum is identically zero".into(),
            ));
        }
        Spectrum {
            dimension,
            eigenvalues,
            source,
            radial_variance: 1.0,
        }
        .with_radial_variance(radial_variance)
    }

    /// Truncated shape `Σ_ℓ ((ℓ+α)/α) λ_ℓ C_ℓ^{(α)}(t)` (no `σ²`).
    pub fn shape_value(&self, t: f64) -> f64 {
        let alpha = self.alpha();
        let mut c = vec![0.0; self.eigenvalues.len()];
        gegenbauer_sequence(alpha, t.clamp(-1.0, 1.0), &mut c);
        self.eigenvalues
            .iter()
            .enumerate()
            .map(|(l, lam)| addition_scale(alpha, l) * lam * c[l])
            .sum()
    }

    /// `σ² · shape_value(t)`.
    pub fn kernel_value(&self, t: f64) -> f64 {
        self.radial_variance * self.shape_value(t)
    }

    /// The Mercer-expanded shape function of this spectrum.
    pub fn as_shape(&self) -> ShapeFunction {
        ShapeFunction::MercerSeries {
            dimension: self.dimension,
            eigenvalues: self.eigenvalues.clone(),
        }
    }
}

/// Default Gauss–Legendre order for [`funk_hecke_spectrum`].
pub fn default_quad_order(max_frequency: usize) -> usize {
    64.max(max_frequency + 32)
}

/// Eigenvalues of a shape function by the Funk–Hecke formula
/// `λ_ℓ = (c_d / C_ℓ(1)) ∫_{-1}^{1} κ(t) C_ℓ(t) (1−t²)^{(d−3)/2} dt`.
///
/// The integral is taken in the angle `θ = arccos t`, where it becomes
/// `∫_0^π κ(cos θ) C_ℓ(cos θ) sin^{d−2} θ dθ`; the square-root endpoint
/// behaviour of arc-cosine shapes is smooth in `θ`, so Gauss–Legendre
/// converges spectrally for them as well as for polynomial shapes.
pub fn funk_hecke_spectrum(
    shape: &ShapeFunction,
    dimension: usize,
    max_frequency: usize,
    quad_order: usize,
) -> Result<Spectrum> {
    funk_hecke_spectrum_with(shape, dimension, max_frequency, quad_order, false)
}

/// [`funk_hecke_spectrum`] with optional parallel evaluation over `ℓ`;
/// results are identical either way.
pub fn funk_hecke_spectrum_with(
    shape: &ShapeFunction,
    dimension: usize,
    max_frequency: usize,
    quad_order: usize,
    parallel: bool,
) -> Result<Spectrum> {
    let alpha = alpha_for_dimension(dimension)?;
    if quad_order < max_frequency + 16 {
        return Err(Error::InvalidArgument(format!(
            "quadrature order {quad_order} below ℓ̂ + 16 = {}",
            max_frequency + 16
        )));
    }
    let c_d = funk_hecke_constant(dimension)?;
    let rule = gauss_legendre(quad_order)?.mapped(0.0, PI);
    let power = (dimension - 2) as i32;
    // Shape and measure at the nodes are shared by all frequencies.
    let nodes: Vec<(f64, f64)> = rule
        .nodes
        .iter()
        .zip(&rule.weights)
        .map(|(&theta, &w)| {
            let t = theta.cos().clamp(-1.0, 1.0);
            (t, w * shape.eval_unchecked(t) * theta.sin().powi(power))
        })
        .collect();
    let integrate = |ell: usize| -> Result<f64> {
        let integral: f64 = nodes
            .iter()
            .map(|&(t, wk)| wk * gegenbauer_unchecked(alpha, ell, t))
            .sum();
        let value = c_d * integral / gegenbauer_at_one(dimension, ell)?;
        if value < -EIGENVALUE_CLAMP || value.is_nan() {
            return Err(Error::NegativeEigenvalue {
                frequency: ell,
                value,
            });
        }
        Ok(value.max(0.0))
    };
    let eigenvalues: Vec<f64> = if parallel {
        (0..=max_frequency)
            .into_par_iter()
            .map(integrate)
            .collect::<Result<_>>()?
    } else {
        (0..=max_frequency).map(integrate).collect::<Result<_>>()?
    };
    Spectrum::from_eigenvalues(
        dimension,
        eigenvalues,
        SpectrumSource::FunkHecke {
            shape: shape.clone(),
            quad_order,
        },
        1.0,
    )
}

/// Continuous-depth spectrum `λ_ℓ = ℓ^{-β}` for `ℓ ≥ 1`, `λ_0 = 1`.
pub fn poly_decay_spectrum(beta: f64, dimension: usize, max_frequency: usize) -> Result<Spectrum> {
    poly_decay_spectrum_with_lambda0(beta, dimension, max_frequency, 1.0)
}

/// [`poly_decay_spectrum`] with an explicit constant-frequency eigenvalue.
pub fn poly_decay_spectrum_with_lambda0(
    beta: f64,
    dimension: usize,
    max_frequency: usize,
    lambda0: f64,
) -> Result<Spectrum> {
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "β must be positive, got {beta}"
        )));
    }
    if !(lambda0 > 0.0) || !lambda0.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "λ_0 must be positive, got {lambda0}"
        )));
    }
    let eigenvalues = std::iter::once(lambda0)
        .chain((1..=max_frequency).map(|l| (l as f64).powf(-beta)))
        .collect();
    Spectrum::from_eigenvalues(
        dimension,
        eigenvalues,
        SpectrumSource::PolyDecay { beta, lambda0 },
        1.0,
    )
}

/// Truncated Mercer kernel `σ² Σ_ℓ ((ℓ+α)/α) λ_ℓ C_ℓ^{(α)}(xᵀx')`.
pub fn mercer_eval(spec: &Spectrum, x: &SpherePoint, y: &SpherePoint) -> Result<f64> {
    for p in [x, y] {
        if p.dimension() != spec.dimension {
            return Err(Error::DimensionMismatch {
                expected: spec.dimension,
                actual: p.dimension(),
            });
        }
    }
    Ok(spec.kernel_value(x.dot(y)))
}

/// Relative eigenvalues `(ℓ, λ_ℓ / λ_1)` as CSV with 17 significant digits.
pub fn write_spectrum_csv<W: Write>(spec: &Spectrum, mut out: W) -> Result<()> {
    let lambda1 = spec.eigenvalues.get(1).copied().unwrap_or(0.0);
    if !(lambda1 > 0.0) {
        return Err(Error::InvalidArgument(
            "relative spectrum needs λ_1 > 0".into(),
        ));
    }
    writeln!(out, "frequency,relative_eigenvalue")?;
    for (l, lam) in spec.eigenvalues.iter().enumerate() {
        writeln!(out, "{l},{:.16e}", lam / lambda1)?;
    }
    Ok(())
}

/// Write [`write_spectrum_csv`] output to `path`.
pub fn export_spectrum(spec: &Spectrum, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_spectrum_csv(spec, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::{DMatrix, SymmetricEigen};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Adaptive Simpson quadrature, independent of the Gauss rules.
    fn adaptive_simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64) -> f64 {
        #[allow(clippy::too_many_arguments)]
        fn rec<F: Fn(f64) -> f64>(
            f: &F,
            a: f64,
            b: f64,
            fa: f64,
            fm: f64,
            fb: f64,
            whole: f64,
            tol: f64,
            depth: u32,
        ) -> f64 {
            let m = 0.5 * (a + b);
            let lm = 0.5 * (a + m);
            let rm = 0.5 * (m + b);
            let flm = f(lm);
            let frm = f(rm);
            let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
            let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
            if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
                return left + right + (left + right - whole) / 15.0;
            }
            rec(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
                + rec(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
        }
        let fa = f(a);
        let fb = f(b);
        let fm = f(0.5 * (a + b));
        let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
        rec(f, a, b, fa, fm, fb, whole, tol, 50)
    }

    fn relu_l(depth: usize) -> ShapeFunction {
        compose_shape(ShapeFunction::ReluArccos, depth).unwrap()
    }

    #[test]
    fn relu_anchor_values() {
        assert_relative_eq!(relu_shape(1.0).unwrap(), 1.0, epsilon = 1e-12);
        assert!(relu_shape(-1.0).unwrap().abs() <= 1e-12);
        assert_relative_eq!(relu_shape(0.0).unwrap(), 1.0 / PI, epsilon = 1e-12);
        assert!(relu_shape(1.5).is_err());
        assert_relative_eq!(relu_shape(1.0 + 1e-13).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn composition_examples() {
        let one = relu_l(1);
        for &t in &[-0.9, -0.2, 0.0, 0.4, 0.99] {
            assert_eq!(one.eval(t).unwrap(), relu_shape(t).unwrap());
        }
        let two = relu_l(2);
        let expect = relu_shape(1.0 / PI).unwrap();
        assert_relative_eq!(two.eval(0.0).unwrap(), expect, epsilon = 1e-15);
        // (1/π)(π − arccos(1/π)) + √(1 − 1/π²)) / π, evaluated independently.
        assert_relative_eq!(expect, 0.493_731_090_200_371_6, epsilon = 1e-12);
        for depth in 1..=10 {
            assert_relative_eq!(relu_l(depth).eval(1.0).unwrap(), 1.0, epsilon = 1e-12);
        }
        assert!(compose_shape(ShapeFunction::ReluArccos, 0).is_err());
        assert!(compose_shape(ShapeFunction::Polynomial(vec![0.0, 2.0]), 2).is_err());
    }

    #[test]
    fn composition_associates() {
        let three = relu_l(3);
        let nested = compose_shape(relu_l(1), 3).unwrap();
        let via_two = |t: f64| relu_l(2).eval(relu_shape(t).unwrap()).unwrap();
        for i in 0..=200 {
            let t = -1.0 + i as f64 / 100.0;
            let a = three.eval(t).unwrap();
            assert!((a - nested.eval(t).unwrap()).abs() <= 1e-14);
            assert!((a - via_two(t)).abs() <= 1e-14);
        }
    }

    /// Hand-unrolled NTK recursion for one and two layers.
    #[test]
    fn ntk_matches_hand_recursion() {
        let k = |t: f64| relu_shape(t).unwrap();
        let kd = |t: f64| (PI - t.acos()) / PI;
        let one = ntk_relu_shape(1).unwrap();
        let two = ntk_relu_shape(2).unwrap();
        for i in 0..=40 {
            let t: f64 = -1.0 + i as f64 / 20.0;
            let theta1 = k(t) + t * kd(t);
            assert_relative_eq!(one.eval(t).unwrap(), theta1 / 2.0, epsilon = 1e-15);
            let theta2 = k(k(t)) + theta1 * kd(k(t));
            assert_relative_eq!(two.eval(t).unwrap(), theta2 / 3.0, epsilon = 1e-15);
        }
        for depth in 1..=6 {
            assert_relative_eq!(
                ntk_relu_shape(depth).unwrap().eval(1.0).unwrap(),
                1.0,
                epsilon = 1e-14
            );
        }
        let v = ntk_relu_shape(3).unwrap().eval(-1.0).unwrap();
        assert!((0.0..1.0).contains(&v), "{v}");
        assert!(ntk_relu_shape(0).is_err());
    }

    #[test]
    fn tabulated_interpolates_linearly() {
        let tab = relu_l(2).tabulate(2001).unwrap();
        for &t in &[-1.0, -0.5, 0.123, 0.9, 1.0] {
            assert!((tab.eval(t).unwrap() - relu_l(2).eval(t).unwrap()).abs() < 1e-5);
        }
        assert!(relu_l(1).tabulate(1).is_err());
    }

    #[test]
    fn constant_and_linear_anchors() {
        for d in [3usize, 4, 7, 10] {
            let s = funk_hecke_spectrum(&ShapeFunction::Polynomial(vec![1.0]), d, 6, 64).unwrap();
            assert_relative_eq!(s.eigenvalue(0), 1.0, epsilon = 1e-13);
            for l in 1..=6 {
                assert!(
                    s.eigenvalue(l).abs() <= 1e-13,
                    "d={d} ℓ={l}: {}",
                    s.eigenvalue(l)
                );
            }
        }
        let s = funk_hecke_spectrum(&ShapeFunction::Polynomial(vec![0.0, 1.0]), 3, 6, 64).unwrap();
        assert_relative_eq!(s.eigenvalue(1), 1.0 / 3.0, epsilon = 1e-13);
        for l in [0usize, 2, 3, 4, 5, 6] {
            assert!(s.eigenvalue(l).abs() <= 1e-13);
        }
        // Linear kernel round trip through the Mercer sum.
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let s = s.with_radial_variance(2.5).unwrap();
        for _ in 0..10 {
            let x = SpherePoint::random(3, &mut r);
            let y = SpherePoint::random(3, &mut r);
            assert_relative_eq!(
                mercer_eval(&s, &x, &y).unwrap(),
                2.5 * x.dot(&y),
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn relu_constant_eigenvalue_matches_adaptive_integral() {
        let s =
            funk_hecke_spectrum(&ShapeFunction::ReluArccos, 3, 10, default_quad_order(10)).unwrap();
        let direct = 0.5 * adaptive_simpson(&|t: f64| relu_shape(t).unwrap(), -1.0, 1.0, 1e-13);
        assert_relative_eq!(s.eigenvalue(0), direct, max_relative = 1e-10);
        assert_relative_eq!(s.eigenvalue(0), 3.0 / 8.0, max_relative = 1e-12);
        // Odd frequencies above one vanish for a single layer.
        assert!(s.eigenvalues().iter().all(|&v| v >= 0.0));
        assert!(s.eigenvalue(1) > 0.0 && s.eigenvalue(2) > 0.0 && s.eigenvalue(4) > 0.0);
        assert!(s.eigenvalue(3) <= 1e-14);
        assert!(s.eigenvalue(2) > s.eigenvalue(4) && s.eigenvalue(4) > s.eigenvalue(6));
    }

    #[test]
    fn funk_hecke_general_dimension_matches_adaptive_integral() {
        let shape = relu_l(2);
        let d = 6;
        let s = funk_hecke_spectrum(&shape, d, 4, 64).unwrap();
        let alpha = 2.0;
        let c_d = funk_hecke_constant(d).unwrap();
        for l in 0..=4 {
            let direct = adaptive_simpson(
                &|t: f64| {
                    shape.eval(t).unwrap()
                        * gegenbauer_unchecked(alpha, l, t)
                        * (1.0 - t * t).powf(1.5)
                },
                -1.0,
                1.0,
                1e-14,
            ) * c_d
                / gegenbauer_at_one(d, l).unwrap();
            assert_relative_eq!(
                s.eigenvalue(l),
                direct,
                max_relative = 1e-7,
                epsilon = 1e-14
            );
        }
    }

    #[test]
    fn funk_hecke_rejects_low_order_and_indefinite_shapes() {
        let err = funk_hecke_spectrum(&ShapeFunction::ReluArccos, 3, 10, 20).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
        // Negative λ_1.
        let err =
            funk_hecke_spectrum(&ShapeFunction::Polynomial(vec![1.0, -1.0]), 3, 3, 64).unwrap_err();
        assert!(matches!(
            err,
            Error::NegativeEigenvalue { frequency: 1, .. }
        ));
    }

    #[test]
    fn parallel_spectrum_is_identical() {
        let shape = ntk_relu_shape(3).unwrap();
        let a = funk_hecke_spectrum_with(&shape, 5, 12, 64, false).unwrap();
        let b = funk_hecke_spectrum_with(&shape, 5, 12, 64, true).unwrap();
        assert_eq!(a.eigenvalues(), b.eigenvalues());
    }

    #[test]
    fn mercer_round_trip() {
        for d in [3usize, 5, 10] {
            let lam: Vec<f64> = (0..=10).map(|l| 1.0 / (1.0 + l as f64).powf(2.5)).collect();
            let shape = ShapeFunction::MercerSeries {
                dimension: d,
                eigenvalues: lam.clone(),
            };
            let s = funk_hecke_spectrum(&shape, d, 10, default_quad_order(10)).unwrap();
            for (l, &want) in lam.iter().enumerate() {
                assert_relative_eq!(s.eigenvalue(l), want, max_relative = 1e-8);
            }
        }
    }

    #[test]
    fn poly_decay_values() {
        let s = poly_decay_spectrum(2.0, 4, 6).unwrap();
        assert_eq!(s.eigenvalue(0), 1.0);
        assert_eq!(s.eigenvalue(1), 1.0);
        assert_eq!(s.eigenvalue(2), 0.25);
        assert_eq!(s.eigenvalue(4), 0.0625);
        assert_eq!(s.beta(), Some(2.0));
        for l in 1..6 {
            assert!(s.eigenvalue(l + 1) < s.eigenvalue(l));
            assert_relative_eq!(s.eigenvalue(l) / s.eigenvalue(1), (l as f64).powf(-2.0));
        }
        assert!(poly_decay_spectrum(0.0, 4, 3).is_err());
        assert!(poly_decay_spectrum(-1.0, 4, 3).is_err());
        let slow = poly_decay_spectrum(0.1, 4, 10).unwrap();
        let fast = poly_decay_spectrum(3.0, 4, 10).unwrap();
        assert!(slow.eigenvalue(10) > 0.7 && fast.eigenvalue(10) < 1e-2);
        let s = poly_decay_spectrum_with_lambda0(2.0, 4, 3, 0.3).unwrap();
        assert_eq!(s.eigenvalue(0), 0.3);
    }

    #[test]
    fn constant_spectrum_gives_constant_kernel() {
        let s = Spectrum::from_eigenvalues(
            5,
            vec![1.0],
            SpectrumSource::PolyDecay {
                beta: 1.0,
                lambda0: 1.0,
            },
            1.7,
        )
        .unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let x = SpherePoint::random(5, &mut r);
        let y = SpherePoint::random(5, &mut r);
        assert_relative_eq!(mercer_eval(&s, &x, &y).unwrap(), 1.7);
        let z = SpherePoint::random(4, &mut r);
        assert!(mercer_eval(&s, &x, &z).is_err());
    }

    #[test]
    fn mercer_gram_is_psd_and_symmetric() {
        let spectra = vec![
            poly_decay_spectrum(1.3, 5, 8).unwrap(),
            funk_hecke_spectrum(&relu_l(3), 5, 8, 64).unwrap(),
            funk_hecke_spectrum(&ntk_relu_shape(2).unwrap(), 5, 8, 64).unwrap(),
        ];
        let mut r = ChaCha8Rng::seed_from_u64(12);
        let pts: Vec<SpherePoint> = (0..50).map(|_| SpherePoint::random(5, &mut r)).collect();
        for s in spectra {
            let k = DMatrix::from_fn(50, 50, |i, j| mercer_eval(&s, &pts[i], &pts[j]).unwrap());
            for i in 0..50 {
                for j in 0..50 {
                    assert_eq!(k[(i, j)], k[(j, i)]);
                }
                let expect: f64 = (0..=8)
                    .map(|l| {
                        s.eigenvalue(l) * crate::special_math::num_harmonics(l, 5).unwrap() as f64
                    })
                    .sum();
                assert_relative_eq!(k[(i, i)], expect, max_relative = 1e-12);
            }
            let min = SymmetricEigen::new(k.clone()).eigenvalues.min();
            assert!(min >= -1e-8 * k.trace(), "{min}");
        }
    }

    #[test]
    fn deeper_compositions_decay_slower() {
        for d in [3usize, 10] {
            let rel: Vec<Vec<f64>> = (2..=5)
                .map(|depth| {
                    let s =
                        funk_hecke_spectrum(&relu_l(depth), d, 10, default_quad_order(10)).unwrap();
                    vec![
                        s.eigenvalue(5) / s.eigenvalue(1),
                        s.eigenvalue(10) / s.eigenvalue(1),
                    ]
                })
                .collect();
            for w in rel.windows(2) {
                assert!(w[1][0] >= w[0][0] && w[1][1] >= w[0][1], "d={d}: {w:?}");
            }
        }
        let s = funk_hecke_spectrum(&relu_l(2), 10, 10, default_quad_order(10)).unwrap();
        assert!(s.eigenvalue(10) / s.eigenvalue(1) <= 1e-3);
    }

    #[test]
    fn export_format_and_determinism() {
        let s = poly_decay_spectrum(1.0, 3, 3).unwrap();
        let mut buf = Vec::new();
        write_spectrum_csv(&s, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "frequency,relative_eigenvalue");
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[2], "1,1.0000000000000000e0");
        assert_eq!(lines[3], "2,5.0000000000000000e-1");
        let third: f64 = lines[4].split(',').nth(1).unwrap().parse().unwrap();
        assert_relative_eq!(third, 1.0 / 3.0, max_relative = 1e-16);

        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
        let spec = funk_hecke_spectrum(&relu_l(2), 10, 10, 64).unwrap();
        export_spectrum(&spec, &a).unwrap();
        export_spectrum(&spec, &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

        let flat = funk_hecke_spectrum(&ShapeFunction::Polynomial(vec![1.0]), 3, 2, 64).unwrap();
        assert!(write_spectrum_csv(&flat, Vec::new()).is_err());
    }
}
