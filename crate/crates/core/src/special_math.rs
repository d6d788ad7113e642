//! Gegenbauer polynomials, harmonic counts, the Funk–Hecke constant and
//! Gauss quadrature rules.
//!
//! Everything here is pure and allocation-light; the rest of the crate
//! evaluates these in its innermost loops.

use std::f64::consts::PI;

use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

/// Tolerance for arguments that stray outside `[-1, 1]` through roundoff.
pub const UNIT_INTERVAL_SLACK: f64 = 1e-12;

/// Order `α` and degree `ℓ` of a Gegenbauer polynomial `C_ℓ^{(α)}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GegenbauerParams {
    alpha: f64,
    degree: usize,
}

impl GegenbauerParams {
    pub fn new(alpha: f64, degree: usize) -> Result<Self> {
        if !(alpha > 0.0) || !alpha.is_finite() {
            return Err(Error::Domain(format!(
                "Gegenbauer order must be positive, got {alpha}"
            )));
        }
        Ok(Self { alpha, degree })
    }

    /// Parameters for the harmonics of `S^{d-1}`, i.e. `α = (d-2)/2`.
    pub fn for_dimension(dimension: usize, degree: usize) -> Result<Self> {
        Self::new(alpha_for_dimension(dimension)?, degree)
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn degree(&self) -> usize {
        self.degree
    }
}

/// `α = (d-2)/2`, rejecting `d < 3`.
pub fn alpha_for_dimension(dimension: usize) -> Result<f64> {
    if dimension < 3 {
        return Err(Error::Domain(format!(
            "ambient dimension must be at least 3, got {dimension}"
        )));
    }
    Ok((dimension as f64 - 2.0) / 2.0)
}

/// Clamp `t` into `[-1, 1]` if it is within roundoff of the interval.
pub fn clamp_unit(t: f64) -> Result<f64> {
    if t.is_nan() || t.abs() > 1.0 + UNIT_INTERVAL_SLACK {
        return Err(Error::Domain(format!("argument {t} outside [-1, 1]")));
    }
    Ok(t.clamp(-1.0, 1.0))
}

/// `C_ℓ^{(α)}(t)` by the upward three-term recurrence.
pub fn gegenbauer(params: GegenbauerParams, t: f64) -> Result<f64> {
    let t = clamp_unit(t)?;
    Ok(gegenbauer_unchecked(params.alpha, params.degree, t))
}

/// Recurrence without argument validation. Callers guarantee `α > 0` and
/// `t ∈ [-1, 1]`.
#[inline]
pub(crate) fn gegenbauer_unchecked(alpha: f64, degree: usize, t: f64) -> f64 {
    if degree == 0 {
        return 1.0;
    }
    let mut prev = 1.0;
    let mut curr = 2.0 * alpha * t;
    for l in 2..=degree {
        let lf = l as f64;
        let next = (2.0 * (lf + alpha - 1.0) * t * curr - (lf + 2.0 * alpha - 2.0) * prev) / lf;
        prev = curr;
        curr = next;
    }
    curr
}

/// Fill `out[ℓ] = C_ℓ^{(α)}(t)` for `ℓ = 0..out.len()`.
pub(crate) fn gegenbauer_sequence(alpha: f64, t: f64, out: &mut [f64]) {
    if out.is_empty() {
        return;
    }
    out[0] = 1.0;
    if out.len() == 1 {
        return;
    }
    out[1] = 2.0 * alpha * t;
    for l in 2..out.len() {
        let lf = l as f64;
        out[l] = (2.0 * (lf + alpha - 1.0) * t * out[l - 1]
            - (lf + 2.0 * alpha - 2.0) * out[l - 2])
            / lf;
    }
}

/// `d/dt C_ℓ^{(α)}(t) = 2α C_{ℓ-1}^{(α+1)}(t)`.
#[inline]
pub(crate) fn gegenbauer_derivative_unchecked(alpha: f64, degree: usize, t: f64) -> f64 {
    if degree == 0 {
        return 0.0;
    }
    2.0 * alpha * gegenbauer_unchecked(alpha + 1.0, degree - 1, t)
}

/// `C_ℓ^{(α)}(t)` and its derivative in one call.
#[inline]
pub(crate) fn gegenbauer_with_derivative(alpha: f64, degree: usize, t: f64) -> (f64, f64) {
    (
        gegenbauer_unchecked(alpha, degree, t),
        gegenbauer_derivative_unchecked(alpha, degree, t),
    )
}

/// Exact binomial coefficient, `None` on `u128` overflow.
pub fn binomial_exact(n: u64, k: u64) -> Option<u128> {
    if k > n {
        return Some(0);
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        // acc * (n - i) / (i + 1) stays integral at every step.
        acc = acc.checked_mul((n - i) as u128)? / (i as u128 + 1);
    }
    Some(acc)
}

/// `ln binom(n, k)` through log-gamma.
pub fn ln_binomial(n: f64, k: f64) -> f64 {
    ln_gamma(n + 1.0) - ln_gamma(k + 1.0) - ln_gamma(n - k + 1.0)
}

/// Binomial coefficient as a float: exact integer path when it fits,
/// log-space otherwise.
pub fn binomial(n: u64, k: u64) -> f64 {
    match binomial_exact(n, k) {
        Some(v) if v < (1u128 << 53) => v as f64,
        _ => ln_binomial(n as f64, k as f64).exp(),
    }
}

/// `C_ℓ^{(α)}(1) = binom(ℓ + 2α - 1, ℓ)` for `α = (d-2)/2`.
pub fn gegenbauer_at_one(dimension: usize, degree: usize) -> Result<f64> {
    alpha_for_dimension(dimension)?;
    if degree == 0 {
        return Ok(1.0);
    }
    Ok(binomial((degree + dimension - 3) as u64, degree as u64))
}

/// Number of linearly independent degree-`ℓ` harmonics on `S^{d-1}`:
/// `((2ℓ+d-2)/(d-2)) · binom(ℓ+d-3, ℓ)`.
pub fn num_harmonics(degree: usize, dimension: usize) -> Result<u64> {
    if dimension < 3 {
        return Err(Error::Domain(format!(
            "harmonic count needs dimension >= 3, got {dimension}"
        )));
    }
    if degree == 0 {
        return Ok(1);
    }
    let overflow = || Error::Overflow(format!("N({degree}, {dimension})"));
    let n = (degree as u64)
        .checked_add(dimension as u64 - 3)
        .ok_or_else(overflow)?;
    let b = binomial_exact(n, degree as u64).ok_or_else(overflow)?;
    let numer = b
        .checked_mul(2 * degree as u128 + dimension as u128 - 2)
        .ok_or_else(overflow)?;
    let count = numer / (dimension as u128 - 2);
    u64::try_from(count).map_err(|_| overflow())
}

/// Funk–Hecke constant for the uniform probability measure on `S^{d-1}`:
/// `Γ(d/2) / (√π Γ((d-1)/2))`.
pub fn funk_hecke_constant(dimension: usize) -> Result<f64> {
    if dimension < 3 {
        return Err(Error::Domain(format!(
            "Funk-Hecke constant needs dimension >= 3, got {dimension}"
        )));
    }
    if dimension > 300 {
        let d = dimension as f64;
        return Ok((ln_gamma(d / 2.0) - ln_gamma((d - 1.0) / 2.0)).exp() / PI.sqrt());
    }
    // c_{d+2} = c_d · d / (d - 1), from Γ(x + 1) = x Γ(x).
    let (mut c, mut d) = if dimension % 2 == 1 {
        (0.5, 3)
    } else {
        (2.0 / PI, 4)
    };
    while d < dimension {
        c *= d as f64 / (d as f64 - 1.0);
        d += 2;
    }
    Ok(c)
}

/// A Gauss rule: `∫ f ≈ Σ w_i f(x_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
    pub order: usize,
}

impl QuadratureRule {
    pub fn integrate<F: FnMut(f64) -> f64>(&self, mut f: F) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| w * f(x))
            .sum()
    }

    /// Affine map of a rule on `[-1, 1]` onto `[a, b]`.
    pub fn mapped(&self, a: f64, b: f64) -> QuadratureRule {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        QuadratureRule {
            nodes: self.nodes.iter().map(|&x| mid + half * x).collect(),
            weights: self.weights.iter().map(|&w| half * w).collect(),
            order: self.order,
        }
    }
}

/// Legendre `P_n(x)` and `P_n'(x)`.
fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let nf = n as f64;
    let dp = nf * (x * p1 - p0) / (x * x - 1.0);
    (p1, dp)
}

/// `n`-point Gauss–Legendre rule on `[-1, 1]`, nodes ascending.
pub fn gauss_legendre(n: usize) -> Result<QuadratureRule> {
    if n == 0 {
        return Err(Error::InvalidArgument(
            "quadrature order must be >= 1".into(),
        ));
    }
    let nf = n as f64;
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut x = (PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        let mut dp = 1.0;
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() <= 1e-16 * x.abs().max(1.0) {
                break;
            }
        }
        let (_, d) = legendre_with_derivative(n, x);
        if d.is_finite() {
            dp = d;
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        // Newton converged to the i-th largest root.
        nodes[n - 1 - i] = x;
        nodes[i] = -x;
        weights[n - 1 - i] = w;
        weights[i] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    Ok(QuadratureRule {
        nodes,
        weights,
        order: n,
    })
}

/// `n`-point Gauss–Hermite rule for the weight `e^{-x²}` on the real line,
/// nodes ascending.
pub fn gauss_hermite(n: usize) -> Result<QuadratureRule> {
    if n == 0 {
        return Err(Error::InvalidArgument(
            "quadrature order must be >= 1".into(),
        ));
    }
    let nf = n as f64;
    let pim4 = PI.powf(-0.25);
    let mut roots: Vec<(f64, f64)> = Vec::with_capacity(n);
    let mut z = 0.0;
    for i in 0..n.div_ceil(2) {
        z = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-0.16667),
            1 => z - 1.14 * nf.powf(0.426) / z,
            2 => 1.86 * z - 0.86 * roots[0].0,
            3 => 1.91 * z - 0.91 * roots[1].0,
            _ => 2.0 * z - roots[i - 2].0,
        };
        let mut pp = 0.0;
        for _ in 0..200 {
            // Orthonormal Hermite recurrence.
            let mut p1 = pim4;
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
            }
            pp = (2.0 * nf).sqrt() * p2;
            let dz = p1 / pp;
            z -= dz;
            if dz.abs() <= 1e-15 * z.abs().max(1.0) {
                break;
            }
        }
        roots.push((z, 2.0 / (pp * pp)));
    }
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for (i, &(x, w)) in roots.iter().enumerate() {
        nodes[n - 1 - i] = x;
        nodes[i] = -x;
        weights[n - 1 - i] = w;
        weights[i] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    Ok(QuadratureRule {
        nodes,
        weights,
        order: n,
    })
}
