//! Observation models and their Gaussian-expected log densities.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::special_math::{gauss_hermite, QuadratureRule};

/// Gauss–Hermite nodes used for non-conjugate expectations.
pub const HERMITE_NODES: usize = 20;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Link from latent function value to class probability.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Link {
    Probit,
    Logit,
}

/// Observation model `p(y | f)`.
///
/// The Gaussian noise variance is a trainable hyper-parameter and lives in
/// the variational state, not here.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Likelihood {
    Gaussian,
    Bernoulli(Link),
}

impl Likelihood {
    pub fn name(&self) -> &'static str {
        match self {
            Likelihood::Gaussian => "gaussian",
            Likelihood::Bernoulli(Link::Probit) => "bernoulli-probit",
            Likelihood::Bernoulli(Link::Logit) => "bernoulli-logit",
        }
    }

    pub fn has_noise(&self) -> bool {
        matches!(self, Likelihood::Gaussian)
    }

    /// Reject targets the likelihood cannot explain.
    pub fn validate_targets(&self, targets: &[f64]) -> Result<()> {
        for (row, &y) in targets.iter().enumerate() {
            let ok = match self {
                Likelihood::Gaussian => y.is_finite(),
                Likelihood::Bernoulli(_) => y == 0.0 || y == 1.0,
            };
            if !ok {
                return Err(Error::InvalidTarget {
                    row,
                    value: y,
                    likelihood: self.name(),
                });
            }
        }
        Ok(())
    }
}

/// `E_{f ~ N(μ, v)}[log p(y | f)]` and its partial derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpectedLogLik {
    pub value: f64,
    pub d_mean: f64,
    pub d_var: f64,
    /// Derivative with respect to the log noise variance (Gaussian only).
    pub d_log_noise: f64,
}

/// Evaluates expected log likelihoods, caching the quadrature rule.
#[derive(Debug, Clone)]
pub struct ExpectationEngine {
    likelihood: Likelihood,
    hermite: QuadratureRule,
}

impl ExpectationEngine {
    pub fn new(likelihood: Likelihood) -> Self {
        Self {
            likelihood,
            hermite: gauss_hermite(HERMITE_NODES).expect("fixed positive order"),
        }
    }

    pub fn likelihood(&self) -> Likelihood {
        self.likelihood
    }

    pub fn expected_log_lik(&self, y: f64, mean: f64, var: f64, log_noise: f64) -> ExpectedLogLik {
        match self.likelihood {
            Likelihood::Gaussian => {
                let noise = log_noise.exp();
                let resid = y - mean;
                let quad = resid * resid + var;
                ExpectedLogLik {
                    value: -LN_SQRT_2PI - 0.5 * log_noise - 0.5 * quad / noise,
                    d_mean: resid / noise,
                    d_var: -0.5 / noise,
                    d_log_noise: -0.5 + 0.5 * quad / noise,
                }
            }
            Likelihood::Bernoulli(link) => {
                let sign = 2.0 * y - 1.0;
                let var = var.max(1e-300);
                let scale = (2.0 * var).sqrt();
                let norm = PI.sqrt();
                let mut value = 0.0;
                let mut d_mean = 0.0;
                let mut d_var = 0.0;
                for (&x, &w) in self.hermite.nodes.iter().zip(&self.hermite.weights) {
                    let f = mean + scale * x;
                    let (h, dh) = match link {
                        Link::Probit => {
                            let (lp, mills) = log_ndtr_with_mills(sign * f);
                            (lp, sign * mills)
                        }
                        Link::Logit => {
                            let z = sign * f;
                            (-softplus(-z), sign * sigmoid(-z))
                        }
                    };
                    let wn = w / norm;
                    value += wn * h;
                    d_mean += wn * dh;
                    d_var += wn * dh * x / scale;
                }
                ExpectedLogLik {
                    value,
                    d_mean,
                    d_var,
                    d_log_noise: 0.0,
                }
            }
        }
    }

    /// Predictive probability `P(y = 1)` for `f ~ N(μ, v)`.
    pub fn predictive_probability(&self, mean: f64, var: f64) -> f64 {
        match self.likelihood {
            Likelihood::Gaussian => f64::NAN,
            Likelihood::Bernoulli(Link::Probit) => ndtr(mean / (1.0 + var).sqrt()),
            Likelihood::Bernoulli(Link::Logit) => {
                let scale = (2.0 * var.max(0.0)).sqrt();
                self.hermite
                    .nodes
                    .iter()
                    .zip(&self.hermite.weights)
                    .map(|(&x, &w)| w * sigmoid(mean + scale * x))
                    .sum::<f64>()
                    / PI.sqrt()
            }
        }
    }
}

/// Standard normal CDF.
pub fn ndtr(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// `log Φ(z)` and the inverse Mills ratio `φ(z)/Φ(z)`.
pub fn log_ndtr_with_mills(z: f64) -> (f64, f64) {
    if z < -20.0 {
        // Asymptotic series Φ(z) ≈ φ(z)/(-z) · S(z).
        let z2 = z * z;
        let inv2 = 1.0 / z2;
        let s = 1.0 - inv2 + 3.0 * inv2 * inv2 - 15.0 * inv2.powi(3) + 105.0 * inv2.powi(4);
        let ds = 2.0 / (z2 * z) - 12.0 / (z2 * z2 * z) + 90.0 / (z2.powi(3) * z)
            - 840.0 / (z2.powi(4) * z);
        let log_phi = -0.5 * z2 - (-z).ln() - LN_SQRT_2PI + s.ln();
        let mills = -z - 1.0 / z + ds / s;
        (log_phi, mills)
    } else {
        let log_cdf = if z > 0.0 {
            (-ndtr(-z)).ln_1p()
        } else {
            ndtr(z).ln()
        };
        let mills = (-0.5 * z * z - LN_SQRT_2PI - log_cdf).exp();
        (log_cdf, mills)
    }
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^z)` without overflow.
#[inline]
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}
