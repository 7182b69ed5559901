//! Scalar distributions used by the variational objective.
//!
//! Positive scalars (squared scales, the weight-decay scale, the noise
//! precision) carry log-normal variational factors; the half-Cauchy auxiliary
//! variables carry inverse-gamma factors. Everything here is closed form and
//! takes externally drawn noise, so no function owns random state.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use statrs::function::gamma::{digamma, ln_gamma};
use std::f64::consts::{PI, SQRT_2};

use crate::error::{Error, Result};

/// Smallest standard deviation any variational factor may take.
pub const SIGMA_FLOOR: f64 = 1e-8;

/// `0.5 * ln(2πe)`, the entropy of a standard normal.
pub const HALF_LN_2PI_E: f64 = 1.418_938_533_204_672_7;

/// `0.5 * ln(2π)`.
pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Law of `exp(N(mu, sigma²))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogNormalParams {
    /// Mean of the log of the variate.
    pub mu: f64,
    /// Standard deviation of the log of the variate.
    pub sigma: f64,
}

impl LogNormalParams {
    pub fn new(mu: f64, sigma: f64) -> Result<Self> {
        if !mu.is_finite() || !sigma.is_finite() || sigma <= 0.0 {
            return Err(Error::invalid(format!(
                "log-normal parameters must be finite with sigma > 0 (mu={mu}, sigma={sigma})"
            )));
        }
        Ok(Self { mu, sigma })
    }

    /// Builds the factor from an unconstrained log-standard-deviation.
    pub fn from_log_sigma(mu: f64, log_sigma: f64) -> Self {
        Self {
            mu,
            sigma: log_sigma.exp().max(SIGMA_FLOOR),
        }
    }

    /// Reparameterized draw `exp(mu + sigma * eps)`.
    pub fn sample(&self, eps: f64) -> f64 {
        (self.mu + self.sigma * eps).exp()
    }

    pub fn mean(&self) -> f64 {
        (self.mu + 0.5 * self.sigma * self.sigma).exp()
    }

    pub fn variance(&self) -> f64 {
        let s2 = self.sigma * self.sigma;
        (s2.exp() - 1.0) * (2.0 * self.mu + s2).exp()
    }

    /// `E[1/X] = exp(-mu + sigma²/2)`.
    pub fn mean_inverse(&self) -> f64 {
        (-self.mu + 0.5 * self.sigma * self.sigma).exp()
    }

    /// Differential entropy of the variate (not of its logarithm).
    pub fn entropy(&self) -> f64 {
        self.mu + HALF_LN_2PI_E + self.sigma.ln()
    }

    pub fn ln_pdf(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return f64::NEG_INFINITY;
        }
        let lx = x.ln();
        let z = (lx - self.mu) / self.sigma;
        -lx - self.sigma.ln() - HALF_LN_2PI - 0.5 * z * z
    }

    /// Parameters of `sqrt(X)`: halves both log-moments.
    pub fn sqrt(&self) -> Self {
        Self {
            mu: 0.5 * self.mu,
            sigma: 0.5 * self.sigma,
        }
    }

    pub fn cdf(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return 0.0;
        }
        std_normal_cdf((x.ln() - self.mu) / self.sigma)
    }
}

/// Inverse-gamma law with density proportional to `v^(-shape-1) exp(-rate/v)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InvGammaParams {
    pub shape: f64,
    pub rate: f64,
}

/// Closed-form moments of an inverse-gamma variate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InvGammaMoments {
    /// `E[1/V] = shape / rate`
    pub mean_inverse: f64,
    /// `E[ln V] = ln(rate) - digamma(shape)`
    pub mean_log: f64,
    pub entropy: f64,
}

impl InvGammaParams {
    pub fn new(shape: f64, rate: f64) -> Result<Self> {
        if !(shape.is_finite() && rate.is_finite() && shape > 0.0 && rate > 0.0) {
            return Err(Error::invalid(format!(
                "inverse-gamma parameters must be positive (shape={shape}, rate={rate})"
            )));
        }
        Ok(Self { shape, rate })
    }

    pub fn moments(&self) -> InvGammaMoments {
        let a = self.shape;
        InvGammaMoments {
            mean_inverse: a / self.rate,
            mean_log: self.rate.ln() - digamma(a),
            entropy: a + self.rate.ln() + ln_gamma(a) - (1.0 + a) * digamma(a),
        }
    }

    pub fn ln_pdf(&self, v: f64) -> f64 {
        if v <= 0.0 {
            return f64::NEG_INFINITY;
        }
        invgamma_ln_pdf_from_stats(self.shape, self.rate, v.ln(), 1.0 / v)
    }

    /// Expected log-density `E[ln InvGamma(X | shape, rate)]` with `X` log-normal.
    pub fn expected_ln_pdf(&self, x: &LogNormalParams) -> f64 {
        invgamma_ln_pdf_from_stats(self.shape, self.rate, x.mu, x.mean_inverse())
    }
}

/// Gamma law with density proportional to `v^(shape-1) exp(-rate·v)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaParams {
    pub shape: f64,
    pub rate: f64,
}

impl GammaParams {
    pub fn new(shape: f64, rate: f64) -> Result<Self> {
        if !(shape.is_finite() && rate.is_finite() && shape > 0.0 && rate > 0.0) {
            return Err(Error::invalid(format!(
                "gamma parameters must be positive (shape={shape}, rate={rate})"
            )));
        }
        Ok(Self { shape, rate })
    }

    pub fn mean(&self) -> f64 {
        self.shape / self.rate
    }

    pub fn ln_pdf(&self, v: f64) -> f64 {
        if v <= 0.0 {
            return f64::NEG_INFINITY;
        }
        self.shape * self.rate.ln() - ln_gamma(self.shape) + (self.shape - 1.0) * v.ln()
            - self.rate * v
    }

    /// Expected log-density `E[ln Gamma(X | shape, rate)]` with `X` log-normal.
    pub fn expected_ln_pdf(&self, x: &LogNormalParams) -> f64 {
        self.shape * self.rate.ln() - ln_gamma(self.shape) + (self.shape - 1.0) * x.mu
            - self.rate * x.mean()
    }
}

/// `ln InvGamma(v | shape, rate)` written in terms of `ln v` and `1/v`, which
/// is the form every expectation below needs.
pub fn invgamma_ln_pdf_from_stats(shape: f64, rate: f64, ln_v: f64, inv_v: f64) -> f64 {
    shape * rate.ln() - ln_gamma(shape) - (shape + 1.0) * ln_v - rate * inv_v
}

/// `E[ln InvGamma(X | 1/2, 1/Λ)]` for independent log-normal `X` and
/// inverse-gamma `Λ`.
pub fn cross_term_lognormal_invgamma(x: &LogNormalParams, lam: &InvGammaParams) -> f64 {
    let m = lam.moments();
    -0.5 * m.mean_log - 0.5 * PI.ln() - 1.5 * x.mu - m.mean_inverse * x.mean_inverse()
}

/// `E[ln InvGamma(Λ | 1/2, 1/b²)]` for inverse-gamma `Λ`: the top level of the
/// half-Cauchy decomposition with scale `b`.
pub fn aux_prior_term(lam: &InvGammaParams, b: f64) -> f64 {
    let m = lam.moments();
    invgamma_ln_pdf_from_stats(0.5, 1.0 / (b * b), m.mean_log, m.mean_inverse)
}

/// `P(A·B < threshold)` for independent log-normal `A` and `B`.
pub fn lognormal_product_cdf(a: &LogNormalParams, b: &LogNormalParams, threshold: f64) -> f64 {
    if threshold <= 0.0 {
        return 0.0;
    }
    if threshold.is_infinite() {
        return 1.0;
    }
    let m = a.mu + b.mu;
    let s = (a.sigma * a.sigma + b.sigma * b.sigma).sqrt();
    std_normal_cdf((threshold.ln() - m) / s)
}

pub fn std_normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / SQRT_2)
}

pub fn std_normal_ln_pdf(z: f64) -> f64 {
    -HALF_LN_2PI - 0.5 * z * z
}

/// Numerically stable `ln Σ exp(x_i)`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}
