//! Log-gamma, digamma and trigamma for positive real arguments.
//!
//! All three use the same scheme: shift the argument upward with the
//! functional recurrence until it reaches [`ASYMPTOTIC_THRESHOLD`], then
//! evaluate the Stirling-type asymptotic series.

use crate::error::{Error, Result};

const ASYMPTOTIC_THRESHOLD: f64 = 6.0;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// A strictly positive, finite real.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct PositiveReal(f64);

impl PositiveReal {
    pub fn new(value: f64) -> Result<Self> {
        if value.is_finite() && value > 0.0 {
            Ok(Self(value))
        } else {
            Err(Error::Domain(format!(
                "expected a finite positive argument, got {value}"
            )))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }

    pub fn log_gamma(self) -> f64 {
        ln_gamma(self.0)
    }

    pub fn digamma(self) -> f64 {
        digamma_unchecked(self.0)
    }

    pub fn trigamma(self) -> f64 {
        trigamma_unchecked(self.0)
    }
}

impl TryFrom<f64> for PositiveReal {
    type Error = Error;

    fn try_from(value: f64) -> Result<Self> {
        Self::new(value)
    }
}

/// `ln Γ(x)` with domain checking.
pub fn log_gamma(x: f64) -> Result<f64> {
    PositiveReal::new(x).map(PositiveReal::log_gamma)
}

/// `ψ(x) = d/dx ln Γ(x)` with domain checking.
pub fn digamma(x: f64) -> Result<f64> {
    PositiveReal::new(x).map(PositiveReal::digamma)
}

/// `Ψ(x) = d²/dx² ln Γ(x)` with domain checking.
pub fn trigamma(x: f64) -> Result<f64> {
    PositiveReal::new(x).map(PositiveReal::trigamma)
}

// Unchecked kernels. Callers inside the crate guarantee x > 0.

pub(crate) fn ln_gamma(mut x: f64) -> f64 {
    debug_assert!(x > 0.0, "ln_gamma({x})");
    let mut shift = 1.0;
    let mut shifted = false;
    while x < ASYMPTOTIC_THRESHOLD {
        shift *= x;
        x += 1.0;
        shifted = true;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    // Bernoulli-number coefficients B_2k / (2k (2k-1)), k = 1..7.
    let series = inv
        * (1.0 / 12.0
            + inv2
                * (-1.0 / 360.0
                    + inv2
                        * (1.0 / 1260.0
                            + inv2
                                * (-1.0 / 1680.0
                                    + inv2
                                        * (1.0 / 1188.0
                                            + inv2 * (-691.0 / 360_360.0 + inv2 / 156.0))))));
    let stirling = (x - 0.5) * x.ln() - x + HALF_LN_2PI + series;
    if shifted {
        stirling - shift.ln()
    } else {
        stirling
    }
}

pub(crate) fn digamma_unchecked(mut x: f64) -> f64 {
    debug_assert!(x > 0.0, "digamma({x})");
    let mut acc = 0.0;
    while x < ASYMPTOTIC_THRESHOLD {
        acc -= 1.0 / x;
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    // B_2k / (2k), k = 1..7.
    let series = inv2
        * (1.0 / 12.0
            - inv2
                * (1.0 / 120.0
                    - inv2
                        * (1.0 / 252.0
                            - inv2
                                * (1.0 / 240.0
                                    - inv2
                                        * (1.0 / 132.0
                                            - inv2 * (691.0 / 32_760.0 - inv2 / 12.0))))));
    acc + x.ln() - 0.5 * inv - series
}

pub(crate) fn trigamma_unchecked(mut x: f64) -> f64 {
    debug_assert!(x > 0.0, "trigamma({x})");
    let mut acc = 0.0;
    while x < ASYMPTOTIC_THRESHOLD {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    // B_2k / x^(2k+1), k = 1..7.
    let series = inv
        * inv2
        * (1.0 / 6.0
            - inv2
                * (1.0 / 30.0
                    - inv2
                        * (1.0 / 42.0
                            - inv2
                                * (1.0 / 30.0
                                    - inv2
                                        * (5.0 / 66.0
                                            - inv2 * (691.0 / 2730.0 - inv2 * 7.0 / 6.0))))));
    acc + inv + 0.5 * inv2 + series
}

/// `ln B(a) = Σ ln Γ(aₖ) − ln Γ(Σ aₖ)`.
pub(crate) fn ln_multivariate_beta(a: &[f64]) -> f64 {
    let sum: f64 = a.iter().sum();
    a.iter().map(|&v| ln_gamma(v)).sum::<f64>() - ln_gamma(sum)
}
