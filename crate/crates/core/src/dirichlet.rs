//! Dirichlet quantities used by the E-step, the ELBO and task analytics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::special::{digamma_unchecked, ln_gamma, ln_multivariate_beta};

/// Concentration vector of a Dirichlet distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct DirichletParams(Vec<f64>);

impl DirichletParams {
    /// Validates that every component is finite and strictly positive.
    ///
    /// A single component is accepted (the point mass on the 0-simplex);
    /// model configuration separately requires at least two themes.
    pub fn new(concentration: Vec<f64>) -> Result<Self> {
        if concentration.is_empty() {
            return Err(Error::Usage("Dirichlet needs at least one component".into()));
        }
        if let Some(bad) = concentration.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(Error::Domain(format!(
                "Dirichlet concentration must be finite and positive, got {bad}"
            )));
        }
        Ok(Self(concentration))
    }

    pub fn symmetric(value: f64, k: usize) -> Result<Self> {
        Self::new(vec![value; k])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn sum(&self) -> f64 {
        self.0.iter().sum()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    fn check_same_len(&self, other: &Self) -> Result<()> {
        if self.len() == other.len() {
            Ok(())
        } else {
            Err(Error::Usage(format!(
                "Dirichlet dimension mismatch: {} vs {}",
                self.len(),
                other.len()
            )))
        }
    }
}

impl TryFrom<Vec<f64>> for DirichletParams {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<DirichletParams> for Vec<f64> {
    fn from(p: DirichletParams) -> Self {
        p.0
    }
}

/// `E[ln πₖ] = ψ(γₖ) − ψ(Σⱼ γⱼ)` under `π ∼ Dir(γ)`.
pub fn expected_log_pi(gamma: &DirichletParams) -> Vec<f64> {
    let psi_total = digamma_unchecked(gamma.sum());
    gamma
        .as_slice()
        .iter()
        .map(|&g| digamma_unchecked(g) - psi_total)
        .collect()
}

/// Differential entropy of `Dir(γ)`.
pub fn dirichlet_entropy(gamma: &DirichletParams) -> f64 {
    let g = gamma.as_slice();
    let total = gamma.sum();
    let k = g.len() as f64;
    let weighted: f64 = g.iter().map(|&v| (v - 1.0) * digamma_unchecked(v)).sum();
    ln_multivariate_beta(g) + (total - k) * digamma_unchecked(total) - weighted
}

/// `KL[Dir(p) ‖ Dir(q)]`. Not symmetric.
pub fn dirichlet_kl(p: &DirichletParams, q: &DirichletParams) -> Result<f64> {
    p.check_same_len(q)?;
    let (ps, qs) = (p.as_slice(), q.as_slice());
    let p_total = p.sum();
    let psi_total = digamma_unchecked(p_total);
    let mut kl = ln_gamma(p_total) - ln_gamma(q.sum());
    for (&a, &b) in ps.iter().zip(qs) {
        kl += ln_gamma(b) - ln_gamma(a) + (a - b) * (digamma_unchecked(a) - psi_total);
    }
    Ok(kl)
}

/// Mean of `KL[new ‖ tᵢ]` over the training set.
pub fn mean_kl_to_set(new: &DirichletParams, training: &[DirichletParams]) -> Result<f64> {
    if training.is_empty() {
        return Err(Error::Usage("mean KL needs a non-empty training set".into()));
    }
    let mut total = 0.0;
    for t in training {
        total += dirichlet_kl(new, t)?;
    }
    Ok(total / training.len() as f64)
}
