//! Per-task coordinate ascent over responsibilities and Dirichlet
//! parameters, and the LDA evidence lower bound.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dirichlet::{expected_log_pi, DirichletParams};
use crate::error::{Error, Result};
use crate::special::ln_gamma;
use crate::theme::{expected_loglik_matrix, EmbeddingPosterior, ThemeSet};

/// Probabilities below this are flushed to zero before renormalizing.
const UNDERFLOW_FLUSH: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EStepConfig {
    pub threshold: f64,
    pub max_iters: usize,
}

impl Default for EStepConfig {
    fn default() -> Self {
        Self {
            threshold: 1e-3,
            max_iters: 100,
        }
    }
}

impl EStepConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold.is_finite()) {
            return Err(Error::Config(format!(
                "E-step threshold must be positive, got {}",
                self.threshold
            )));
        }
        if self.max_iters == 0 {
            return Err(Error::Config("E-step max_iters must be at least 1".into()));
        }
        Ok(())
    }
}

/// Variational state of one task: `q(π) = Dir(γ)` and `q(zₙ) = Cat(rₙ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskPosterior {
    pub gamma: DirichletParams,
    /// N×K, rows on the simplex.
    pub responsibilities: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct EStepOutcome {
    pub posterior: TaskPosterior,
    pub iterations: usize,
    pub converged: bool,
}

/// The five expectations of the LDA bound. The two entropy fields hold
/// `−E ln q(z)` and `−E ln q(π)`, so `total` is their plain sum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboBreakdown {
    pub expected_loglik: f64,
    pub expected_log_pz: f64,
    pub expected_log_pprior: f64,
    pub entropy_qz: f64,
    pub entropy_qpi: f64,
    pub total: f64,
}

/// Row-wise softmax of `expected_logliks + log_pi_tilde`.
pub fn compute_responsibilities(
    expected_logliks: &DMatrix<f64>,
    log_pi_tilde: &[f64],
) -> Result<DMatrix<f64>> {
    let (n, k) = expected_logliks.shape();
    if log_pi_tilde.len() != k {
        return Err(Error::Usage(format!(
            "log π̃ has {} entries for {k} themes",
            log_pi_tilde.len()
        )));
    }
    let mut out = DMatrix::zeros(n, k);
    let mut logits = vec![0.0; k];
    for row in 0..n {
        let mut max = f64::NEG_INFINITY;
        for (col, logit) in logits.iter_mut().enumerate() {
            let v = expected_logliks[(row, col)] + log_pi_tilde[col];
            if v.is_nan() || v == f64::INFINITY {
                return Err(Error::Degeneracy(format!("non-finite logit in row {row}")));
            }
            *logit = v;
            max = max.max(v);
        }
        if max == f64::NEG_INFINITY {
            return Err(Error::Degeneracy(format!(
                "every responsibility logit in row {row} is -inf"
            )));
        }
        let mut total = 0.0;
        for (col, &logit) in logits.iter().enumerate() {
            let p = (logit - max).exp();
            out[(row, col)] = p;
            total += p;
        }
        let mut flushed_total = 0.0;
        for col in 0..k {
            let p = out[(row, col)] / total;
            let p = if p < UNDERFLOW_FLUSH { 0.0 } else { p };
            out[(row, col)] = p;
            flushed_total += p;
        }
        for col in 0..k {
            out[(row, col)] /= flushed_total;
        }
    }
    Ok(out)
}

/// `γₖ = αₖ + Σₙ rₙₖ`.
pub fn update_gamma(alpha: &DirichletParams, responsibilities: &DMatrix<f64>) -> Result<DirichletParams> {
    let k = alpha.len();
    if responsibilities.ncols() != k {
        return Err(Error::Usage(format!(
            "responsibilities have {} columns for {k} themes",
            responsibilities.ncols()
        )));
    }
    let gamma = alpha
        .as_slice()
        .iter()
        .enumerate()
        .map(|(col, &a)| a + responsibilities.column(col).sum())
        .collect();
    DirichletParams::new(gamma)
}

/// Alternates responsibilities and γ starting from `γ⁰ = α + N/K`.
pub fn run_estep(
    posts: &[EmbeddingPosterior],
    model: &ThemeSet,
    config: &EStepConfig,
) -> Result<EStepOutcome> {
    let n = posts.len() as f64;
    let k = model.k() as f64;
    let init = model.alpha().as_slice().iter().map(|a| a + n / k).collect();
    run_estep_from(posts, model, DirichletParams::new(init)?, config, |_, _| {})
}

/// E-step from an explicit starting γ, reporting every iterate to `observe`.
pub fn run_estep_from<F>(
    posts: &[EmbeddingPosterior],
    model: &ThemeSet,
    init_gamma: DirichletParams,
    config: &EStepConfig,
    mut observe: F,
) -> Result<EStepOutcome>
where
    F: FnMut(usize, &TaskPosterior),
{
    config.validate()?;
    if posts.is_empty() {
        return Err(Error::Usage("E-step needs at least one embedding".into()));
    }
    if init_gamma.len() != model.k() {
        return Err(Error::Usage("initial γ does not match the number of themes".into()));
    }
    let logliks = expected_loglik_matrix(posts, model)?;
    estep_on_logliks(&logliks, model.alpha(), init_gamma, config, &mut observe)
}

pub(crate) fn estep_on_logliks<F>(
    logliks: &DMatrix<f64>,
    alpha: &DirichletParams,
    mut gamma: DirichletParams,
    config: &EStepConfig,
    observe: &mut F,
) -> Result<EStepOutcome>
where
    F: FnMut(usize, &TaskPosterior),
{
    let k = alpha.len() as f64;
    let mut iterations = 0;
    loop {
        let resp = compute_responsibilities(logliks, &expected_log_pi(&gamma))?;
        let next = update_gamma(alpha, &resp)?;
        let change: f64 = next
            .as_slice()
            .iter()
            .zip(gamma.as_slice())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / k;
        iterations += 1;
        let posterior = TaskPosterior {
            gamma: next,
            responsibilities: resp,
        };
        observe(iterations, &posterior);
        let converged = change < config.threshold;
        if converged || iterations >= config.max_iters {
            return Ok(EStepOutcome {
                posterior,
                iterations,
                converged,
            });
        }
        gamma = posterior.gamma;
    }
}

/// Responsibilities of new points under an already-inferred `q(π)`.
pub fn responsibilities_under(
    posts: &[EmbeddingPosterior],
    model: &ThemeSet,
    gamma: &DirichletParams,
) -> Result<DMatrix<f64>> {
    let logliks = expected_loglik_matrix(posts, model)?;
    compute_responsibilities(&logliks, &expected_log_pi(gamma))
}

/// The full bound `A.1 + A.2 + A.3 − A.4 − A.5`.
pub fn lda_elbo(posts: &[EmbeddingPosterior], model: &ThemeSet, tp: &TaskPosterior) -> Result<ElboBreakdown> {
    if tp.responsibilities.shape() != (posts.len(), model.k()) || tp.gamma.len() != model.k() {
        return Err(Error::Usage("task posterior does not match the embeddings/themes".into()));
    }
    let logliks = expected_loglik_matrix(posts, model)?;
    Ok(elbo_on_logliks(&logliks, model.alpha(), tp))
}

pub(crate) fn elbo_on_logliks(logliks: &DMatrix<f64>, alpha: &DirichletParams, tp: &TaskPosterior) -> ElboBreakdown {
    let r = &tp.responsibilities;
    let log_pi = expected_log_pi(&tp.gamma);

    let expected_loglik = r.component_mul(logliks).sum();

    let mut expected_log_pz = 0.0;
    let mut neg_entropy_qz = 0.0;
    for (col, lp) in log_pi.iter().enumerate() {
        for &v in r.column(col).iter() {
            expected_log_pz += v * lp;
            if v > 0.0 {
                neg_entropy_qz += v * v.ln();
            }
        }
    }

    let a = alpha.as_slice();
    let g = tp.gamma.as_slice();
    let expected_log_pprior = ln_gamma(alpha.sum()) - a.iter().map(|&v| ln_gamma(v)).sum::<f64>()
        + a.iter().zip(&log_pi).map(|(v, lp)| (v - 1.0) * lp).sum::<f64>();
    let neg_entropy_qpi = ln_gamma(tp.gamma.sum())
        - g.iter()
            .zip(&log_pi)
            .map(|(&v, lp)| ln_gamma(v) - (v - 1.0) * lp)
            .sum::<f64>();

    let entropy_qz = -neg_entropy_qz;
    let entropy_qpi = -neg_entropy_qpi;
    ElboBreakdown {
        expected_loglik,
        expected_log_pz,
        expected_log_pprior,
        entropy_qz,
        entropy_qpi,
        total: expected_loglik + expected_log_pz + expected_log_pprior + entropy_qz + entropy_qpi,
    }
}
