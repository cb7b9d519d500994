//! Mini-batch M-step: pooled sufficient statistics, local maximum-likelihood
//! themes, a Newton step on the Dirichlet prior, and online blending.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dirichlet::{expected_log_pi, DirichletParams};
use crate::error::{Error, Result};
use crate::estep::TaskPosterior;
use crate::special::{digamma_unchecked, trigamma_unchecked};
use crate::theme::{EmbeddingPosterior, TaskTheme, ThemeSet};

/// Lower clamp applied to every α component after an update.
pub const ALPHA_MIN: f64 = 1e-3;
/// Themes with less responsibility mass than this get no local estimate.
pub const UNSUPPORTED_MASS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct SufficientStats {
    pub n_k: Vec<f64>,
    pub weighted_mean_sum: Vec<DVector<f64>>,
    /// Scatter around the pooled local mean, plus the posterior variances.
    pub weighted_scatter: Vec<DMatrix<f64>>,
    pub gamma_list: Vec<DirichletParams>,
    pub task_count: usize,
    pub point_count: usize,
}

/// One task's contribution: the embeddings and their responsibilities, plus
/// the task's γ.
pub type TaskEvidence<'a> = (&'a [EmbeddingPosterior], &'a TaskPosterior);

pub fn accumulate_stats(tasks: &[TaskEvidence<'_>]) -> Result<SufficientStats> {
    let Some(&(first_posts, first_tp)) = tasks.first() else {
        return Err(Error::Usage("cannot accumulate statistics of an empty batch".into()));
    };
    let k = first_tp.gamma.len();
    let d = first_posts
        .first()
        .map(EmbeddingPosterior::dim)
        .or_else(|| tasks.iter().find_map(|(p, _)| p.first().map(EmbeddingPosterior::dim)))
        .ok_or_else(|| Error::Usage("batch contains no embeddings".into()))?;

    let mut n_k = vec![0.0; k];
    let mut weighted_mean_sum = vec![DVector::zeros(d); k];
    let mut point_count = 0;
    for (i, (posts, tp)) in tasks.iter().enumerate() {
        if tp.gamma.len() != k || tp.responsibilities.shape() != (posts.len(), k) {
            return Err(Error::Usage(format!("task {i}: responsibilities do not match K = {k}")));
        }
        if posts.iter().any(|p| p.dim() != d) {
            return Err(Error::Usage(format!("task {i}: embedding dimension differs from {d}")));
        }
        point_count += posts.len();
        for (n, post) in posts.iter().enumerate() {
            for c in 0..k {
                let r = tp.responsibilities[(n, c)];
                n_k[c] += r;
                weighted_mean_sum[c].axpy(r, post.m(), 1.0);
            }
        }
    }

    let local_means: Vec<DVector<f64>> = weighted_mean_sum
        .iter()
        .zip(&n_k)
        .map(|(s, &n)| if n > 0.0 { s / n } else { DVector::zeros(d) })
        .collect();

    let mut weighted_scatter = vec![DMatrix::zeros(d, d); k];
    for (posts, tp) in tasks {
        for (n, post) in posts.iter().enumerate() {
            let diff_by_theme = local_means.iter().map(|mu| post.m() - mu);
            for (c, diff) in diff_by_theme.enumerate() {
                let r = tp.responsibilities[(n, c)];
                if r == 0.0 {
                    continue;
                }
                let scatter = &mut weighted_scatter[c];
                scatter.ger(r, &diff, &diff, 1.0);
                for j in 0..d {
                    scatter[(j, j)] += r * post.s()[j] * post.s()[j];
                }
            }
        }
    }

    Ok(SufficientStats {
        n_k,
        weighted_mean_sum,
        weighted_scatter,
        gamma_list: tasks.iter().map(|(_, tp)| tp.gamma.clone()).collect(),
        task_count: tasks.len(),
        point_count,
    })
}

#[derive(Debug, Clone)]
pub struct LocalCandidate {
    pub mean: DVector<f64>,
    /// Covariance before the floor.
    pub raw_covariance: DMatrix<f64>,
    /// Floored and factorized.
    pub theme: TaskTheme,
}

/// Per-theme local estimates; `None` marks an unsupported theme.
pub fn local_theme_mle(stats: &SufficientStats) -> Result<Vec<Option<LocalCandidate>>> {
    let mut out = Vec::with_capacity(stats.n_k.len());
    for (c, &n) in stats.n_k.iter().enumerate() {
        if n < UNSUPPORTED_MASS {
            out.push(None);
            continue;
        }
        let mean = &stats.weighted_mean_sum[c] / n;
        let raw_covariance = &stats.weighted_scatter[c] / n;
        let theme = TaskTheme::floored(mean.clone(), raw_covariance.clone())?;
        out.push(Some(LocalCandidate {
            mean,
            raw_covariance,
            theme,
        }));
    }
    if out.iter().all(Option::is_none) {
        return Err(Error::Degeneracy("no theme carries responsibility mass".into()));
    }
    Ok(out)
}

/// Newton step `H⁻¹g` for α using the diagonal-plus-rank-one Hessian.
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaNewton {
    pub gradient: Vec<f64>,
    pub q_diag: Vec<f64>,
    pub a: f64,
    pub b: f64,
    pub step: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlphaStepMode {
    /// One step from the whole batch's γ list.
    #[default]
    Pooled,
    /// Average of per-task steps, each computed with T = 1.
    PerTask,
}

pub fn alpha_newton_step(alpha: &DirichletParams, stats: &SufficientStats) -> Result<AlphaNewton> {
    newton_from_gammas(alpha, &stats.gamma_list)
}

/// The per-task reading: every task's step with T = 1, averaged.
pub fn alpha_newton_step_per_task(alpha: &DirichletParams, stats: &SufficientStats) -> Result<AlphaNewton> {
    let steps = stats
        .gamma_list
        .iter()
        .map(|g| newton_from_gammas(alpha, std::slice::from_ref(g)))
        .collect::<Result<Vec<_>>>()?;
    let Some(first) = steps.first() else {
        return Err(Error::Usage("no γ in the batch".into()));
    };
    let t = steps.len() as f64;
    let avg = |f: &dyn Fn(&AlphaNewton) -> &[f64]| -> Vec<f64> {
        (0..first.step.len())
            .map(|c| steps.iter().map(|s| f(s)[c]).sum::<f64>() / t)
            .collect()
    };
    Ok(AlphaNewton {
        gradient: avg(&|s| &s.gradient),
        q_diag: first.q_diag.clone(),
        a: first.a,
        b: steps.iter().map(|s| s.b).sum::<f64>() / t,
        step: avg(&|s| &s.step),
    })
}

fn newton_from_gammas(alpha: &DirichletParams, gammas: &[DirichletParams]) -> Result<AlphaNewton> {
    if gammas.is_empty() {
        return Err(Error::Usage("α Newton step needs at least one task".into()));
    }
    let k = alpha.len();
    if gammas.iter().any(|g| g.len() != k) {
        return Err(Error::Usage("γ dimension differs from α".into()));
    }
    let t = gammas.len() as f64;
    let psi_total = digamma_unchecked(alpha.sum());
    let mut gradient: Vec<f64> = alpha
        .as_slice()
        .iter()
        .map(|&a| t * (psi_total - digamma_unchecked(a)))
        .collect();
    for g in gammas {
        for (grad, lp) in gradient.iter_mut().zip(expected_log_pi(g)) {
            *grad += lp;
        }
    }
    let q_diag: Vec<f64> = alpha.as_slice().iter().map(|&a| -t * trigamma_unchecked(a)).collect();
    let a = t * trigamma_unchecked(alpha.sum());
    let numer: f64 = gradient.iter().zip(&q_diag).map(|(g, q)| g / q).sum();
    let denom: f64 = 1.0 / a + q_diag.iter().map(|q| 1.0 / q).sum::<f64>();
    let b = numer / denom;
    let step = gradient.iter().zip(&q_diag).map(|(g, q)| (g - b) / q).collect();
    Ok(AlphaNewton {
        gradient,
        q_diag,
        a,
        b,
        step,
    })
}

/// `ρᵢ = (τ₀ + i)^(−τ₁)`.
pub fn learning_rate(i: u64, tau0: f64, tau1: f64) -> Result<f64> {
    if !(tau0 >= 0.0 && tau0.is_finite()) {
        return Err(Error::Config(format!("τ₀ must be finite and ≥ 0, got {tau0}")));
    }
    // The boundary value 0.5 is admitted: it is the reported default.
    if !(0.5..=1.0).contains(&tau1) {
        return Err(Error::Config(format!("τ₁ must lie in [0.5, 1], got {tau1}")));
    }
    let base = tau0 + i as f64;
    if base < 1.0 {
        return Err(Error::Config(format!(
            "τ₀ + i = {base} < 1 gives a step size above 1"
        )));
    }
    Ok(base.powf(-tau1))
}

/// Convex blend of the global themes toward the local estimates, and a
/// damped Newton update of α.
pub fn online_blend(
    model: &ThemeSet,
    locals: &[Option<LocalCandidate>],
    newton: &AlphaNewton,
    rho: f64,
) -> Result<ThemeSet> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::Usage(format!("blend weight must lie in (0, 1], got {rho}")));
    }
    if locals.len() != model.k() || newton.step.len() != model.k() {
        return Err(Error::Usage("local estimates do not match the number of themes".into()));
    }
    let mut themes = Vec::with_capacity(model.k());
    for (theme, local) in model.themes().iter().zip(locals) {
        let Some(local) = local else {
            themes.push(theme.clone());
            continue;
        };
        let mean = theme.mean() * (1.0 - rho) + local.theme.mean() * rho;
        let cov = theme.covariance() * (1.0 - rho) + local.theme.covariance() * rho;
        themes.push(TaskTheme::new_or_floored(mean, cov)?);
    }

    let alpha = model.alpha().as_slice();
    let proposed: Vec<f64> = alpha.iter().zip(&newton.step).map(|(a, s)| a - rho * s).collect();
    let proposed = if proposed.iter().any(|&v| v <= 0.0) {
        alpha.iter().zip(&newton.step).map(|(a, s)| a - 0.5 * rho * s).collect()
    } else {
        proposed
    };
    let clamped = proposed.into_iter().map(|v| v.max(ALPHA_MIN)).collect();
    ThemeSet::new(themes, DirichletParams::new(clamped)?)
}
