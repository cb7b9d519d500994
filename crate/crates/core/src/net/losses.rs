//! Continuous-Bernoulli reconstruction likelihood, prototypical
//! classification loss and reparameterized sampling.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::theme::EmbeddingPosterior;

/// Half-width around λ = ½ inside which ln C(λ) uses its Taylor series.
pub const CB_TAYLOR_RADIUS: f64 = 1e-3;

/// Reparameterized draw `u = m + s ⊙ noise`; the noise is kept for backward.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSample {
    pub u: DVector<f64>,
    pub noise: DVector<f64>,
}

pub fn sample_embedding(post: &EmbeddingPosterior, noise: DVector<f64>) -> Result<EmbeddingSample> {
    if noise.len() != post.dim() {
        return Err(Error::Usage(format!(
            "noise of length {} for an embedding of dimension {}",
            noise.len(),
            post.dim()
        )));
    }
    if noise.iter().any(|v| !v.is_finite()) {
        return Err(Error::Usage("noise must be finite".into()));
    }
    let u = post.m() + post.s().component_mul(&noise);
    Ok(EmbeddingSample { u, noise })
}

/// `ln C(λ)` with `C(λ) = 2 atanh(1−2λ) / (1−2λ)`.
pub fn ln_cb_normalizer(lambda: f64) -> f64 {
    let t = 1.0 - 2.0 * lambda;
    if (lambda - 0.5).abs() <= CB_TAYLOR_RADIUS {
        let t2 = t * t;
        std::f64::consts::LN_2
            + t2 * (1.0 / 3.0 + t2 * (13.0 / 90.0 + t2 * (251.0 / 2835.0 + t2 * (3551.0 / 56700.0))))
    } else {
        (2.0 * t.atanh() / t).ln()
    }
}

/// `d ln C / dλ`.
pub fn d_ln_cb_normalizer(lambda: f64) -> f64 {
    let t = 1.0 - 2.0 * lambda;
    let d_dt = if (lambda - 0.5).abs() <= CB_TAYLOR_RADIUS {
        let t2 = t * t;
        t * (2.0 / 3.0 + t2 * (52.0 / 90.0 + t2 * (1506.0 / 2835.0 + t2 * (28408.0 / 56700.0))))
    } else {
        1.0 / ((1.0 - t * t) * t.atanh()) - 1.0 / t
    };
    -2.0 * d_dt
}

fn cb_point(x: f64, lambda: f64) -> f64 {
    ln_cb_normalizer(lambda) + x * lambda.ln() + (1.0 - x) * (-lambda).ln_1p()
}

/// `∂/∂λ` of one continuous-Bernoulli log-density term.
pub(crate) fn d_cb_point(x: f64, lambda: f64) -> f64 {
    d_ln_cb_normalizer(lambda) + x / lambda - (1.0 - x) / (1.0 - lambda)
}

/// `Σₚ ln CB(xₚ | λₚ)`.
pub fn cb_log_likelihood(x: &[f64], lambda: &[f64]) -> Result<f64> {
    if x.len() != lambda.len() {
        return Err(Error::Usage(format!(
            "data width {} vs decoder width {}",
            x.len(),
            lambda.len()
        )));
    }
    let mut total = 0.0;
    for (&xv, &lv) in x.iter().zip(lambda) {
        if !(0.0..=1.0).contains(&xv) {
            return Err(Error::Usage(format!("data value {xv} outside [0, 1]")));
        }
        if !(lv > 0.0 && lv < 1.0) {
            return Err(Error::Usage(format!("λ = {lv} outside (0, 1)")));
        }
        total += cb_point(xv, lv);
    }
    Ok(total)
}

/// Labelled embedding used by the prototypical loss.
pub type Labelled<'a> = (usize, &'a DVector<f64>);

/// Summed cross-entropy and its gradients with respect to every train and
/// val embedding. Val points whose class has no train exemplar are skipped
/// and reported in `skipped`.
#[derive(Debug, Clone)]
pub(crate) struct ProtoTerms {
    pub total_ce: f64,
    pub counted: usize,
    pub skipped: usize,
    pub d_train: Vec<DVector<f64>>,
    pub d_val: Vec<DVector<f64>>,
}

pub(crate) fn prototypical_terms(train: &[Labelled<'_>], val: &[Labelled<'_>]) -> Result<ProtoTerms> {
    let dim = train
        .first()
        .or(val.first())
        .map(|(_, u)| u.len())
        .unwrap_or(0);
    if train.iter().chain(val).any(|(_, u)| u.len() != dim) {
        return Err(Error::Usage("embeddings of mixed dimension".into()));
    }
    let mut classes: Vec<usize> = train.iter().map(|(c, _)| *c).collect();
    classes.sort_unstable();
    classes.dedup();
    let mut sums = vec![DVector::zeros(dim); classes.len()];
    let mut counts = vec![0usize; classes.len()];
    let slot_of = |c: usize| classes.binary_search(&c).ok();
    for (c, u) in train {
        let j = slot_of(*c).expect("train class is indexed");
        sums[j] += *u;
        counts[j] += 1;
    }
    let protos: Vec<DVector<f64>> = sums
        .iter()
        .zip(&counts)
        .map(|(s, &n)| s / n as f64)
        .collect();

    let mut d_protos = vec![DVector::zeros(dim); classes.len()];
    let mut d_val = vec![DVector::zeros(dim); val.len()];
    let mut total_ce = 0.0;
    let mut counted = 0;
    let mut skipped = 0;
    for (v, (c, u)) in val.iter().enumerate() {
        let Some(target) = slot_of(*c) else {
            skipped += 1;
            continue;
        };
        let diffs: Vec<DVector<f64>> = protos.iter().map(|p| *u - p).collect();
        let logits: Vec<f64> = diffs.iter().map(|d| -d.norm_squared()).collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        total_ce += lse - logits[target];
        counted += 1;
        for (j, diff) in diffs.iter().enumerate() {
            // ∂CE/∂logit_j, then logit_j = −‖u − p_j‖².
            let w = (logits[j] - lse).exp() - if j == target { 1.0 } else { 0.0 };
            d_val[v] -= diff * (2.0 * w);
            d_protos[j] += diff * (2.0 * w);
        }
    }
    let d_train = train
        .iter()
        .map(|(c, _)| {
            let j = slot_of(*c).expect("train class is indexed");
            &d_protos[j] / counts[j] as f64
        })
        .collect();
    Ok(ProtoTerms {
        total_ce,
        counted,
        skipped,
        d_train,
        d_val,
    })
}

/// Mean cross-entropy of the softmax over negative squared distances from
/// each val embedding to the per-class means of the train embeddings.
pub fn prototypical_loss(train: &[Labelled<'_>], val: &[Labelled<'_>]) -> Result<f64> {
    if val.is_empty() {
        return Err(Error::Usage("prototypical loss needs at least one val point".into()));
    }
    let terms = prototypical_terms(train, val)?;
    if terms.skipped > 0 {
        return Err(Error::Usage(format!(
            "{} val points have a label with no train exemplar",
            terms.skipped
        )));
    }
    Ok(terms.total_ce / terms.counted as f64)
}
