//! The per-task meta-objective evaluated on the validation half, and its
//! reverse pass into encoder and decoder parameters.
//!
//! The task posterior (γ and the validation responsibilities) is held
//! constant when differentiating.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::dense::{ForwardTrace, NetworkGrads};
use super::losses::{cb_log_likelihood, d_cb_point, prototypical_terms, Labelled};
use super::{posteriors_from_output, EmbeddingNetworks, LAMBDA_MIN, LOG_VARIANCE_LIMIT};
use crate::dirichlet::DirichletParams;
use crate::error::{Error, Result};
use crate::estep::{lda_elbo, responsibilities_under, run_estep, EStepConfig, EStepOutcome, TaskPosterior};
use crate::theme::{EmbeddingPosterior, ThemeSet};

const HALF_LN_2PI_E: f64 = 0.5 * (1.0 + 1.837_877_066_409_345_5);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveWeights {
    pub lda: f64,
    pub reconstruction: f64,
    pub classification: f64,
    pub entropy: f64,
}

impl Default for ObjectiveWeights {
    fn default() -> Self {
        Self {
            lda: 1.0,
            reconstruction: 1.0,
            classification: 1.0,
            entropy: 1.0,
        }
    }
}

impl ObjectiveWeights {
    pub fn zero() -> Self {
        Self {
            lda: 0.0,
            reconstruction: 0.0,
            classification: 0.0,
            entropy: 0.0,
        }
    }
}

/// Rows of the two data matrices are points; labels index classes.
#[derive(Debug, Clone, Copy)]
pub struct TaskHalves<'a> {
    pub train_x: &'a DMatrix<f64>,
    pub train_labels: &'a [usize],
    pub val_x: &'a DMatrix<f64>,
    pub val_labels: &'a [usize],
}

/// Task posterior treated as a constant by the reverse pass.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedPosterior {
    pub gamma: DirichletParams,
    /// N_val × K.
    pub val_responsibilities: DMatrix<f64>,
}

/// Unweighted component values, each summed over validation points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveComponents {
    pub lda: f64,
    pub reconstruction: f64,
    /// Negated summed cross-entropy.
    pub classification: f64,
    /// `−E ln q(u)`.
    pub entropy: f64,
    /// Weighted sum.
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct ObjectiveGrads {
    pub encoder: NetworkGrads,
    pub decoder: NetworkGrads,
}

/// Everything the reverse pass needs, plus the posteriors the trainer uses
/// for the theme update.
#[derive(Debug, Clone)]
pub struct ObjectiveForward {
    pub components: ObjectiveComponents,
    pub weights: ObjectiveWeights,
    pub train_posts: Vec<EmbeddingPosterior>,
    pub val_posts: Vec<EmbeddingPosterior>,
    /// Present when the E-step was run by `evaluate_objective`.
    pub estep: Option<EStepOutcome>,
    pub val_posterior: TaskPosterior,
    val_x: DMatrix<f64>,
    train_labels: Vec<usize>,
    val_labels: Vec<usize>,
    train_trace: ForwardTrace,
    val_trace: ForwardTrace,
    decoder_trace: ForwardTrace,
    train_noise: DMatrix<f64>,
    val_noise: DMatrix<f64>,
    train_u: Vec<DVector<f64>>,
    val_u: Vec<DVector<f64>>,
    lambda_raw: DMatrix<f64>,
}

/// Encodes both halves, fits `q*` on the train half, then evaluates the
/// objective on the validation half.
pub fn evaluate_objective(
    nets: &EmbeddingNetworks,
    themes: &ThemeSet,
    halves: TaskHalves<'_>,
    train_noise: &DMatrix<f64>,
    val_noise: &DMatrix<f64>,
    weights: ObjectiveWeights,
    estep: &EStepConfig,
) -> Result<ObjectiveForward> {
    let train_posts = nets.encode_rows(halves.train_x)?;
    let outcome = run_estep(&train_posts, themes, estep)?;
    let val_posts = nets.encode_rows(halves.val_x)?;
    let val_responsibilities = responsibilities_under(&val_posts, themes, &outcome.posterior.gamma)?;
    let fixed = FixedPosterior {
        gamma: outcome.posterior.gamma.clone(),
        val_responsibilities,
    };
    let mut forward = evaluate_objective_fixed(nets, themes, halves, train_noise, val_noise, weights, &fixed)?;
    forward.estep = Some(outcome);
    Ok(forward)
}

/// Objective under a given task posterior.
pub fn evaluate_objective_fixed(
    nets: &EmbeddingNetworks,
    themes: &ThemeSet,
    halves: TaskHalves<'_>,
    train_noise: &DMatrix<f64>,
    val_noise: &DMatrix<f64>,
    weights: ObjectiveWeights,
    fixed: &FixedPosterior,
) -> Result<ObjectiveForward> {
    let d = nets.embedding_dim();
    let (n_tr, n_val) = (halves.train_x.nrows(), halves.val_x.nrows());
    if halves.train_labels.len() != n_tr || halves.val_labels.len() != n_val {
        return Err(Error::Usage("label count does not match point count".into()));
    }
    if train_noise.shape() != (n_tr, d) || val_noise.shape() != (n_val, d) {
        return Err(Error::Usage("noise shape does not match the task halves".into()));
    }
    if themes.dim() != d {
        return Err(Error::Usage(format!(
            "themes of dimension {} for embeddings of dimension {d}",
            themes.dim()
        )));
    }
    if fixed.val_responsibilities.shape() != (n_val, themes.k()) {
        return Err(Error::Usage("fixed responsibilities do not match the validation half".into()));
    }

    let train_trace = nets.encoder.forward(halves.train_x)?;
    let val_trace = nets.encoder.forward(halves.val_x)?;
    let train_posts = posteriors_from_output(&train_trace.output)?;
    let val_posts = posteriors_from_output(&val_trace.output)?;

    let draw = |posts: &[EmbeddingPosterior], noise: &DMatrix<f64>| -> Vec<DVector<f64>> {
        posts
            .iter()
            .enumerate()
            .map(|(n, p)| p.m() + p.s().component_mul(&noise.row(n).transpose()))
            .collect()
    };
    let train_u = draw(&train_posts, train_noise);
    let val_u = draw(&val_posts, val_noise);

    let u_mat = DMatrix::from_fn(n_val, d, |n, j| val_u[n][j]);
    let decoder_trace = nets.decoder.forward(&u_mat)?;
    let lambda_raw = decoder_trace.output.map(|z| 1.0 / (1.0 + (-z).exp()));
    let mut reconstruction = 0.0;
    for n in 0..n_val {
        let x: Vec<f64> = halves.val_x.row(n).iter().copied().collect();
        let lambda: Vec<f64> = lambda_raw
            .row(n)
            .iter()
            .map(|l| l.clamp(LAMBDA_MIN, 1.0 - LAMBDA_MIN))
            .collect();
        reconstruction += cb_log_likelihood(&x, &lambda)?;
    }

    let tr_lab: Vec<Labelled> = halves.train_labels.iter().copied().zip(&train_u).collect();
    let val_lab: Vec<Labelled> = halves.val_labels.iter().copied().zip(&val_u).collect();
    let classification = -prototypical_terms(&tr_lab, &val_lab)?.total_ce;

    let val_posterior = TaskPosterior {
        gamma: fixed.gamma.clone(),
        responsibilities: fixed.val_responsibilities.clone(),
    };
    let lda = lda_elbo(&val_posts, themes, &val_posterior)?.total;

    let entropy: f64 = val_posts
        .iter()
        .flat_map(|p| p.s().iter())
        .map(|s| HALF_LN_2PI_E + s.ln())
        .sum();

    let total = weights.lda * lda
        + weights.reconstruction * reconstruction
        + weights.classification * classification
        + weights.entropy * entropy;

    Ok(ObjectiveForward {
        components: ObjectiveComponents {
            lda,
            reconstruction,
            classification,
            entropy,
            total,
        },
        weights,
        train_posts,
        val_posts,
        estep: None,
        val_posterior,
        val_x: halves.val_x.clone(),
        train_labels: halves.train_labels.to_vec(),
        val_labels: halves.val_labels.to_vec(),
        train_trace,
        val_trace,
        decoder_trace,
        train_noise: train_noise.clone(),
        val_noise: val_noise.clone(),
        train_u,
        val_u,
        lambda_raw,
    })
}

impl ObjectiveForward {
    /// State of every piecewise switch (leaky units, λ clamp, log-variance
    /// clamp). The objective is smooth wherever this stays constant.
    pub fn activation_pattern(&self) -> Vec<bool> {
        let mut out = self.train_trace.activation_pattern();
        out.extend(self.val_trace.activation_pattern());
        out.extend(self.decoder_trace.activation_pattern());
        out.extend(self.lambda_raw.iter().map(|l| (LAMBDA_MIN..=1.0 - LAMBDA_MIN).contains(l)));
        for trace in [&self.train_trace, &self.val_trace] {
            let d = trace.output.ncols() / 2;
            for row in trace.output.row_iter() {
                out.extend(row.iter().skip(d).map(|lv| lv.abs() <= LOG_VARIANCE_LIMIT));
            }
        }
        out
    }

    /// Gradient of `components.total` with respect to every network parameter.
    pub fn backward(&self, nets: &EmbeddingNetworks, themes: &ThemeSet) -> Result<ObjectiveGrads> {
        let w = self.weights;
        let d = nets.embedding_dim();
        let n_val = self.val_posts.len();
        let r = &self.val_posterior.responsibilities;
        if r.shape() != (n_val, themes.k()) || themes.dim() != d {
            return Err(Error::Usage("forward state does not match the model".into()));
        }

        // Reconstruction through the squashing and clamp.
        let mut d_z = DMatrix::zeros(n_val, nets.data_width());
        for (n, p) in (0..n_val).flat_map(|n| (0..nets.data_width()).map(move |p| (n, p))) {
            let lambda = self.lambda_raw[(n, p)];
            if (LAMBDA_MIN..=1.0 - LAMBDA_MIN).contains(&lambda) {
                d_z[(n, p)] = w.reconstruction * d_cb_point(self.val_x[(n, p)], lambda) * lambda * (1.0 - lambda);
            }
        }
        let (decoder, d_u_dec) = nets.decoder.backward(&self.decoder_trace, &d_z)?;

        let tr_lab: Vec<Labelled> = self.train_labels.iter().copied().zip(&self.train_u).collect();
        let val_lab: Vec<Labelled> = self.val_labels.iter().copied().zip(&self.val_u).collect();
        let proto = prototypical_terms(&tr_lab, &val_lab)?;

        let mut d_out_val = DMatrix::zeros(n_val, 2 * d);
        for (n, post) in self.val_posts.iter().enumerate() {
            let (m, s) = (post.m(), post.s());
            let mut dm = DVector::zeros(d);
            let mut ds = DVector::zeros(d);
            for (k, theme) in themes.themes().iter().enumerate() {
                let rk = r[(n, k)] * w.lda;
                dm -= theme.solve(&(m - theme.mean())) * rk;
                ds -= theme.precision_diag().component_mul(s) * rk;
            }
            ds += s.map(|v| w.entropy / v);
            let du = d_u_dec.row(n).transpose() - &proto.d_val[n] * w.classification;
            dm += &du;
            ds += du.component_mul(&self.val_noise.row(n).transpose());
            write_output_grad(&mut d_out_val, n, &dm, &ds, s, &self.val_trace.output);
        }

        let mut d_out_tr = DMatrix::zeros(self.train_posts.len(), 2 * d);
        for (n, post) in self.train_posts.iter().enumerate() {
            let du = &proto.d_train[n] * -w.classification;
            let ds = du.component_mul(&self.train_noise.row(n).transpose());
            write_output_grad(&mut d_out_tr, n, &du, &ds, post.s(), &self.train_trace.output);
        }

        let (mut encoder, _) = nets.encoder.backward(&self.val_trace, &d_out_val)?;
        let (enc_tr, _) = nets.encoder.backward(&self.train_trace, &d_out_tr)?;
        encoder.add_scaled(&enc_tr, 1.0);
        Ok(ObjectiveGrads { encoder, decoder })
    }
}

/// Encoder output row is `[m, log-variance]` with `s = exp(½ lv)`.
fn write_output_grad(
    out: &mut DMatrix<f64>,
    n: usize,
    dm: &DVector<f64>,
    ds: &DVector<f64>,
    s: &DVector<f64>,
    raw: &DMatrix<f64>,
) {
    let d = dm.len();
    for j in 0..d {
        out[(n, j)] = dm[j];
        let lv = raw[(n, d + j)];
        out[(n, d + j)] = if lv.abs() <= LOG_VARIANCE_LIMIT {
            0.5 * ds[j] * s[j]
        } else {
            0.0
        };
    }
}
