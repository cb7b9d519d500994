//! Mini-batch training: per-task split, E-step on the train half, objective
//! on the validation half, pooled theme statistics, online blending and
//! Adam updates of the networks.

use log::{info, warn};
use nalgebra::{DMatrix, DVector};
use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dirichlet::DirichletParams;
use crate::error::{Error, Result};
use crate::estep::{lda_elbo, responsibilities_under, run_estep, EStepConfig, TaskPosterior};
use crate::mstep::{
    accumulate_stats, alpha_newton_step, alpha_newton_step_per_task, learning_rate, local_theme_mle, online_blend,
    AlphaStepMode, TaskEvidence,
};
use crate::net::{
    adam_step, evaluate_objective, squash_output, AdamState, EmbeddingNetworks, NetworkGrads, ObjectiveComponents,
    ObjectiveGrads, ObjectiveWeights, TaskHalves,
};
use crate::theme::{EmbeddingPosterior, TaskTheme, ThemeSet};

/// Data values are clamped this far inside (0, 1) before the logit of the
/// identity embedder.
const LOGIT_CLAMP: f64 = 1e-12;

/// One task: N points of width P with values in [0, 1], and their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset {
    points: DMatrix<f64>,
    labels: Vec<usize>,
}

impl TaskDataset {
    pub fn new(points: DMatrix<f64>, labels: Vec<usize>) -> Result<Self> {
        if points.nrows() != labels.len() {
            return Err(Error::Usage(format!(
                "{} points but {} labels",
                points.nrows(),
                labels.len()
            )));
        }
        if points.nrows() < 2 {
            return Err(Error::Usage("a task needs at least two points to split".into()));
        }
        if points.ncols() == 0 {
            return Err(Error::Usage("data width must be positive".into()));
        }
        if let Some(bad) = points.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Domain(format!("data value {bad} outside [0, 1]")));
        }
        Ok(Self { points, labels })
    }

    pub fn points(&self) -> &DMatrix<f64> {
        &self.points
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn width(&self) -> usize {
        self.points.ncols()
    }

    /// `(train, val)` index sets: the first ⌈N/2⌉ points train, the rest
    /// validate.
    pub fn split(&self) -> (Vec<usize>, Vec<usize>) {
        let cut = self.len().div_ceil(2);
        ((0..cut).collect(), (cut..self.len()).collect())
    }

    pub fn subset(&self, idx: &[usize]) -> (DMatrix<f64>, Vec<usize>) {
        let rows = DMatrix::from_fn(idx.len(), self.width(), |r, c| self.points[(idx[r], c)]);
        (rows, idx.iter().map(|&i| self.labels[i]).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbeddingMode {
    /// Encoder and decoder networks trained by Adam.
    #[default]
    Learned,
    /// `m = logit(x)` on the first D features, fixed `s`; no networks.
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StatsHalf {
    /// Validation embeddings with responsibilities under the train-half γ.
    #[default]
    Validation,
    /// Train embeddings with their own E-step responsibilities.
    Train,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ThemeInit {
    /// Means drawn from N(data mean, scale² I).
    #[default]
    Gaussian,
    /// Farthest-point traversal of the warm-up embeddings, seeded at a
    /// random point.
    Spread,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub k: usize,
    pub d: usize,
    pub alpha_init: f64,
    pub tau0: f64,
    pub tau1: f64,
    pub batch_size: usize,
    /// Number of mini-batches.
    pub episodes: u64,
    pub estep: EStepConfig,
    pub adam_step_size: f64,
    pub seed: u64,
    pub hidden: Vec<usize>,
    pub weights: ObjectiveWeights,
    pub embedding: EmbeddingMode,
    /// Posterior scale used by the identity embedder.
    pub identity_scale: f64,
    pub stats_half: StatsHalf,
    pub alpha_mode: AlphaStepMode,
    pub theme_init: ThemeInit,
    /// Tasks encoded before training to place the initial themes.
    pub warmup_tasks: usize,
    /// Batches between progress lines; 0 disables them.
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            k: 8,
            d: 8,
            alpha_init: 1.1,
            tau0: 1e6,
            tau1: 0.5,
            batch_size: 20,
            episodes: 10_000,
            estep: EStepConfig::default(),
            adam_step_size: 2e-4,
            seed: 0,
            hidden: vec![64, 32],
            weights: ObjectiveWeights::default(),
            embedding: EmbeddingMode::Learned,
            identity_scale: 1e-3,
            stats_half: StatsHalf::Validation,
            alpha_mode: AlphaStepMode::Pooled,
            theme_init: ThemeInit::Gaussian,
            warmup_tasks: 50,
            log_every: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::Config(format!("K must be at least 2, got {}", self.k)));
        }
        if self.d == 0 {
            return Err(Error::Config("D must be positive".into()));
        }
        if !(self.alpha_init > 0.0 && self.alpha_init.is_finite()) {
            return Err(Error::Config(format!("alpha_init must be positive, got {}", self.alpha_init)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        learning_rate(0, self.tau0, self.tau1)?;
        self.estep.validate()?;
        if !(self.adam_step_size >= 0.0 && self.adam_step_size.is_finite()) {
            return Err(Error::Config(format!(
                "Adam step size must be finite and ≥ 0, got {}",
                self.adam_step_size
            )));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        if !(self.identity_scale > 0.0 && self.identity_scale.is_finite()) {
            return Err(Error::Config("identity_scale must be positive".into()));
        }
        for (name, w) in [
            ("lda", self.weights.lda),
            ("reconstruction", self.weights.reconstruction),
            ("classification", self.weights.classification),
            ("entropy", self.weights.entropy),
        ] {
            if !w.is_finite() {
                return Err(Error::Config(format!("weight {name} must be finite")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Embedder {
    Learned {
        nets: EmbeddingNetworks,
        encoder_adam: AdamState,
        decoder_adam: AdamState,
    },
    Identity {
        scale: f64,
    },
}

/// Everything training produces.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub themes: ThemeSet,
    pub embedder: Embedder,
    /// Applied mini-batches.
    pub step: u64,
    pub data_width: usize,
    pub config: TrainConfig,
}

impl ModelState {
    pub fn embed(&self, x: &DMatrix<f64>) -> Result<Vec<EmbeddingPosterior>> {
        if x.ncols() != self.data_width {
            return Err(Error::Usage(format!(
                "data width {} does not match the model's {}",
                x.ncols(),
                self.data_width
            )));
        }
        match &self.embedder {
            Embedder::Learned { nets, .. } => nets.encode_rows(x),
            Embedder::Identity { scale } => identity_posteriors(x, self.themes.dim(), *scale),
        }
    }

    pub fn networks(&self) -> Option<&EmbeddingNetworks> {
        match &self.embedder {
            Embedder::Learned { nets, .. } => Some(nets),
            Embedder::Identity { .. } => None,
        }
    }

    pub fn k(&self) -> usize {
        self.themes.k()
    }

    pub fn dim(&self) -> usize {
        self.themes.dim()
    }
}

pub fn identity_posteriors(x: &DMatrix<f64>, d: usize, scale: f64) -> Result<Vec<EmbeddingPosterior>> {
    x.row_iter()
        .map(|row| {
            let m = DVector::from_fn(d, |j, _| {
                row.get(j)
                    .map(|&v| {
                        let v = v.clamp(LOGIT_CLAMP, 1.0 - LOGIT_CLAMP);
                        (v / (1.0 - v)).ln()
                    })
                    .unwrap_or(0.0)
            });
            EmbeddingPosterior::new(m, DVector::repeat(d, scale))
        })
        .collect()
}

/// Builds the networks and places the initial themes around the warm-up
/// embeddings.
pub fn init_model(corpus: &[TaskDataset], cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<ModelState> {
    cfg.validate()?;
    let first = corpus
        .first()
        .ok_or_else(|| Error::Usage("training corpus is empty".into()))?;
    let p = first.width();
    if let Some(i) = corpus.iter().position(|t| t.width() != p) {
        return Err(Error::Usage(format!("task {i} has width {} but task 0 has {p}", corpus[i].width())));
    }
    let embedder = match cfg.embedding {
        EmbeddingMode::Learned => {
            let nets = EmbeddingNetworks::new(p, cfg.d, &cfg.hidden, rng)?;
            let encoder_adam = AdamState::for_network(&nets.encoder, cfg.adam_step_size);
            let decoder_adam = AdamState::for_network(&nets.decoder, cfg.adam_step_size);
            Embedder::Learned {
                nets,
                encoder_adam,
                decoder_adam,
            }
        }
        EmbeddingMode::Identity => Embedder::Identity {
            scale: cfg.identity_scale,
        },
    };
    let placeholder = ThemeSet::new(
        vec![TaskTheme::standard(cfg.d); cfg.k],
        DirichletParams::symmetric(cfg.alpha_init, cfg.k)?,
    )?;
    let mut state = ModelState {
        themes: placeholder,
        embedder,
        step: 0,
        data_width: p,
        config: cfg.clone(),
    };

    let mut warm: Vec<DVector<f64>> = Vec::new();
    for task in corpus.iter().take(cfg.warmup_tasks.max(1)) {
        warm.extend(state.embed(task.points())?.into_iter().map(|e| e.m().clone()));
    }
    let n = warm.len() as f64;
    let centre = warm.iter().fold(DVector::zeros(cfg.d), |acc, m| acc + m) / n;
    let var: f64 = warm.iter().map(|m| (m - &centre).norm_squared()).sum::<f64>() / (n * cfg.d as f64);
    let scale = if var > 0.0 && var.is_finite() { var.sqrt() } else { 1.0 };

    let means: Vec<DVector<f64>> = match cfg.theme_init {
        ThemeInit::Gaussian => (0..cfg.k)
            .map(|_| &centre + DVector::from_fn(cfg.d, |_, _| scale * rng.sample::<f64, _>(StandardNormal)))
            .collect(),
        ThemeInit::Spread => farthest_points(&warm, cfg.k, rng),
    };
    let themes = means
        .into_iter()
        .map(|m| TaskTheme::new(m, DMatrix::identity(cfg.d, cfg.d)))
        .collect::<Result<Vec<_>>>()?;
    state.themes = ThemeSet::new(themes, DirichletParams::symmetric(cfg.alpha_init, cfg.k)?)?;
    Ok(state)
}

fn farthest_points(points: &[DVector<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<DVector<f64>> {
    let mut chosen = vec![points[rng.random_range(0..points.len())].clone()];
    let mut dist: Vec<f64> = points.iter().map(|p| (p - &chosen[0]).norm_squared()).collect();
    while chosen.len() < k {
        let (idx, _) = dist
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &d)| if d > best.1 { (i, d) } else { best });
        let next = points[idx].clone();
        for (d, p) in dist.iter_mut().zip(points) {
            *d = d.min((p - &next).norm_squared());
        }
        chosen.push(next);
    }
    chosen
}

/// Result of one task's objective evaluation.
#[derive(Debug, Clone)]
pub struct TaskOutcome {
    pub objective: f64,
    pub components: Option<ObjectiveComponents>,
    pub grads: Option<ObjectiveGrads>,
    /// Embeddings and posterior feeding the theme statistics.
    pub stats_posts: Vec<EmbeddingPosterior>,
    pub stats_posterior: TaskPosterior,
}

/// Objective, gradients and theme evidence of one task. `noise_seed` drives
/// the reparameterization draws.
pub fn task_objective(task: &TaskDataset, state: &ModelState, noise_seed: u64) -> Result<TaskOutcome> {
    let cfg = &state.config;
    let (train_idx, val_idx) = task.split();
    let (train_x, train_labels) = task.subset(&train_idx);
    let (val_x, val_labels) = task.subset(&val_idx);
    match &state.embedder {
        Embedder::Learned { nets, .. } => {
            let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
            let d = nets.embedding_dim();
            let mut gauss = |rows: usize| DMatrix::from_fn(rows, d, |_, _| rng.sample::<f64, _>(StandardNormal));
            let train_noise = gauss(train_idx.len());
            let val_noise = gauss(val_idx.len());
            let halves = TaskHalves {
                train_x: &train_x,
                train_labels: &train_labels,
                val_x: &val_x,
                val_labels: &val_labels,
            };
            let forward = evaluate_objective(
                nets,
                &state.themes,
                halves,
                &train_noise,
                &val_noise,
                cfg.weights,
                &cfg.estep,
            )?;
            let grads = forward.backward(nets, &state.themes)?;
            let (stats_posts, stats_posterior) = match cfg.stats_half {
                StatsHalf::Validation => (forward.val_posts.clone(), forward.val_posterior.clone()),
                StatsHalf::Train => (
                    forward.train_posts.clone(),
                    forward.estep.clone().expect("evaluate_objective runs the E-step").posterior,
                ),
            };
            Ok(TaskOutcome {
                objective: forward.components.total,
                components: Some(forward.components),
                grads: Some(grads),
                stats_posts,
                stats_posterior,
            })
        }
        Embedder::Identity { .. } => {
            let train_posts = state.embed(&train_x)?;
            let val_posts = state.embed(&val_x)?;
            let fitted = run_estep(&train_posts, &state.themes, &cfg.estep)?.posterior;
            let val_r = responsibilities_under(&val_posts, &state.themes, &fitted.gamma)?;
            let val_posterior = TaskPosterior {
                gamma: fitted.gamma.clone(),
                responsibilities: val_r,
            };
            let objective = lda_elbo(&val_posts, &state.themes, &val_posterior)?.total;
            let (stats_posts, stats_posterior) = match cfg.stats_half {
                StatsHalf::Validation => (val_posts, val_posterior),
                StatsHalf::Train => (train_posts, fitted),
            };
            Ok(TaskOutcome {
                objective,
                components: None,
                grads: None,
                stats_posts,
                stats_posterior,
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchReport {
    pub step: u64,
    pub mean_objective: f64,
    pub rho: f64,
    pub alpha: Vec<f64>,
    pub used: usize,
    pub skipped: usize,
}

/// One mini-batch: evaluate every task against the current state, then
/// commit the Adam and theme updates.
pub fn train_minibatch(batch: &[&TaskDataset], state: &mut ModelState, noise_seeds: &[u64]) -> Result<BatchReport> {
    if batch.is_empty() {
        return Err(Error::Batch("empty mini-batch".into()));
    }
    if noise_seeds.len() != batch.len() {
        return Err(Error::Usage("one noise seed per task is required".into()));
    }
    let snapshot: &ModelState = state;
    let results: Vec<Result<TaskOutcome>> = batch
        .par_iter()
        .zip(noise_seeds.par_iter())
        .map(|(task, &seed)| task_objective(task, snapshot, seed))
        .collect();

    let mut outcomes = Vec::with_capacity(results.len());
    let mut skipped = 0;
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(o) => outcomes.push(o),
            Err(Error::Degeneracy(msg)) => {
                warn!("step {}: skipping task {i} of the batch: {msg}", state.step);
                skipped += 1;
            }
            Err(e) => return Err(e),
        }
    }
    if outcomes.is_empty() {
        return Err(Error::Batch(format!("all {} tasks of the batch were skipped", batch.len())));
    }
    let used = outcomes.len();
    let mean_objective = outcomes.iter().map(|o| o.objective).sum::<f64>() / used as f64;

    let evidence: Vec<TaskEvidence> = outcomes
        .iter()
        .map(|o| (o.stats_posts.as_slice(), &o.stats_posterior))
        .collect();
    let stats = accumulate_stats(&evidence)?;
    let locals = local_theme_mle(&stats)?;
    let newton = match state.config.alpha_mode {
        AlphaStepMode::Pooled => alpha_newton_step(state.themes.alpha(), &stats)?,
        AlphaStepMode::PerTask => alpha_newton_step_per_task(state.themes.alpha(), &stats)?,
    };
    let rho = learning_rate(state.step, state.config.tau0, state.config.tau1)?;
    let themes = online_blend(&state.themes, &locals, &newton, rho)?;

    if let Embedder::Learned {
        nets,
        encoder_adam,
        decoder_adam,
    } = &mut state.embedder
    {
        let mut enc = NetworkGrads::zeros_like(&nets.encoder);
        let mut dec = NetworkGrads::zeros_like(&nets.decoder);
        for g in outcomes.iter().filter_map(|o| o.grads.as_ref()) {
            enc.add_scaled(&g.encoder, 1.0);
            dec.add_scaled(&g.decoder, 1.0);
        }
        enc.scale(1.0 / used as f64);
        dec.scale(1.0 / used as f64);
        adam_step(&mut nets.encoder, &enc, encoder_adam)?;
        adam_step(&mut nets.decoder, &dec, decoder_adam)?;
    }
    state.themes = themes;
    state.step += 1;
    Ok(BatchReport {
        step: state.step,
        mean_objective,
        rho,
        alpha: state.themes.alpha().as_slice().to_vec(),
        used,
        skipped,
    })
}

/// Runs `cfg.episodes` mini-batches of tasks drawn uniformly from the corpus.
pub fn train(corpus: &[TaskDataset], cfg: &TrainConfig) -> Result<(ModelState, Vec<BatchReport>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = init_model(corpus, cfg, &mut rng)?;
    let mut reports = Vec::with_capacity(cfg.episodes as usize);
    continue_training(corpus, &mut state, &mut rng, cfg.episodes, |r| reports.push(r.clone()))?;
    Ok((state, reports))
}

/// Further mini-batches on an existing state.
pub fn continue_training<F>(
    corpus: &[TaskDataset],
    state: &mut ModelState,
    rng: &mut ChaCha8Rng,
    batches: u64,
    mut on_batch: F,
) -> Result<()>
where
    F: FnMut(&BatchReport),
{
    if corpus.is_empty() {
        return Err(Error::Usage("training corpus is empty".into()));
    }
    let log_every = state.config.log_every;
    let mut window = 0.0;
    let mut window_len = 0u64;
    for _ in 0..batches {
        let size = state.config.batch_size;
        let picks: Vec<&TaskDataset> = (0..size).map(|_| &corpus[rng.random_range(0..corpus.len())]).collect();
        let seeds: Vec<u64> = (0..size).map(|_| rng.random()).collect();
        let report = train_minibatch(&picks, state, &seeds)?;
        window += report.mean_objective;
        window_len += 1;
        if log_every > 0 && report.step % log_every == 0 {
            info!(
                "batch {}: mean objective {:.6e}, rho {:.6e}, alpha {:?}",
                report.step,
                window / window_len as f64,
                report.rho,
                report.alpha
            );
            window = 0.0;
            window_len = 0;
        }
        on_batch(&report);
    }
    Ok(())
}

/// How generated embeddings become data.
#[derive(Debug, Clone, Copy)]
pub enum SyntheticDecoder<'a> {
    /// `x = logistic(u)`, padded with ½ or truncated to `width`.
    Identity { width: usize },
    /// `x = λ = h(u; θ)`.
    Network(&'a EmbeddingNetworks),
}

/// Draws a task: `π ∼ Dir(α)`, `zₙ ∼ Cat(π)`, `uₙ ∼ N(μ_z, Σ_z)`, then
/// decodes. Labels are the theme indices.
pub fn generate_synthetic_task<R: Rng + ?Sized>(
    themes: &ThemeSet,
    n: usize,
    rng: &mut R,
    decoder: SyntheticDecoder<'_>,
) -> Result<TaskDataset> {
    let k = themes.k();
    let pi = sample_dirichlet(themes.alpha(), rng)?;
    let d = themes.dim();
    let factors: Vec<DMatrix<f64>> = themes.themes().iter().map(TaskTheme::factor).collect();
    let mut labels = Vec::with_capacity(n);
    let mut us = DMatrix::zeros(n, d);
    let picker = if k > 1 { Some(WeightedIndex::new(&pi).map_err(|e| Error::Domain(e.to_string()))?) } else { None };
    for row in 0..n {
        let z = picker.as_ref().map_or(0, |w| w.sample(rng));
        let eps = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let u = themes.theme(z).mean() + &factors[z] * eps;
        us.set_row(row, &u.transpose());
        labels.push(z);
    }
    let points = match decoder {
        SyntheticDecoder::Identity { width } => DMatrix::from_fn(n, width, |r, c| {
            if c < d {
                1.0 / (1.0 + (-us[(r, c)]).exp())
            } else {
                0.5
            }
        }),
        SyntheticDecoder::Network(nets) => {
            if nets.embedding_dim() != d {
                return Err(Error::Usage("decoder input width does not match the themes".into()));
            }
            nets.decoder.forward(&us)?.output.map(squash_output)
        }
    };
    TaskDataset::new(points, labels)
}

/// Normalized Gamma draws; falls back to the mean when every draw underflows.
pub fn sample_dirichlet<R: Rng + ?Sized>(alpha: &DirichletParams, rng: &mut R) -> Result<Vec<f64>> {
    let draws = alpha
        .as_slice()
        .iter()
        .map(|&a| {
            Gamma::new(a, 1.0)
                .map(|g| g.sample(rng))
                .map_err(|e| Error::Domain(e.to_string()))
        })
        .collect::<Result<Vec<f64>>>()?;
    let total: f64 = draws.iter().sum();
    if total > 0.0 && total.is_finite() {
        Ok(draws.iter().map(|g| g / total).collect())
    } else {
        let s = alpha.sum();
        Ok(alpha.as_slice().iter().map(|a| a / s).collect())
    }
}
