//! Task representations, distances between tasks, and the lifelong
//! task-selection simulator.

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dirichlet::{dirichlet_entropy, dirichlet_kl, DirichletParams};
use crate::error::{Error, Result};
use crate::estep::run_estep;
use crate::net::Labelled;
use crate::trainer::{ModelState, TaskDataset};

/// Offset inside the logarithm of exported distance matrices.
pub const LOG_DISTANCE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct TaskRepresentation {
    pub gamma: DirichletParams,
    pub entropy: f64,
    pub source: String,
}

impl TaskRepresentation {
    pub fn new(gamma: DirichletParams, source: impl Into<String>) -> Self {
        let entropy = dirichlet_entropy(&gamma);
        Self {
            gamma,
            entropy,
            source: source.into(),
        }
    }
}

/// γ of the task's Dirichlet posterior, fitted on all of its points.
pub fn represent_task(task: &TaskDataset, state: &ModelState, source: impl Into<String>) -> Result<TaskRepresentation> {
    represent_points(task.points(), state, source)
}

/// Same, restricted to the train half of the split.
pub fn represent_task_train_half(
    task: &TaskDataset,
    state: &ModelState,
    source: impl Into<String>,
) -> Result<TaskRepresentation> {
    let (idx, _) = task.split();
    let (x, _) = task.subset(&idx);
    represent_points(&x, state, source)
}

fn represent_points(x: &DMatrix<f64>, state: &ModelState, source: impl Into<String>) -> Result<TaskRepresentation> {
    let source = source.into();
    let posts = state.embed(x)?;
    let outcome = run_estep(&posts, &state.themes, &state.config.estep).map_err(|e| match e {
        Error::Degeneracy(msg) => Error::Degeneracy(format!("cannot represent task {source}: {msg}")),
        other => other,
    })?;
    Ok(TaskRepresentation::new(outcome.posterior.gamma, source))
}

/// Representations of many tasks, computed in parallel, in input order.
pub fn represent_all(tasks: &[TaskDataset], state: &ModelState) -> Result<Vec<TaskRepresentation>> {
    tasks
        .par_iter()
        .enumerate()
        .map(|(i, t)| represent_task(t, state, i.to_string()))
        .collect()
}

/// `D[i][j] = KL[q(π; γᵢ) ‖ q(π; γⱼ)]`.
pub fn distance_matrix(reps: &[TaskRepresentation]) -> Result<DMatrix<f64>> {
    if reps.len() < 2 {
        return Err(Error::Usage("distance matrix needs at least two representations".into()));
    }
    let n = reps.len();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            (0..n)
                .map(|j| {
                    if i == j {
                        Ok(0.0)
                    } else {
                        dirichlet_kl(&reps[i].gamma, &reps[j].gamma)
                    }
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

/// `ln(ε + d)` element-wise.
pub fn log_distance(d: &DMatrix<f64>) -> DMatrix<f64> {
    d.map(|v| (LOG_DISTANCE_EPS + v).ln())
}

/// Mean of `KL[reference ‖ candidate]` over the references.
pub fn mean_kl_from_references(candidate: &DirichletParams, references: &[DirichletParams]) -> Result<f64> {
    if references.is_empty() {
        return Err(Error::Usage("no reference representations".into()));
    }
    let mut total = 0.0;
    for r in references {
        total += dirichlet_kl(r, candidate)?;
    }
    Ok(total / references.len() as f64)
}

/// A model that scores how badly it handles a task.
pub trait LossModel {
    fn task_loss(&self, task: &TaskDataset) -> Result<f64>;
}

/// Mean prototypical cross-entropy on the task's own split, using embedding
/// means. Validation points of classes missing from the train half are
/// ignored; a task with none left scores 0.
impl LossModel for ModelState {
    fn task_loss(&self, task: &TaskDataset) -> Result<f64> {
        let (tr, va) = task.split();
        let (tx, tl) = task.subset(&tr);
        let (vx, vl) = task.subset(&va);
        let tu: Vec<DVector<f64>> = self.embed(&tx)?.into_iter().map(|p| p.m().clone()).collect();
        let vu: Vec<DVector<f64>> = self.embed(&vx)?.into_iter().map(|p| p.m().clone()).collect();
        let train: Vec<Labelled> = tl.iter().copied().zip(&tu).collect();
        let val: Vec<Labelled> = vl
            .iter()
            .copied()
            .zip(&vu)
            .filter(|(c, _)| tl.contains(c))
            .collect();
        if val.is_empty() {
            return Ok(0.0);
        }
        crate::net::prototypical_loss(&train, &val)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKind {
    EntropyMax,
    KlMin,
    MaxLoss,
    Random,
}

#[derive(Debug, Clone)]
pub struct SelectionPolicy {
    kind: PolicyKind,
    references: Vec<DirichletParams>,
    rng: ChaCha8Rng,
}

impl SelectionPolicy {
    pub fn entropy_max() -> Self {
        Self::plain(PolicyKind::EntropyMax)
    }

    pub fn max_loss() -> Self {
        Self::plain(PolicyKind::MaxLoss)
    }

    pub fn random(seed: u64) -> Self {
        Self {
            kind: PolicyKind::Random,
            references: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn kl_min(references: Vec<DirichletParams>) -> Result<Self> {
        if references.is_empty() {
            return Err(Error::Usage("kl-min needs at least one reference representation".into()));
        }
        Ok(Self {
            kind: PolicyKind::KlMin,
            references,
            rng: ChaCha8Rng::seed_from_u64(0),
        })
    }

    /// Builds any policy; `references` is only used by kl-min.
    pub fn from_kind(kind: PolicyKind, seed: u64, references: Vec<DirichletParams>) -> Result<Self> {
        match kind {
            PolicyKind::EntropyMax => Ok(Self::entropy_max()),
            PolicyKind::MaxLoss => Ok(Self::max_loss()),
            PolicyKind::Random => Ok(Self::random(seed)),
            PolicyKind::KlMin => Self::kl_min(references),
        }
    }

    fn plain(kind: PolicyKind) -> Self {
        Self {
            kind,
            references: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    pub fn kind(&self) -> PolicyKind {
        self.kind
    }
}

/// Tasks available for learning, with their representations.
#[derive(Debug, Clone)]
pub struct TaskPool {
    capacity: usize,
    entries: Vec<(TaskDataset, TaskRepresentation)>,
}

impl TaskPool {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Usage("pool capacity must be positive".into()));
        }
        Ok(Self {
            capacity,
            entries: Vec::with_capacity(capacity),
        })
    }

    pub fn from_entries(entries: Vec<(TaskDataset, TaskRepresentation)>) -> Result<Self> {
        let mut pool = Self::new(entries.len())?;
        pool.entries = entries;
        Ok(pool)
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.entries.len() >= self.capacity
    }

    pub fn entries(&self) -> &[(TaskDataset, TaskRepresentation)] {
        &self.entries
    }

    pub fn push(&mut self, task: TaskDataset, rep: TaskRepresentation) -> Result<()> {
        if self.is_full() {
            return Err(Error::Usage("pool is full".into()));
        }
        self.entries.push((task, rep));
        Ok(())
    }

    pub fn take(&mut self, index: usize) -> (TaskDataset, TaskRepresentation) {
        self.entries.remove(index)
    }
}

fn argmax_first(values: impl Iterator<Item = f64>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.enumerate() {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

/// Index of the pool entry the policy picks. Ties go to the lowest index.
pub fn select_task(pool: &TaskPool, policy: &mut SelectionPolicy, model: &dyn LossModel) -> Result<usize> {
    if pool.is_empty() {
        return Err(Error::Usage("cannot select from an empty pool".into()));
    }
    let entries = pool.entries();
    let picked = match policy.kind {
        PolicyKind::EntropyMax => argmax_first(entries.iter().map(|(_, r)| r.entropy)),
        PolicyKind::KlMin => {
            let scores = entries
                .iter()
                .map(|(_, r)| mean_kl_from_references(&r.gamma, &policy.references))
                .collect::<Result<Vec<f64>>>()?;
            argmax_first(scores.into_iter().map(|s| -s))
        }
        PolicyKind::MaxLoss => {
            let losses = entries
                .iter()
                .map(|(t, _)| model.task_loss(t))
                .collect::<Result<Vec<f64>>>()?;
            argmax_first(losses.into_iter())
        }
        PolicyKind::Random => Some(policy.rng.random_range(0..entries.len())),
    };
    Ok(picked.expect("pool is non-empty"))
}

/// The model being taught in the lifelong simulation.
pub trait Learner {
    fn update(&mut self, task: &TaskDataset) -> Result<()>;
    /// Held-out accuracy on the evaluation tasks.
    fn accuracy(&self, eval: &[TaskDataset]) -> Result<f64>;
}

/// Class prototypes in data space, kept as running means over every
/// point seen with that label. Evaluation labels each point with its
/// nearest prototype.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PrototypeLearner {
    sums: Vec<Option<(DVector<f64>, usize)>>,
}

impl PrototypeLearner {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn prototypes(&self) -> Vec<Option<DVector<f64>>> {
        self.sums
            .iter()
            .map(|s| s.as_ref().map(|(sum, n)| sum / *n as f64))
            .collect()
    }
}

impl Learner for PrototypeLearner {
    fn update(&mut self, task: &TaskDataset) -> Result<()> {
        for (row, &label) in task.points().row_iter().zip(task.labels()) {
            if self.sums.len() <= label {
                self.sums.resize(label + 1, None);
            }
            let x = row.transpose();
            match &mut self.sums[label] {
                Some((sum, n)) => {
                    if sum.len() != x.len() {
                        return Err(Error::Usage("task width differs from earlier tasks".into()));
                    }
                    *sum += &x;
                    *n += 1;
                }
                slot @ None => *slot = Some((x, 1)),
            }
        }
        Ok(())
    }

    fn accuracy(&self, eval: &[TaskDataset]) -> Result<f64> {
        let protos = self.prototypes();
        let mut hits = 0usize;
        let mut total = 0usize;
        for task in eval {
            for (row, &label) in task.points().row_iter().zip(task.labels()) {
                let x = row.transpose();
                let guess = argmax_first(
                    protos
                        .iter()
                        .map(|p| p.as_ref().map_or(f64::NEG_INFINITY, |p| -(p - &x).norm_squared())),
                );
                if protos.iter().any(Option::is_some) && guess == Some(label) {
                    hits += 1;
                }
                total += 1;
            }
        }
        if total == 0 {
            return Err(Error::Usage("evaluation set is empty".into()));
        }
        Ok(hits as f64 / total as f64)
    }
}

#[derive(Debug, Clone)]
pub struct LifelongConfig {
    pub steps: usize,
    pub pool_capacity: usize,
    /// Record accuracy every this many steps.
    pub cadence: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LifelongReport {
    pub steps: Vec<usize>,
    pub accuracy: Vec<f64>,
    /// Source ids of the selected tasks, in order.
    pub selected: Vec<String>,
    pub truncated: bool,
}

/// select → learn → discard → refill, `cfg.steps` times. Pool tasks are
/// represented with `state`, which is also the loss model for max-loss.
pub fn run_lifelong<I>(
    source: &mut I,
    policy: &mut SelectionPolicy,
    learner: &mut dyn Learner,
    state: &ModelState,
    eval: &[TaskDataset],
    cfg: &LifelongConfig,
) -> Result<LifelongReport>
where
    I: Iterator<Item = TaskDataset>,
{
    let mut report = LifelongReport::default();
    if cfg.steps == 0 {
        return Ok(report);
    }
    if cfg.cadence == 0 {
        return Err(Error::Usage("report cadence must be positive".into()));
    }
    let mut pool = TaskPool::new(cfg.pool_capacity)?;
    let mut drawn = 0usize;
    let mut refill = |pool: &mut TaskPool| -> Result<bool> {
        while !pool.is_full() {
            let Some(task) = source.next() else {
                return Ok(false);
            };
            let rep = represent_task(&task, state, drawn.to_string())?;
            drawn += 1;
            pool.push(task, rep)?;
        }
        Ok(true)
    };
    for step in 1..=cfg.steps {
        if !refill(&mut pool)? {
            if pool.is_empty() {
                warn!("task source exhausted after {} steps", step - 1);
                report.truncated = true;
                break;
            }
            if !report.truncated {
                warn!("task source exhausted at step {step}; continuing with a shrinking pool");
                report.truncated = true;
            }
        }
        let idx = select_task(&pool, policy, state)?;
        let (task, rep) = pool.take(idx);
        learner.update(&task)?;
        report.selected.push(rep.source);
        if step % cfg.cadence == 0 {
            report.steps.push(step);
            report.accuracy.push(learner.accuracy(eval)?);
        }
    }
    Ok(report)
}

/// `y₀ = x₀`, `yₜ = w·yₜ₋₁ + (1−w)·xₜ`.
pub fn ewma(series: &[f64], weight: f64) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&weight) {
        return Err(Error::Usage(format!("EWMA weight must lie in [0, 1), got {weight}")));
    }
    let mut out = Vec::with_capacity(series.len());
    for &x in series {
        let next = match out.last() {
            None => x,
            Some(&prev) => weight * prev + (1.0 - weight) * x,
        };
        out.push(next);
    }
    Ok(out)
}

/// Ranks starting at 1, ties sharing their average rank.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            out[o] = avg;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Usage("spearman needs two series of equal length ≥ 2".into()));
    }
    if a.iter().chain(b).any(|v| v.is_nan()) {
        return Err(Error::Usage("spearman input contains NaN".into()));
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return Err(Error::Usage("spearman is undefined for a constant series".into()));
    }
    Ok(cov / (va * vb).sqrt())
}

/// Fraction of `val` points whose nearest train-class mean carries their
/// label. Points of classes absent from `train` count as misses.
pub fn prototype_accuracy(train: &[Labelled<'_>], val: &[Labelled<'_>]) -> Result<f64> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Usage("prototype accuracy needs train and val points".into()));
    }
    let mut classes: Vec<usize> = train.iter().map(|(c, _)| *c).collect();
    classes.sort_unstable();
    classes.dedup();
    let protos: Vec<DVector<f64>> = classes
        .iter()
        .map(|&c| {
            let members: Vec<&DVector<f64>> = train.iter().filter(|(l, _)| *l == c).map(|(_, u)| *u).collect();
            members.iter().fold(DVector::zeros(members[0].len()), |acc, u| acc + *u) / members.len() as f64
        })
        .collect();
    let hits = val
        .iter()
        .filter(|(label, u)| {
            let best = argmax_first(protos.iter().map(|p| -(p - *u).norm_squared())).expect("non-empty");
            classes[best] == *label
        })
        .count();
    Ok(hits as f64 / val.len() as f64)
}

/// Nearest-prototype accuracy of a task's validation half in the model's
/// embedding space (posterior means).
pub fn task_accuracy(task: &TaskDataset, state: &ModelState) -> Result<f64> {
    let (tr, va) = task.split();
    let (tx, tl) = task.subset(&tr);
    let (vx, vl) = task.subset(&va);
    let tu: Vec<DVector<f64>> = state.embed(&tx)?.into_iter().map(|p| p.m().clone()).collect();
    let vu: Vec<DVector<f64>> = state.embed(&vx)?.into_iter().map(|p| p.m().clone()).collect();
    let train: Vec<Labelled> = tl.iter().copied().zip(&tu).collect();
    let val: Vec<Labelled> = vl.iter().copied().zip(&vu).collect();
    prototype_accuracy(&train, &val)
}
