use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use taskmodel::analytics::{
    distance_matrix, ewma, log_distance, represent_all, represent_task_train_half, run_lifelong,
    select_task, LifelongConfig, PolicyKind, PrototypeLearner, SelectionPolicy, TaskPool, TaskRepresentation,
};
use taskmodel::dirichlet::DirichletParams;
use taskmodel::error::{Error, Result};
use taskmodel::io::{
    load_checkpoint, load_config, load_corpus, save_checkpoint, save_corpus, write_matrix, write_representations,
    write_selection, write_series, CorpusFile, CorpusFormat, CORPUS_VERSION,
};
use taskmodel::theme::{TaskTheme, ThemeSet};
use taskmodel::trainer::{generate_synthetic_task, train, EmbeddingMode, ModelState, SyntheticDecoder, TaskDataset, TrainConfig};

#[derive(Parser)]
#[command(name = "ptm", version, about = "Probabilistic task modelling workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus from Gaussian themes.
    Synth(SynthArgs),
    /// Fit themes and networks to a corpus and write a checkpoint.
    Train(TrainArgs),
    /// Per-task Dirichlet parameters and entropy as CSV.
    Represent(RepresentArgs),
    /// Pairwise KL distance matrix as CSV.
    Distance(DistanceArgs),
    /// Pick tasks from a pool with a selection policy.
    Select(SelectArgs),
    /// Lifelong selection run with accuracy series as CSV.
    Simulate(SimulateArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Binary,
    Jsonl,
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    EntropyMax,
    KlMin,
    MaxLoss,
    Random,
}

impl From<PolicyArg> for PolicyKind {
    fn from(p: PolicyArg) -> Self {
        match p {
            PolicyArg::EntropyMax => PolicyKind::EntropyMax,
            PolicyArg::KlMin => PolicyKind::KlMin,
            PolicyArg::MaxLoss => PolicyKind::MaxLoss,
            PolicyArg::Random => PolicyKind::Random,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum EmbeddingArg {
    Learned,
    Identity,
}

#[derive(Args)]
struct SynthArgs {
    /// TOML file with `means`, `sd` and `alpha`; defaults to three separated 2-D themes.
    #[arg(long)]
    themes: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    tasks: usize,
    #[arg(long, default_value_t = 20)]
    points: usize,
    /// Feature width; defaults to the theme dimension.
    #[arg(long)]
    width: Option<usize>,
    /// Symmetric Dirichlet concentration, overriding the theme file.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = FormatArg::Binary)]
    format: FormatArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of mini-batches.
    #[arg(long)]
    episodes: Option<u64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, value_enum)]
    embedding: Option<EmbeddingArg>,
    /// Worker threads; 1 gives a single-threaded run.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct RepresentArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Defaults to standard output.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Fit each task on its train half only.
    #[arg(long)]
    train_half: bool,
}

#[derive(Args)]
struct DistanceArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Export ln(D + 1e-12) instead of D.
    #[arg(long)]
    log: bool,
}

#[derive(Args)]
struct SelectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    pool: PathBuf,
    #[arg(long, value_enum)]
    policy: PolicyArg,
    /// Corpus whose tasks serve as kl-min references.
    #[arg(long)]
    references: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Stream of candidate tasks, visited in a seeded random order.
    #[arg(long)]
    pool: PathBuf,
    /// Evaluation tasks; also the kl-min references unless --references is given.
    #[arg(long)]
    eval: PathBuf,
    #[arg(long, value_enum)]
    policy: PolicyArg,
    #[arg(long)]
    references: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    steps: usize,
    #[arg(long, default_value_t = 10)]
    capacity: usize,
    #[arg(long, default_value_t = 1)]
    cadence: usize,
    #[arg(long, default_value_t = 0.98)]
    weight: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the selected task indices here.
    #[arg(long)]
    selections: Option<PathBuf>,
}

#[derive(Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ThemeSpec {
    means: Vec<Vec<f64>>,
    sd: f64,
    alpha: f64,
}

impl Default for ThemeSpec {
    fn default() -> Self {
        Self {
            means: vec![vec![0.0, 0.0], vec![6.0, 0.0], vec![3.0, 5.2]],
            sd: 1.0,
            alpha: 1.1,
        }
    }
}

impl ThemeSpec {
    fn build(&self) -> Result<ThemeSet> {
        let d = self.means.first().map_or(0, Vec::len);
        if d == 0 || self.means.iter().any(|m| m.len() != d) {
            return Err(Error::Config("theme means must be non-empty and of equal length".into()));
        }
        let themes = self
            .means
            .iter()
            .map(|m| TaskTheme::new(DVector::from_column_slice(m), DMatrix::identity(d, d) * (self.sd * self.sd)))
            .collect::<Result<Vec<_>>>()?;
        let alpha = DirichletParams::new(vec![self.alpha; self.means.len()])?;
        ThemeSet::new(themes, alpha)
    }
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).map_err(|e| Error::io(p, e))?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn synth(args: SynthArgs) -> Result<()> {
    let mut spec = match &args.themes {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            toml::from_str::<ThemeSpec>(&text).map_err(|e| Error::Config(e.to_string()))?
        }
        None => ThemeSpec::default(),
    };
    if let Some(a) = args.alpha {
        spec.alpha = a;
    }
    let themes = spec.build()?;
    if args.tasks == 0 {
        return Err(Error::Usage("--tasks must be positive".into()));
    }
    let width = args.width.unwrap_or(themes.dim());
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let tasks = (0..args.tasks)
        .map(|_| generate_synthetic_task(&themes, args.points, &mut rng, SyntheticDecoder::Identity { width }))
        .collect::<Result<Vec<_>>>()?;
    let corpus = CorpusFile {
        version: CORPUS_VERSION,
        width,
        label_count: themes.k(),
        tasks,
    };
    let format = match args.format {
        FormatArg::Binary => CorpusFormat::Binary,
        FormatArg::Jsonl => CorpusFormat::JsonLines,
    };
    save_corpus(&args.out, &corpus, format)?;
    info!("wrote {} tasks to {}", args.tasks, args.out.display());
    Ok(())
}

fn train_cmd(args: TrainArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(p) => load_config(p)?,
        None => TrainConfig::default(),
    };
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.episodes {
        cfg.episodes = v;
    }
    if let Some(v) = args.k {
        cfg.k = v;
    }
    if let Some(v) = args.d {
        cfg.d = v;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = args.embedding {
        cfg.embedding = match v {
            EmbeddingArg::Learned => EmbeddingMode::Learned,
            EmbeddingArg::Identity => EmbeddingMode::Identity,
        };
    }
    let corpus = load_corpus(&args.corpus)?;
    info!(
        "training on {} tasks: K = {}, D = {}, {} mini-batches of {}",
        corpus.tasks.len(),
        cfg.k,
        cfg.d,
        cfg.episodes,
        cfg.batch_size
    );
    let (state, reports) = train(&corpus.tasks, &cfg)?;
    let skipped: usize = reports.iter().map(|r| r.skipped).sum();
    if skipped > 0 {
        info!("{skipped} degenerate tasks were skipped during training");
    }
    save_checkpoint(&state, &args.out)?;
    info!("wrote checkpoint to {}", args.out.display());
    Ok(())
}

fn load_pair(checkpoint: &Path, corpus: &Path) -> Result<(ModelState, CorpusFile)> {
    let state = load_checkpoint(checkpoint)?;
    let corpus = load_corpus(corpus)?;
    if corpus.width != state.data_width {
        return Err(Error::Usage(format!(
            "corpus width {} does not match the checkpoint's data width {}",
            corpus.width, state.data_width
        )));
    }
    Ok((state, corpus))
}

fn represent_cmd(args: RepresentArgs) -> Result<()> {
    let (state, corpus) = load_pair(&args.checkpoint, &args.corpus)?;
    let reps = if args.train_half {
        corpus
            .tasks
            .iter()
            .enumerate()
            .map(|(i, t)| represent_task_train_half(t, &state, i.to_string()))
            .collect::<Result<Vec<_>>>()?
    } else {
        represent_all(&corpus.tasks, &state)?
    };
    write_representations(output(args.out.as_deref())?, &reps)
}

fn distance_cmd(args: DistanceArgs) -> Result<()> {
    let (state, corpus) = load_pair(&args.checkpoint, &args.corpus)?;
    let reps = represent_all(&corpus.tasks, &state)?;
    let mut d = distance_matrix(&reps)?;
    if args.log {
        d = log_distance(&d);
    }
    write_matrix(output(args.out.as_deref())?, &d)
}

fn references(state: &ModelState, path: Option<&Path>, fallback: Option<&[TaskDataset]>) -> Result<Vec<DirichletParams>> {
    let loaded;
    let tasks = match (path, fallback) {
        (Some(p), _) => {
            loaded = load_corpus(p)?.tasks;
            &loaded[..]
        }
        (None, Some(f)) => f,
        (None, None) => return Ok(Vec::new()),
    };
    Ok(represent_all(tasks, state)?.into_iter().map(|r| r.gamma).collect())
}

fn select_cmd(args: SelectArgs) -> Result<()> {
    let (state, pool_corpus) = load_pair(&args.checkpoint, &args.pool)?;
    let kind = PolicyKind::from(args.policy);
    if kind == PolicyKind::KlMin && args.references.is_none() {
        return Err(Error::Usage("--policy kl-min requires --references".into()));
    }
    let refs = references(&state, args.references.as_deref(), None)?;
    let mut policy = SelectionPolicy::from_kind(kind, args.seed, refs)?;
    let reps = represent_all(&pool_corpus.tasks, &state)?;
    let mut pool = TaskPool::from_entries(pool_corpus.tasks.into_iter().zip(reps).collect())?;
    let mut picks = Vec::new();
    for _ in 0..args.count.min(pool.len()) {
        let idx = select_task(&pool, &mut policy, &state)?;
        let (_, rep): (TaskDataset, TaskRepresentation) = pool.take(idx);
        let original = rep.source.parse::<usize>().expect("sources are task indices");
        picks.push((original, rep.source));
    }
    write_selection(output(args.out.as_deref())?, &picks)
}

fn simulate_cmd(args: SimulateArgs) -> Result<()> {
    let (state, pool_corpus) = load_pair(&args.checkpoint, &args.pool)?;
    let eval = load_corpus(&args.eval)?.tasks;
    let kind = PolicyKind::from(args.policy);
    let refs = if kind == PolicyKind::KlMin {
        references(&state, args.references.as_deref(), Some(&eval))?
    } else {
        Vec::new()
    };
    let mut policy = SelectionPolicy::from_kind(kind, args.seed, refs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let mut order: Vec<usize> = (0..pool_corpus.tasks.len()).collect();
    order.shuffle(&mut rng);
    let mut stream = order.iter().map(|&i| pool_corpus.tasks[i].clone());
    let cfg = LifelongConfig {
        steps: args.steps,
        pool_capacity: args.capacity,
        cadence: args.cadence,
    };
    let mut learner = PrototypeLearner::new();
    let report = run_lifelong(&mut stream, &mut policy, &mut learner, &state, &eval, &cfg)?;
    let smooth = ewma(&report.accuracy, args.weight)?;
    write_series(output(args.out.as_deref())?, &report.steps, &report.accuracy, &smooth)?;
    if let Some(path) = &args.selections {
        let picks: Vec<(usize, String)> = report
            .selected
            .iter()
            .map(|s| {
                let drawn = s.parse::<usize>().expect("sources are draw counters");
                (order[drawn], s.clone())
            })
            .collect();
        write_selection(output(Some(path))?, &picks)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => {
            if let Some(n) = a.threads {
                rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build_global()
                    .map_err(|e| Error::Usage(e.to_string()))?;
            }
            train_cmd(a)
        }
        Command::Represent(a) => represent_cmd(a),
        Command::Distance(a) => distance_cmd(a),
        Command::Select(a) => select_cmd(a),
        Command::Simulate(a) => simulate_cmd(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
