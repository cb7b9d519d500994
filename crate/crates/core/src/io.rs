//! Corpus files, checkpoints, configuration and CSV export.
//!
//! Binary corpus layout (all integers and floats little-endian):
//!
//! ```text
//! magic    8 bytes  "PTMCORP\0"
//! version  u32      1
//! width    u32      P
//! labels   u32      label alphabet size L
//! tasks    u64      T
//! then per task:
//!   n      u64      N
//!   points N·P f64  row-major
//!   labels N u32
//! ```
//!
//! The JSON-lines alternative has a header line
//! `{"version":1,"width":P,"labels":L}` followed by one
//! `{"points":[[..],..],"labels":[..]}` object per task.
//!
//! Checkpoints are `"PTMCKPT\0"`, a u32 version, a u64 payload length, the
//! JSON payload, and a SHA-256 digest of everything before it.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analytics::TaskRepresentation;
use crate::dirichlet::DirichletParams;
use crate::error::{Error, Result};
use crate::net::{AdamState, DenseLayer, DenseNetwork, EmbeddingNetworks, Topology};
use crate::theme::{TaskTheme, ThemeSet};
use crate::trainer::{Embedder, ModelState, TaskDataset, TrainConfig};

pub const CORPUS_MAGIC: &[u8; 8] = b"PTMCORP\0";
pub const CORPUS_VERSION: u32 = 1;
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PTMCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusFile {
    pub version: u32,
    pub width: usize,
    pub label_count: usize,
    pub tasks: Vec<TaskDataset>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CorpusFormat {
    #[default]
    Binary,
    JsonLines,
}

impl CorpusFile {
    /// Width and label alphabet inferred from the tasks.
    pub fn from_tasks(tasks: Vec<TaskDataset>) -> Result<Self> {
        let width = tasks
            .first()
            .ok_or_else(|| Error::Usage("corpus has no tasks".into()))?
            .width();
        let label_count = tasks.iter().flat_map(|t| t.labels().iter()).max().map_or(0, |m| m + 1);
        let corpus = Self {
            version: CORPUS_VERSION,
            width,
            label_count,
            tasks,
        };
        corpus.validate()?;
        Ok(corpus)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CORPUS_VERSION {
            return Err(Error::parse(None, format!("unsupported corpus version {}", self.version)));
        }
        if self.tasks.is_empty() {
            return Err(Error::parse(None, "corpus contains no tasks"));
        }
        for (i, t) in self.tasks.iter().enumerate() {
            if t.width() != self.width {
                return Err(Error::parse(
                    Some(i),
                    format!("width {} differs from header width {}", t.width(), self.width),
                ));
            }
            if let Some(l) = t.labels().iter().find(|&&l| l >= self.label_count) {
                return Err(Error::parse(
                    Some(i),
                    format!("label {l} outside alphabet of size {}", self.label_count),
                ));
            }
        }
        Ok(())
    }
}

fn build_task(index: usize, n: usize, width: usize, values: Vec<f64>, labels: Vec<usize>) -> Result<TaskDataset> {
    if let Some(bad) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::parse(Some(index), format!("feature value {bad} outside range [0,1]")));
    }
    if labels.len() != n {
        return Err(Error::parse(Some(index), format!("{n} points but {} labels", labels.len())));
    }
    let points = DMatrix::from_row_slice(n, width, &values);
    TaskDataset::new(points, labels).map_err(|e| Error::parse(Some(index), e.to_string()))
}

pub fn load_corpus(path: &Path) -> Result<CorpusFile> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(CORPUS_MAGIC) {
        decode_corpus_binary(&bytes)
    } else {
        let text = std::str::from_utf8(&bytes).map_err(|_| Error::parse(None, "not a binary corpus and not UTF-8 text"))?;
        decode_corpus_jsonl(text)
    }
}

pub fn save_corpus(path: &Path, corpus: &CorpusFile, format: CorpusFormat) -> Result<()> {
    corpus.validate()?;
    let bytes = match format {
        CorpusFormat::Binary => encode_corpus_binary(corpus),
        CorpusFormat::JsonLines => encode_corpus_jsonl(corpus)?.into_bytes(),
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn encode_corpus_binary(corpus: &CorpusFile) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CORPUS_MAGIC);
    out.extend_from_slice(&corpus.version.to_le_bytes());
    out.extend_from_slice(&(corpus.width as u32).to_le_bytes());
    out.extend_from_slice(&(corpus.label_count as u32).to_le_bytes());
    out.extend_from_slice(&(corpus.tasks.len() as u64).to_le_bytes());
    for t in &corpus.tasks {
        out.extend_from_slice(&(t.len() as u64).to_le_bytes());
        for row in t.points().row_iter() {
            for v in row.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for &l in t.labels() {
            out.extend_from_slice(&(l as u32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, task: Option<usize>) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::parse(task, "unexpected end of file"));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, task: Option<usize>) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, task)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, task: Option<usize>) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, task)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self, task: Option<usize>) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, task)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_corpus_binary(bytes: &[u8]) -> Result<CorpusFile> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, None)? != CORPUS_MAGIC {
        return Err(Error::parse(None, "bad corpus magic"));
    }
    let version = r.u32(None)?;
    if version != CORPUS_VERSION {
        return Err(Error::parse(None, format!("unsupported corpus version {version}")));
    }
    let width = r.u32(None)? as usize;
    let label_count = r.u32(None)? as usize;
    let count = r.u64(None)? as usize;
    if width == 0 {
        return Err(Error::parse(None, "corpus width is zero"));
    }
    let mut tasks = Vec::new();
    for i in 0..count {
        let n = r.u64(Some(i))? as usize;
        let cells = n
            .checked_mul(width)
            .filter(|c| c.saturating_mul(8) <= bytes.len())
            .ok_or_else(|| Error::parse(Some(i), "task size exceeds the file"))?;
        let values = (0..cells).map(|_| r.f64(Some(i))).collect::<Result<Vec<f64>>>()?;
        let labels = (0..n)
            .map(|_| r.u32(Some(i)).map(|l| l as usize))
            .collect::<Result<Vec<usize>>>()?;
        tasks.push(build_task(i, n, width, values, labels)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::parse(None, "trailing bytes after the last task"));
    }
    let corpus = CorpusFile {
        version,
        width,
        label_count,
        tasks,
    };
    corpus.validate()?;
    Ok(corpus)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonHeader {
    version: u32,
    width: usize,
    labels: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonTask {
    points: Vec<Vec<f64>>,
    labels: Vec<usize>,
}

pub fn encode_corpus_jsonl(corpus: &CorpusFile) -> Result<String> {
    let mut out = String::new();
    let header = JsonHeader {
        version: corpus.version,
        width: corpus.width,
        labels: corpus.label_count,
    };
    out.push_str(&serde_json::to_string(&header).map_err(|e| Error::Usage(e.to_string()))?);
    out.push('\n');
    for t in &corpus.tasks {
        let record = JsonTask {
            points: t.points().row_iter().map(|r| r.iter().copied().collect()).collect(),
            labels: t.labels().to_vec(),
        };
        out.push_str(&serde_json::to_string(&record).map_err(|e| Error::Usage(e.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}

pub fn decode_corpus_jsonl(text: &str) -> Result<CorpusFile> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: JsonHeader = serde_json::from_str(lines.next().ok_or_else(|| Error::parse(None, "empty file"))?)
        .map_err(|e| Error::parse(None, format!("bad header: {e}")))?;
    if header.version != CORPUS_VERSION {
        return Err(Error::parse(None, format!("unsupported corpus version {}", header.version)));
    }
    let mut tasks = Vec::new();
    for (i, line) in lines.enumerate() {
        let record: JsonTask = serde_json::from_str(line).map_err(|e| Error::parse(Some(i), e.to_string()))?;
        let n = record.points.len();
        if let Some(row) = record.points.iter().find(|r| r.len() != header.width) {
            return Err(Error::parse(
                Some(i),
                format!("row of width {} in a corpus of width {}", row.len(), header.width),
            ));
        }
        let values = record.points.into_iter().flatten().collect();
        tasks.push(build_task(i, n, header.width, values, record.labels)?);
    }
    let corpus = CorpusFile {
        version: header.version,
        width: header.width,
        label_count: header.labels,
        tasks,
    };
    corpus.validate()?;
    Ok(corpus)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LayerPayload {
    rows: usize,
    cols: usize,
    /// Column-major.
    weight: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct NetworkPayload {
    topology: Topology,
    layers: Vec<LayerPayload>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
enum EmbedderPayload {
    Learned {
        encoder: NetworkPayload,
        decoder: NetworkPayload,
        encoder_adam: AdamState,
        decoder_adam: AdamState,
    },
    Identity {
        scale: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointPayload {
    k: usize,
    d: usize,
    p: usize,
    means: Vec<Vec<f64>>,
    /// Column-major D×D.
    covariances: Vec<Vec<f64>>,
    alpha: Vec<f64>,
    embedder: EmbedderPayload,
    step: u64,
    config: TrainConfig,
}

fn network_payload(net: &DenseNetwork) -> NetworkPayload {
    NetworkPayload {
        topology: net.topology().clone(),
        layers: net
            .layers()
            .iter()
            .map(|l| LayerPayload {
                rows: l.weight.nrows(),
                cols: l.weight.ncols(),
                weight: l.weight.as_slice().to_vec(),
                bias: l.bias.as_slice().to_vec(),
            })
            .collect(),
    }
}

fn network_from_payload(p: NetworkPayload) -> Result<DenseNetwork> {
    let layers = p
        .layers
        .into_iter()
        .map(|l| {
            if l.weight.len() != l.rows * l.cols {
                return Err(Error::Checkpoint("layer weight length does not match its shape".into()));
            }
            Ok(DenseLayer {
                weight: DMatrix::from_column_slice(l.rows, l.cols, &l.weight),
                bias: DVector::from_vec(l.bias),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    DenseNetwork::from_layers(p.topology, layers).map_err(|e| Error::Checkpoint(e.to_string()))
}

fn payload_of(state: &ModelState) -> CheckpointPayload {
    let embedder = match &state.embedder {
        Embedder::Learned {
            nets,
            encoder_adam,
            decoder_adam,
        } => EmbedderPayload::Learned {
            encoder: network_payload(&nets.encoder),
            decoder: network_payload(&nets.decoder),
            encoder_adam: encoder_adam.clone(),
            decoder_adam: decoder_adam.clone(),
        },
        Embedder::Identity { scale } => EmbedderPayload::Identity { scale: *scale },
    };
    CheckpointPayload {
        k: state.k(),
        d: state.dim(),
        p: state.data_width,
        means: state.themes.themes().iter().map(|t| t.mean().as_slice().to_vec()).collect(),
        covariances: state
            .themes
            .themes()
            .iter()
            .map(|t| t.covariance().as_slice().to_vec())
            .collect(),
        alpha: state.themes.alpha().as_slice().to_vec(),
        embedder,
        step: state.step,
        config: state.config.clone(),
    }
}

fn state_of(p: CheckpointPayload) -> Result<ModelState> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if p.means.len() != p.k || p.covariances.len() != p.k || p.alpha.len() != p.k {
        return Err(bad("stored arrays do not match K"));
    }
    if p.config.k != p.k || p.config.d != p.d {
        return Err(bad("config snapshot disagrees with stored K or D"));
    }
    let mut themes = Vec::with_capacity(p.k);
    for (mean, cov) in p.means.into_iter().zip(p.covariances) {
        if mean.len() != p.d || cov.len() != p.d * p.d {
            return Err(bad("stored theme does not match D"));
        }
        let theme = TaskTheme::new(DVector::from_vec(mean), DMatrix::from_column_slice(p.d, p.d, &cov))
            .map_err(|e| Error::Checkpoint(format!("stored theme is invalid: {e}")))?;
        themes.push(theme);
    }
    let alpha = DirichletParams::new(p.alpha).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let themes = ThemeSet::new(themes, alpha).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let embedder = match p.embedder {
        EmbedderPayload::Learned {
            encoder,
            decoder,
            encoder_adam,
            decoder_adam,
        } => {
            let nets = EmbeddingNetworks::from_parts(network_from_payload(encoder)?, network_from_payload(decoder)?)
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
            if nets.embedding_dim() != p.d || nets.data_width() != p.p {
                return Err(bad("network widths disagree with stored D or P"));
            }
            if encoder_adam.first_moment.len() != nets.encoder.parameter_count()
                || decoder_adam.first_moment.len() != nets.decoder.parameter_count()
            {
                return Err(bad("optimizer state does not match the networks"));
            }
            Embedder::Learned {
                nets,
                encoder_adam,
                decoder_adam,
            }
        }
        EmbedderPayload::Identity { scale } => Embedder::Identity { scale },
    };
    Ok(ModelState {
        themes,
        embedder,
        step: p.step,
        data_width: p.p,
        config: p.config,
    })
}

pub fn encode_checkpoint(state: &ModelState) -> Result<Vec<u8>> {
    let payload = serde_json::to_vec(&payload_of(state)).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut out = Vec::with_capacity(payload.len() + 52);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&payload);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(digest.as_slice());
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ModelState> {
    if bytes.len() < 20 + DIGEST_LEN || !bytes.starts_with(CHECKPOINT_MAGIC) {
        if bytes.starts_with(CHECKPOINT_MAGIC) || CHECKPOINT_MAGIC.starts_with(bytes) {
            return Err(Error::Checkpoint("checksum mismatch: file is truncated".into()));
        }
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    let declared = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
    let expected_len = (declared as usize).checked_add(20 + DIGEST_LEN);
    if expected_len != Some(bytes.len()) {
        return Err(Error::Checkpoint(format!(
            "checksum mismatch: expected {} bytes, found {}",
            expected_len.map_or("overflowing".to_string(), |l| l.to_string()),
            bytes.len()
        )));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checkpoint("checksum mismatch".into()));
    }
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let payload: CheckpointPayload =
        serde_json::from_slice(&body[20..]).map_err(|e| Error::Checkpoint(format!("malformed payload: {e}")))?;
    state_of(payload)
}

pub fn save_checkpoint(state: &ModelState, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(state)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState> {
    decode_checkpoint(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Rejects a checkpoint whose K or D differs from what the caller expects.
pub fn check_compatible(state: &ModelState, k: usize, d: usize) -> Result<()> {
    if state.k() != k || state.dim() != d {
        return Err(Error::Checkpoint(format!(
            "incompatible checkpoint: it has K = {}, D = {}; expected K = {k}, D = {d}",
            state.k(),
            state.dim()
        )));
    }
    Ok(())
}

pub fn parse_config(text: &str) -> Result<TrainConfig> {
    let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<TrainConfig> {
    parse_config(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

/// 17 significant digits in scientific notation.
pub fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

fn csv_writer<W: Write>(out: W) -> csv::Writer<W> {
    csv::WriterBuilder::new().has_headers(false).from_writer(out)
}

/// Columns `task,source,entropy,gamma_0..gamma_{K-1}`.
pub fn write_representations<W: Write>(out: W, reps: &[TaskRepresentation]) -> Result<()> {
    let mut w = csv_writer(out);
    let k = reps.first().map_or(0, |r| r.gamma.len());
    let mut header = vec!["task".to_string(), "source".to_string(), "entropy".to_string()];
    header.extend((0..k).map(|j| format!("gamma_{j}")));
    w.write_record(&header)?;
    for (i, r) in reps.iter().enumerate() {
        let mut row = vec![i.to_string(), r.source.clone(), format_float(r.entropy)];
        row.extend(r.gamma.as_slice().iter().map(|&g| format_float(g)));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io("<csv output>", e))
}

/// A bare matrix: one CSV row per matrix row, no header.
pub fn write_matrix<W: Write>(out: W, m: &DMatrix<f64>) -> Result<()> {
    let mut w = csv_writer(out);
    for row in m.row_iter() {
        w.write_record(row.iter().map(|&v| format_float(v)))?;
    }
    w.flush().map_err(|e| Error::io("<csv output>", e))
}

/// Columns `step,accuracy,ewma`.
pub fn write_series<W: Write>(out: W, steps: &[usize], raw: &[f64], smooth: &[f64]) -> Result<()> {
    if steps.len() != raw.len() || raw.len() != smooth.len() {
        return Err(Error::Usage("series lengths differ".into()));
    }
    let mut w = csv_writer(out);
    w.write_record(["step", "accuracy", "ewma"])?;
    for ((s, r), e) in steps.iter().zip(raw).zip(smooth) {
        w.write_record([s.to_string(), format_float(*r), format_float(*e)])?;
    }
    w.flush().map_err(|e| Error::io("<csv output>", e))
}

/// Columns `order,index,source`.
pub fn write_selection<W: Write>(out: W, picks: &[(usize, String)]) -> Result<()> {
    let mut w = csv_writer(out);
    w.write_record(["order", "index", "source"])?;
    for (order, (idx, source)) in picks.iter().enumerate() {
        w.write_record([order.to_string(), idx.to_string(), source.clone()])?;
    }
    w.flush().map_err(|e| Error::io("<csv output>", e))
}
