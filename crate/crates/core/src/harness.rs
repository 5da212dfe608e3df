//! End-to-end experiment driver: builds the task stream, trains one model
//! through the tasks with the selected update rule, evaluates after every
//! task, and writes versioned JSON records plus CSV/JSON aggregates.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::episodic_memory::{EpisodicMemory, MemoryError, MemorySlot, SamplingMode};
use crate::epsilon_search::{self, HistoryEntry, Score, SearchError, SearchOutcome};
use crate::gradient_rules::{
    aagem_update, agem_project, gem_project, soft_gem_update, ConstraintSet, FlatGradient,
    RuleError, SoftConstraint, Update, ZERO_GRADIENT_FLOOR,
};
use crate::metrics::{
    AccuracyMatrix, LearningCurve, MetricsError, MetricsReport, RandomBaseline, LCA_BETA,
};
use crate::mlp_model::{Example, Mlp, MlpArchitecture, ModelError};
use crate::task_streams::{split_cv_eval, StreamConfig, StreamError, TaskDataset};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;
pub const RECORD_SCHEMA_VERSION: u32 = 1;

// Independent random streams derived from the run seed. Task construction
// uses the stream config's own seed.
const INIT_STREAM: u64 = 1;
const SHUFFLE_STREAM: u64 = 2;
const MEMORY_STREAM: u64 = 3;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Stream(#[from] StreamError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Rule(#[from] RuleError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Search(#[from] SearchError),
    #[error("non-finite update at task {task}, step {step}")]
    NonFinite { task: usize, step: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("csv output: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "VAN")]
    Vanilla,
    #[serde(rename = "ER")]
    ExperienceReplay,
    #[serde(rename = "GEM")]
    Gem,
    #[serde(rename = "AGEM")]
    AGem,
    #[serde(rename = "AAGEM")]
    AveragedAGem,
    #[serde(rename = "SOFTGEM")]
    SoftGem,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Vanilla => "VAN",
            Method::ExperienceReplay => "ER",
            Method::Gem => "GEM",
            Method::AGem => "AGEM",
            Method::AveragedAGem => "AAGEM",
            Method::SoftGem => "SOFTGEM",
        }
    }

    pub fn uses_memory(self) -> bool {
        self != Method::Vanilla
    }
}

fn default_lr() -> f64 {
    0.1
}
fn default_batch_size() -> usize {
    10
}
fn default_mem_per_class() -> usize {
    25
}
fn default_ref_batch_size() -> usize {
    256
}
fn default_epochs() -> usize {
    1
}
fn default_seeds() -> Vec<u64> {
    vec![0]
}

/// One experiment: a method, its hyperparameters, the task stream and the
/// seeds to run it with. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    /// Row label in aggregates; derived from the method when absent.
    #[serde(default)]
    pub name: Option<String>,
    pub method: Method,
    /// Soft-constraint margin, SOFTGEM only.
    #[serde(default)]
    pub epsilon: Option<f64>,
    pub stream: StreamConfig,
    pub hidden_dims: Vec<usize>,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_mem_per_class")]
    pub mem_per_class: usize,
    #[serde(default = "default_ref_batch_size")]
    pub ref_batch_size: usize,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_epochs")]
    pub epochs_per_task: usize,
    #[serde(default)]
    pub memory_sampling: SamplingMode,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> std::result::Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|source| HarnessError::Json {
            path: path.to_path_buf(),
            source,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(HarnessError::Config(msg));
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return bad(format!(
                "schema_version {} is not supported (expected {CONFIG_SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        match (self.method, self.epsilon) {
            (Method::SoftGem, None) => return bad("SOFTGEM needs an epsilon".into()),
            (Method::SoftGem, Some(e)) if !(0.0..=1.0).contains(&e) => {
                return bad(format!("epsilon {e} is outside [0, 1]"))
            }
            (m, Some(_)) if m != Method::SoftGem => {
                return bad(format!("epsilon is only valid for SOFTGEM, not {}", m.as_str()))
            }
            _ => {}
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.batch_size == 0 || self.ref_batch_size == 0 || self.epochs_per_task == 0 {
            return bad("batch_size, ref_batch_size and epochs_per_task must be >= 1".into());
        }
        if self.method.uses_memory() && self.mem_per_class == 0 {
            return bad("mem_per_class must be >= 1 for memory-based methods".into());
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        if self.hidden_dims.contains(&0) {
            return bad("hidden layer widths must be >= 1".into());
        }
        self.stream.validate()?;
        Ok(())
    }

    pub fn label(&self) -> String {
        if let Some(name) = &self.name {
            return name.clone();
        }
        match self.epsilon {
            Some(e) if self.method == Method::SoftGem => format!("SOFTGEM-eps{e}"),
            _ => self.method.as_str().to_string(),
        }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex_digest(json.as_bytes())
    }
}

fn hex_digest(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut s = String::with_capacity(64);
    for b in digest {
        let _ = write!(s, "{b:02x}");
    }
    s
}

/// Digest of a parameter vector's exact bit pattern.
pub fn parameter_digest(theta: &FlatGradient) -> String {
    let bytes: Vec<u8> = theta.iter().flat_map(|v| v.to_le_bytes()).collect();
    hex_digest(&bytes)
}

/// Everything needed to recompute the metrics of one run. Contains no
/// timing information, so equal `(config, seed)` give equal bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunRecord {
    pub schema_version: u32,
    pub config_hash: String,
    pub label: String,
    pub method: Method,
    pub epsilon: Option<f64>,
    pub seed: u64,
    pub arch: MlpArchitecture,
    pub lr: f64,
    pub batch_size: usize,
    pub ref_batch_size: usize,
    pub mem_per_class: usize,
    pub epochs_per_task: usize,
    pub accuracy: AccuracyMatrix,
    pub learning_curve: LearningCurve,
    pub task_curves: Vec<Vec<f64>>,
    pub random_baseline: RandomBaseline,
    pub steps_per_task: Vec<usize>,
    pub projections_per_task: Vec<usize>,
    pub skipped_steps_per_task: Vec<usize>,
    pub final_parameters_sha256: String,
}

impl RunRecord {
    pub fn metrics(&self) -> Result<MetricsReport> {
        Ok(MetricsReport::compute(
            &self.accuracy,
            &self.random_baseline,
            &self.learning_curve,
        )?)
    }

    pub fn total_projections(&self) -> usize {
        self.projections_per_task.iter().sum()
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("record serializes");
        s.push('\n');
        s
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let record: Self = serde_json::from_str(&text).map_err(|source| HarnessError::Json {
            path: path.to_path_buf(),
            source,
        })?;
        if record.schema_version != RECORD_SCHEMA_VERSION {
            return Err(HarnessError::Config(format!(
                "{}: record schema_version {} is not supported",
                path.display(),
                record.schema_version
            )));
        }
        Ok(record)
    }
}

/// A completed optimizer step, passed to training observers.
#[derive(Debug)]
pub struct StepEvent<'a> {
    pub task: usize,
    pub step: usize,
    pub projected: bool,
    pub skipped: bool,
    pub parameters: &'a FlatGradient,
}

/// A run record together with its wall-clock cost per task.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub record: RunRecord,
    pub task_seconds: Vec<f64>,
}

/// Which part of the stream a run trains on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// The leading tasks reserved for hyperparameter selection.
    CrossValidation,
    /// The remaining tasks, on which metrics are reported.
    Evaluation,
}

/// Builds the stream for `cfg` and returns the tasks of `phase` (renumbered
/// from 1) with the number of classes per head.
pub fn build_tasks(cfg: &ExperimentConfig, phase: Phase) -> Result<(Vec<TaskDataset>, usize)> {
    let base = cfg.stream.base.load()?;
    let classes = cfg.stream.head_classes(&base);
    let stream = cfg.stream.build(&base)?;
    let (cv, eval) = split_cv_eval(stream, cfg.stream.cv_tasks);
    let mut tasks = match phase {
        Phase::CrossValidation => cv,
        Phase::Evaluation => eval,
    };
    for (i, t) in tasks.iter_mut().enumerate() {
        t.task_id = i + 1;
    }
    if tasks.is_empty() {
        return Err(HarnessError::Config(format!("{phase:?} phase has no tasks")));
    }
    Ok((tasks, classes))
}

/// Trains through the evaluation stream of `cfg` with the given seed.
pub fn train_sequence(cfg: &ExperimentConfig, seed: u64) -> Result<RunRecord> {
    cfg.validate()?;
    let (tasks, classes) = build_tasks(cfg, Phase::Evaluation)?;
    Ok(train_tasks(cfg, seed, &tasks, classes, &mut |_| {})?.record)
}

fn examples<'a>(slots: &'a [&'a MemorySlot]) -> Vec<Example<'a>> {
    slots.iter().map(|s| s.as_example()).collect()
}

fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Runs the task loop over `tasks`: per mini-batch compute `g`, consult
/// memory, apply the method's rule and take an SGD step; after each task
/// store its samples in memory and evaluate every task.
pub fn train_tasks(
    cfg: &ExperimentConfig,
    seed: u64,
    tasks: &[TaskDataset],
    classes_per_head: usize,
    observer: &mut dyn FnMut(StepEvent<'_>),
) -> Result<RunOutput> {
    cfg.validate()?;
    let input_dim = tasks
        .iter()
        .find_map(|t| t.train.input_dim().or(t.test.input_dim()))
        .ok_or_else(|| HarnessError::Config("stream contains no samples".into()))?;
    let arch = MlpArchitecture::new(
        input_dim,
        cfg.hidden_dims.clone(),
        tasks.len(),
        classes_per_head,
    )?;
    let init_seed = rng_stream(seed, INIT_STREAM).next_u64();
    let mut model = Mlp::init(arch.clone(), init_seed)?;
    let mut shuffle_rng = rng_stream(seed, SHUFFLE_STREAM);
    let mut memory_rng = rng_stream(seed, MEMORY_STREAM);
    let mut memory = if cfg.method.uses_memory() {
        Some(EpisodicMemory::new(cfg.mem_per_class, classes_per_head)?.with_sampling(cfg.memory_sampling))
    } else {
        None
    };
    let soft = cfg.epsilon.map(SoftConstraint::new).transpose()?;

    let baseline = tasks
        .iter()
        .map(|t| model.evaluate(&t.test, t.task_id))
        .collect::<std::result::Result<Vec<_>, _>>()?;

    let n_tasks = tasks.len();
    let mut accuracy = AccuracyMatrix::new(n_tasks);
    let mut task_curves = Vec::with_capacity(n_tasks);
    let mut steps_per_task = Vec::with_capacity(n_tasks);
    let mut projections_per_task = Vec::with_capacity(n_tasks);
    let mut skipped_per_task = Vec::with_capacity(n_tasks);
    let mut task_seconds = Vec::with_capacity(n_tasks);

    for task in tasks {
        let started = Instant::now();
        let t = task.task_id;
        let mut curve = vec![model.evaluate(&task.test, t)?];
        let mut order: Vec<usize> = (0..task.train.len()).collect();
        let (mut steps, mut projections, mut skipped) = (0usize, 0usize, 0usize);

        for _ in 0..cfg.epochs_per_task {
            order.shuffle(&mut shuffle_rng);
            for chunk in order.chunks(cfg.batch_size) {
                let batch: Vec<Example> = chunk
                    .iter()
                    .map(|&i| Example {
                        input: &task.train.inputs[i],
                        task_id: t,
                        label: task.train.labels[i],
                    })
                    .collect();
                let update = constrained_gradient(
                    cfg,
                    soft,
                    &model,
                    memory.as_ref(),
                    t,
                    batch,
                    &mut memory_rng,
                )?;
                let projected = update.is_projected();
                let skip = matches!(update, Update::ZeroUpdate(_));
                let g_tilde = update.into_gradient();
                if !g_tilde.is_finite() {
                    return Err(HarnessError::NonFinite { task: t, step: steps });
                }
                if !skip {
                    model.sgd_step(&g_tilde, cfg.lr)?;
                }
                projections += usize::from(projected);
                skipped += usize::from(skip);
                steps += 1;
                observer(StepEvent {
                    task: t,
                    step: steps,
                    projected,
                    skipped: skip,
                    parameters: model.parameters(),
                });
                if steps <= LCA_BETA {
                    curve.push(model.evaluate(&task.test, t)?);
                }
            }
        }

        if let Some(mem) = memory.as_mut() {
            mem.update_memory(
                t,
                order
                    .iter()
                    .map(|&i| (task.train.inputs[i].as_slice(), task.train.labels[i])),
            )?;
        }
        for other in tasks {
            accuracy.set(t, other.task_id, model.evaluate(&other.test, other.task_id)?)?;
        }
        task_curves.push(curve);
        steps_per_task.push(steps);
        projections_per_task.push(projections);
        skipped_per_task.push(skipped);
        task_seconds.push(started.elapsed().as_secs_f64());
    }

    let record = RunRecord {
        schema_version: RECORD_SCHEMA_VERSION,
        config_hash: cfg.hash(),
        label: cfg.label(),
        method: cfg.method,
        epsilon: cfg.epsilon,
        seed,
        arch,
        lr: cfg.lr,
        batch_size: cfg.batch_size,
        ref_batch_size: cfg.ref_batch_size,
        mem_per_class: cfg.mem_per_class,
        epochs_per_task: cfg.epochs_per_task,
        accuracy,
        learning_curve: LearningCurve::from_task_curves(&task_curves),
        task_curves,
        random_baseline: RandomBaseline(baseline),
        steps_per_task,
        projections_per_task,
        skipped_steps_per_task: skipped_per_task,
        final_parameters_sha256: parameter_digest(model.parameters()),
    };
    Ok(RunOutput {
        record,
        task_seconds,
    })
}

/// Treats degenerate (near-zero) gradients as carrying no constraint.
fn skip_degenerate(result: std::result::Result<Update, RuleError>, g: &FlatGradient) -> Result<Update> {
    match result {
        Ok(u) => Ok(u),
        Err(RuleError::ZeroGradient { .. }) => Ok(Update::Unchanged(g.clone())),
        Err(e) => Err(e.into()),
    }
}

fn constrained_gradient<'a>(
    cfg: &ExperimentConfig,
    soft: Option<SoftConstraint>,
    model: &Mlp,
    memory: Option<&'a EpisodicMemory>,
    task: usize,
    mut batch: Vec<Example<'a>>,
    rng: &mut ChaCha8Rng,
) -> Result<Update> {
    let Some(memory) = memory else {
        return Ok(Update::Unchanged(model.loss_and_grad(&batch)?.1));
    };
    match cfg.method {
        Method::Vanilla => Ok(Update::Unchanged(model.loss_and_grad(&batch)?.1)),
        Method::ExperienceReplay => {
            match memory.sample_reference_batch(task, cfg.batch_size, rng) {
                Ok(replay) => {
                    batch.extend(replay.iter().map(|s| s.as_example()));
                }
                Err(MemoryError::EmptyMemory { .. }) => {}
                Err(e) => return Err(e.into()),
            }
            Ok(Update::Unchanged(model.loss_and_grad(&batch)?.1))
        }
        Method::AGem | Method::AveragedAGem | Method::SoftGem => {
            let refs = match memory.sample_reference_batch(task, cfg.ref_batch_size, rng) {
                Ok(refs) => refs,
                Err(MemoryError::EmptyMemory { .. }) => {
                    return Ok(Update::Unchanged(model.loss_and_grad(&batch)?.1))
                }
                Err(e) => return Err(e.into()),
            };
            let (_, g_ref) = model.loss_and_grad(&examples(&refs))?;
            let (_, g) = model.loss_and_grad(&batch)?;
            let result = match cfg.method {
                Method::AGem => agem_project(&g, &g_ref),
                Method::AveragedAGem => aagem_update(&g, &g_ref),
                _ => soft_gem_update(&g, &g_ref, soft.expect("validated epsilon")),
            };
            skip_degenerate(result, &g)
        }
        Method::Gem => {
            let per_task = match memory.per_task_batches(task, cfg.ref_batch_size, rng) {
                Ok(b) => b,
                Err(MemoryError::EmptyMemory { .. }) => {
                    return Ok(Update::Unchanged(model.loss_and_grad(&batch)?.1))
                }
                Err(e) => return Err(e.into()),
            };
            let mut rows = Vec::with_capacity(per_task.len());
            for slots in per_task.values() {
                let (_, g_k) = model.loss_and_grad(&examples(slots))?;
                if g_k.norm() > ZERO_GRADIENT_FLOOR {
                    rows.push(g_k);
                }
            }
            let (_, g) = model.loss_and_grad(&batch)?;
            if rows.is_empty() {
                return Ok(Update::Unchanged(g));
            }
            let constraints = ConstraintSet::new(rows)?;
            skip_degenerate(gem_project(&g, &constraints), &g)
        }
    }
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Per-label aggregate of one metric column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: Option<f64>,
    pub std: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub label: String,
    pub method: Method,
    pub runs: usize,
    pub metrics: BTreeMap<String, MetricSummary>,
}

impl SummaryRow {
    pub fn mean(&self, column: &str) -> Option<f64> {
        self.metrics.get(column).and_then(|m| m.mean)
    }

    pub fn std(&self, column: &str) -> Option<f64> {
        self.metrics.get(column).and_then(|m| m.std)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteSummary {
    pub rows: Vec<SummaryRow>,
    pub record_files: Vec<PathBuf>,
}

fn sanitize(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' })
        .collect()
}

/// Labels made unique by suffixing the config index on collisions.
fn unique_labels(configs: &[ExperimentConfig]) -> Vec<String> {
    let labels: Vec<String> = configs.iter().map(ExperimentConfig::label).collect();
    labels
        .iter()
        .enumerate()
        .map(|(i, l)| {
            if labels.iter().filter(|o| *o == l).count() > 1 {
                format!("{l}-{i}")
            } else {
                l.clone()
            }
        })
        .collect()
}

/// Summarizes runs grouped by label, in first-seen label order.
pub fn summarize(records: &[RunRecord]) -> Result<Vec<SummaryRow>> {
    let mut order: Vec<String> = Vec::new();
    let mut groups: BTreeMap<String, (Method, Vec<MetricsReport>)> = BTreeMap::new();
    for r in records {
        if !groups.contains_key(&r.label) {
            order.push(r.label.clone());
        }
        groups
            .entry(r.label.clone())
            .or_insert_with(|| (r.method, Vec::new()))
            .1
            .push(r.metrics()?);
    }
    Ok(order
        .into_iter()
        .map(|label| {
            let (method, reports) = &groups[&label];
            let metrics = MetricsReport::COLUMNS
                .iter()
                .enumerate()
                .map(|(c, name)| {
                    let vals: Option<Vec<f64>> = reports.iter().map(|r| r.values()[c]).collect();
                    let summary = match vals {
                        Some(v) if !v.is_empty() => {
                            let (m, s) = mean_std(&v);
                            MetricSummary {
                                mean: Some(m),
                                std: Some(s),
                            }
                        }
                        _ => MetricSummary {
                            mean: None,
                            std: None,
                        },
                    };
                    (name.to_string(), summary)
                })
                .collect();
            SummaryRow {
                label,
                method: *method,
                runs: reports.len(),
                metrics,
            }
        })
        .collect())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// Per-run metrics CSV: `method, seed, A_T, F_T, a_1, a_t, BWT, FWT, LCA_10`.
pub fn write_metrics_csv<W: std::io::Write>(w: W, records: &[RunRecord]) -> Result<()> {
    let mut csv = csv::Writer::from_writer(w);
    let mut header = vec!["method".to_string(), "seed".to_string()];
    header.extend(MetricsReport::COLUMNS.iter().map(|c| c.to_string()));
    csv.write_record(&header)?;
    for r in records {
        let m = r.metrics()?;
        let mut row = vec![r.label.clone(), r.seed.to_string()];
        row.extend(m.values().iter().map(|v| fmt_opt(*v)));
        csv.write_record(&row)?;
    }
    csv.flush().map_err(|e| HarnessError::Csv(e.into()))?;
    Ok(())
}

/// Aggregate CSV: one row per label with mean and std of every metric.
pub fn write_summary_csv<W: std::io::Write>(w: W, rows: &[SummaryRow]) -> Result<()> {
    let mut csv = csv::Writer::from_writer(w);
    let mut header = vec!["method".to_string(), "runs".to_string()];
    for c in MetricsReport::COLUMNS {
        header.push(format!("{c}_mean"));
        header.push(format!("{c}_std"));
    }
    csv.write_record(&header)?;
    for row in rows {
        let mut out = vec![row.label.clone(), row.runs.to_string()];
        for c in MetricsReport::COLUMNS {
            out.push(fmt_opt(row.mean(c)));
            out.push(fmt_opt(row.std(c)));
        }
        csv.write_record(&out)?;
    }
    csv.flush().map_err(|e| HarnessError::Csv(e.into()))?;
    Ok(())
}

fn thread_pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| HarnessError::Config(format!("thread pool: {e}")))
}

/// Runs every `(config, seed)` pair (up to `jobs` at once) and returns the
/// records in config-then-seed order.
pub fn run_all(configs: &[ExperimentConfig], jobs: usize) -> Result<Vec<RunOutput>> {
    for cfg in configs {
        cfg.validate()?;
    }
    let labels = unique_labels(configs);
    let work: Vec<(usize, u64)> = configs
        .iter()
        .enumerate()
        .flat_map(|(i, c)| c.seeds.iter().map(move |&s| (i, s)))
        .collect();
    let pool = thread_pool(jobs)?;
    let mut tasks_cache: Vec<Option<(Vec<TaskDataset>, usize)>> = vec![None; configs.len()];
    for (i, cfg) in configs.iter().enumerate() {
        // configs sharing a stream share the built tasks
        if let Some(j) = (0..i).find(|&j| configs[j].stream == cfg.stream) {
            tasks_cache[i] = tasks_cache[j].clone();
        } else {
            tasks_cache[i] = Some(build_tasks(cfg, Phase::Evaluation)?);
        }
    }
    pool.install(|| {
        work.par_iter()
            .map(|&(i, seed)| {
                let mut cfg = configs[i].clone();
                if cfg.label() != labels[i] {
                    cfg.name = Some(labels[i].clone());
                }
                let (tasks, classes) = tasks_cache[i].as_ref().expect("built above");
                train_tasks(&cfg, seed, tasks, *classes, &mut |_| {})
            })
            .collect()
    })
}

/// Runs a suite and writes, under `out_dir`:
///
/// * `records/<label>_seed<seed>.json`: one versioned record per run;
/// * `metrics.csv`: one metrics row per run;
/// * `summary.csv` / `summary.json`: mean and std per label;
/// * `timings.csv`: wall-clock seconds per task (not reproducible).
pub fn run_suite(
    configs: &[ExperimentConfig],
    out_dir: impl AsRef<Path>,
    jobs: usize,
) -> Result<SuiteSummary> {
    let out_dir = out_dir.as_ref();
    let outputs = run_all(configs, jobs)?;
    let records_dir = out_dir.join("records");
    fs::create_dir_all(&records_dir).map_err(io_err(&records_dir))?;

    let mut files = Vec::with_capacity(outputs.len());
    let mut timings = String::from("method,seed,task,seconds\n");
    for out in &outputs {
        let r = &out.record;
        let path = records_dir.join(format!("{}_seed{}.json", sanitize(&r.label), r.seed));
        fs::write(&path, r.to_json()).map_err(io_err(&path))?;
        files.push(path);
        for (i, s) in out.task_seconds.iter().enumerate() {
            let _ = writeln!(timings, "{},{},{},{s:.6}", r.label, r.seed, i + 1);
        }
    }
    let records: Vec<RunRecord> = outputs.into_iter().map(|o| o.record).collect();
    let rows = summarize(&records)?;

    let write = |name: &str, bytes: Vec<u8>| -> Result<()> {
        let path = out_dir.join(name);
        fs::write(&path, bytes).map_err(io_err(&path))
    };
    let mut buf = Vec::new();
    write_metrics_csv(&mut buf, &records)?;
    write("metrics.csv", buf)?;
    let mut buf = Vec::new();
    write_summary_csv(&mut buf, &rows)?;
    write("summary.csv", buf)?;
    let mut json = serde_json::to_string_pretty(&rows).expect("summary serializes");
    json.push('\n');
    write("summary.json", json.into_bytes())?;
    write("timings.csv", timings.into_bytes())?;

    Ok(SuiteSummary {
        rows,
        record_files: files,
    })
}

/// Loads every `*.json` config in a directory, sorted by file name.
pub fn load_config_dir(dir: impl AsRef<Path>) -> Result<Vec<ExperimentConfig>> {
    let dir = dir.as_ref();
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(HarnessError::Config(format!(
            "no .json configs in {}",
            dir.display()
        )));
    }
    paths.iter().map(ExperimentConfig::load).collect()
}

/// Score of one ε: `A_T` mean/std and mean `F_T` over the config's seeds.
pub fn score_epsilon(
    base: &ExperimentConfig,
    epsilon: f64,
    tasks: &[TaskDataset],
    classes: usize,
) -> Result<Score> {
    let mut cfg = base.clone();
    cfg.method = Method::SoftGem;
    cfg.epsilon = Some(epsilon);
    let mut accs = Vec::with_capacity(cfg.seeds.len());
    let mut fgts = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let m = train_tasks(&cfg, seed, tasks, classes, &mut |_| {})?
            .record
            .metrics()?;
        accs.push(m.average_accuracy);
        if let Some(f) = m.forgetting {
            fgts.push(f);
        }
    }
    let (mean, std) = mean_std(&accs);
    Ok(Score {
        mean,
        std,
        forgetting: (fgts.len() == accs.len()).then(|| mean_std(&fgts).0),
    })
}

/// Refines ε for a SOFTGEM config on its cross-validation tasks (or on the
/// evaluation tasks when the stream reserves none).
pub fn search_epsilon(
    base: &ExperimentConfig,
    grid_points: usize,
    max_repeats: usize,
    jobs: usize,
) -> Result<SearchOutcome> {
    let mut probe = base.clone();
    probe.method = Method::SoftGem;
    probe.epsilon = Some(0.0);
    probe.validate()?;
    let phase = if probe.stream.cv_tasks > 0 {
        Phase::CrossValidation
    } else {
        Phase::Evaluation
    };
    let (tasks, classes) = build_tasks(&probe, phase)?;
    let pool = thread_pool(jobs)?;
    pool.install(|| {
        epsilon_search::run_search_par(grid_points, max_repeats, |eps| {
            score_epsilon(&probe, eps, &tasks, classes)
        })
    })
}

pub fn write_search_outputs(out_dir: impl AsRef<Path>, outcome: &SearchOutcome) -> Result<()> {
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut buf = Vec::new();
    epsilon_search::write_history_csv(&mut buf, &outcome.history)?;
    let path = out_dir.join("search_history.csv");
    fs::write(&path, buf).map_err(io_err(&path))?;
    let path = out_dir.join("search_result.json");
    let mut json = serde_json::to_string_pretty(outcome).expect("outcome serializes");
    json.push('\n');
    fs::write(&path, json).map_err(io_err(&path))
}

/// Repeats in a history, counted from its entries.
pub fn history_repeats(history: &[HistoryEntry]) -> usize {
    history.iter().map(|h| h.repeat + 1).max().unwrap_or(0)
}
