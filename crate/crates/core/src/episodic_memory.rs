//! Fixed-budget episodic memory.
//!
//! Each task owns one FIFO ring buffer per class. Once a task's buffer has
//! been filled it is finalized and never written again; reference batches are
//! drawn only from tasks strictly before the one being trained.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::io::{self, Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mlp_model::Example;

const SNAPSHOT_MAGIC: &[u8; 4] = b"EPMM";
const SNAPSHOT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum MemoryError {
    #[error("per-class memory budget must be at least 1")]
    BudgetZero,
    #[error("classes per task must be at least 1")]
    NoClasses,
    #[error("no stored samples from tasks before task {current_task}")]
    EmptyMemory { current_task: usize },
    #[error("task {0} has already been written to memory")]
    TaskFinalized(usize),
    #[error("label {label} is outside the {classes} classes of a task")]
    InvalidLabel { label: usize, classes: usize },
    #[error("task ids start at 1")]
    InvalidTask,
    #[error("reference batch size must be at least 1")]
    ZeroBatch,
    #[error("snapshot: {0}")]
    Snapshot(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, MemoryError>;

/// One stored sample: the raw input, the task it came from, and its
/// task-local label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemorySlot {
    pub input: Vec<f64>,
    pub task_id: usize,
    pub label: usize,
}

impl MemorySlot {
    pub fn as_example(&self) -> Example<'_> {
        Example {
            input: &self.input,
            task_id: self.task_id,
            label: self.label,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    /// Uniform draws with replacement; always returns `batch_size` slots.
    #[default]
    WithReplacement,
    /// Distinct slots; returns `min(batch_size, available)` of them.
    WithoutReplacement,
}

#[derive(Debug, Clone, PartialEq)]
struct TaskBuffer {
    per_class: Vec<VecDeque<MemorySlot>>,
}

impl TaskBuffer {
    fn new(classes: usize) -> Self {
        Self {
            per_class: vec![VecDeque::new(); classes],
        }
    }

    fn len(&self) -> usize {
        self.per_class.iter().map(VecDeque::len).sum()
    }

    fn slots(&self) -> impl Iterator<Item = &MemorySlot> {
        self.per_class.iter().flat_map(|ring| ring.iter())
    }
}

/// Per-task, per-class ring buffers of stored samples.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodicMemory {
    budget_per_class: usize,
    classes_per_task: usize,
    sampling: SamplingMode,
    per_task: BTreeMap<usize, TaskBuffer>,
    finalized: BTreeSet<usize>,
}

impl EpisodicMemory {
    pub fn new(budget_per_class: usize, classes_per_task: usize) -> Result<Self> {
        if budget_per_class < 1 {
            return Err(MemoryError::BudgetZero);
        }
        if classes_per_task < 1 {
            return Err(MemoryError::NoClasses);
        }
        Ok(Self {
            budget_per_class,
            classes_per_task,
            sampling: SamplingMode::WithReplacement,
            per_task: BTreeMap::new(),
            finalized: BTreeSet::new(),
        })
    }

    pub fn with_sampling(mut self, sampling: SamplingMode) -> Self {
        self.sampling = sampling;
        self
    }

    pub fn budget_per_class(&self) -> usize {
        self.budget_per_class
    }

    pub fn classes_per_task(&self) -> usize {
        self.classes_per_task
    }

    /// Maximum number of slots a single task may hold.
    pub fn task_capacity(&self) -> usize {
        self.budget_per_class * self.classes_per_task
    }

    pub fn task_len(&self, task_id: usize) -> usize {
        self.per_task.get(&task_id).map_or(0, TaskBuffer::len)
    }

    pub fn len(&self) -> usize {
        self.per_task.values().map(TaskBuffer::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_finalized(&self, task_id: usize) -> bool {
        self.finalized.contains(&task_id)
    }

    /// Slots of one task in canonical order (class, then oldest first).
    pub fn task_slots(&self, task_id: usize) -> Vec<&MemorySlot> {
        self.per_task
            .get(&task_id)
            .map(|b| b.slots().collect())
            .unwrap_or_default()
    }

    /// Streams `samples` of `task_id` through its per-class ring buffers and
    /// finalizes the task. Each class keeps the last `budget_per_class`
    /// samples seen.
    pub fn update_memory<'a, I>(&mut self, task_id: usize, samples: I) -> Result<()>
    where
        I: IntoIterator<Item = (&'a [f64], usize)>,
    {
        if task_id < 1 {
            return Err(MemoryError::InvalidTask);
        }
        if self.finalized.contains(&task_id) {
            return Err(MemoryError::TaskFinalized(task_id));
        }
        let mut buffer = TaskBuffer::new(self.classes_per_task);
        for (input, label) in samples {
            if label >= self.classes_per_task {
                return Err(MemoryError::InvalidLabel {
                    label,
                    classes: self.classes_per_task,
                });
            }
            let ring = &mut buffer.per_class[label];
            if ring.len() == self.budget_per_class {
                ring.pop_front();
            }
            ring.push_back(MemorySlot {
                input: input.to_vec(),
                task_id,
                label,
            });
        }
        self.finalized.insert(task_id);
        if buffer.len() > 0 {
            self.per_task.insert(task_id, buffer);
        }
        Ok(())
    }

    fn union_before(&self, current_task: usize) -> Vec<&MemorySlot> {
        self.per_task
            .range(..current_task)
            .flat_map(|(_, b)| b.slots())
            .collect()
    }

    fn draw<'s, R: Rng + ?Sized>(
        &self,
        pool: &[&'s MemorySlot],
        batch_size: usize,
        rng: &mut R,
    ) -> Vec<&'s MemorySlot> {
        match self.sampling {
            SamplingMode::WithReplacement => (0..batch_size)
                .map(|_| pool[rng.gen_range(0..pool.len())])
                .collect(),
            SamplingMode::WithoutReplacement => {
                let take = batch_size.min(pool.len());
                rand::seq::index::sample(rng, pool.len(), take)
                    .into_iter()
                    .map(|i| pool[i])
                    .collect()
            }
        }
    }

    /// Reference batch drawn from the union of all tasks before
    /// `current_task`.
    pub fn sample_reference_batch<R: Rng + ?Sized>(
        &self,
        current_task: usize,
        batch_size: usize,
        rng: &mut R,
    ) -> Result<Vec<&MemorySlot>> {
        if batch_size < 1 {
            return Err(MemoryError::ZeroBatch);
        }
        let pool = self.union_before(current_task);
        if pool.is_empty() {
            return Err(MemoryError::EmptyMemory { current_task });
        }
        Ok(self.draw(&pool, batch_size, rng))
    }

    /// One independently drawn batch per previous task that has samples.
    pub fn per_task_batches<R: Rng + ?Sized>(
        &self,
        current_task: usize,
        batch_size: usize,
        rng: &mut R,
    ) -> Result<BTreeMap<usize, Vec<&MemorySlot>>> {
        if batch_size < 1 {
            return Err(MemoryError::ZeroBatch);
        }
        let mut out = BTreeMap::new();
        for (&task, buffer) in self.per_task.range(..current_task) {
            let pool: Vec<&MemorySlot> = buffer.slots().collect();
            if pool.is_empty() {
                continue;
            }
            out.insert(task, self.draw(&pool, batch_size, rng));
        }
        if out.is_empty() {
            return Err(MemoryError::EmptyMemory { current_task });
        }
        Ok(out)
    }

    /// Writes a versioned binary snapshot (little-endian, length-prefixed
    /// records in canonical order).
    pub fn write_snapshot<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(SNAPSHOT_MAGIC)?;
        w.write_all(&SNAPSHOT_VERSION.to_le_bytes())?;
        w.write_all(&(self.budget_per_class as u32).to_le_bytes())?;
        w.write_all(&(self.classes_per_task as u32).to_le_bytes())?;
        let mode: u8 = match self.sampling {
            SamplingMode::WithReplacement => 0,
            SamplingMode::WithoutReplacement => 1,
        };
        w.write_all(&[mode])?;
        w.write_all(&(self.finalized.len() as u32).to_le_bytes())?;
        for &task in &self.finalized {
            w.write_all(&(task as u32).to_le_bytes())?;
        }
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        for slot in self.per_task.values().flat_map(TaskBuffer::slots) {
            let body_len = 12 + 8 * slot.input.len();
            w.write_all(&(body_len as u32).to_le_bytes())?;
            w.write_all(&(slot.task_id as u32).to_le_bytes())?;
            w.write_all(&(slot.label as u32).to_le_bytes())?;
            w.write_all(&(slot.input.len() as u32).to_le_bytes())?;
            for v in &slot.input {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_snapshot<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != SNAPSHOT_MAGIC {
            return Err(MemoryError::Snapshot(format!("bad magic {magic:?}")));
        }
        let version = read_u32(&mut r)?;
        if version != SNAPSHOT_VERSION {
            return Err(MemoryError::Snapshot(format!(
                "unsupported version {version}"
            )));
        }
        let budget = read_u32(&mut r)? as usize;
        let classes = read_u32(&mut r)? as usize;
        let mut mode = [0u8; 1];
        r.read_exact(&mut mode)?;
        let sampling = match mode[0] {
            0 => SamplingMode::WithReplacement,
            1 => SamplingMode::WithoutReplacement,
            other => {
                return Err(MemoryError::Snapshot(format!(
                    "unknown sampling mode {other}"
                )))
            }
        };
        let mut memory = EpisodicMemory::new(budget, classes)?.with_sampling(sampling);
        let finalized = read_u32(&mut r)?;
        for _ in 0..finalized {
            memory.finalized.insert(read_u32(&mut r)? as usize);
        }
        let mut records = [0u8; 8];
        r.read_exact(&mut records)?;
        let records = u64::from_le_bytes(records);
        for _ in 0..records {
            let body_len = read_u32(&mut r)? as usize;
            let task_id = read_u32(&mut r)? as usize;
            let label = read_u32(&mut r)? as usize;
            let dim = read_u32(&mut r)? as usize;
            if body_len != 12 + 8 * dim {
                return Err(MemoryError::Snapshot(format!(
                    "record length {body_len} does not match dimension {dim}"
                )));
            }
            if label >= classes {
                return Err(MemoryError::InvalidLabel { label, classes });
            }
            if !memory.finalized.contains(&task_id) {
                return Err(MemoryError::Snapshot(format!(
                    "record for unfinalized task {task_id}"
                )));
            }
            let mut input = Vec::with_capacity(dim);
            let mut buf = [0u8; 8];
            for _ in 0..dim {
                r.read_exact(&mut buf)?;
                input.push(f64::from_le_bytes(buf));
            }
            let buffer = memory
                .per_task
                .entry(task_id)
                .or_insert_with(|| TaskBuffer::new(classes));
            let ring = &mut buffer.per_class[label];
            if ring.len() == budget {
                return Err(MemoryError::Snapshot(format!(
                    "task {task_id} class {label} exceeds the budget"
                )));
            }
            ring.push_back(MemorySlot {
                input,
                task_id,
                label,
            });
        }
        Ok(memory)
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}
