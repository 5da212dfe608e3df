//! Continual-learning metrics over the accuracy matrix `R`, where
//! `R[t][i]` is the test accuracy on task `i` after training through task
//! `t`. Task indices in the public API are 1-based.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Batch horizon of the reported learning-curve area.
pub const LCA_BETA: usize = 10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("row {row} of the accuracy matrix is not populated up to column {col}")]
    RowUnpopulated { row: usize, col: usize },
    #[error("metric needs at least 2 tasks, got {0}")]
    TooFewTasks(usize),
    #[error("learning curve has {len} points, need {needed}")]
    CurveTooShort { len: usize, needed: usize },
    #[error("random-init baseline is missing for task {0}")]
    MissingBaseline(usize),
    #[error("task index {index} outside 1..={tasks}")]
    OutOfRange { index: usize, tasks: usize },
    #[error("accuracy {0} is outside [0, 1]")]
    InvalidAccuracy(f64),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<Option<f64>>>,
}

impl AccuracyMatrix {
    pub fn new(tasks: usize) -> Self {
        Self {
            rows: vec![vec![None; tasks]; tasks],
        }
    }

    /// Fully populated matrix from dense rows.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let t = rows.len();
        let mut m = Self::new(t);
        for (i, row) in rows.into_iter().enumerate() {
            m.set_row(i + 1, &row)?;
        }
        Ok(m)
    }

    pub fn tasks(&self) -> usize {
        self.rows.len()
    }

    fn check_index(&self, index: usize) -> Result<()> {
        if index < 1 || index > self.tasks() {
            return Err(MetricsError::OutOfRange {
                index,
                tasks: self.tasks(),
            });
        }
        Ok(())
    }

    /// Sets `R[after_task][task]`.
    pub fn set(&mut self, after_task: usize, task: usize, accuracy: f64) -> Result<()> {
        self.check_index(after_task)?;
        self.check_index(task)?;
        if !(0.0..=1.0).contains(&accuracy) {
            return Err(MetricsError::InvalidAccuracy(accuracy));
        }
        self.rows[after_task - 1][task - 1] = Some(accuracy);
        Ok(())
    }

    /// Sets the leading entries of row `after_task`.
    pub fn set_row(&mut self, after_task: usize, accuracies: &[f64]) -> Result<()> {
        for (i, &a) in accuracies.iter().enumerate() {
            self.set(after_task, i + 1, a)?;
        }
        Ok(())
    }

    pub fn get(&self, after_task: usize, task: usize) -> Option<f64> {
        self.rows
            .get(after_task.checked_sub(1)?)?
            .get(task.checked_sub(1)?)
            .copied()
            .flatten()
    }

    fn require(&self, after_task: usize, task: usize) -> Result<f64> {
        self.check_index(after_task)?;
        self.check_index(task)?;
        self.get(after_task, task)
            .ok_or(MetricsError::RowUnpopulated {
                row: after_task,
                col: task,
            })
    }

    /// Accuracy on the first task after training on all of them.
    pub fn first_task_final(&self) -> Result<f64> {
        self.require(self.tasks(), 1)
    }

    /// Accuracy on the last task right after learning it.
    pub fn last_task_final(&self) -> Result<f64> {
        self.require(self.tasks(), self.tasks())
    }
}

/// `A_k`: mean of `R[k][1..=k]`.
pub fn average_accuracy(r: &AccuracyMatrix, k: usize) -> Result<f64> {
    r.check_index(k)?;
    let mut sum = 0.0;
    for i in 1..=k {
        sum += r.require(k, i)?;
    }
    Ok(sum / k as f64)
}

/// `F_k`: mean over `i < k` of `max_{l<k} R[l][i] - R[k][i]`. Negative when
/// later training improved the old tasks.
pub fn forgetting(r: &AccuracyMatrix, k: usize) -> Result<f64> {
    if k < 2 {
        return Err(MetricsError::TooFewTasks(k));
    }
    r.check_index(k)?;
    let mut sum = 0.0;
    for i in 1..k {
        let best = (1..k)
            .filter_map(|l| r.get(l, i))
            .fold(f64::NEG_INFINITY, f64::max);
        if best == f64::NEG_INFINITY {
            return Err(MetricsError::RowUnpopulated { row: i, col: i });
        }
        sum += best - r.require(k, i)?;
    }
    Ok(sum / (k - 1) as f64)
}

/// `BWT = mean_{i<T} (R[T][i] - R[i][i])`.
pub fn backward_transfer(r: &AccuracyMatrix) -> Result<f64> {
    let t = r.tasks();
    if t < 2 {
        return Err(MetricsError::TooFewTasks(t));
    }
    let mut sum = 0.0;
    for i in 1..t {
        sum += r.require(t, i)? - r.require(i, i)?;
    }
    Ok(sum / (t - 1) as f64)
}

/// Accuracy of the freshly initialized model on each task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomBaseline(pub Vec<f64>);

/// `FWT = mean_{i>=2} (R[i-1][i] - b[i])`.
pub fn forward_transfer(r: &AccuracyMatrix, baseline: &RandomBaseline) -> Result<f64> {
    let t = r.tasks();
    if t < 2 {
        return Err(MetricsError::TooFewTasks(t));
    }
    let mut sum = 0.0;
    for i in 2..=t {
        let b = *baseline.0.get(i - 1).ok_or(MetricsError::MissingBaseline(i))?;
        sum += r.require(i - 1, i)? - b;
    }
    Ok(sum / (t - 1) as f64)
}

/// `Z[b]`: accuracy on the task being learned after `b` mini-batches,
/// averaged over tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearningCurve(pub Vec<f64>);

impl LearningCurve {
    /// Averages per-task curves point by point. A task with fewer points
    /// than the longest contributes its final value to the missing
    /// positions.
    pub fn from_task_curves(curves: &[Vec<f64>]) -> Self {
        let curves: Vec<&Vec<f64>> = curves.iter().filter(|c| !c.is_empty()).collect();
        let len = curves.iter().map(|c| c.len()).max().unwrap_or(0);
        let z = (0..len)
            .map(|b| {
                curves
                    .iter()
                    .map(|c| c[b.min(c.len() - 1)])
                    .sum::<f64>()
                    / curves.len() as f64
            })
            .collect();
        Self(z)
    }
}

/// `LCA_β`: mean of `Z[0..=β]`.
pub fn lca(curve: &LearningCurve, beta: usize) -> Result<f64> {
    let needed = beta + 1;
    if curve.0.len() < needed {
        return Err(MetricsError::CurveTooShort {
            len: curve.0.len(),
            needed,
        });
    }
    Ok(curve.0[..needed].iter().sum::<f64>() / needed as f64)
}

/// The reported metric row. Metrics that need two or more tasks are `None`
/// for single-task runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(rename = "A_T")]
    pub average_accuracy: f64,
    #[serde(rename = "F_T")]
    pub forgetting: Option<f64>,
    #[serde(rename = "a_1")]
    pub first_task: f64,
    #[serde(rename = "a_t")]
    pub last_task: f64,
    #[serde(rename = "BWT")]
    pub backward_transfer: Option<f64>,
    #[serde(rename = "FWT")]
    pub forward_transfer: Option<f64>,
    #[serde(rename = "LCA_10")]
    pub lca: Option<f64>,
}

impl MetricsReport {
    pub const COLUMNS: [&'static str; 7] = ["A_T", "F_T", "a_1", "a_t", "BWT", "FWT", "LCA_10"];

    pub fn compute(
        r: &AccuracyMatrix,
        baseline: &RandomBaseline,
        curve: &LearningCurve,
    ) -> Result<Self> {
        let t = r.tasks();
        let multi = t >= 2;
        Ok(Self {
            average_accuracy: average_accuracy(r, t)?,
            forgetting: multi.then(|| forgetting(r, t)).transpose()?,
            first_task: r.first_task_final()?,
            last_task: r.last_task_final()?,
            backward_transfer: multi.then(|| backward_transfer(r)).transpose()?,
            forward_transfer: multi.then(|| forward_transfer(r, baseline)).transpose()?,
            lca: lca(curve, LCA_BETA).ok(),
        })
    }

    /// Values in [`Self::COLUMNS`] order.
    pub fn values(&self) -> [Option<f64>; 7] {
        [
            Some(self.average_accuracy),
            self.forgetting,
            Some(self.first_task),
            Some(self.last_task),
            self.backward_transfer,
            self.forward_transfer,
            self.lca,
        ]
    }
}
