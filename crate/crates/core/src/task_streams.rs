//! Ordered task sequences: permuted-input tasks, split-class tasks (disjoint
//! or drawn with replacement), the cross-validation / evaluation partition,
//! and the data sources they are built from (IDX files or synthetic
//! Gaussian clusters).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

/// Spread of the synthetic clusters around their means.
pub const SYNTHETIC_SIGMA: f64 = 0.3;

#[derive(Debug, Error)]
pub enum StreamError {
    #[error("{path}: bad IDX magic 0x{got:08x}, expected 0x{expected:08x}")]
    BadMagic {
        path: PathBuf,
        expected: u32,
        got: u32,
    },
    #[error("{path}: truncated IDX file ({got} bytes, need {expected})")]
    TruncatedFile {
        path: PathBuf,
        expected: usize,
        got: usize,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("need {needed} classes, base data has {available}")]
    InsufficientClasses { needed: usize, available: usize },
    #[error("invalid stream configuration: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, StreamError>;

/// Inputs with integer labels.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Dataset {
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(inputs: Vec<Vec<f64>>, labels: Vec<usize>) -> Result<Self> {
        if inputs.len() != labels.len() {
            return Err(StreamError::CountMismatch {
                images: inputs.len(),
                labels: labels.len(),
            });
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> Option<usize> {
        self.inputs.first().map(Vec::len)
    }

    /// One more than the largest label, or zero when empty.
    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], usize)> {
        self.inputs
            .iter()
            .map(Vec::as_slice)
            .zip(self.labels.iter().copied())
    }

    fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            inputs: indices.iter().map(|&i| self.inputs[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

/// Train and test splits of a base data source.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseDataset {
    pub train: Dataset,
    pub test: Dataset,
    pub num_classes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset {
    /// 1-based position in the stream it was built for.
    pub task_id: usize,
    pub train: Dataset,
    pub test: Dataset,
    /// Base-data class behind each task-local label.
    pub source_classes: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamKind {
    Permuted,
    SplitDisjoint,
    SplitWithReplacement,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum BaseSource {
    Synthetic {
        classes: usize,
        dim: usize,
        train_per_class: usize,
        test_per_class: usize,
        seed: u64,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
}

impl BaseSource {
    pub fn load(&self) -> Result<BaseDataset> {
        match self {
            BaseSource::Synthetic {
                classes,
                dim,
                train_per_class,
                test_per_class,
                seed,
            } => synthetic_split(*classes, *dim, *train_per_class, *test_per_class, *seed),
            BaseSource::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => {
                let train = load_idx_dataset(train_images, train_labels)?;
                let test = load_idx_dataset(test_images, test_labels)?;
                let num_classes = train.num_classes().max(test.num_classes());
                Ok(BaseDataset {
                    train,
                    test,
                    num_classes,
                })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamConfig {
    pub total_tasks: usize,
    #[serde(default)]
    pub cv_tasks: usize,
    pub kind: StreamKind,
    /// Classes per task for split streams. Permuted streams keep every base
    /// class and ignore this.
    #[serde(default)]
    pub classes_per_task: Option<usize>,
    pub base: BaseSource,
    pub seed: u64,
    #[serde(default)]
    pub max_train_per_task: Option<usize>,
    #[serde(default)]
    pub max_test_per_task: Option<usize>,
}

impl StreamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_tasks == 0 {
            return Err(StreamError::InvalidConfig("total_tasks must be >= 1".into()));
        }
        if self.cv_tasks >= self.total_tasks {
            return Err(StreamError::InvalidConfig(format!(
                "cv_tasks ({}) must be smaller than total_tasks ({})",
                self.cv_tasks, self.total_tasks
            )));
        }
        if self.kind != StreamKind::Permuted && self.classes_per_task.unwrap_or(0) == 0 {
            return Err(StreamError::InvalidConfig(
                "split streams need classes_per_task >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Labels per task head once the stream is built.
    pub fn head_classes(&self, base: &BaseDataset) -> usize {
        match self.kind {
            StreamKind::Permuted => base.num_classes,
            _ => self.classes_per_task.unwrap_or(0),
        }
    }

    pub fn build(&self, base: &BaseDataset) -> Result<Vec<TaskDataset>> {
        self.validate()?;
        match self.kind {
            StreamKind::Permuted => make_permuted_stream(base, self),
            StreamKind::SplitDisjoint => make_split_stream(base, self, false),
            StreamKind::SplitWithReplacement => make_split_stream(base, self, true),
        }
    }
}

fn task_rng(seed: u64, task_id: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(task_id as u64);
    rng
}

fn limit(data: Dataset, max: Option<usize>, rng: &mut ChaCha8Rng) -> Dataset {
    match max {
        Some(max) if max < data.len() => {
            let mut picked = index::sample(rng, data.len(), max).into_vec();
            picked.sort_unstable();
            data.select(&picked)
        }
        _ => data,
    }
}

fn permute(input: &[f64], perm: &[usize]) -> Vec<f64> {
    perm.iter().map(|&src| input[src]).collect()
}

/// Pixel permutation of task `task_id`; task 1 is the identity.
pub fn task_permutation(dim: usize, seed: u64, task_id: usize) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..dim).collect();
    if task_id > 1 {
        perm.shuffle(&mut task_rng(seed, task_id));
    }
    perm
}

/// Every task sees the whole label space with a fixed input permutation
/// applied to both its train and test inputs.
pub fn make_permuted_stream(base: &BaseDataset, cfg: &StreamConfig) -> Result<Vec<TaskDataset>> {
    let dim = base
        .train
        .input_dim()
        .or(base.test.input_dim())
        .unwrap_or(0);
    let mut tasks = Vec::with_capacity(cfg.total_tasks);
    for task_id in 1..=cfg.total_tasks {
        let perm = task_permutation(dim, cfg.seed, task_id);
        // subsets come from their own stream so they do not depend on the
        // permutation draw
        let mut rng = task_rng(cfg.seed ^ 0x5eed_5eed, task_id);
        let train = limit(base.train.clone(), cfg.max_train_per_task, &mut rng);
        let test = limit(base.test.clone(), cfg.max_test_per_task, &mut rng);
        let apply = |d: Dataset| Dataset {
            inputs: d.inputs.iter().map(|x| permute(x, &perm)).collect(),
            labels: d.labels,
        };
        tasks.push(TaskDataset {
            task_id,
            train: apply(train),
            test: apply(test),
            source_classes: (0..base.num_classes).collect(),
        });
    }
    Ok(tasks)
}

fn restrict(data: &Dataset, classes: &[usize]) -> Dataset {
    let mut out = Dataset::default();
    for (x, y) in data.iter() {
        if let Some(local) = classes.iter().position(|&c| c == y) {
            out.inputs.push(x.to_vec());
            out.labels.push(local);
        }
    }
    out
}

/// Each task trains on a subset of the base classes, relabelled to
/// `0..classes_per_task` in the order the classes were drawn.
pub fn make_split_stream(
    base: &BaseDataset,
    cfg: &StreamConfig,
    with_replacement: bool,
) -> Result<Vec<TaskDataset>> {
    let per_task = cfg.classes_per_task.unwrap_or(0);
    if per_task == 0 {
        return Err(StreamError::InvalidConfig(
            "classes_per_task must be >= 1".into(),
        ));
    }
    if per_task > base.num_classes {
        return Err(StreamError::InsufficientClasses {
            needed: per_task,
            available: base.num_classes,
        });
    }
    let class_sets: Vec<Vec<usize>> = if with_replacement {
        (1..=cfg.total_tasks)
            .map(|t| {
                let mut rng = task_rng(cfg.seed, t);
                index::sample(&mut rng, base.num_classes, per_task).into_vec()
            })
            .collect()
    } else {
        let needed = per_task * cfg.total_tasks;
        if needed > base.num_classes {
            return Err(StreamError::InsufficientClasses {
                needed,
                available: base.num_classes,
            });
        }
        let mut order: Vec<usize> = (0..base.num_classes).collect();
        order.shuffle(&mut task_rng(cfg.seed, 0));
        order.chunks(per_task).take(cfg.total_tasks).map(<[usize]>::to_vec).collect()
    };

    Ok(class_sets
        .into_iter()
        .enumerate()
        .map(|(i, classes)| {
            let task_id = i + 1;
            let mut rng = task_rng(cfg.seed ^ 0x5eed_5eed, task_id);
            let train = limit(restrict(&base.train, &classes), cfg.max_train_per_task, &mut rng);
            let test = limit(restrict(&base.test, &classes), cfg.max_test_per_task, &mut rng);
            TaskDataset {
                task_id,
                train,
                test,
                source_classes: classes,
            }
        })
        .collect())
}

/// First `cv_tasks` tasks for hyperparameter selection, the rest for
/// evaluation. Order is preserved.
pub fn split_cv_eval(
    mut stream: Vec<TaskDataset>,
    cv_tasks: usize,
) -> (Vec<TaskDataset>, Vec<TaskDataset>) {
    let eval = stream.split_off(cv_tasks.min(stream.len()));
    (stream, eval)
}

/// Gaussian clusters around random unit-norm means, `per_class` samples per
/// class with classes interleaved.
pub fn make_synthetic_base(classes: usize, dim: usize, per_class: usize, seed: u64) -> Dataset {
    let means = synthetic_means(classes, dim, seed);
    synthetic_samples(&means, per_class, seed, 1)
}

/// Train and test sets drawn around the same cluster means.
pub fn synthetic_split(
    classes: usize,
    dim: usize,
    train_per_class: usize,
    test_per_class: usize,
    seed: u64,
) -> Result<BaseDataset> {
    if classes < 2 || dim == 0 {
        return Err(StreamError::InvalidConfig(format!(
            "synthetic data needs >= 2 classes and dim >= 1 (got {classes}, {dim})"
        )));
    }
    let means = synthetic_means(classes, dim, seed);
    Ok(BaseDataset {
        train: synthetic_samples(&means, train_per_class, seed, 1),
        test: synthetic_samples(&means, test_per_class, seed, 2),
        num_classes: classes,
    })
}

fn synthetic_means(classes: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..classes)
        .map(|_| loop {
            let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                break v.into_iter().map(|x| x / norm).collect();
            }
        })
        .collect()
}

fn synthetic_samples(means: &[Vec<f64>], per_class: usize, seed: u64, stream: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let noise = Normal::new(0.0, SYNTHETIC_SIGMA).expect("finite sigma");
    let mut data = Dataset::default();
    for _ in 0..per_class {
        for (label, mean) in means.iter().enumerate() {
            data.inputs
                .push(mean.iter().map(|m| m + noise.sample(&mut rng)).collect());
            data.labels.push(label);
        }
    }
    data
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| StreamError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| StreamError::TruncatedFile {
            path: path.to_path_buf(),
            expected: at + 4,
            got: bytes.len(),
        })
}

fn check_magic(bytes: &[u8], expected: u32, path: &Path) -> Result<()> {
    let got = be_u32(bytes, 0, path)?;
    if got != expected {
        return Err(StreamError::BadMagic {
            path: path.to_path_buf(),
            expected,
            got,
        });
    }
    Ok(())
}

/// Reads an IDX image file; pixels are scaled from `0..=255` to `[0, 1]`.
/// Returns the images and their `(rows, cols)` shape.
pub fn read_idx_images(path: impl AsRef<Path>) -> Result<(Vec<Vec<f64>>, (usize, usize))> {
    let path = path.as_ref();
    let bytes = read_file(path)?;
    check_magic(&bytes, IDX_IMAGE_MAGIC, path)?;
    let n = be_u32(&bytes, 4, path)? as usize;
    let rows = be_u32(&bytes, 8, path)? as usize;
    let cols = be_u32(&bytes, 12, path)? as usize;
    let pixels = rows * cols;
    let expected = 16 + n * pixels;
    if bytes.len() < expected {
        return Err(StreamError::TruncatedFile {
            path: path.to_path_buf(),
            expected,
            got: bytes.len(),
        });
    }
    let images = bytes[16..expected]
        .chunks_exact(pixels.max(1))
        .take(n)
        .map(|img| img.iter().map(|&p| f64::from(p) / 255.0).collect())
        .collect();
    Ok((images, (rows, cols)))
}

pub fn read_idx_labels(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    let path = path.as_ref();
    let bytes = read_file(path)?;
    check_magic(&bytes, IDX_LABEL_MAGIC, path)?;
    let n = be_u32(&bytes, 4, path)? as usize;
    let expected = 8 + n;
    if bytes.len() < expected {
        return Err(StreamError::TruncatedFile {
            path: path.to_path_buf(),
            expected,
            got: bytes.len(),
        });
    }
    Ok(bytes[8..expected].iter().map(|&b| usize::from(b)).collect())
}

/// Loads a matching pair of IDX image and label files.
pub fn load_idx_dataset(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset> {
    let (inputs, _) = read_idx_images(images)?;
    let labels = read_idx_labels(labels)?;
    Dataset::new(inputs, labels)
}

pub fn write_idx_images(
    path: impl AsRef<Path>,
    images: &[Vec<u8>],
    rows: usize,
    cols: usize,
) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = Vec::with_capacity(16 + images.len() * rows * cols);
    bytes.extend_from_slice(&IDX_IMAGE_MAGIC.to_be_bytes());
    bytes.extend_from_slice(&(images.len() as u32).to_be_bytes());
    bytes.extend_from_slice(&(rows as u32).to_be_bytes());
    bytes.extend_from_slice(&(cols as u32).to_be_bytes());
    for img in images {
        if img.len() != rows * cols {
            return Err(StreamError::InvalidConfig(format!(
                "image has {} pixels, expected {}",
                img.len(),
                rows * cols
            )));
        }
        bytes.extend_from_slice(img);
    }
    write_file(path, &bytes)
}

pub fn write_idx_labels(path: impl AsRef<Path>, labels: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = Vec::with_capacity(8 + labels.len());
    bytes.extend_from_slice(&IDX_LABEL_MAGIC.to_be_bytes());
    bytes.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    bytes.extend_from_slice(labels);
    write_file(path, &bytes)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::File::create(path)
        .and_then(|mut f| f.write_all(bytes))
        .map_err(|source| StreamError::Io {
            path: path.to_path_buf(),
            source,
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_base(classes: usize) -> BaseDataset {
        synthetic_split(classes, 6, 5, 3, 11).unwrap()
    }

    fn cfg(kind: StreamKind, tasks: usize, per_task: Option<usize>) -> StreamConfig {
        StreamConfig {
            total_tasks: tasks,
            cv_tasks: 0,
            kind,
            classes_per_task: per_task,
            base: BaseSource::Synthetic {
                classes: 10,
                dim: 6,
                train_per_class: 5,
                test_per_class: 3,
                seed: 11,
            },
            seed: 4,
            max_train_per_task: None,
            max_test_per_task: None,
        }
    }

    fn sorted(v: &[f64]) -> Vec<f64> {
        let mut v = v.to_vec();
        v.sort_by(f64::total_cmp);
        v
    }

    #[test]
    fn first_permuted_task_is_identity() {
        let base = small_base(4);
        let stream = make_permuted_stream(&base, &cfg(StreamKind::Permuted, 3, None)).unwrap();
        assert_eq!(stream[0].train, base.train);
        assert_eq!(stream[0].test, base.test);
        assert_eq!(stream.len(), 3);
    }

    #[test]
    fn permutation_preserves_pixel_multiset_and_labels() {
        let base = small_base(4);
        let c = cfg(StreamKind::Permuted, 4, None);
        let stream = make_permuted_stream(&base, &c).unwrap();
        for task in &stream[1..] {
            assert_eq!(task.train.labels, base.train.labels);
            assert_eq!(task.test.labels, base.test.labels);
            for (orig, perm) in base.train.inputs.iter().zip(&task.train.inputs) {
                assert_eq!(sorted(orig), sorted(perm));
            }
            assert_ne!(task.train.inputs, base.train.inputs);
        }
        // same permutation on train and test
        let perm = task_permutation(6, c.seed, 3);
        assert_eq!(stream[2].test.inputs[0], permute(&base.test.inputs[0], &perm));
        assert_eq!(make_permuted_stream(&base, &c).unwrap(), stream);
    }

    #[test]
    fn applying_a_permutation_twice_differs() {
        let perm = task_permutation(16, 9, 2);
        assert_ne!(perm, (0..16).collect::<Vec<_>>());
        let x: Vec<f64> = (0..16).map(f64::from).collect();
        let once = permute(&x, &perm);
        let twice = permute(&once, &perm);
        // a non-identity permutation composed with itself equals itself only
        // if it were the identity
        assert_ne!(once, twice);
    }

    #[test]
    fn disjoint_split_partitions_labels() {
        let base = small_base(10);
        let stream = make_split_stream(&base, &cfg(StreamKind::SplitDisjoint, 5, Some(2)), false).unwrap();
        let mut all: Vec<usize> = stream.iter().flat_map(|t| t.source_classes.clone()).collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        for t in &stream {
            assert!(t.train.labels.iter().all(|&y| y < 2));
            assert!(t.test.labels.iter().all(|&y| y < 2));
            assert_eq!(t.train.len(), 10);
        }
    }

    #[test]
    fn disjoint_split_needs_enough_classes() {
        let base = small_base(10);
        assert!(matches!(
            make_split_stream(&base, &cfg(StreamKind::SplitDisjoint, 6, Some(2)), false),
            Err(StreamError::InsufficientClasses { needed: 12, available: 10 })
        ));
    }

    #[test]
    fn replacement_split_reuses_classes() {
        let base = small_base(10);
        let stream = make_split_stream(
            &base,
            &cfg(StreamKind::SplitWithReplacement, 12, Some(5)),
            true,
        )
        .unwrap();
        let mut counts = [0usize; 10];
        for t in &stream {
            let mut s = t.source_classes.clone();
            s.sort_unstable();
            s.dedup();
            assert_eq!(s.len(), 5);
            for c in s {
                counts[c] += 1;
            }
        }
        assert!(counts.iter().any(|&n| n >= 2));
    }

    #[test]
    fn limits_subsample_each_task() {
        let base = small_base(10);
        let mut c = cfg(StreamKind::Permuted, 2, None);
        c.max_train_per_task = Some(7);
        c.max_test_per_task = Some(4);
        let stream = make_permuted_stream(&base, &c).unwrap();
        assert!(stream.iter().all(|t| t.train.len() == 7 && t.test.len() == 4));
    }

    #[test]
    fn cv_eval_split() {
        let base = small_base(4);
        let stream = make_permuted_stream(&base, &cfg(StreamKind::Permuted, 20, None)).unwrap();
        let (cv, eval) = split_cv_eval(stream.clone(), 3);
        assert_eq!((cv.len(), eval.len()), (3, 17));
        assert_eq!(eval[0].task_id, 4);
        let rejoined: Vec<_> = cv.into_iter().chain(eval).collect();
        assert_eq!(rejoined, stream);
        let (cv, eval) = split_cv_eval(stream, 0);
        assert!(cv.is_empty());
        assert_eq!(eval.len(), 20);
    }

    #[test]
    fn config_validation() {
        let mut c = cfg(StreamKind::Permuted, 3, None);
        c.cv_tasks = 3;
        assert!(c.validate().is_err());
        assert!(cfg(StreamKind::SplitDisjoint, 3, None).validate().is_err());
        assert!(cfg(StreamKind::Permuted, 0, None).validate().is_err());
    }

    #[test]
    fn synthetic_examples() {
        assert!(make_synthetic_base(3, 4, 0, 1).is_empty());
        assert_eq!(make_synthetic_base(3, 4, 5, 1), make_synthetic_base(3, 4, 5, 1));
        assert_ne!(make_synthetic_base(3, 4, 5, 1), make_synthetic_base(3, 4, 5, 2));
        let d = make_synthetic_base(3, 4, 5, 1);
        assert_eq!(d.len(), 15);
        assert_eq!(d.labels[..3], [0, 1, 2]);
        assert!(synthetic_split(1, 4, 2, 2, 0).is_err());
    }

    #[test]
    fn idx_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let img_path = dir.path().join("img.idx");
        let lbl_path = dir.path().join("lbl.idx");
        let images: Vec<Vec<u8>> = (0..4u8)
            .map(|k| (0..6u8).map(|p| k * 60 + p * 7).collect())
            .collect();
        write_idx_images(&img_path, &images, 2, 3).unwrap();
        write_idx_labels(&lbl_path, &[3, 1, 4, 1]).unwrap();

        let (read, shape) = read_idx_images(&img_path).unwrap();
        assert_eq!(shape, (2, 3));
        let expected: Vec<Vec<f64>> = images
            .iter()
            .map(|img| img.iter().map(|&p| f64::from(p) / 255.0).collect())
            .collect();
        assert_eq!(read, expected);
        let data = load_idx_dataset(&img_path, &lbl_path).unwrap();
        assert_eq!(data.labels, vec![3, 1, 4, 1]);
        assert_eq!(data.inputs, expected);

        let bytes = fs::read(&img_path).unwrap();
        assert_eq!(&bytes[..4], &[0, 0, 8, 3]);
        fs::write(&img_path, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(
            read_idx_images(&img_path),
            Err(StreamError::TruncatedFile { .. })
        ));

        // label file offered as images
        assert!(matches!(
            read_idx_images(&lbl_path),
            Err(StreamError::BadMagic { got: IDX_LABEL_MAGIC, .. })
        ));
        assert!(matches!(
            read_idx_labels(dir.path().join("missing")),
            Err(StreamError::Io { .. })
        ));
    }
}
