//! Synthetic multi-task benchmark: procedurally rendered shape scenes with
//! aligned labels for a set of seen tasks (used to train the generator)
//! and held-out unseen tasks (used only at evaluation time).

pub mod export;
mod scene;

use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use scene::{Scene, Shape, SHAPE_CLASSES};

use crate::error::{Error, Result};
use crate::models::{ImageBatch, ImageDims};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TaskId(pub u32);

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "task#{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LabelKind {
    ImageClass { classes: usize },
    PixelClass { classes: usize },
    ImageRegression { dim: usize },
    PixelRegression,
}

impl LabelKind {
    /// Model output width needed for this label kind.
    pub fn output_len(self, dims: ImageDims) -> usize {
        match self {
            LabelKind::ImageClass { classes } => classes,
            LabelKind::PixelClass { classes } => classes * dims.spatial(),
            LabelKind::ImageRegression { dim } => dim,
            LabelKind::PixelRegression => dims.spatial(),
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            LabelKind::ImageClass { .. } => "image-class",
            LabelKind::PixelClass { .. } => "pixel-class",
            LabelKind::ImageRegression { .. } => "image-regression",
            LabelKind::PixelRegression => "pixel-regression",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LossKind {
    /// Softmax cross-entropy (per image or per pixel).
    CrossEntropy,
    /// Squared error between softmax probabilities and one-hot labels.
    Brier,
    /// Squared error between raw outputs and targets (one-hot for classes).
    SquaredError,
}

impl LossKind {
    pub fn tag(self) -> &'static str {
        match self {
            LossKind::CrossEntropy => "cross-entropy",
            LossKind::Brier => "brier",
            LossKind::SquaredError => "squared-error",
        }
    }

    pub fn compatible_with(self, label: LabelKind) -> bool {
        match self {
            LossKind::CrossEntropy | LossKind::Brier => {
                matches!(label, LabelKind::ImageClass { .. } | LabelKind::PixelClass { .. })
            }
            LossKind::SquaredError => true,
        }
    }
}

/// Which way a metric moves when the defender succeeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    /// Lower is better for the defender (accuracy, mIoU).
    Down,
    /// Higher is better for the defender (MAE, MSE).
    Up,
}

impl Direction {
    pub fn arrow(self) -> &'static str {
        match self {
            Direction::Down => "↓",
            Direction::Up => "↑",
        }
    }

    /// True when `a` is strictly worse for the attacker than `b`.
    pub fn defender_prefers(self, a: f64, b: f64) -> bool {
        match self {
            Direction::Down => a < b,
            Direction::Up => a > b,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MetricKind {
    Accuracy,
    MeanIoU,
    Mae,
    Mse,
}

impl MetricKind {
    pub fn direction(self) -> Direction {
        match self {
            MetricKind::Accuracy | MetricKind::MeanIoU => Direction::Down,
            MetricKind::Mae | MetricKind::Mse => Direction::Up,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Accuracy => "accuracy",
            MetricKind::MeanIoU => "mIoU",
            MetricKind::Mae => "MAE",
            MetricKind::Mse => "MSE",
        }
    }
}

/// The scene quantity a task predicts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Target {
    ShapeClass,
    SizeClass,
    Quadrant,
    ForegroundMask,
    ShapeMask,
    EdgeMask,
    Centroid,
    Occupancy,
    Extent,
}

impl Target {
    /// Seen-task catalog, in the order tasks are drawn for a given `T`.
    pub const SEEN: [Target; 6] = [
        Target::ShapeClass,
        Target::ForegroundMask,
        Target::SizeClass,
        Target::ShapeMask,
        Target::Quadrant,
        Target::EdgeMask,
    ];

    /// Unseen-task catalog; uses label kinds that no seen task uses.
    pub const UNSEEN: [Target; 3] = [Target::Centroid, Target::Occupancy, Target::Extent];

    pub fn name(self) -> &'static str {
        match self {
            Target::ShapeClass => "shape_class",
            Target::SizeClass => "size_class",
            Target::Quadrant => "quadrant",
            Target::ForegroundMask => "fg_mask",
            Target::ShapeMask => "shape_mask",
            Target::EdgeMask => "edge_mask",
            Target::Centroid => "centroid",
            Target::Occupancy => "occupancy",
            Target::Extent => "extent",
        }
    }

    fn descriptor(self) -> (LabelKind, LossKind, MetricKind) {
        use LabelKind::*;
        match self {
            Target::ShapeClass => (ImageClass { classes: SHAPE_CLASSES }, LossKind::CrossEntropy, MetricKind::Accuracy),
            Target::SizeClass => (ImageClass { classes: 2 }, LossKind::Brier, MetricKind::Accuracy),
            Target::Quadrant => (ImageClass { classes: 4 }, LossKind::SquaredError, MetricKind::Accuracy),
            Target::ForegroundMask => (PixelClass { classes: 2 }, LossKind::CrossEntropy, MetricKind::MeanIoU),
            Target::ShapeMask => (
                PixelClass { classes: SHAPE_CLASSES + 1 },
                LossKind::Brier,
                MetricKind::MeanIoU,
            ),
            Target::EdgeMask => (PixelClass { classes: 2 }, LossKind::SquaredError, MetricKind::MeanIoU),
            Target::Centroid => (ImageRegression { dim: 2 }, LossKind::SquaredError, MetricKind::Mae),
            Target::Occupancy => (PixelRegression, LossKind::SquaredError, MetricKind::Mse),
            Target::Extent => (ImageRegression { dim: 1 }, LossKind::SquaredError, MetricKind::Mae),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: TaskId,
    pub name: String,
    pub target: Target,
    pub label_kind: LabelKind,
    pub loss: LossKind,
    pub metric: MetricKind,
    pub seen: bool,
}

impl TaskSpec {
    pub fn new(id: TaskId, target: Target, seen: bool) -> Self {
        let (label_kind, loss, metric) = target.descriptor();
        Self {
            id,
            name: target.name().to_string(),
            target,
            label_kind,
            loss,
            metric,
            seen,
        }
    }

    /// Label for a single scene, flattened.
    pub fn render_label(&self, scene: &Scene, dims: ImageDims) -> Label {
        match self.target {
            Target::ShapeClass => Label::Class(scene.shape.index()),
            Target::SizeClass => Label::Class(scene.size_class(dims)),
            Target::Quadrant => Label::Class(scene.quadrant(dims)),
            Target::ForegroundMask => {
                Label::PixelClass(scene.mask(dims).iter().map(|&b| usize::from(b)).collect())
            }
            Target::ShapeMask => {
                let k = scene.shape.index() + 1;
                Label::PixelClass(scene.mask(dims).iter().map(|&b| if b { k } else { 0 }).collect())
            }
            Target::EdgeMask => Label::PixelClass(scene.edge_mask(dims)),
            Target::Centroid => Label::Values(scene.centroid(dims).to_vec()),
            Target::Occupancy => Label::Values(scene.occupancy(dims)),
            Target::Extent => Label::Values(vec![scene.extent(dims)]),
        }
    }
}

/// Label of one sample.
#[derive(Debug, Clone, PartialEq)]
pub enum Label {
    Class(usize),
    PixelClass(Vec<usize>),
    Values(Vec<f64>),
}

/// Labels for a batch, flattened sample-major.
#[derive(Debug, Clone, PartialEq)]
pub enum LabelBatch {
    Class(Vec<usize>),
    PixelClass(Vec<usize>),
    Regression(Vec<f64>),
    PixelRegression(Vec<f64>),
}

impl LabelBatch {
    fn empty(kind: LabelKind) -> Self {
        match kind {
            LabelKind::ImageClass { .. } => LabelBatch::Class(Vec::new()),
            LabelKind::PixelClass { .. } => LabelBatch::PixelClass(Vec::new()),
            LabelKind::ImageRegression { .. } => LabelBatch::Regression(Vec::new()),
            LabelKind::PixelRegression => LabelBatch::PixelRegression(Vec::new()),
        }
    }

    fn push(&mut self, label: Label) {
        match (self, label) {
            (LabelBatch::Class(v), Label::Class(c)) => v.push(c),
            (LabelBatch::PixelClass(v), Label::PixelClass(p)) => v.extend(p),
            (LabelBatch::Regression(v) | LabelBatch::PixelRegression(v), Label::Values(x)) => v.extend(x),
            (batch, label) => panic!("label {label:?} does not fit batch {}", batch.tag()),
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            LabelBatch::Class(_) => "image-class",
            LabelBatch::PixelClass(_) => "pixel-class",
            LabelBatch::Regression(_) => "image-regression",
            LabelBatch::PixelRegression(_) => "pixel-regression",
        }
    }

    pub fn matches(&self, kind: LabelKind) -> bool {
        self.tag() == kind.tag()
    }

    /// Checks that this batch holds labels of `kind`.
    pub fn expect_kind(&self, kind: LabelKind) -> Result<()> {
        if self.matches(kind) {
            Ok(())
        } else {
            Err(Error::LabelKindMismatch {
                expected: kind.tag().into(),
                got: self.tag().into(),
            })
        }
    }

    /// Entries per sample for `kind`.
    fn stride(kind: LabelKind, dims: ImageDims) -> usize {
        match kind {
            LabelKind::ImageClass { .. } => 1,
            LabelKind::PixelClass { .. } | LabelKind::PixelRegression => dims.spatial(),
            LabelKind::ImageRegression { dim } => dim,
        }
    }

    pub fn gather(&self, indices: &[usize], kind: LabelKind, dims: ImageDims) -> LabelBatch {
        let k = Self::stride(kind, dims);
        fn pick<T: Copy>(v: &[T], idx: &[usize], k: usize) -> Vec<T> {
            idx.iter().flat_map(|&i| v[i * k..(i + 1) * k].iter().copied()).collect()
        }
        match self {
            LabelBatch::Class(v) => LabelBatch::Class(pick(v, indices, k)),
            LabelBatch::PixelClass(v) => LabelBatch::PixelClass(pick(v, indices, k)),
            LabelBatch::Regression(v) => LabelBatch::Regression(pick(v, indices, k)),
            LabelBatch::PixelRegression(v) => LabelBatch::PixelRegression(pick(v, indices, k)),
        }
    }
}

/// Images plus their labels for one task.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub task: TaskId,
    pub indices: Vec<usize>,
    pub images: ImageBatch,
    pub labels: LabelBatch,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Same labels over different images (e.g. perturbed versions).
    pub fn with_images(&self, images: ImageBatch) -> Batch {
        Batch {
            task: self.task,
            indices: self.indices.clone(),
            images,
            labels: self.labels.clone(),
        }
    }
}

/// One side of a split: images, the scenes they were rendered from, and a
/// label block per task (indexed by task id).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: ImageBatch,
    pub scenes: Vec<Scene>,
    /// Global scene indices; disjoint between train and test.
    pub scene_indices: Vec<u64>,
    pub labels: Vec<LabelBatch>,
}

impl Dataset {
    fn render(tasks: &[TaskSpec], seed: u64, indices: std::ops::Range<u64>, dims: ImageDims) -> Result<Self> {
        let scenes: Vec<Scene> = indices.clone().map(|i| Scene::generate(seed, i, dims)).collect();
        let images: Vec<_> = scenes.iter().map(|s| s.render(dims)).collect();
        let labels = tasks
            .iter()
            .map(|t| {
                let mut lb = LabelBatch::empty(t.label_kind);
                for s in &scenes {
                    lb.push(t.render_label(s, dims));
                }
                lb
            })
            .collect();
        Ok(Self {
            images: ImageBatch::from_images(dims, &images)?,
            scenes,
            scene_indices: indices.collect(),
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn dims(&self) -> ImageDims {
        self.images.dims()
    }

    /// Same scenes and labels over replacement images.
    pub fn with_images(&self, images: ImageBatch) -> Result<Dataset> {
        if images.len() != self.len() || images.dims() != self.dims() {
            return Err(Error::shape(
                format!("{} images of {}", self.len(), self.dims()),
                format!("{} images of {}", images.len(), images.dims()),
            ));
        }
        Ok(Dataset {
            images,
            scenes: self.scenes.clone(),
            scene_indices: self.scene_indices.clone(),
            labels: self.labels.clone(),
        })
    }

    pub fn batch(&self, task: &TaskSpec, indices: &[usize]) -> Result<Batch> {
        let labels = self
            .labels
            .get(task.id.0 as usize)
            .ok_or_else(|| Error::UnknownTask(task.id.to_string()))?;
        Ok(Batch {
            task: task.id,
            indices: indices.to_vec(),
            images: self.images.gather(indices),
            labels: labels.gather(indices, task.label_kind, self.dims()),
        })
    }

    pub fn full_batch(&self, task: &TaskSpec) -> Result<Batch> {
        let all: Vec<usize> = (0..self.len()).collect();
        self.batch(task, &all)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Dataset,
    pub test: Dataset,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub seed: u64,
    pub num_seen: usize,
    pub num_unseen: usize,
    pub dims: ImageDims,
    pub train_size: usize,
    pub test_size: usize,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            num_seen: 6,
            num_unseen: 2,
            dims: ImageDims::new(1, 16, 16),
            train_size: 512,
            test_size: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Suite {
    pub tasks: Vec<TaskSpec>,
    pub split: DatasetSplit,
}

impl Suite {
    pub fn dims(&self) -> ImageDims {
        self.split.train.dims()
    }

    pub fn task(&self, id: TaskId) -> Result<&TaskSpec> {
        self.tasks
            .get(id.0 as usize)
            .ok_or_else(|| Error::UnknownTask(id.to_string()))
    }

    pub fn task_by_name(&self, name: &str) -> Result<&TaskSpec> {
        self.tasks
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::UnknownTask(name.to_string()))
    }

    pub fn seen(&self) -> impl Iterator<Item = &TaskSpec> {
        self.tasks.iter().filter(|t| t.seen)
    }

    pub fn unseen(&self) -> impl Iterator<Item = &TaskSpec> {
        self.tasks.iter().filter(|t| !t.seen)
    }

    /// Same tasks, different data split (e.g. a perturbed training side).
    pub fn with_split(&self, split: DatasetSplit) -> Suite {
        Suite {
            tasks: self.tasks.clone(),
            split,
        }
    }
}

/// Builds the task table and renders the train/test split. Train scenes use
/// global indices `0..train_size`, test scenes the following `test_size`.
pub fn make_suite(cfg: &SuiteConfig) -> Result<Suite> {
    if cfg.num_seen < 2 {
        return Err(Error::BadConfig(format!(
            "at least two seen tasks are needed for a meta split, got {}",
            cfg.num_seen
        )));
    }
    if cfg.num_seen > Target::SEEN.len() {
        return Err(Error::BadConfig(format!(
            "at most {} seen tasks are available, asked for {}",
            Target::SEEN.len(),
            cfg.num_seen
        )));
    }
    if cfg.num_unseen < 1 || cfg.num_unseen > Target::UNSEEN.len() {
        return Err(Error::BadConfig(format!(
            "num_unseen must lie in 1..={}, got {}",
            Target::UNSEEN.len(),
            cfg.num_unseen
        )));
    }
    if cfg.dims.height < 8 || cfg.dims.width < 8 || !(1..=3).contains(&cfg.dims.channels) {
        return Err(Error::BadConfig(format!("unsupported image dims {}", cfg.dims)));
    }
    if cfg.train_size == 0 || cfg.test_size == 0 {
        return Err(Error::BadConfig("train and test sizes must be positive".into()));
    }
    let mut tasks = Vec::new();
    for (i, t) in Target::SEEN.iter().take(cfg.num_seen).enumerate() {
        tasks.push(TaskSpec::new(TaskId(i as u32), *t, true));
    }
    for (i, t) in Target::UNSEEN.iter().take(cfg.num_unseen).enumerate() {
        tasks.push(TaskSpec::new(TaskId((cfg.num_seen + i) as u32), *t, false));
    }
    let n_train = cfg.train_size as u64;
    let n_test = cfg.test_size as u64;
    let train = Dataset::render(&tasks, cfg.seed, 0..n_train, cfg.dims)?;
    let test = Dataset::render(&tasks, cfg.seed, n_train..n_train + n_test, cfg.dims)?;
    Ok(Suite {
        tasks,
        split: DatasetSplit {
            train,
            test,
            seed: cfg.seed,
        },
    })
}

/// Epoch-wise sampling without replacement. A fresh permutation is drawn
/// from the caller's rng whenever the previous one is exhausted.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchSampler {
    len: usize,
    order: Vec<usize>,
    pos: usize,
}

impl BatchSampler {
    pub fn new(len: usize) -> Self {
        Self {
            len,
            order: Vec::new(),
            pos: 0,
        }
    }

    /// Next `batch_size` indices; a batch never straddles two epochs, so the
    /// final batch of an epoch may be shorter.
    pub fn next_indices<R: Rng>(&mut self, batch_size: usize, rng: &mut R) -> Vec<usize> {
        if self.pos >= self.order.len() {
            self.order = (0..self.len).collect();
            self.order.shuffle(rng);
            self.pos = 0;
        }
        let end = (self.pos + batch_size).min(self.order.len());
        let out = self.order[self.pos..end].to_vec();
        self.pos = end;
        out
    }

    /// Index batches covering one full epoch.
    pub fn epoch<R: Rng>(len: usize, batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(rng);
        order.chunks(batch_size).map(|c| c.to_vec()).collect()
    }
}

/// Draws the next batch for `task` from `dataset`.
pub fn sample_batch<R: Rng>(
    suite: &Suite,
    dataset: &Dataset,
    task: TaskId,
    sampler: &mut BatchSampler,
    batch_size: usize,
    rng: &mut R,
) -> Result<Batch> {
    if batch_size == 0 {
        return Err(Error::BadConfig("batch_size must be at least 1".into()));
    }
    let spec = suite.task(task)?;
    let idx = sampler.next_indices(batch_size, rng);
    dataset.batch(spec, &idx)
}
