//! Generator, surrogate pool and target models, and the losses that tie
//! them to the task suite.

mod generator;
mod image;
mod net;

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use generator::{apply_perturbation, record_perturbed, GeneratorModel, GEN_PREFIX};
pub use image::{ImageBatch, ImageDims, ImageTensor, NoiseBudget, RawNoiseField};
pub use net::{Activation, LayerSpec, Net, ParamSource};

use crate::diffcore::{ConvGeom, Layout, LossFn, ParamVector, Tape, Var};
use crate::error::{Error, Result};
use crate::tasksuite::{Batch, LabelBatch, LabelKind, LossKind, TaskId, TaskSpec};

/// Trunk shape: a stride-2 4x4 convolution (relu) followed by a dense
/// layer (tanh).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrunkSpec {
    pub conv_channels: usize,
    pub width: usize,
}

impl TrunkSpec {
    fn net(&self, prefix: String, dims: ImageDims) -> Result<Net> {
        if self.conv_channels == 0 || self.width == 0 {
            return Err(Error::BadConfig("trunk widths must be positive".into()));
        }
        let geom = ConvGeom {
            in_channels: dims.channels,
            height: dims.height,
            width: dims.width,
            out_channels: self.conv_channels,
            kernel: 4,
            stride: 2,
        };
        if dims.height < geom.kernel || dims.width < geom.kernel {
            return Err(Error::BadConfig(format!("images {dims} too small for the trunk")));
        }
        Net::new(
            prefix,
            vec![
                LayerSpec::Conv {
                    geom,
                    act: Activation::Relu,
                },
                LayerSpec::Dense {
                    inputs: geom.out_len(),
                    outputs: self.width,
                    act: Activation::Tanh,
                },
            ],
        )
    }
}

fn head_net(prefix: String, inputs: usize, task: &TaskSpec, dims: ImageDims) -> Result<Net> {
    Net::new(
        prefix,
        vec![LayerSpec::Dense {
            inputs,
            outputs: task.label_kind.output_len(dims),
            act: Activation::Identity,
        }],
    )
}

/// A trunk plus a task-specific linear head.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskNet {
    pub trunk: Net,
    pub head: Net,
}

impl TaskNet {
    pub fn record(&self, tape: &mut Tape, src: ParamSource<'_>, x: Var) -> Result<Var> {
        let h = self.trunk.record(tape, src, x)?;
        self.head.record(tape, src, h)
    }
}

fn one_hot(labels: &[usize], classes: usize) -> Vec<f64> {
    let mut out = vec![0.0; labels.len() * classes];
    for (i, &y) in labels.iter().enumerate() {
        out[i * classes + y] = 1.0;
    }
    out
}

fn class_loss(tape: &mut Tape, logits: Var, labels: &[usize], classes: usize, loss: LossKind) -> Result<Var> {
    let (rows, cols) = tape.shape(logits);
    if labels.len() != rows || cols != classes {
        return Err(Error::shape(
            format!("{rows} labels over {cols} classes"),
            format!("{} labels over {classes} classes", labels.len()),
        ));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::shape(format!("class index < {classes}"), y));
    }
    Ok(match loss {
        LossKind::CrossEntropy => tape.cross_entropy(logits, labels),
        LossKind::Brier => {
            let p = tape.softmax_rows(logits);
            let se = tape.squared_error(p, &one_hot(labels, classes));
            tape.scale(se, classes as f64)
        }
        LossKind::SquaredError => {
            let se = tape.squared_error(logits, &one_hot(labels, classes));
            tape.scale(se, classes as f64)
        }
    })
}

/// Records the task loss of model outputs `out` (`batch x output_len`).
pub fn record_task_loss(
    tape: &mut Tape,
    out: Var,
    task: &TaskSpec,
    labels: &LabelBatch,
    dims: ImageDims,
) -> Result<Var> {
    labels.expect_kind(task.label_kind)?;
    let (rows, cols) = tape.shape(out);
    if cols != task.label_kind.output_len(dims) {
        return Err(Error::shape(task.label_kind.output_len(dims), cols));
    }
    match (task.label_kind, labels) {
        (LabelKind::ImageClass { classes }, LabelBatch::Class(y)) => class_loss(tape, out, y, classes, task.loss),
        (LabelKind::PixelClass { classes }, LabelBatch::PixelClass(y)) => {
            let per_pixel = tape.reshape(out, rows * dims.spatial(), classes);
            class_loss(tape, per_pixel, y, classes, task.loss)
        }
        (_, LabelBatch::Regression(v) | LabelBatch::PixelRegression(v)) => {
            if task.loss != LossKind::SquaredError {
                return Err(Error::BadConfig(format!("{} loss on regression labels", task.loss.tag())));
            }
            if v.len() != rows * cols {
                return Err(Error::shape(rows * cols, v.len()));
            }
            Ok(tape.squared_error(out, v))
        }
        _ => unreachable!("label kind checked above"),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Sharing {
    /// One trunk for all tasks, one head per task.
    #[default]
    SharedTrunk,
    /// A trunk and head per task.
    Separate,
}

/// Surrogate for one seen task: the task it serves and its network.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateModel {
    pub task: TaskSpec,
    pub net: TaskNet,
}

/// The surrogates of all seen tasks over a single parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogatePool {
    dims: ImageDims,
    sharing: Sharing,
    models: Vec<SurrogateModel>,
    params: ParamVector,
}

pub const SURR_PREFIX: &str = "surr.";

impl SurrogatePool {
    pub fn new<R: Rng>(
        dims: ImageDims,
        tasks: &[TaskSpec],
        trunk: TrunkSpec,
        sharing: Sharing,
        rng: &mut R,
    ) -> Result<Self> {
        if tasks.is_empty() {
            return Err(Error::BadConfig("surrogate pool needs at least one task".into()));
        }
        let shared = trunk.net(format!("{SURR_PREFIX}trunk."), dims)?;
        let mut models = Vec::with_capacity(tasks.len());
        for t in tasks {
            let trunk_net = match sharing {
                Sharing::SharedTrunk => shared.clone(),
                Sharing::Separate => trunk.net(format!("{SURR_PREFIX}{}.trunk.", t.name), dims)?,
            };
            let head = head_net(format!("{SURR_PREFIX}{}.head.", t.name), trunk.width, t, dims)?;
            models.push(SurrogateModel {
                task: t.clone(),
                net: TaskNet { trunk: trunk_net, head },
            });
        }
        let mut b = Layout::builder();
        let mut nets: Vec<&Net> = Vec::new();
        if sharing == Sharing::SharedTrunk {
            nets.push(&shared);
        }
        for m in &models {
            if sharing == Sharing::Separate {
                nets.push(&m.net.trunk);
            }
            nets.push(&m.net.head);
        }
        for n in &nets {
            n.add_segments(&mut b);
        }
        let layout = b.build();
        let mut values = vec![0.0; layout.len()];
        for n in &nets {
            n.init(&layout, &mut values, rng)?;
        }
        Ok(Self {
            dims,
            sharing,
            models,
            params: ParamVector::new(values, layout)?,
        })
    }

    pub fn dims(&self) -> ImageDims {
        self.dims
    }

    pub fn sharing(&self) -> Sharing {
        self.sharing
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn layout(&self) -> &Arc<Layout> {
        self.params.layout()
    }

    pub fn models(&self) -> &[SurrogateModel] {
        &self.models
    }

    pub fn task_ids(&self) -> Vec<TaskId> {
        self.models.iter().map(|m| m.task.id).collect()
    }

    pub fn model(&self, task: TaskId) -> Result<&SurrogateModel> {
        self.models
            .iter()
            .find(|m| m.task.id == task)
            .ok_or_else(|| Error::UnknownTask(task.to_string()))
    }

    pub fn with_params(&self, params: ParamVector) -> Result<Self> {
        if **params.layout() != **self.layout() {
            return Err(Error::LayoutMismatch("surrogate parameters".into()));
        }
        Ok(Self {
            params,
            ..self.clone()
        })
    }
}

fn batch_images(tape: &mut Tape, batch: &Batch, dims: ImageDims) -> Result<Var> {
    if batch.images.dims() != dims {
        return Err(Error::shape(dims, batch.images.dims()));
    }
    if batch.is_empty() {
        return Err(Error::shape("nonempty batch", "0 images"));
    }
    Ok(tape.constant(batch.images.data().to_vec(), batch.len(), dims.len()))
}

fn check_task(batch: &Batch, task: TaskId) -> Result<()> {
    if batch.task == task {
        Ok(())
    } else {
        Err(Error::UnknownTask(format!("batch for {} used with {task}", batch.task)))
    }
}

/// Surrogate loss on the perturbed images of `batch`, as a function of the
/// generator parameters; surrogate parameters are held constant.
pub struct GeneratorLoss<'a> {
    pub generator: &'a GeneratorModel,
    pub pool: &'a SurrogatePool,
    pub task: TaskId,
    pub budget: NoiseBudget,
}

impl LossFn for GeneratorLoss<'_> {
    type Batch = Batch;

    fn descriptor(&self) -> String {
        format!("generator-loss[{}]", self.task)
    }

    fn record(&self, tape: &mut Tape, params: Var, layout: &Layout, batch: &Batch) -> Result<Var> {
        check_task(batch, self.task)?;
        let surr = self.pool.model(self.task)?;
        let x = batch_images(tape, batch, self.generator.dims())?;
        let gen_src = ParamSource { var: params, layout };
        let field = self.generator.net().record(tape, gen_src, x)?;
        let xu = record_perturbed(tape, field, x, self.budget);
        let sp = self.pool.params();
        let sv = tape.constant(sp.values().to_vec(), 1, sp.len());
        let out = surr.net.record(
            tape,
            ParamSource {
                var: sv,
                layout: sp.layout(),
            },
            xu,
        )?;
        record_task_loss(tape, out, &surr.task, &batch.labels, self.pool.dims())
    }
}

/// Surrogate loss on already perturbed images, as a function of the pool
/// parameters.
pub struct SurrogateLoss<'a> {
    pub pool: &'a SurrogatePool,
    pub task: TaskId,
}

impl LossFn for SurrogateLoss<'_> {
    type Batch = Batch;

    fn descriptor(&self) -> String {
        format!("surrogate-loss[{}]", self.task)
    }

    fn record(&self, tape: &mut Tape, params: Var, layout: &Layout, batch: &Batch) -> Result<Var> {
        check_task(batch, self.task)?;
        let surr = self.pool.model(self.task)?;
        let x = batch_images(tape, batch, self.pool.dims())?;
        let out = surr.net.record(tape, ParamSource { var: params, layout }, x)?;
        record_task_loss(tape, out, &surr.task, &batch.labels, self.pool.dims())
    }
}

/// Surrogate loss through the perturbation as a function of generator and
/// pool parameters together (the vector from [`joint_params`]).
pub struct JointLoss<'a> {
    pub generator: &'a GeneratorModel,
    pub pool: &'a SurrogatePool,
    pub task: TaskId,
    pub budget: NoiseBudget,
}

/// Generator and pool parameters in one vector. Segment names are already
/// distinct, so no extra prefixes are added.
pub fn joint_params(generator: &GeneratorModel, pool: &SurrogatePool) -> Result<ParamVector> {
    ParamVector::concat(&[("", generator.params()), ("", pool.params())])
}

impl LossFn for JointLoss<'_> {
    type Batch = Batch;

    fn descriptor(&self) -> String {
        format!("joint-loss[{}]", self.task)
    }

    fn record(&self, tape: &mut Tape, params: Var, layout: &Layout, batch: &Batch) -> Result<Var> {
        check_task(batch, self.task)?;
        let surr = self.pool.model(self.task)?;
        let src = ParamSource { var: params, layout };
        let x = batch_images(tape, batch, self.generator.dims())?;
        let field = self.generator.net().record(tape, src, x)?;
        let xu = record_perturbed(tape, field, x, self.budget);
        let out = surr.net.record(tape, src, xu)?;
        record_task_loss(tape, out, &surr.task, &batch.labels, self.pool.dims())
    }
}

pub const TARGET_PREFIX: &str = "target.";

/// Evaluation-time model for a single task, freshly initialized and sharing
/// nothing with the surrogates.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetModel {
    dims: ImageDims,
    task: TaskSpec,
    net: TaskNet,
    params: ParamVector,
}

impl TargetModel {
    pub fn new<R: Rng>(dims: ImageDims, task: &TaskSpec, trunk: TrunkSpec, rng: &mut R) -> Result<Self> {
        let trunk_net = trunk.net(format!("{TARGET_PREFIX}trunk."), dims)?;
        let head = head_net(format!("{TARGET_PREFIX}head."), trunk.width, task, dims)?;
        let mut b = Layout::builder();
        trunk_net.add_segments(&mut b);
        head.add_segments(&mut b);
        let layout = b.build();
        let mut values = vec![0.0; layout.len()];
        trunk_net.init(&layout, &mut values, rng)?;
        head.init(&layout, &mut values, rng)?;
        Ok(Self {
            dims,
            task: task.clone(),
            net: TaskNet { trunk: trunk_net, head },
            params: ParamVector::new(values, layout)?,
        })
    }

    pub fn task(&self) -> &TaskSpec {
        &self.task
    }

    pub fn dims(&self) -> ImageDims {
        self.dims
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn with_params(&self, params: ParamVector) -> Result<Self> {
        if **params.layout() != **self.params.layout() {
            return Err(Error::LayoutMismatch("target parameters".into()));
        }
        Ok(Self {
            params,
            ..self.clone()
        })
    }

    /// Raw outputs, `images.len() x output_len` row-major.
    pub fn predict(&self, images: &ImageBatch) -> Result<Vec<f64>> {
        if images.dims() != self.dims {
            return Err(Error::shape(self.dims, images.dims()));
        }
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let p = tape.constant(self.params.values().to_vec(), 1, self.params.len());
        let x = tape.constant(images.data().to_vec(), images.len(), self.dims.len());
        let out = self.net.record(
            &mut tape,
            ParamSource {
                var: p,
                layout: self.params.layout(),
            },
            x,
        )?;
        Ok(tape.value(out).to_vec())
    }
}

/// Task loss of a target model as a function of its parameters.
pub struct TargetLoss<'a> {
    pub target: &'a TargetModel,
}

impl LossFn for TargetLoss<'_> {
    type Batch = Batch;

    fn descriptor(&self) -> String {
        format!("target-loss[{}]", self.target.task.name)
    }

    fn record(&self, tape: &mut Tape, params: Var, layout: &Layout, batch: &Batch) -> Result<Var> {
        check_task(batch, self.target.task.id)?;
        let x = batch_images(tape, batch, self.target.dims)?;
        let out = self.target.net.record(tape, ParamSource { var: params, layout }, x)?;
        record_task_loss(tape, out, &self.target.task, &batch.labels, self.target.dims)
    }
}

/// Task loss of a fixed target model on perturbed images, as a function of
/// the generator parameters. Lets flatness be measured on tasks without a
/// surrogate.
pub struct ProbeLoss<'a> {
    pub generator: &'a GeneratorModel,
    pub target: &'a TargetModel,
    pub budget: NoiseBudget,
}

impl LossFn for ProbeLoss<'_> {
    type Batch = Batch;

    fn descriptor(&self) -> String {
        format!("probe-loss[{}]", self.target.task.name)
    }

    fn record(&self, tape: &mut Tape, params: Var, layout: &Layout, batch: &Batch) -> Result<Var> {
        check_task(batch, self.target.task.id)?;
        let x = batch_images(tape, batch, self.generator.dims())?;
        let field = self.generator.net().record(tape, ParamSource { var: params, layout }, x)?;
        let xu = record_perturbed(tape, field, x, self.budget);
        let tp = &self.target.params;
        let tv = tape.constant(tp.values().to_vec(), 1, tp.len());
        let out = self.target.net.record(
            tape,
            ParamSource {
                var: tv,
                layout: tp.layout(),
            },
            xu,
        )?;
        record_task_loss(tape, out, &self.target.task, &batch.labels, self.target.dims)
    }
}
