//! Three-step evaluation: transform the training images, train a fresh
//! target model per task on them, and score it on the untouched test set.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffcore::gradient;
use crate::flatness::{hessian_spectrum, left_mass, median_ritz, top_eigenvalue, SpectrumConfig, SpectrumEstimate};
use crate::error::{Error, Result};
use crate::metascheme::{NullSink, TrainConfig, TrainState, Trainer, Variant};
use crate::models::{GeneratorModel, ImageBatch, NoiseBudget, ProbeLoss, TargetLoss, TargetModel, TrunkSpec};
use crate::tasksuite::{
    make_suite, BatchSampler, Dataset, DatasetSplit, Direction, LabelBatch, LabelKind, MetricKind, Suite,
    SuiteConfig, TaskSpec,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    Raw,
    RandomNoise,
    Scheme(Variant),
}

impl Method {
    pub fn all() -> Vec<Method> {
        let mut out = vec![Method::Raw, Method::RandomNoise];
        out.extend(Variant::ALL.into_iter().map(Method::Scheme));
        out
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Raw => "raw",
            Method::RandomNoise => "random_noise",
            Method::Scheme(v) => v.name(),
        }
    }

    pub fn from_name(name: &str) -> Result<Method> {
        match name {
            "raw" => Ok(Method::Raw),
            "random_noise" => Ok(Method::RandomNoise),
            other => Variant::from_name(other)
                .map(Method::Scheme)
                .ok_or_else(|| Error::BadConfig(format!("unknown method `{other}`"))),
        }
    }
}

/// Perturbs every training image with `generator`; the test side is copied
/// unchanged.
pub fn transform_dataset(generator: &GeneratorModel, split: &DatasetSplit, budget: NoiseBudget) -> Result<DatasetSplit> {
    let images = generator.perturb(&split.train.images, budget)?;
    Ok(DatasetSplit {
        train: split.train.with_images(images)?,
        test: split.test.clone(),
        seed: split.seed,
    })
}

/// Adds independent uniform noise in `[-eps, eps]` to every training pixel,
/// then clamps into `[0, 1]`.
pub fn baseline_random_noise<R: Rng>(split: &DatasetSplit, budget: NoiseBudget, rng: &mut R) -> Result<DatasetSplit> {
    let eps = budget.epsilon();
    let data = split
        .train
        .images
        .data()
        .iter()
        .map(|x| (x + rng.gen_range(-eps..=eps)).clamp(0.0, 1.0))
        .collect();
    let images = ImageBatch::new(split.train.dims(), data)?;
    Ok(DatasetSplit {
        train: split.train.with_images(images)?,
        test: split.test.clone(),
        seed: split.seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetTraining {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub conv_channels: usize,
    pub width: usize,
}

impl Default for TargetTraining {
    fn default() -> Self {
        Self {
            epochs: 60,
            lr: 0.1,
            batch_size: 32,
            conv_channels: 6,
            width: 48,
        }
    }
}

impl TargetTraining {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Validation("target_lr must be non-negative".into()));
        }
        if self.batch_size == 0 || self.conv_channels == 0 || self.width == 0 {
            return Err(Error::Validation("target sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn trunk(&self) -> TrunkSpec {
        TrunkSpec {
            conv_channels: self.conv_channels,
            width: self.width,
        }
    }
}

/// Fresh target for `task`, trained by plain gradient descent on `train`.
pub fn train_target<R: Rng>(task: &TaskSpec, train: &Dataset, cfg: &TargetTraining, rng: &mut R) -> Result<TargetModel> {
    let mut target = TargetModel::new(train.dims(), task, cfg.trunk(), rng)?;
    for _ in 0..cfg.epochs {
        for idx in BatchSampler::epoch(train.len(), cfg.batch_size, rng) {
            let batch = train.batch(task, &idx)?;
            let (_, g) = gradient(&TargetLoss { target: &target }, target.params(), &batch)?;
            let next = target.params().stepped(&g, -cfg.lr)?;
            target = target.with_params(next)?;
        }
    }
    Ok(target)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of rows whose arg-max matches the label.
pub fn accuracy(outputs: &[f64], labels: &[usize], classes: usize) -> f64 {
    let hits = outputs
        .chunks_exact(classes)
        .zip(labels)
        .filter(|(row, y)| argmax(row) == **y)
        .count();
    hits as f64 / labels.len() as f64
}

/// Mean over classes of intersection over union, accumulated over all
/// pixels; classes absent from both prediction and label are skipped.
pub fn mean_iou(predicted: &[usize], labels: &[usize], classes: usize) -> f64 {
    let mut inter = vec![0usize; classes];
    let mut union = vec![0usize; classes];
    for (p, y) in predicted.iter().zip(labels) {
        if p == y {
            inter[*p] += 1;
            union[*p] += 1;
        } else {
            union[*p] += 1;
            union[*y] += 1;
        }
    }
    let (sum, n) = inter
        .iter()
        .zip(&union)
        .filter(|(_, u)| **u > 0)
        .fold((0.0, 0usize), |(s, n), (i, u)| (s + *i as f64 / *u as f64, n + 1));
    if n == 0 {
        1.0
    } else {
        sum / n as f64
    }
}

pub fn mae(pred: &[f64], target: &[f64]) -> f64 {
    pred.iter().zip(target).map(|(a, b)| (a - b).abs()).sum::<f64>() / pred.len() as f64
}

pub fn mse(pred: &[f64], target: &[f64]) -> f64 {
    pred.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / pred.len() as f64
}

/// Scores model outputs against labels with the task's metric.
pub fn score(task: &TaskSpec, outputs: &[f64], labels: &LabelBatch) -> Result<f64> {
    labels.expect_kind(task.label_kind)?;
    Ok(match (task.metric, task.label_kind, labels) {
        (MetricKind::Accuracy, LabelKind::ImageClass { classes }, LabelBatch::Class(y)) => accuracy(outputs, y, classes),
        (MetricKind::MeanIoU, LabelKind::PixelClass { classes }, LabelBatch::PixelClass(y)) => {
            let pred: Vec<usize> = outputs.chunks_exact(classes).map(argmax).collect();
            mean_iou(&pred, y, classes)
        }
        (MetricKind::Mae, _, LabelBatch::Regression(v) | LabelBatch::PixelRegression(v)) => mae(outputs, v),
        (MetricKind::Mse, _, LabelBatch::Regression(v) | LabelBatch::PixelRegression(v)) => mse(outputs, v),
        (m, k, _) => {
            return Err(Error::BadConfig(format!("metric {} does not apply to {} labels", m.name(), k.tag())));
        }
    })
}

/// Metric of `target` on the whole of `test`.
pub fn evaluate_target(target: &TargetModel, test: &Dataset) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::EmptyTestSet);
    }
    let batch = test.full_batch(target.task())?;
    let outputs = target.predict(&batch.images)?;
    score(target.task(), &outputs, &batch.labels)
}

/// Rng driving target initialization and batch order for one cell. It
/// depends on the seed and task only, so every method sees the same
/// target initialization.
pub fn target_rng(seed: u64, task: &TaskSpec) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7a5c_e11e_d00d_f00d);
    rng.set_stream(u64::from(task.id.0));
    rng
}

fn noise_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0b5e_55ed_0000_0001);
    rng.set_stream(1);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub suite: SuiteConfig,
    pub train: TrainConfig,
    pub target: TargetTraining,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    /// Restricts evaluation to these task names; all tasks when empty.
    pub tasks: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub task: String,
    pub seen: bool,
    pub method: String,
    pub metric: String,
    pub direction: Direction,
    pub seeds: Vec<u64>,
    pub values: Vec<f64>,
    pub median: f64,
    pub mean: f64,
    /// Sample standard deviation over seeds; absent for a single seed.
    pub dispersion: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ProtocolReport {
    pub rows: Vec<ReportRow>,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl ReportRow {
    fn new(task: &TaskSpec, method: Method, seeds: Vec<u64>, values: Vec<f64>) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let dispersion = (values.len() > 1)
            .then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
        Self {
            task: task.name.clone(),
            seen: task.seen,
            method: method.name().to_string(),
            metric: task.metric.name().to_string(),
            direction: task.metric.direction(),
            median: median(&values),
            mean,
            dispersion,
            seeds,
            values,
        }
    }
}

impl ProtocolReport {
    pub fn row(&self, task: &str, method: Method) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.task == task && r.method == method.name())
    }

    /// Tab-separated table with a header line.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("task\tseen\tmethod\tmetric\tdirection\tmedian\tmean\tdispersion\tseeds\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                r.task,
                if r.seen { "seen" } else { "unseen" },
                r.method,
                r.metric,
                r.direction.arrow(),
                r.median,
                r.mean,
                r.dispersion.map_or("-".to_string(), |d| d.to_string()),
                r.seeds.len()
            ));
        }
        out
    }

    /// One JSON object per row.
    pub fn to_jsonl(&self) -> String {
        self.rows
            .iter()
            .map(|r| serde_json::to_string(r).expect("rows serialize") + "\n")
            .collect()
    }

    /// Per-method `task<TAB>median<TAB>dispersion` tables keyed by method
    /// name, for bar charts.
    pub fn per_method(&self) -> BTreeMap<String, String> {
        let mut out: BTreeMap<String, String> = BTreeMap::new();
        for r in &self.rows {
            let e = out.entry(r.method.clone()).or_insert_with(|| "task\tmedian\tdispersion\n".into());
            e.push_str(&format!("{}\t{}\t{}\n", r.task, r.median, r.dispersion.unwrap_or(0.0)));
        }
        out
    }
}

/// A generator trained during the protocol, with its suite.
#[derive(Debug, Clone)]
pub struct TrainedGenerator {
    pub method: Method,
    pub seed: u64,
    pub state: TrainState,
}

#[derive(Debug, Clone)]
pub struct ProtocolOutcome {
    pub report: ProtocolReport,
    /// Suite of each seed, in seed order.
    pub suites: Vec<(u64, Suite)>,
    pub generators: Vec<TrainedGenerator>,
}

impl ProtocolOutcome {
    pub fn generator(&self, method: Method, seed: u64) -> Option<&TrainState> {
        self.generators
            .iter()
            .find(|g| g.method == method && g.seed == seed)
            .map(|g| &g.state)
    }

    pub fn suite(&self, seed: u64) -> Option<&Suite> {
        self.suites.iter().find(|(s, _)| *s == seed).map(|(_, s)| s)
    }
}

/// Trains the generator of `variant` on `suite`.
pub fn train_generator(suite: &Suite, cfg: &TrainConfig, variant: Variant, seed: u64) -> Result<TrainState> {
    let cfg = TrainConfig {
        variant,
        seed,
        ..cfg.clone()
    };
    let trainer = Trainer::new(suite, cfg)?;
    let state = trainer.init_state()?;
    trainer.run(state, &mut NullSink)
}

fn selected_tasks<'s>(suite: &'s Suite, names: &[String]) -> Result<Vec<&'s TaskSpec>> {
    if names.is_empty() {
        return Ok(suite.tasks.iter().collect());
    }
    names.iter().map(|n| suite.task_by_name(n)).collect()
}

/// Runs every (task, method, seed) cell and summarizes per (task, method).
pub fn run_protocol(cfg: &ProtocolConfig) -> Result<ProtocolOutcome> {
    if cfg.seeds.is_empty() {
        return Err(Error::BadConfig("at least one seed is required".into()));
    }
    if cfg.methods.is_empty() {
        return Err(Error::BadConfig("at least one method is required".into()));
    }
    cfg.target.validate()?;
    let suites: Vec<(u64, Suite)> = cfg
        .seeds
        .iter()
        .map(|&seed| Ok((seed, make_suite(&SuiteConfig { seed, ..cfg.suite.clone() })?)))
        .collect::<Result<_>>()?;

    let jobs: Vec<(usize, Method)> = (0..suites.len())
        .flat_map(|s| cfg.methods.iter().map(move |m| (s, *m)))
        .collect();
    let prepared: Vec<(DatasetSplit, Option<TrainedGenerator>)> = jobs
        .par_iter()
        .map(|&(s, method)| {
            let (seed, suite) = &suites[s];
            let budget = cfg.train.hyper.budget;
            match method {
                Method::Raw => Ok((suite.split.clone(), None)),
                Method::RandomNoise => Ok((baseline_random_noise(&suite.split, budget, &mut noise_rng(*seed))?, None)),
                Method::Scheme(v) => {
                    let state = train_generator(suite, &cfg.train, v, *seed)?;
                    let split = transform_dataset(&state.generator, &suite.split, budget)?;
                    Ok((
                        split,
                        Some(TrainedGenerator {
                            method,
                            seed: *seed,
                            state,
                        }),
                    ))
                }
            }
        })
        .collect::<Result<_>>()?;

    let task_names: Vec<String> = selected_tasks(&suites[0].1, &cfg.tasks)?
        .iter()
        .map(|t| t.name.clone())
        .collect();
    let cells: Vec<(usize, usize)> = (0..jobs.len())
        .flat_map(|j| (0..task_names.len()).map(move |t| (j, t)))
        .collect();
    let values: Vec<f64> = cells
        .par_iter()
        .map(|&(j, t)| {
            let (s, _) = jobs[j];
            let (seed, suite) = &suites[s];
            let task = suite.task_by_name(&task_names[t])?;
            let target = train_target(task, &prepared[j].0.train, &cfg.target, &mut target_rng(*seed, task))?;
            // always score on the suite's own clean test side
            evaluate_target(&target, &suite.split.test)
        })
        .collect::<Result<_>>()?;

    let mut rows = Vec::new();
    for name in &task_names {
        let task = suites[0].1.task_by_name(name)?;
        for &method in &cfg.methods {
            let mut vals = Vec::new();
            for (c, &(j, t)) in cells.iter().enumerate() {
                if task_names[t] == *name && jobs[j].1 == method {
                    vals.push(values[c]);
                }
            }
            rows.push(ReportRow::new(task, method, cfg.seeds.clone(), vals));
        }
    }
    let generators = prepared.into_iter().filter_map(|(_, g)| g).collect();
    Ok(ProtocolOutcome {
        report: ProtocolReport { rows },
        suites,
        generators,
    })
}


/// Hessian diagnostics of one task's loss as a function of the generator
/// parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlatnessProfile {
    pub task: String,
    pub seen: bool,
    pub top_eigenvalue: f64,
    pub spectrum: SpectrumEstimate,
}

/// Fixed per-task probe models for flatness measurement: targets trained on
/// clean data with the evaluation seeds. Every generator of a seed is
/// measured through the same probes.
pub fn probe_targets(suite: &Suite, cfg: &TargetTraining, seed: u64) -> Result<Vec<TargetModel>> {
    suite
        .tasks
        .par_iter()
        .map(|task| train_target(task, &suite.split.train, cfg, &mut target_rng(seed, task)))
        .collect()
}

fn spectrum_rng(seed: u64, task: &TaskSpec) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5bec_7a11_0000_0002);
    rng.set_stream(u64::from(task.id.0));
    rng
}

/// Top eigenvalue and SLQ spectrum for every probe's task. The generator is
/// only read; unseen tasks need no generator update.
pub fn generator_flatness(
    suite: &Suite,
    generator: &GeneratorModel,
    budget: NoiseBudget,
    probes: &[TargetModel],
    cfg: &SpectrumConfig,
    seed: u64,
) -> Result<Vec<FlatnessProfile>> {
    cfg.validate()?;
    let data = &suite.split.train;
    let idx: Vec<usize> = (0..cfg.batch.min(data.len())).collect();
    probes
        .par_iter()
        .map(|target| {
            let task = target.task();
            let batch = data.batch(task, &idx)?;
            let loss = ProbeLoss {
                generator,
                target,
                budget,
            };
            let mut rng = spectrum_rng(seed, task);
            let top = top_eigenvalue(&loss, generator.params(), &batch, cfg.power_iters, &mut rng)?;
            let spectrum = hessian_spectrum(&loss, generator.params(), &batch, cfg.lanczos_steps, cfg.probes, &mut rng)?;
            Ok(FlatnessProfile {
                task: task.name.clone(),
                seen: task.seen,
                top_eigenvalue: top,
                spectrum,
            })
        })
        .collect()
}

/// One generator's flatness on one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlatnessRecord {
    pub seed: u64,
    pub method: String,
    pub profile: FlatnessProfile,
}

/// Flatness profiles of every generator, measured through per-seed probe
/// targets. `generators` may hold several methods per seed.
pub fn flatness_study(
    suites: &[(u64, Suite)],
    generators: &[TrainedGenerator],
    target: &TargetTraining,
    spectrum: &SpectrumConfig,
    budget: NoiseBudget,
) -> Result<Vec<FlatnessRecord>> {
    let mut out = Vec::new();
    for (seed, suite) in suites {
        let probes = probe_targets(suite, target, *seed)?;
        for g in generators.iter().filter(|g| g.seed == *seed) {
            for profile in generator_flatness(suite, &g.state.generator, budget, &probes, spectrum, *seed)? {
                out.push(FlatnessRecord {
                    seed: *seed,
                    method: g.method.name().to_string(),
                    profile,
                });
            }
        }
    }
    Ok(out)
}

/// Flatness scalars of one (task, method, seed) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlatnessRow {
    pub task: String,
    pub seen: bool,
    pub method: String,
    pub seed: u64,
    pub top_eigenvalue: f64,
    /// Weighted median Ritz value of the baseline method's spectrum for the
    /// same task and seed.
    pub tau: f64,
    pub left_mass: f64,
}

/// Reduces records to scalars, with tau taken from `baseline`'s spectrum.
/// Cells whose baseline is missing use their own spectrum's median.
pub fn flatness_rows(records: &[FlatnessRecord], baseline: &str) -> Vec<FlatnessRow> {
    records
        .iter()
        .map(|r| {
            let base = records
                .iter()
                .find(|b| b.seed == r.seed && b.method == baseline && b.profile.task == r.profile.task)
                .unwrap_or(r);
            let tau = median_ritz(&base.profile.spectrum);
            FlatnessRow {
                task: r.profile.task.clone(),
                seen: r.profile.seen,
                method: r.method.clone(),
                seed: r.seed,
                top_eigenvalue: r.profile.top_eigenvalue,
                tau,
                left_mass: left_mass(&r.profile.spectrum, tau),
            }
        })
        .collect()
}

/// Tab-separated flatness table with a header line.
pub fn flatness_tsv(rows: &[FlatnessRow]) -> String {
    let mut out = String::from("task\tseen\tmethod\tseed\ttop_eigenvalue\ttau\tleft_mass\n");
    for r in rows {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            r.task,
            if r.seen { "seen" } else { "unseen" },
            r.method,
            r.seed,
            r.top_eigenvalue,
            r.tau,
            r.left_mass
        ));
    }
    out
}
