//! The alternating generator/surrogate loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    actual_update, flatness_ascent, flatness_feedback, flatness_gap, fresh_gap_gradient, meta_test_feedback,
    meta_train_step, split_tasks, FlatnessCache, GapMode, GapOutcome, HistoryMode, Hyperparams, MetaSplit,
    MetaTestMode, Variant,
};
use crate::diffcore::{gradient, value, GradVector};
use crate::error::{Error, Result};
use crate::models::{GeneratorLoss, GeneratorModel, Sharing, SurrogateLoss, SurrogatePool, TrunkSpec};
use crate::tasksuite::{BatchSampler, Suite, TaskId, TaskSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub hyper: Hyperparams,
    pub variant: Variant,
    pub gap_mode: GapMode,
    pub history: HistoryMode,
    /// Number of (generator epochs, surrogate epochs) cycles.
    pub cycles: usize,
    pub batch_size: usize,
    pub gen_hidden: usize,
    pub surr_conv_channels: usize,
    pub surr_width: usize,
    pub sharing: Sharing,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hyper: Hyperparams::default(),
            variant: Variant::Full,
            gap_mode: GapMode::FirstOrder,
            history: HistoryMode::Cached,
            cycles: 4,
            batch_size: 32,
            gen_hidden: 32,
            surr_conv_channels: 4,
            surr_width: 32,
            sharing: Sharing::SharedTrunk,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Validation("batch_size must be at least 1".into()));
        }
        if self.gen_hidden == 0 || self.surr_conv_channels == 0 || self.surr_width == 0 {
            return Err(Error::Validation("model widths must be positive".into()));
        }
        Ok(())
    }

    pub fn trunk(&self) -> TrunkSpec {
        TrunkSpec {
            conv_channels: self.surr_conv_channels,
            width: self.surr_width,
        }
    }
}

/// One record per generator iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub iteration: u64,
    pub cycle: u64,
    pub m_tr: u32,
    pub m_te: u32,
    pub loss_mtr: f64,
    pub loss_mte: f64,
    pub loss_gap: f64,
    pub norm_grad_mtr: f64,
    pub norm_meta_test: f64,
    pub norm_meta_flat: f64,
}

impl StepTrace {
    pub fn is_finite(&self) -> bool {
        [
            self.loss_mtr,
            self.loss_mte,
            self.loss_gap,
            self.norm_grad_mtr,
            self.norm_meta_test,
            self.norm_meta_flat,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

pub trait TraceSink {
    fn record(&mut self, trace: &StepTrace) -> Result<()>;
}

impl TraceSink for Vec<StepTrace> {
    fn record(&mut self, trace: &StepTrace) -> Result<()> {
        self.push(trace.clone());
        Ok(())
    }
}

/// Discards every record.
pub struct NullSink;

impl TraceSink for NullSink {
    fn record(&mut self, _: &StepTrace) -> Result<()> {
        Ok(())
    }
}

/// Everything that evolves during training. Snapshots taken between cycles
/// resume bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub generator: GeneratorModel,
    pub pool: SurrogatePool,
    pub cache: FlatnessCache,
    pub rng: ChaCha8Rng,
    pub cycle: u64,
    pub iteration: u64,
}

/// Everything one generator iteration produced.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationOutcome {
    pub trace: StepTrace,
    pub grad_mtr: GradVector,
    pub meta_test: GradVector,
    pub meta_flat: GradVector,
    /// Current-task flatness signal, absent when the flatness branch is off.
    pub gap_grad: Option<GradVector>,
}

pub struct Trainer<'a> {
    suite: &'a Suite,
    cfg: TrainConfig,
    seen: Vec<TaskId>,
}

impl<'a> Trainer<'a> {
    pub fn new(suite: &'a Suite, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let seen: Vec<TaskId> = suite.seen().map(|t| t.id).collect();
        if seen.len() < 2 {
            return Err(Error::BadConfig("training needs at least two seen tasks".into()));
        }
        Ok(Self { suite, cfg, seen })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn suite(&self) -> &Suite {
        self.suite
    }

    pub fn seen(&self) -> &[TaskId] {
        &self.seen
    }

    pub fn init_state(&self) -> Result<TrainState> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        let dims = self.suite.dims();
        let generator = GeneratorModel::new(dims, self.cfg.gen_hidden, &mut rng)?;
        let seen: Vec<TaskSpec> = self.suite.seen().cloned().collect();
        let pool = SurrogatePool::new(dims, &seen, self.cfg.trunk(), self.cfg.sharing, &mut rng)?;
        Ok(TrainState {
            generator,
            pool,
            cache: FlatnessCache::default(),
            rng,
            cycle: 0,
            iteration: 0,
        })
    }

    /// Runs cycles until the configured budget is reached.
    pub fn run(&self, mut state: TrainState, sink: &mut dyn TraceSink) -> Result<TrainState> {
        while (state.cycle as usize) < self.cfg.cycles {
            self.run_cycle(&mut state, sink)?;
        }
        Ok(state)
    }

    pub fn run_cycle(&self, state: &mut TrainState, sink: &mut dyn TraceSink) -> Result<()> {
        for _ in 0..self.cfg.hyper.gen_epochs_per_cycle {
            self.generator_epoch(state, sink)?;
        }
        for _ in 0..self.cfg.hyper.surr_epochs_per_cycle {
            self.surrogate_epoch(state)?;
        }
        state.cycle += 1;
        Ok(())
    }

    pub fn generator_epoch(&self, state: &mut TrainState, sink: &mut dyn TraceSink) -> Result<()> {
        let split = split_tasks(&self.seen, &mut state.rng)?;
        let n = self.suite.split.train.len();
        for idx in BatchSampler::epoch(n, self.cfg.batch_size, &mut state.rng) {
            let out = self.generator_iteration(state, &split, &idx)?;
            sink.record(&out.trace)?;
        }
        Ok(())
    }

    fn generator_loss<'s>(&self, state: &'s TrainState, task: TaskId) -> GeneratorLoss<'s> {
        GeneratorLoss {
            generator: &state.generator,
            pool: &state.pool,
            task,
            budget: self.cfg.hyper.budget,
        }
    }

    /// One meta training/testing iteration on the training images at
    /// `indices`; the tasks for both sides are drawn from `split`.
    pub fn generator_iteration(
        &self,
        state: &mut TrainState,
        split: &MetaSplit,
        indices: &[usize],
    ) -> Result<IterationOutcome> {
        let h = &self.cfg.hyper;
        let m_tr = *split
            .meta_train
            .choose(&mut state.rng)
            .ok_or_else(|| Error::SplitViolation("empty meta-training side".into()))?;
        let m_te = *split
            .meta_test
            .choose(&mut state.rng)
            .ok_or_else(|| Error::SplitViolation("empty meta-testing side".into()))?;
        split.check(m_tr, m_te)?;
        let data = &self.suite.split.train;
        let batch_tr = data.batch(self.suite.task(m_tr)?, indices)?;
        let batch_te = data.batch(self.suite.task(m_te)?, indices)?;
        let theta = state.generator.params().clone();
        let loss_tr = self.generator_loss(state, m_tr);
        let loss_te = self.generator_loss(state, m_te);

        let mt = meta_train_step(&loss_tr, &theta, &batch_tr, h.alpha)?;

        let test_branch = || -> Result<(f64, GradVector)> {
            match self.cfg.variant.meta_test() {
                MetaTestMode::Off => Ok((value(&loss_te, &mt.gen_desc, &batch_te)?, GradVector::zeros_like(&theta))),
                MetaTestMode::FirstOrder => gradient(&loss_te, &theta, &batch_te),
                MetaTestMode::SecondOrder => meta_test_feedback(
                    &loss_tr,
                    &batch_tr,
                    &loss_te,
                    &batch_te,
                    &theta,
                    &mt.gen_desc,
                    h.alpha,
                    h.hvp_step,
                ),
            }
        };
        let flat_branch = || -> Result<Option<GapOutcome>> {
            if !self.cfg.variant.meta_flat() {
                return Ok(None);
            }
            let asc = flatness_ascent(&theta, &mt.grad, h.eta)?;
            flatness_gap(
                &loss_tr,
                &theta,
                &asc,
                &batch_tr,
                (mt.loss, &mt.grad),
                self.cfg.gap_mode,
                h.eta,
                h.hvp_step,
            )
            .map(Some)
        };
        let (test_out, flat_out) = rayon::join(test_branch, flat_branch);
        let (loss_mte, g_mt) = test_out?;
        let gap = flat_out?;

        let lambda = self.cfg.variant.history_weight(h.lambda);
        let g_mf = match &gap {
            None => GradVector::zeros_like(&theta),
            Some(gap) => match self.cfg.history {
                HistoryMode::Cached => flatness_feedback(&gap.grad, &mut state.cache, m_tr, &self.seen, lambda)?,
                HistoryMode::Recompute => {
                    let mut out = gap.grad.clone();
                    if lambda != 0.0 {
                        for t in state.cache.tasks().into_iter().filter(|t| *t != m_tr) {
                            let batch_t = data.batch(self.suite.task(t)?, indices)?;
                            let fresh = fresh_gap_gradient(
                                &self.generator_loss(state, t),
                                &theta,
                                &batch_t,
                                self.cfg.gap_mode,
                                h.eta,
                                h.hvp_step,
                            )?;
                            out.axpy(lambda, &fresh.grad)?;
                        }
                    }
                    state.cache.update(m_tr, &gap.grad)?;
                    out
                }
            },
        };

        let updated = actual_update(&theta, &mt.grad, &g_mt, &g_mf, h.beta)?;
        state.generator = state.generator.with_params(updated)?;
        let trace = StepTrace {
            iteration: state.iteration,
            cycle: state.cycle,
            m_tr: m_tr.0,
            m_te: m_te.0,
            loss_mtr: mt.loss,
            loss_mte,
            loss_gap: gap.as_ref().map_or(0.0, |g| g.gap),
            norm_grad_mtr: mt.grad.norm(),
            norm_meta_test: g_mt.norm(),
            norm_meta_flat: g_mf.norm(),
        };
        state.iteration += 1;
        Ok(IterationOutcome {
            trace,
            grad_mtr: mt.grad,
            meta_test: g_mt,
            meta_flat: g_mf,
            gap_grad: gap.map(|g| g.grad),
        })
    }

    /// One pass over the training set for every surrogate, on images
    /// perturbed by the frozen generator. The (surrogate, batch) steps are
    /// visited in random order, so each iteration updates one randomly
    /// chosen surrogate. Clears the flatness history afterwards.
    pub fn surrogate_epoch(&self, state: &mut TrainState) -> Result<()> {
        let train = &self.suite.split.train;
        let perturbed = state.generator.perturb(&train.images, self.cfg.hyper.budget)?;
        let data = train.with_images(perturbed)?;
        let mut schedule = Vec::new();
        for &t in &self.seen {
            for idx in BatchSampler::epoch(data.len(), self.cfg.batch_size, &mut state.rng) {
                schedule.push((t, idx));
            }
        }
        schedule.shuffle(&mut state.rng);
        for (t, idx) in schedule {
            let batch = data.batch(self.suite.task(t)?, &idx)?;
            let loss = SurrogateLoss {
                pool: &state.pool,
                task: t,
            };
            let (_, g) = gradient(&loss, state.pool.params(), &batch)?;
            let next = state.pool.params().stepped(&g, -self.cfg.hyper.surr_lr)?;
            state.pool = state.pool.with_params(next)?;
        }
        state.cache.reset();
        Ok(())
    }
}
