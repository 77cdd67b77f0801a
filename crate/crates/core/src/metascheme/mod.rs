//! Flat-minima-oriented meta training and testing of the generator:
//! simulated descent on a meta-training task, second-order feedback from a
//! meta-testing task, an ascent-step flatness gap with per-task history,
//! and the combined actual update. The alternating loop lives in [`train`].

mod cache;
pub mod train;

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use cache::FlatnessCache;
pub use train::{IterationOutcome, NullSink, StepTrace, TraceSink, TrainConfig, TrainState, Trainer};

use crate::diffcore::{gradient, hvp, GradVector, LossFn, ParamVector, DEFAULT_HVP_STEP};
use crate::error::{Error, Result};
use crate::models::NoiseBudget;
use crate::tasksuite::TaskId;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    /// Simulated (meta-training) step size.
    pub alpha: f64,
    /// Actual-update step size.
    pub beta: f64,
    /// Ascent step size of the flatness probe.
    pub eta: f64,
    /// Weight of the historical flatness signals of the other tasks.
    pub lambda: f64,
    pub budget: NoiseBudget,
    pub gen_epochs_per_cycle: usize,
    pub surr_epochs_per_cycle: usize,
    pub surr_lr: f64,
    /// Relative finite-difference step of Hessian-vector products.
    pub hvp_step: f64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            alpha: 1e-4,
            beta: 2e-5,
            eta: 5e-4,
            lambda: 0.2,
            budget: NoiseBudget::default(),
            gen_epochs_per_cycle: 3,
            surr_epochs_per_cycle: 1,
            surr_lr: 1e-3,
            hvp_step: DEFAULT_HVP_STEP,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("eta", self.eta),
            ("surr_lr", self.surr_lr),
            ("hvp_step", self.hvp_step),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Validation(format!("{name} must be positive")));
            }
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::Validation("lambda must be non-negative".into()));
        }
        if self.gen_epochs_per_cycle == 0 {
            return Err(Error::Validation("gen_epochs_per_cycle must be at least 1".into()));
        }
        NoiseBudget::new(self.budget.epsilon())?;
        Ok(())
    }
}

/// How the meta-testing feedback is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MetaTestMode {
    Off,
    /// Gradient of the meta-test loss at the current generator.
    FirstOrder,
    /// Gradient through the simulated descent step.
    SecondOrder,
}

/// Differentiation of the flatness gap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum GapMode {
    /// Ascent direction held constant.
    #[default]
    FirstOrder,
    /// Also differentiates through the ascent direction (one extra HVP).
    Exact,
}

/// Source of the other tasks' flatness signals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum HistoryMode {
    /// Running means of past signals.
    #[default]
    Cached,
    /// Fresh gap gradients, recomputed each iteration for every other task
    /// visited since the last reset.
    Recompute,
}

/// The training variants compared in the ablations. Each differs from
/// `Full` by one switch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    Full,
    WithoutMetaTest,
    WithoutMetaFlat,
    WithoutHistory,
    WithoutSecondOrder,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::WithoutMetaTest,
        Variant::WithoutMetaFlat,
        Variant::WithoutHistory,
        Variant::WithoutSecondOrder,
    ];

    pub fn meta_test(self) -> MetaTestMode {
        match self {
            Variant::WithoutMetaTest => MetaTestMode::Off,
            Variant::WithoutSecondOrder => MetaTestMode::FirstOrder,
            _ => MetaTestMode::SecondOrder,
        }
    }

    pub fn meta_flat(self) -> bool {
        self != Variant::WithoutMetaFlat
    }

    /// Weight applied to the historical signals.
    pub fn history_weight(self, lambda: f64) -> f64 {
        if self == Variant::WithoutHistory {
            0.0
        } else {
            lambda
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "mctueg",
            Variant::WithoutMetaTest => "mctueg_wo_meta_test",
            Variant::WithoutMetaFlat => "mctueg_wo_meta_flat",
            Variant::WithoutHistory => "mctueg_wo_history",
            Variant::WithoutSecondOrder => "mctueg_wo_second_order",
        }
    }

    pub fn from_name(name: &str) -> Option<Variant> {
        Self::ALL.into_iter().find(|v| v.name() == name)
    }
}

/// Disjoint partition of the seen tasks for one generator epoch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetaSplit {
    pub meta_train: Vec<TaskId>,
    pub meta_test: Vec<TaskId>,
}

impl MetaSplit {
    pub fn check(&self, m_tr: TaskId, m_te: TaskId) -> Result<()> {
        if m_tr == m_te {
            return Err(Error::SplitViolation(format!("{m_tr} used on both sides")));
        }
        if !self.meta_train.contains(&m_tr) {
            return Err(Error::SplitViolation(format!("{m_tr} is not a meta-training task")));
        }
        if !self.meta_test.contains(&m_te) {
            return Err(Error::SplitViolation(format!("{m_te} is not a meta-testing task")));
        }
        Ok(())
    }
}

/// Uniformly random split into two halves; with an odd count the extra
/// task goes to the meta-training side. Each side is sorted.
pub fn split_tasks<R: Rng>(seen: &[TaskId], rng: &mut R) -> Result<MetaSplit> {
    let distinct: BTreeSet<_> = seen.iter().collect();
    if distinct.len() != seen.len() {
        return Err(Error::BadConfig("duplicate seen task ids".into()));
    }
    if seen.len() < 2 {
        return Err(Error::BadConfig(format!(
            "a meta split needs at least two seen tasks, got {}",
            seen.len()
        )));
    }
    let mut order = seen.to_vec();
    order.shuffle(rng);
    let n_tr = seen.len().div_ceil(2);
    let mut meta_train = order[..n_tr].to_vec();
    let mut meta_test = order[n_tr..].to_vec();
    meta_train.sort();
    meta_test.sort();
    Ok(MetaSplit { meta_train, meta_test })
}

/// Result of the simulated descent step.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaTrainOutcome {
    pub loss: f64,
    pub grad: GradVector,
    /// `params - alpha * grad`; the input parameters are left untouched.
    pub gen_desc: ParamVector,
}

pub fn meta_train_step<L: LossFn + ?Sized>(
    loss: &L,
    params: &ParamVector,
    batch: &L::Batch,
    alpha: f64,
) -> Result<MetaTrainOutcome> {
    let (value, grad) = gradient(loss, params, batch)?;
    let gen_desc = params.stepped(&grad, -alpha)?;
    Ok(MetaTrainOutcome {
        loss: value,
        grad,
        gen_desc,
    })
}

/// Gradient of `theta -> L_te(theta - alpha * grad L_tr(theta))` at
/// `params`, as `g' - alpha * H_tr(params) g'` with `g' = grad L_te(gen_desc)`.
/// Returns the meta-test loss at `gen_desc` and the feedback.
#[allow(clippy::too_many_arguments)]
pub fn meta_test_feedback<Ltr, Lte>(
    loss_tr: &Ltr,
    batch_tr: &Ltr::Batch,
    loss_te: &Lte,
    batch_te: &Lte::Batch,
    params: &ParamVector,
    gen_desc: &ParamVector,
    alpha: f64,
    hvp_step: f64,
) -> Result<(f64, GradVector)>
where
    Ltr: LossFn + ?Sized,
    Lte: LossFn + ?Sized,
{
    let (value, g_prime) = gradient(loss_te, gen_desc, batch_te)?;
    if alpha == 0.0 || g_prime.is_zero() {
        return Ok((value, g_prime));
    }
    let hg = hvp(loss_tr, params, batch_tr, &g_prime, hvp_step)?;
    let mut out = g_prime;
    out.axpy(-alpha, &hg)?;
    Ok((value, out))
}

/// `params + eta * grad`.
pub fn flatness_ascent(params: &ParamVector, grad: &GradVector, eta: f64) -> Result<ParamVector> {
    params.stepped(grad, eta)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GapOutcome {
    /// `L(asc) - L(params)`.
    pub gap: f64,
    pub grad: GradVector,
}

/// Loss gap between the ascent point and the current point and its
/// gradient. `base` is the loss and gradient at `params`, already known
/// from the meta-training step.
#[allow(clippy::too_many_arguments)]
pub fn flatness_gap<L: LossFn + ?Sized>(
    loss: &L,
    params: &ParamVector,
    asc: &ParamVector,
    batch: &L::Batch,
    base: (f64, &GradVector),
    mode: GapMode,
    eta: f64,
    hvp_step: f64,
) -> Result<GapOutcome> {
    let (l0, g0) = base;
    if asc == params {
        return Ok(GapOutcome {
            gap: 0.0,
            grad: GradVector::zeros_like(params),
        });
    }
    let (l_asc, g_asc) = gradient(loss, asc, batch)?;
    let mut grad = g_asc.clone();
    if mode == GapMode::Exact && !g_asc.is_zero() {
        let hg = hvp(loss, params, batch, &g_asc, hvp_step)?;
        grad.axpy(eta, &hg)?;
    }
    grad.axpy(-1.0, g0)?;
    Ok(GapOutcome { gap: l_asc - l0, grad })
}

/// Gap gradient of one task computed from scratch at `params`.
pub fn fresh_gap_gradient<L: LossFn + ?Sized>(
    loss: &L,
    params: &ParamVector,
    batch: &L::Batch,
    mode: GapMode,
    eta: f64,
    hvp_step: f64,
) -> Result<GapOutcome> {
    let (l0, g0) = gradient(loss, params, batch)?;
    let asc = flatness_ascent(params, &g0, eta)?;
    flatness_gap(loss, params, &asc, batch, (l0, &g0), mode, eta, hvp_step)
}

/// `gap_grad + lambda * sum of cached means over the other seen tasks`,
/// then folds `gap_grad` into the cache entry of `current`.
pub fn flatness_feedback(
    gap_grad: &GradVector,
    cache: &mut FlatnessCache,
    current: TaskId,
    seen: &[TaskId],
    lambda: f64,
) -> Result<GradVector> {
    let mut out = gap_grad.clone();
    if lambda != 0.0 {
        for t in seen.iter().filter(|t| **t != current) {
            if let Some(mean) = cache.mean(*t) {
                out.axpy(lambda, mean)?;
            }
        }
    }
    cache.update(current, gap_grad)?;
    Ok(out)
}

/// `params - beta * (g_tr + g_mt + g_mf)`.
pub fn actual_update(
    params: &ParamVector,
    g_tr: &GradVector,
    g_mt: &GradVector,
    g_mf: &GradVector,
    beta: f64,
) -> Result<ParamVector> {
    for g in [g_tr, g_mt, g_mf] {
        if !g.same_layout_as(params) {
            return Err(Error::LayoutMismatch(format!(
                "update direction of length {} for {} parameters",
                g.len(),
                params.len()
            )));
        }
    }
    let total = GradVector::sum(&[g_tr, g_mt, g_mf])?;
    params.stepped(&total, -beta)
}
