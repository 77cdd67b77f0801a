//! Differentiation engine: exact reverse-mode gradients on a matrix tape,
//! Hessian-vector products by central differences of those gradients, and
//! a finite-difference gradient checker.

mod params;
pub mod scalar;
mod tape;
pub mod toy;

pub use params::{dot, norm, GradVector, Layout, LayoutBuilder, ParamVector, Segment};
pub use tape::{ConvGeom, Gradients, Tape, Var};

use crate::error::{Error, Result};

/// Default relative step for [`hvp`].
pub const DEFAULT_HVP_STEP: f64 = 1e-4;

/// Step used by the central-difference gradient oracle.
pub const FD_STEP: f64 = 1e-5;

/// Magnitude floor in the relative-error denominator of gradient checks;
/// coordinates smaller than this are compared in absolute terms.
pub const REL_ERROR_FLOOR: f64 = 1e-3;

/// A scalar objective over a flat parameter vector and a batch.
///
/// Implementations record their forward pass on a [`Tape`] starting from
/// the parameter leaf `params` (a `1 x n` node laid out per `layout`). They
/// must be deterministic: identical inputs give bit-identical values.
pub trait LossFn: Sync {
    type Batch: ?Sized + Sync;

    fn descriptor(&self) -> String;

    fn record(&self, tape: &mut Tape, params: Var, layout: &Layout, batch: &Self::Batch) -> Result<Var>;
}

fn run<L: LossFn + ?Sized>(
    loss: &L,
    params: &ParamVector,
    batch: &L::Batch,
    with_grad: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    let mut tape = Tape::new();
    let leaf = tape.input(params.values().to_vec(), 1, params.len(), with_grad);
    let out = loss.record(&mut tape, leaf, params.layout(), batch)?;
    let value = tape.scalar(out);
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss(value));
    }
    if !with_grad {
        return Ok((value, None));
    }
    let grads = tape.backward(out)?;
    Ok((value, Some(grads.wrt(leaf))))
}

/// Loss value only.
pub fn value<L: LossFn + ?Sized>(loss: &L, params: &ParamVector, batch: &L::Batch) -> Result<f64> {
    Ok(run(loss, params, batch, false)?.0)
}

/// Loss value and its exact gradient with respect to `params`.
pub fn gradient<L: LossFn + ?Sized>(
    loss: &L,
    params: &ParamVector,
    batch: &L::Batch,
) -> Result<(f64, GradVector)> {
    let (v, g) = run(loss, params, batch, true)?;
    let g = g.expect("gradient requested");
    if let Some(i) = g.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFiniteLoss(g[i]));
    }
    Ok((v, GradVector::new(g, params.layout().clone())?))
}

/// Hessian-vector product `H v` by central differences of exact gradients
/// along the unit direction of `v`, with step `fd_step * (1 + |params|)`,
/// rescaled by `|v|`. Exact (up to rounding) for quadratic losses.
pub fn hvp<L: LossFn + ?Sized>(
    loss: &L,
    params: &ParamVector,
    batch: &L::Batch,
    v: &GradVector,
    fd_step: f64,
) -> Result<GradVector> {
    if !v.same_layout_as(params) {
        return Err(Error::LayoutMismatch("hvp direction layout".into()));
    }
    if !(fd_step > 0.0) {
        return Err(Error::BadConfig(format!("fd_step must be positive, got {fd_step}")));
    }
    let vn = v.norm();
    if vn == 0.0 {
        return Err(Error::DegenerateVector);
    }
    let h = fd_step * (1.0 + params.norm());
    let unit: Vec<f64> = v.values().iter().map(|x| x / vn).collect();
    let plus = params.offset_by(&unit, h)?;
    let minus = params.offset_by(&unit, -h)?;
    let (gp, gm) = rayon::join(|| gradient(loss, &plus, batch), || gradient(loss, &minus, batch));
    let (gp, gm) = (gp?.1, gm?.1);
    let k = vn / (2.0 * h);
    let out = gp
        .values()
        .iter()
        .zip(gm.values())
        .map(|(a, b)| (a - b) * k)
        .collect();
    GradVector::new(out, params.layout().clone())
}

/// Central-difference estimate of the gradient, one coordinate at a time.
pub fn central_differences<L: LossFn + ?Sized>(
    loss: &L,
    params: &ParamVector,
    batch: &L::Batch,
    step: f64,
) -> Result<Vec<f64>> {
    let mut e = vec![0.0; params.len()];
    let mut out = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        e[i] = 1.0;
        let up = value(loss, &params.offset_by(&e, step)?, batch)?;
        let down = value(loss, &params.offset_by(&e, -step)?, batch)?;
        e[i] = 0.0;
        out.push((up - down) / (2.0 * step));
    }
    Ok(out)
}

/// Outcome of comparing an analytic gradient against an oracle.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub coordinates: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub tol: f64,
    pub passed: bool,
}

pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERROR_FLOOR)
}

/// Coordinate-wise comparison with [`rel_error`].
pub fn compare_gradients(analytic: &[f64], oracle: &[f64], tol: f64) -> CheckReport {
    assert_eq!(analytic.len(), oracle.len(), "gradient lengths differ");
    let (worst_index, max_rel_error) = analytic
        .iter()
        .zip(oracle)
        .map(|(a, b)| rel_error(*a, *b))
        .enumerate()
        .fold((0, 0.0), |best, (i, e)| if e > best.1 { (i, e) } else { best });
    CheckReport {
        coordinates: analytic.len(),
        max_rel_error,
        worst_index,
        tol,
        passed: max_rel_error <= tol,
    }
}

/// Checks [`gradient`] against central differences with step [`FD_STEP`].
pub fn finite_diff_check<L: LossFn + ?Sized>(
    loss: &L,
    params: &ParamVector,
    batch: &L::Batch,
    tol: f64,
) -> Result<CheckReport> {
    if !(tol > 0.0) {
        return Err(Error::BadConfig(format!("tolerance must be positive, got {tol}")));
    }
    let (_, g) = gradient(loss, params, batch)?;
    let fd = central_differences(loss, params, batch, FD_STEP)?;
    Ok(compare_gradients(g.values(), &fd, tol))
}
