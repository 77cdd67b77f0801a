//! Hessian diagnostics built on Hessian-vector products: power iteration
//! for the top eigenvalue and stochastic Lanczos quadrature for the
//! spectral density.

use std::io::Write;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{dot, hvp, norm, GradVector, LossFn, ParamVector, DEFAULT_HVP_STEP};
use crate::error::{Error, Result};

/// Ritz values whose gap is below this (relative to their magnitude) are
/// merged when probes are aggregated.
const MERGE_TOL: f64 = 1e-9;

/// Lanczos stops once the new residual norm falls below this fraction of
/// the current tridiagonal scale.
const BREAKDOWN_TOL: f64 = 1e-7;

/// Settings of the Hessian diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectrumConfig {
    pub probes: usize,
    pub lanczos_steps: usize,
    pub power_iters: usize,
    /// Number of training images the Hessian is taken on.
    pub batch: usize,
}

impl Default for SpectrumConfig {
    fn default() -> Self {
        Self {
            probes: 8,
            lanczos_steps: 32,
            power_iters: 20,
            batch: 64,
        }
    }
}

impl SpectrumConfig {
    pub fn validate(&self) -> Result<()> {
        if self.probes == 0 || self.lanczos_steps < 2 || self.power_iters == 0 || self.batch == 0 {
            return Err(Error::Validation(
                "spectrum_probes, power_iters and spectrum_batch must be positive and spectrum_steps at least 2"
                    .into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumEstimate {
    /// Ascending.
    pub ritz_values: Vec<f64>,
    /// Quadrature weights; sum to one.
    pub weights: Vec<f64>,
    pub probes: usize,
    pub lanczos_steps: usize,
    /// Some probe's Krylov space collapsed before the second step, so its
    /// estimate holds a single node.
    pub breakdown: bool,
}

fn random_unit<R: Rng>(len: usize, rng: &mut R) -> Result<Vec<f64>> {
    let v: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let n = norm(&v);
    if n == 0.0 {
        return Err(Error::DegenerateVector);
    }
    Ok(v.into_iter().map(|x| x / n).collect())
}

fn apply<L: LossFn + ?Sized>(loss: &L, params: &ParamVector, batch: &L::Batch, v: &[f64]) -> Result<Vec<f64>> {
    let dir = GradVector::new(v.to_vec(), params.layout().clone())?;
    Ok(hvp(loss, params, batch, &dir, DEFAULT_HVP_STEP)?.values().to_vec())
}

/// Rayleigh quotient after `iters` steps of power iteration from a random
/// start.
pub fn top_eigenvalue<L: LossFn + ?Sized, R: Rng>(
    loss: &L,
    params: &ParamVector,
    batch: &L::Batch,
    iters: usize,
    rng: &mut R,
) -> Result<f64> {
    if iters == 0 {
        return Err(Error::BadConfig("power iteration needs at least one step".into()));
    }
    let mut v = random_unit(params.len(), rng)?;
    let mut rayleigh = 0.0;
    for _ in 0..iters {
        let w = apply(loss, params, batch, &v)?;
        rayleigh = dot(&v, &w);
        let n = norm(&w);
        if n == 0.0 || !n.is_finite() {
            return Err(Error::DegenerateVector);
        }
        v = w.into_iter().map(|x| x / n).collect();
    }
    Ok(rayleigh)
}

/// Lanczos tridiagonalization from `start` with full reorthogonalization.
/// Returns the diagonal and off-diagonal entries.
fn lanczos<L: LossFn + ?Sized>(
    loss: &L,
    params: &ParamVector,
    batch: &L::Batch,
    start: Vec<f64>,
    steps: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut basis: Vec<Vec<f64>> = vec![start];
    let mut alphas = Vec::with_capacity(steps);
    let mut betas = Vec::with_capacity(steps);
    for j in 0..steps {
        let v = &basis[j];
        let mut w = apply(loss, params, batch, v)?;
        let a = dot(&w, v);
        alphas.push(a);
        if j + 1 == steps {
            break;
        }
        // two passes of Gram-Schmidt against the whole basis
        for _ in 0..2 {
            for q in &basis {
                let c = dot(&w, q);
                for (wi, qi) in w.iter_mut().zip(q) {
                    *wi -= c * qi;
                }
            }
        }
        let b = norm(&w);
        let scale = a.abs() + betas.last().copied().unwrap_or(0.0f64).abs();
        if !(b > BREAKDOWN_TOL * scale.max(f64::MIN_POSITIVE)) {
            break;
        }
        betas.push(b);
        basis.push(w.into_iter().map(|x| x / b).collect());
    }
    Ok((alphas, betas))
}

/// Ritz values and first-component-squared weights of a tridiagonal matrix.
fn ritz(alphas: &[f64], betas: &[f64]) -> Vec<(f64, f64)> {
    let k = alphas.len();
    let mut t = DMatrix::<f64>::zeros(k, k);
    for i in 0..k {
        t[(i, i)] = alphas[i];
        if i + 1 < k {
            t[(i, i + 1)] = betas[i];
            t[(i + 1, i)] = betas[i];
        }
    }
    let eig = SymmetricEigen::new(t);
    (0..k)
        .map(|i| (eig.eigenvalues[i], eig.eigenvectors[(0, i)].powi(2)))
        .collect()
}

/// Stochastic Lanczos quadrature with Rademacher probes.
pub fn hessian_spectrum<L: LossFn + ?Sized, R: Rng>(
    loss: &L,
    params: &ParamVector,
    batch: &L::Batch,
    lanczos_steps: usize,
    probes: usize,
    rng: &mut R,
) -> Result<SpectrumEstimate> {
    if lanczos_steps < 2 || probes == 0 {
        return Err(Error::BadConfig(format!(
            "need at least 2 Lanczos steps and 1 probe, got {lanczos_steps} and {probes}"
        )));
    }
    let n = params.len();
    let steps = lanczos_steps.min(n);
    let starts: Vec<Vec<f64>> = (0..probes)
        .map(|_| {
            let s = 1.0 / (n as f64).sqrt();
            (0..n).map(|_| if rng.gen::<bool>() { s } else { -s }).collect()
        })
        .collect();
    let mut nodes = Vec::new();
    let mut breakdown = false;
    for start in starts {
        let (alphas, betas) = lanczos(loss, params, batch, start, steps)?;
        if alphas.len() < 2 && steps >= 2 {
            breakdown = true;
        }
        let probe_nodes = ritz(&alphas, &betas);
        let total: f64 = probe_nodes.iter().map(|(_, w)| w).sum();
        for (value, w) in probe_nodes {
            nodes.push((value, w / total / probes as f64));
        }
    }
    nodes.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut ritz_values: Vec<f64> = Vec::new();
    let mut weights: Vec<f64> = Vec::new();
    for (value, w) in nodes {
        match ritz_values.last() {
            Some(&last) if (value - last).abs() <= MERGE_TOL * last.abs().max(1.0) => {
                *weights.last_mut().unwrap() += w;
            }
            _ => {
                ritz_values.push(value);
                weights.push(w);
            }
        }
    }
    if ritz_values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteLoss(f64::NAN));
    }
    Ok(SpectrumEstimate {
        ritz_values,
        weights,
        probes,
        lanczos_steps,
        breakdown,
    })
}

/// Total weight at Ritz values `<= tau`.
pub fn left_mass(spec: &SpectrumEstimate, tau: f64) -> f64 {
    spec.ritz_values
        .iter()
        .zip(&spec.weights)
        .filter(|(v, _)| **v <= tau)
        .map(|(_, w)| w)
        .sum::<f64>()
        .clamp(0.0, 1.0)
}

/// Weighted median of the Ritz values.
pub fn median_ritz(spec: &SpectrumEstimate) -> f64 {
    let mut acc = 0.0;
    for (v, w) in spec.ritz_values.iter().zip(&spec.weights) {
        acc += w;
        if acc >= 0.5 {
            return *v;
        }
    }
    *spec.ritz_values.last().unwrap_or(&0.0)
}

/// One `ritz<TAB>weight` line per node.
pub fn write_spectrum<W: Write>(spec: &SpectrumEstimate, out: &mut W) -> std::io::Result<()> {
    for (v, w) in spec.ritz_values.iter().zip(&spec.weights) {
        writeln!(out, "{v}\t{w}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::toy::Quadratic;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn origin(n: usize) -> ParamVector {
        ParamVector::from_slice(&vec![0.0; n]).unwrap()
    }

    #[test]
    fn power_iteration_finds_top_eigenvalue() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let q = Quadratic::diagonal(&[1.0, 5.0]);
        let top = top_eigenvalue(&q, &origin(2), &(), 200, &mut rng).unwrap();
        assert!((top - 5.0).abs() < 1e-6);
        let iso = Quadratic::diagonal(&[3.0; 4]);
        assert!((top_eigenvalue(&iso, &origin(4), &(), 1, &mut rng).unwrap() - 3.0).abs() < 1e-8);
        let a = top_eigenvalue(&q, &origin(2), &(), 50, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = top_eigenvalue(&q.scaled(7.0), &origin(2), &(), 50, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!((b - 7.0 * a).abs() < 1e-8 * b.abs());
    }

    #[test]
    fn diagonal_spectrum_is_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let diag: Vec<f64> = (1..=10).map(|i| i as f64 * 0.7).collect();
        let q = Quadratic::diagonal(&diag);
        let s = hessian_spectrum(&q, &origin(10), &(), 12, 3, &mut rng).unwrap();
        for d in &diag {
            let nearest = s.ritz_values.iter().map(|r| (r - d).abs()).fold(f64::INFINITY, f64::min);
            assert!(nearest < 1e-6, "{d}: {:?}", s.ritz_values);
        }
        assert!((s.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(s.ritz_values.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn identity_hessian_gives_single_node() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = Quadratic::diagonal(&[1.0; 6]);
        let s = hessian_spectrum(&q, &origin(6), &(), 5, 2, &mut rng).unwrap();
        assert_eq!(s.ritz_values.len(), 1);
        assert!((s.ritz_values[0] - 1.0).abs() < 1e-9);
        assert!(s.breakdown);
        assert_eq!(left_mass(&s, 2.0), 1.0);
        assert_eq!(left_mass(&s, 0.5), 0.0);
    }
}
