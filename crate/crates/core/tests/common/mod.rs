//! Oracles shared by the integration tests. Written directly against the
//! math, without the tape.
#![allow(dead_code)]

use mctueg::diffcore::toy::{ToyBatch, ToyMlp};

/// Relative error with an absolute floor of 1e-3 on the denominator.
pub fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// Mean squared error of the two-layer tanh network, computed by hand.
pub fn mlp_loss(m: &ToyMlp, p: &[f64], b: &ToyBatch) -> f64 {
    let (ni, nh, no) = (m.inputs, m.hidden, m.outputs);
    let w1 = &p[..ni * nh];
    let b1 = &p[ni * nh..ni * nh + nh];
    let w2 = &p[ni * nh + nh..ni * nh + nh + nh * no];
    let b2 = &p[ni * nh + nh + nh * no..];
    let mut err = 0.0;
    for r in 0..b.rows {
        let x = &b.inputs[r * ni..(r + 1) * ni];
        let h: Vec<f64> = (0..nh)
            .map(|j| ((0..ni).map(|k| x[k] * w1[k * nh + j]).sum::<f64>() + b1[j]).tanh())
            .collect();
        for l in 0..no {
            let y = (0..nh).map(|j| h[j] * w2[j * no + l]).sum::<f64>() + b2[l];
            err += (y - b.targets[r * no + l]).powi(2);
        }
    }
    err / (b.rows * no) as f64
}

/// Central differences of `f` at `x` with step `h`.
pub fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut y = x.to_vec();
    (0..x.len())
        .map(|i| {
            y[i] = x[i] + h;
            let up = f(&y);
            y[i] = x[i] - h;
            let down = f(&y);
            y[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}
