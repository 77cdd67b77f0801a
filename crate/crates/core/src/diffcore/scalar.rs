//! Exact second derivatives of scalar functions via hyper-dual numbers.
//!
//! Used as the exact mode for cross-checking the finite-difference
//! second-order paths on one-parameter models.

use std::ops::{Add, Mul, Neg, Sub};

/// `re + e1 ε1 + e2 ε2 + e12 ε1ε2` with `ε1² = ε2² = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HyperDual {
    pub re: f64,
    pub e1: f64,
    pub e2: f64,
    pub e12: f64,
}

impl HyperDual {
    pub fn constant(re: f64) -> Self {
        Self {
            re,
            e1: 0.0,
            e2: 0.0,
            e12: 0.0,
        }
    }

    pub fn variable(re: f64) -> Self {
        Self {
            re,
            e1: 1.0,
            e2: 1.0,
            e12: 0.0,
        }
    }

    fn chain(self, f: f64, df: f64, d2f: f64) -> Self {
        Self {
            re: f,
            e1: df * self.e1,
            e2: df * self.e2,
            e12: df * self.e12 + d2f * self.e1 * self.e2,
        }
    }

    pub fn tanh(self) -> Self {
        let t = self.re.tanh();
        let d = 1.0 - t * t;
        self.chain(t, d, -2.0 * t * d)
    }

    pub fn exp(self) -> Self {
        let e = self.re.exp();
        self.chain(e, e, e)
    }

    pub fn ln(self) -> Self {
        self.chain(self.re.ln(), 1.0 / self.re, -1.0 / (self.re * self.re))
    }

    pub fn scale(self, k: f64) -> Self {
        Self {
            re: self.re * k,
            e1: self.e1 * k,
            e2: self.e2 * k,
            e12: self.e12 * k,
        }
    }
}

impl Add for HyperDual {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self {
            re: self.re + o.re,
            e1: self.e1 + o.e1,
            e2: self.e2 + o.e2,
            e12: self.e12 + o.e12,
        }
    }
}

impl Sub for HyperDual {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        self + (-o)
    }
}

impl Neg for HyperDual {
    type Output = Self;
    fn neg(self) -> Self {
        self.scale(-1.0)
    }
}

impl Mul for HyperDual {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        Self {
            re: self.re * o.re,
            e1: self.re * o.e1 + self.e1 * o.re,
            e2: self.re * o.e2 + self.e2 * o.re,
            e12: self.re * o.e12 + self.e1 * o.e2 + self.e2 * o.e1 + self.e12 * o.re,
        }
    }
}

/// `(f(x), f'(x), f''(x))`, exact to rounding.
pub fn derivatives<F: Fn(HyperDual) -> HyperDual>(f: F, x: f64) -> (f64, f64, f64) {
    let y = f(HyperDual::variable(x));
    (y.re, y.e1, y.e12)
}

/// Exact `d/dθ L_te(θ - α L_tr'(θ))`.
pub fn exact_meta_test<Ftr, Fte>(train: Ftr, test: Fte, theta: f64, alpha: f64) -> f64
where
    Ftr: Fn(HyperDual) -> HyperDual,
    Fte: Fn(HyperDual) -> HyperDual,
{
    let (_, d_tr, dd_tr) = derivatives(&train, theta);
    let (_, d_te, _) = derivatives(&test, theta - alpha * d_tr);
    d_te * (1.0 - alpha * dd_tr)
}

/// Exact `d/dθ [L(θ + η L'(θ)) - L(θ)]`, differentiating through the ascent
/// direction.
pub fn exact_gap_gradient<F: Fn(HyperDual) -> HyperDual>(loss: F, theta: f64, eta: f64) -> f64 {
    let (_, d, dd) = derivatives(&loss, theta);
    let (_, d_asc, _) = derivatives(&loss, theta + eta * d);
    d_asc * (1.0 + eta * dd) - d
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derivatives_of_polynomial_and_tanh() {
        let (f, d, dd) = derivatives(|x| x * x * x, 2.0);
        assert_eq!((f, d, dd), (8.0, 12.0, 12.0));
        let (_, d, dd) = derivatives(|x| x.tanh(), 0.3);
        let t = 0.3f64.tanh();
        assert!((d - (1.0 - t * t)).abs() < 1e-15);
        assert!((dd + 2.0 * t * (1.0 - t * t)).abs() < 1e-15);
    }

    #[test]
    fn meta_test_closed_form_on_quadratics() {
        // b (1 - a alpha)^2 theta with a = 2, b = 3, alpha = 0.1, theta = 1
        let g = exact_meta_test(
            |x| (x * x).scale(0.5 * 2.0),
            |x| (x * x).scale(0.5 * 3.0),
            1.0,
            0.1,
        );
        assert!((g - 1.92).abs() < 1e-12);
    }
}
