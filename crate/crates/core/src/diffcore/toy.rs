//! Small closed-form and randomized objectives used by the self-test, the
//! oracle suites and the spectrum checks.

use rand::Rng;

use super::{Layout, LossFn, ParamVector, Tape, Var};
use crate::error::Result;

/// `L(theta) = 1/2 theta^T A theta` for a symmetric `A`.
#[derive(Debug, Clone)]
pub struct Quadratic {
    dim: usize,
    matrix: Vec<f64>,
}

impl Quadratic {
    pub fn new(dim: usize, matrix: Vec<f64>) -> Self {
        assert_eq!(matrix.len(), dim * dim);
        for i in 0..dim {
            for j in 0..i {
                assert_eq!(matrix[i * dim + j], matrix[j * dim + i], "matrix must be symmetric");
            }
        }
        Self { dim, matrix }
    }

    pub fn diagonal(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = vec![0.0; n * n];
        for (i, d) in diag.iter().enumerate() {
            m[i * n + i] = *d;
        }
        Self::new(n, m)
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            dim: self.dim,
            matrix: self.matrix.iter().map(|v| v * c).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn matrix(&self) -> &[f64] {
        &self.matrix
    }
}

impl LossFn for Quadratic {
    type Batch = ();

    fn descriptor(&self) -> String {
        format!("quadratic[{}]", self.dim)
    }

    fn record(&self, tape: &mut Tape, params: Var, _: &Layout, _: &()) -> Result<Var> {
        let a = tape.constant(self.matrix.clone(), self.dim, self.dim);
        let at = tape.matmul(params, a);
        let prod = tape.mul(at, params);
        let s = tape.sum(prod);
        Ok(tape.scale(s, 0.5))
    }
}

/// `L(theta) = theta^T c`
#[derive(Debug, Clone)]
pub struct Linear {
    coef: Vec<f64>,
}

impl Linear {
    pub fn new(coef: Vec<f64>) -> Self {
        Self { coef }
    }
}

impl LossFn for Linear {
    type Batch = ();

    fn descriptor(&self) -> String {
        "linear".into()
    }

    fn record(&self, tape: &mut Tape, params: Var, _: &Layout, _: &()) -> Result<Var> {
        let c = tape.constant(self.coef.clone(), 1, self.coef.len());
        let p = tape.mul(params, c);
        Ok(tape.sum(p))
    }
}

/// Regression batch for [`ToyMlp`].
#[derive(Debug, Clone)]
pub struct ToyBatch {
    pub inputs: Vec<f64>,
    pub targets: Vec<f64>,
    pub rows: usize,
}

/// Two-layer tanh network with squared-error loss.
#[derive(Debug, Clone)]
pub struct ToyMlp {
    pub inputs: usize,
    pub hidden: usize,
    pub outputs: usize,
}

impl ToyMlp {
    pub fn layout(&self) -> std::sync::Arc<Layout> {
        Layout::builder()
            .push("w1", self.inputs, self.hidden)
            .push("b1", 1, self.hidden)
            .push("w2", self.hidden, self.outputs)
            .push("b2", 1, self.outputs)
            .build()
    }

    pub fn random_params<R: Rng>(&self, rng: &mut R) -> ParamVector {
        let layout = self.layout();
        let values = (0..layout.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        ParamVector::new(values, layout).expect("finite")
    }

    pub fn random_batch<R: Rng>(&self, rows: usize, rng: &mut R) -> ToyBatch {
        ToyBatch {
            inputs: (0..rows * self.inputs).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            targets: (0..rows * self.outputs).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            rows,
        }
    }

    /// Random architecture (2..=4 inputs, 2..=5 hidden, 1..=3 outputs),
    /// parameters and batch.
    pub fn random_instance<R: Rng>(rng: &mut R) -> (Self, ParamVector, ToyBatch) {
        let mlp = Self {
            inputs: rng.gen_range(2..=4),
            hidden: rng.gen_range(2..=5),
            outputs: rng.gen_range(1..=3),
        };
        let params = mlp.random_params(rng);
        let rows = rng.gen_range(2..=6);
        let batch = mlp.random_batch(rows, rng);
        (mlp, params, batch)
    }
}

impl LossFn for ToyMlp {
    type Batch = ToyBatch;

    fn descriptor(&self) -> String {
        format!("mlp[{}-{}-{}]", self.inputs, self.hidden, self.outputs)
    }

    fn record(&self, tape: &mut Tape, params: Var, layout: &Layout, batch: &ToyBatch) -> Result<Var> {
        let seg = |tape: &mut Tape, name: &str| -> Result<Var> {
            let s = layout.segment(name)?;
            Ok(tape.slice(params, s.offset, s.rows, s.cols))
        };
        let w1 = seg(tape, "w1")?;
        let b1 = seg(tape, "b1")?;
        let w2 = seg(tape, "w2")?;
        let b2 = seg(tape, "b2")?;
        let x = tape.constant(batch.inputs.clone(), batch.rows, self.inputs);
        let h = tape.matmul(x, w1);
        let h = tape.add_row(h, b1);
        let h = tape.tanh(h);
        let y = tape.matmul(h, w2);
        let y = tape.add_row(y, b2);
        Ok(tape.squared_error(y, &batch.targets))
    }
}
