//! Matrix-level Wengert tape for reverse-mode differentiation.
//!
//! Every node holds a row-major `rows x cols` buffer. Operations are
//! recorded eagerly while the forward pass runs; [`Tape::backward`] then
//! walks the tape in reverse and accumulates adjoints into every node that
//! (transitively) depends on an input created with `requires_grad`.

use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Geometry of a valid (unpadded) strided 2-D convolution over
/// channel-major image rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width - self.kernel) / self.stride + 1
    }

    pub fn in_len(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    pub fn out_len(&self) -> usize {
        self.out_channels * self.out_height() * self.out_width()
    }

    pub fn kernel_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Slice { src: Var, offset: usize },
    Reshape(Var),
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Relu(Var),
    Clamp(Var, f64, f64),
    SoftmaxRows(Var),
    Sum(Var),
    Mean(Var),
    CrossEntropy { logits: Var, labels: Vec<usize> },
    SquaredError { pred: Var, target: Vec<f64> },
    Conv2d { input: Var, kernel: Var, bias: Var, geom: ConvGeom },
}

#[derive(Debug)]
struct Node {
    value: Vec<f64>,
    rows: usize,
    cols: usize,
    op: Op,
    requires_grad: bool,
    // op-specific cache from the forward pass (softmax probabilities for
    // cross-entropy)
    aux: Vec<f64>,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    sizes: Vec<usize>,
}

impl Gradients {
    /// Adjoint of `var`; zeros if the output does not depend on it.
    pub fn wrt(&self, var: Var) -> Vec<f64> {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => vec![0.0; self.sizes[var.0]],
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Vec<f64>, rows: usize, cols: usize, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node {
            value,
            rows,
            cols,
            op,
            requires_grad,
            aux: Vec::new(),
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf node. Only leaves with `requires_grad` (and nodes depending on
    /// them) receive adjoints.
    pub fn input(&mut self, value: Vec<f64>, rows: usize, cols: usize, requires_grad: bool) -> Var {
        assert_eq!(value.len(), rows * cols, "input buffer does not match shape");
        self.push(value, rows, cols, Op::Input, requires_grad)
    }

    pub fn constant(&mut self, value: Vec<f64>, rows: usize, cols: usize) -> Var {
        self.input(value, rows, cols, false)
    }

    /// Contiguous sub-range of `src` viewed as a `rows x cols` matrix.
    pub fn slice(&mut self, src: Var, offset: usize, rows: usize, cols: usize) -> Var {
        let value = self.nodes[src.0].value[offset..offset + rows * cols].to_vec();
        let rg = self.requires(src);
        self.push(value, rows, cols, Op::Slice { src, offset }, rg)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(r * c, rows * cols, "reshape changes element count");
        let value = self.nodes[a.0].value.clone();
        let rg = self.requires(a);
        self.push(value, rows, cols, Op::Reshape(a), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (r, k) = self.shape(a);
        let (k2, c) = self.shape(b);
        assert_eq!(k, k2, "matmul inner dimensions {k} vs {k2}");
        let out = matmul(&self.nodes[a.0].value, &self.nodes[b.0].value, r, k, c);
        let rg = self.requires(a) || self.requires(b);
        self.push(out, r, c, Op::MatMul(a, b), rg)
    }

    /// `a + bias` with `bias` (1 x cols) broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(bias), (1, c), "bias shape");
        let bv = &self.nodes[bias.0].value;
        let mut out = self.nodes[a.0].value.clone();
        for row in out.chunks_exact_mut(c) {
            for (o, b) in row.iter_mut().zip(bv) {
                *o += b;
            }
        }
        let rg = self.requires(a) || self.requires(bias);
        self.push(out, r, c, Op::AddRow(a, bias), rg)
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!((r, c), self.shape(b), "elementwise shape mismatch");
        let out = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.requires(a) || self.requires(b);
        self.push(out, r, c, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let (r, c) = self.shape(a);
        let out = self.nodes[a.0].value.iter().map(|&x| f(x)).collect();
        let rg = self.requires(a);
        self.push(out, r, c, op, rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.map(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(0.0), Op::Relu(a))
    }

    /// Clamp into `[lo, hi]`; the derivative is 1 strictly inside the range
    /// and 0 where the value was clipped.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.map(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let mut out = self.nodes[a.0].value.clone();
        for row in out.chunks_exact_mut(c) {
            softmax_in_place(row);
        }
        let rg = self.requires(a);
        self.push(out, r, c, Op::SoftmaxRows(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.iter().sum();
        let rg = self.requires(a);
        self.push(vec![s], 1, 1, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.requires(a);
        self.push(vec![m], 1, 1, Op::Mean(a), rg)
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let (r, c) = self.shape(logits);
        assert_eq!(labels.len(), r, "one label per logit row");
        let mut probs = self.nodes[logits.0].value.clone();
        let mut total = 0.0;
        for (row, (p, &y)) in self.nodes[logits.0]
            .value
            .chunks_exact(c)
            .zip(probs.chunks_exact_mut(c).zip(labels))
        {
            assert!(y < c, "label {y} out of range for {c} classes");
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            total += lse - row[y];
            softmax_in_place(p);
        }
        let rg = self.requires(logits);
        let v = self.push(
            vec![total / r as f64],
            1,
            1,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            rg,
        );
        self.nodes[v.0].aux = probs;
        v
    }

    /// Mean of `(pred - target)^2` over all entries.
    pub fn squared_error(&mut self, pred: Var, target: &[f64]) -> Var {
        let p = &self.nodes[pred.0].value;
        assert_eq!(p.len(), target.len(), "target length");
        let se = p
            .iter()
            .zip(target)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / p.len() as f64;
        let rg = self.requires(pred);
        self.push(
            vec![se],
            1,
            1,
            Op::SquaredError {
                pred,
                target: target.to_vec(),
            },
            rg,
        )
    }

    /// Valid strided convolution. `input` is `batch x (C*H*W)`, `kernel` is
    /// `out_channels x (C*k*k)`, `bias` is `1 x out_channels`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, geom: ConvGeom) -> Var {
        let (b, len) = self.shape(input);
        assert_eq!(len, geom.in_len(), "conv input length");
        assert_eq!(self.shape(kernel), (geom.out_channels, geom.kernel_len()));
        assert_eq!(self.shape(bias), (1, geom.out_channels));
        let x = &self.nodes[input.0].value;
        let k = &self.nodes[kernel.0].value;
        let bs = &self.nodes[bias.0].value;
        let (oh, ow) = (geom.out_height(), geom.out_width());
        let mut out = vec![0.0; b * geom.out_len()];
        for n in 0..b {
            let xin = &x[n * len..(n + 1) * len];
            let xo = &mut out[n * geom.out_len()..(n + 1) * geom.out_len()];
            for o in 0..geom.out_channels {
                let kr = &k[o * geom.kernel_len()..(o + 1) * geom.kernel_len()];
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut acc = bs[o];
                        for c in 0..geom.in_channels {
                            for i in 0..geom.kernel {
                                let row = (c * geom.height + y * geom.stride + i) * geom.width
                                    + xx * geom.stride;
                                let krow = (c * geom.kernel + i) * geom.kernel;
                                for j in 0..geom.kernel {
                                    acc += kr[krow + j] * xin[row + j];
                                }
                            }
                        }
                        xo[(o * oh + y) * ow + xx] = acc;
                    }
                }
            }
        }
        let rg = self.requires(input) || self.requires(kernel) || self.requires(bias);
        self.push(
            out,
            b,
            geom.out_len(),
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
            rg,
        )
    }

    /// Reverse sweep from the scalar node `out`.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        let root = &self.nodes[out.0];
        if root.value.len() != 1 {
            return Err(Error::shape("scalar output", format!("{}x{}", root.rows, root.cols)));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(vec![1.0]);

        for idx in (0..=out.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            sizes: self.nodes.iter().map(|n| n.value.len()).collect(),
        })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Input => {}
            Op::Slice { src, offset } => acc(*src, &mut |s| {
                for (d, x) in s[*offset..*offset + g.len()].iter_mut().zip(g) {
                    *d += x;
                }
            }),
            Op::Reshape(a) => acc(*a, &mut |s| add_into(s, g)),
            Op::MatMul(a, b) => {
                let (r, k) = self.shape(*a);
                let c = node.cols;
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |s| matmul_bt_acc(g, bv, r, c, k, s));
                acc(*b, &mut |s| matmul_at_acc(av, g, r, k, c, s));
            }
            Op::AddRow(a, bias) => {
                acc(*a, &mut |s| add_into(s, g));
                let c = node.cols;
                acc(*bias, &mut |s| {
                    for row in g.chunks_exact(c) {
                        add_into(s, row);
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| add_into(s, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| {
                    for (d, x) in s.iter_mut().zip(g) {
                        *d -= x;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |s| {
                    for ((d, x), y) in s.iter_mut().zip(g).zip(bv) {
                        *d += x * y;
                    }
                });
                acc(*b, &mut |s| {
                    for ((d, x), y) in s.iter_mut().zip(g).zip(av) {
                        *d += x * y;
                    }
                });
            }
            Op::Scale(a, k) => acc(*a, &mut |s| {
                for (d, x) in s.iter_mut().zip(g) {
                    *d += k * x;
                }
            }),
            Op::Tanh(a) => acc(*a, &mut |s| {
                for ((d, x), y) in s.iter_mut().zip(g).zip(&node.value) {
                    *d += x * (1.0 - y * y);
                }
            }),
            Op::Relu(a) => {
                let av = val(*a);
                acc(*a, &mut |s| {
                    for ((d, x), z) in s.iter_mut().zip(g).zip(av) {
                        if *z > 0.0 {
                            *d += x;
                        }
                    }
                })
            }
            Op::Clamp(a, lo, hi) => {
                let av = val(*a);
                acc(*a, &mut |s| {
                    for ((d, x), z) in s.iter_mut().zip(g).zip(av) {
                        if *z > *lo && *z < *hi {
                            *d += x;
                        }
                    }
                })
            }
            Op::SoftmaxRows(a) => {
                let c = node.cols;
                acc(*a, &mut |s| {
                    for ((sr, gr), yr) in s
                        .chunks_exact_mut(c)
                        .zip(g.chunks_exact(c))
                        .zip(node.value.chunks_exact(c))
                    {
                        let inner: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((d, gx), y) in sr.iter_mut().zip(gr).zip(yr) {
                            *d += y * (gx - inner);
                        }
                    }
                })
            }
            Op::Sum(a) => acc(*a, &mut |s| {
                for d in s.iter_mut() {
                    *d += g[0];
                }
            }),
            Op::Mean(a) => acc(*a, &mut |s| {
                let k = g[0] / s.len() as f64;
                for d in s.iter_mut() {
                    *d += k;
                }
            }),
            Op::CrossEntropy { logits, labels } => {
                let (r, c) = self.shape(*logits);
                let k = g[0] / r as f64;
                acc(*logits, &mut |s| {
                    for (row, (p, &y)) in s
                        .chunks_exact_mut(c)
                        .zip(node.aux.chunks_exact(c).zip(labels))
                    {
                        for (d, pi) in row.iter_mut().zip(p) {
                            *d += k * pi;
                        }
                        row[y] -= k;
                    }
                })
            }
            Op::SquaredError { pred, target } => {
                let pv = val(*pred);
                let k = 2.0 * g[0] / pv.len() as f64;
                acc(*pred, &mut |s| {
                    for ((d, p), t) in s.iter_mut().zip(pv).zip(target) {
                        *d += k * (p - t);
                    }
                })
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            } => {
                let b = node.rows;
                let (oh, ow) = (geom.out_height(), geom.out_width());
                let (xv, kv) = (val(*input), val(*kernel));
                let (il, ol, kl) = (geom.in_len(), geom.out_len(), geom.kernel_len());
                // visits every (sample, out channel, out pixel, tap) with the
                // flat input/kernel offsets and upstream adjoint
                let for_each_tap = |f: &mut dyn FnMut(usize, usize, f64)| {
                    for n in 0..b {
                        for o in 0..geom.out_channels {
                            for y in 0..oh {
                                for xx in 0..ow {
                                    let gv = g[n * ol + (o * oh + y) * ow + xx];
                                    if gv == 0.0 {
                                        continue;
                                    }
                                    for c in 0..geom.in_channels {
                                        for i in 0..geom.kernel {
                                            let row = n * il
                                                + (c * geom.height + y * geom.stride + i) * geom.width
                                                + xx * geom.stride;
                                            let krow = o * kl + (c * geom.kernel + i) * geom.kernel;
                                            for j in 0..geom.kernel {
                                                f(row + j, krow + j, gv);
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                };
                acc(*input, &mut |s| for_each_tap(&mut |xi, ki, gv| s[xi] += gv * kv[ki]));
                acc(*kernel, &mut |s| for_each_tap(&mut |xi, ki, gv| s[ki] += gv * xv[xi]));
                acc(*bias, &mut |s| {
                    for n in 0..b {
                        for o in 0..geom.out_channels {
                            let start = n * ol + o * oh * ow;
                            s[o] += g[start..start + oh * ow].iter().sum::<f64>();
                        }
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}

/// `a (r x k) * b (k x c)`
pub(crate) fn matmul(a: &[f64], b: &[f64], r: usize, k: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for (arow, orow) in a.chunks_exact(k).zip(out.chunks_exact_mut(c)) {
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * c..(p + 1) * c];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `out (r x k) += g (r x c) * b^T` where `b` is `k x c`.
fn matmul_bt_acc(g: &[f64], b: &[f64], r: usize, c: usize, k: usize, out: &mut [f64]) {
    for i in 0..r {
        let grow = &g[i * c..(i + 1) * c];
        let orow = &mut out[i * k..(i + 1) * k];
        for (p, o) in orow.iter_mut().enumerate() {
            let brow = &b[p * c..(p + 1) * c];
            *o += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out (k x c) += a^T * g` where `a` is `r x k` and `g` is `r x c`.
fn matmul_at_acc(a: &[f64], g: &[f64], r: usize, k: usize, c: usize, out: &mut [f64]) {
    for i in 0..r {
        let grow = &g[i * c..(i + 1) * c];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * c..(p + 1) * c];
            for (o, gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}
