//! Feed-forward stacks of dense and convolution layers over flat rows.

use rand::Rng;

use crate::diffcore::{ConvGeom, Layout, LayoutBuilder, Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Tanh,
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    Dense {
        inputs: usize,
        outputs: usize,
        act: Activation,
    },
    Conv {
        geom: ConvGeom,
        act: Activation,
    },
}

impl LayerSpec {
    pub fn in_len(&self) -> usize {
        match self {
            LayerSpec::Dense { inputs, .. } => *inputs,
            LayerSpec::Conv { geom, .. } => geom.in_len(),
        }
    }

    pub fn out_len(&self) -> usize {
        match self {
            LayerSpec::Dense { outputs, .. } => *outputs,
            LayerSpec::Conv { geom, .. } => geom.out_len(),
        }
    }

    fn weight_shape(&self) -> (usize, usize) {
        match self {
            LayerSpec::Dense { inputs, outputs, .. } => (*inputs, *outputs),
            LayerSpec::Conv { geom, .. } => (geom.out_channels, geom.kernel_len()),
        }
    }

    fn bias_len(&self) -> usize {
        match self {
            LayerSpec::Dense { outputs, .. } => *outputs,
            LayerSpec::Conv { geom, .. } => geom.out_channels,
        }
    }

    fn fans(&self) -> (usize, usize) {
        match self {
            LayerSpec::Dense { inputs, outputs, .. } => (*inputs, *outputs),
            LayerSpec::Conv { geom, .. } => (geom.kernel_len(), geom.out_channels * geom.kernel * geom.kernel),
        }
    }
}

/// Where a network finds its weights on a tape: a `1 x n` node and the
/// layout naming its segments.
#[derive(Clone, Copy)]
pub struct ParamSource<'a> {
    pub var: Var,
    pub layout: &'a Layout,
}

/// A layer stack whose segments are named `{prefix}l{i}.w` / `{prefix}l{i}.b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Net {
    prefix: String,
    layers: Vec<LayerSpec>,
}

impl Net {
    pub fn new(prefix: impl Into<String>, layers: Vec<LayerSpec>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::BadConfig("network needs at least one layer".into()));
        }
        for w in layers.windows(2) {
            if w[0].out_len() != w[1].in_len() {
                return Err(Error::shape(
                    format!("layer input {}", w[0].out_len()),
                    w[1].in_len(),
                ));
            }
        }
        Ok(Self {
            prefix: prefix.into(),
            layers,
        })
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn in_len(&self) -> usize {
        self.layers[0].in_len()
    }

    pub fn out_len(&self) -> usize {
        self.layers[self.layers.len() - 1].out_len()
    }

    fn names(&self, i: usize) -> (String, String) {
        (format!("{}l{i}.w", self.prefix), format!("{}l{i}.b", self.prefix))
    }

    pub fn add_segments(&self, builder: &mut LayoutBuilder) {
        for (i, l) in self.layers.iter().enumerate() {
            let (w, b) = self.names(i);
            let (r, c) = l.weight_shape();
            builder.add(w, r, c);
            builder.add(b, 1, l.bias_len());
        }
    }

    /// Xavier-uniform weights and zero biases, written into `values`
    /// (laid out per `layout`).
    pub fn init<R: Rng>(&self, layout: &Layout, values: &mut [f64], rng: &mut R) -> Result<()> {
        for (i, l) in self.layers.iter().enumerate() {
            let (w, _) = self.names(i);
            let seg = layout.segment(&w)?;
            let (fan_in, fan_out) = l.fans();
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for v in &mut values[seg.range()] {
                *v = rng.gen_range(-limit..limit);
            }
        }
        Ok(())
    }

    /// Records the forward pass of `x` (`batch x in_len`).
    pub fn record(&self, tape: &mut Tape, src: ParamSource<'_>, x: Var) -> Result<Var> {
        let (_, cols) = tape.shape(x);
        if cols != self.in_len() {
            return Err(Error::shape(format!("rows of {}", self.in_len()), format!("rows of {cols}")));
        }
        let mut h = x;
        for (i, l) in self.layers.iter().enumerate() {
            let (wn, bn) = self.names(i);
            let ws = src.layout.segment(&wn)?;
            let bs = src.layout.segment(&bn)?;
            let w = tape.slice(src.var, ws.offset, ws.rows, ws.cols);
            let b = tape.slice(src.var, bs.offset, bs.rows, bs.cols);
            let (z, act) = match l {
                LayerSpec::Dense { act, .. } => {
                    let z = tape.matmul(h, w);
                    (tape.add_row(z, b), *act)
                }
                LayerSpec::Conv { geom, act } => (tape.conv2d(h, w, b, *geom), *act),
            };
            h = match act {
                Activation::Identity => z,
                Activation::Tanh => tape.tanh(z),
                Activation::Relu => tape.relu(z),
            };
        }
        Ok(h)
    }
}
