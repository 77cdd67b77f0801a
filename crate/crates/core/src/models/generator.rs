use std::sync::Arc;

use rand::Rng;

use super::image::{ImageBatch, ImageDims, ImageTensor, NoiseBudget, RawNoiseField};
use super::net::{Activation, LayerSpec, Net, ParamSource};
use crate::diffcore::{Layout, ParamVector, Tape, Var};
use crate::error::{Error, Result};

pub const GEN_PREFIX: &str = "gen.";

/// Image-to-image bottleneck `P -> hidden (tanh) -> P` producing the raw
/// noise field.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorModel {
    dims: ImageDims,
    hidden: usize,
    net: Net,
    params: ParamVector,
}

impl GeneratorModel {
    fn architecture(dims: ImageDims, hidden: usize) -> Result<(Net, Arc<Layout>)> {
        if hidden == 0 || dims.is_empty() {
            return Err(Error::BadConfig("generator needs nonzero hidden width and image size".into()));
        }
        let p = dims.len();
        let net = Net::new(
            GEN_PREFIX,
            vec![
                LayerSpec::Dense {
                    inputs: p,
                    outputs: hidden,
                    act: Activation::Tanh,
                },
                LayerSpec::Dense {
                    inputs: hidden,
                    outputs: p,
                    act: Activation::Identity,
                },
            ],
        )?;
        let mut b = Layout::builder();
        net.add_segments(&mut b);
        Ok((net, b.build()))
    }

    pub fn new<R: Rng>(dims: ImageDims, hidden: usize, rng: &mut R) -> Result<Self> {
        let (net, layout) = Self::architecture(dims, hidden)?;
        let mut values = vec![0.0; layout.len()];
        net.init(&layout, &mut values, rng)?;
        let params = ParamVector::new(values, layout)?;
        Ok(Self {
            dims,
            hidden,
            net,
            params,
        })
    }

    /// All weights and biases zero; emits an all-zero field.
    pub fn zeros(dims: ImageDims, hidden: usize) -> Result<Self> {
        let (net, layout) = Self::architecture(dims, hidden)?;
        Ok(Self {
            dims,
            hidden,
            net,
            params: ParamVector::zeros(layout),
        })
    }

    pub fn dims(&self) -> ImageDims {
        self.dims
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn net(&self) -> &Net {
        &self.net
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn layout(&self) -> &Arc<Layout> {
        self.params.layout()
    }

    /// Same architecture with different parameters.
    pub fn with_params(&self, params: ParamVector) -> Result<Self> {
        if **params.layout() != **self.layout() {
            return Err(Error::LayoutMismatch("generator parameters".into()));
        }
        Ok(Self {
            params,
            ..self.clone()
        })
    }

    fn check_dims(&self, dims: ImageDims) -> Result<()> {
        if dims == self.dims {
            Ok(())
        } else {
            Err(Error::shape(self.dims, dims))
        }
    }

    /// `f_g(x)` for a single image.
    pub fn forward(&self, x: &ImageTensor) -> Result<RawNoiseField> {
        self.check_dims(x.dims())?;
        let batch = ImageBatch::new(self.dims, x.data().to_vec())?;
        let data = self.forward_rows(&batch)?;
        Ok(RawNoiseField { dims: self.dims, data })
    }

    fn forward_rows(&self, images: &ImageBatch) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let p = tape.constant(self.params.values().to_vec(), 1, self.params.len());
        let x = tape.constant(images.data().to_vec(), images.len(), self.dims.len());
        let out = self.net.record(
            &mut tape,
            ParamSource {
                var: p,
                layout: self.layout(),
            },
            x,
        )?;
        Ok(tape.value(out).to_vec())
    }

    /// Perturbed versions of every image in the batch.
    pub fn perturb(&self, images: &ImageBatch, budget: NoiseBudget) -> Result<ImageBatch> {
        self.check_dims(images.dims())?;
        if images.is_empty() {
            return Ok(images.clone());
        }
        let field = self.forward_rows(images)?;
        let eps = budget.epsilon();
        let data = field
            .iter()
            .zip(images.data())
            .map(|(f, x)| perturb_pixel(*x, *f, eps))
            .collect();
        ImageBatch::new(self.dims, data)
    }
}

fn perturb_pixel(x: f64, field: f64, eps: f64) -> f64 {
    (field.tanh() * eps + x).clamp(0.0, 1.0)
}

/// `clamp(tanh(field) * eps + x, 0, 1)` pixel-wise.
pub fn apply_perturbation(x: &ImageTensor, field: &RawNoiseField, budget: NoiseBudget) -> Result<ImageTensor> {
    if field.dims != x.dims() || field.data.len() != x.dims().len() {
        return Err(Error::shape(x.dims(), field.dims));
    }
    let eps = budget.epsilon();
    let data = x
        .data()
        .iter()
        .zip(&field.data)
        .map(|(px, f)| perturb_pixel(*px, *f, eps))
        .collect();
    ImageTensor::new(x.dims(), data)
}

/// Records the perturbed batch `clamp(tanh(field) * eps + x, 0, 1)`; the
/// clamp passes gradients only where it did not clip.
pub fn record_perturbed(tape: &mut Tape, field: Var, x: Var, budget: NoiseBudget) -> Var {
    let t = tape.tanh(field);
    let s = tape.scale(t, budget.epsilon());
    let xu = tape.add(s, x);
    tape.clamp(xu, 0.0, 1.0)
}
