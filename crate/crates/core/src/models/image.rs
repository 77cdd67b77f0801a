use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageDims {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageDims {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    /// Values per image (`channels * height * width`).
    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Pixels per plane (`height * width`).
    pub fn spatial(&self) -> usize {
        self.height * self.width
    }
}

impl std::fmt::Display for ImageDims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

/// Channel-major raster with every value in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    dims: ImageDims,
    data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(dims: ImageDims, data: Vec<f64>) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(Error::shape(dims, format!("{} values", data.len())));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Validation(format!("pixel value {v} outside [0,1]")));
        }
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> ImageDims {
        self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn max_abs_diff(&self, other: &ImageTensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Unbounded generator output with an image's shape (pre-tanh logits).
#[derive(Debug, Clone, PartialEq)]
pub struct RawNoiseField {
    pub dims: ImageDims,
    pub data: Vec<f64>,
}

/// Maximum per-pixel perturbation magnitude, in pixel-intensity units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseBudget(f64);

impl NoiseBudget {
    pub fn new(epsilon: f64) -> Result<Self> {
        if epsilon > 0.0 && epsilon <= 1.0 {
            Ok(Self(epsilon))
        } else {
            Err(Error::Validation(format!("epsilon must lie in (0, 1], got {epsilon}")))
        }
    }

    pub fn epsilon(self) -> f64 {
        self.0
    }
}

impl Default for NoiseBudget {
    fn default() -> Self {
        Self(8.0 / 255.0)
    }
}

/// A stack of images stored as a `count x dims.len()` row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch {
    dims: ImageDims,
    data: Vec<f64>,
}

impl ImageBatch {
    pub fn new(dims: ImageDims, data: Vec<f64>) -> Result<Self> {
        if dims.is_empty() || data.len() % dims.len() != 0 {
            return Err(Error::shape(
                format!("multiple of {}", dims.len()),
                format!("{} values", data.len()),
            ));
        }
        Ok(Self { dims, data })
    }

    pub fn from_images(dims: ImageDims, images: &[ImageTensor]) -> Result<Self> {
        let mut data = Vec::with_capacity(images.len() * dims.len());
        for img in images {
            if img.dims != dims {
                return Err(Error::shape(dims, img.dims));
            }
            data.extend_from_slice(&img.data);
        }
        Self::new(dims, data)
    }

    pub fn dims(&self) -> ImageDims {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dims.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.dims.len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn image(&self, i: usize) -> ImageTensor {
        ImageTensor {
            dims: self.dims,
            data: self.row(i).to_vec(),
        }
    }

    pub fn gather(&self, indices: &[usize]) -> ImageBatch {
        let mut data = Vec::with_capacity(indices.len() * self.dims.len());
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        ImageBatch {
            dims: self.dims,
            data,
        }
    }

    pub fn max_abs_diff(&self, other: &ImageBatch) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}
