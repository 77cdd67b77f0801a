//! Procedural shape scenes and the label renderers derived from them.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::models::{ImageDims, ImageTensor};

pub const SHAPE_CLASSES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Shape {
    Square,
    Disk,
    Triangle,
    Cross,
}

impl Shape {
    pub const ALL: [Shape; SHAPE_CLASSES] = [Shape::Square, Shape::Disk, Shape::Triangle, Shape::Cross];

    pub fn index(self) -> usize {
        self as usize
    }

    fn contains(self, dx: f64, dy: f64, r: f64) -> bool {
        match self {
            Shape::Square => dx.abs() <= r * 0.85 && dy.abs() <= r * 0.85,
            Shape::Disk => dx * dx + dy * dy <= r * r,
            // apex up, base at dy = +r
            Shape::Triangle => dy >= -r && dy <= r && dx.abs() <= (dy + r) * 0.5,
            Shape::Cross => {
                let arm = r * 0.34;
                (dx.abs() <= arm && dy.abs() <= r) || (dy.abs() <= arm && dx.abs() <= r)
            }
        }
    }
}

/// Everything needed to re-render an image and all of its labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub shape: Shape,
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
    pub color: [f64; 3],
    pub background: [f64; 3],
    pub texture_amp: f64,
    pub texture_freq: (f64, f64),
    pub texture_phase: f64,
}

pub const MIN_RADIUS_FRAC: f64 = 0.2;
pub const MAX_RADIUS_FRAC: f64 = 0.4;

impl Scene {
    /// Scene `index` of the suite seeded with `seed`; pure in both.
    pub fn generate(seed: u64, index: u64, dims: ImageDims) -> Scene {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index);
        let side = dims.height.min(dims.width) as f64;
        let radius = rng.gen_range(MIN_RADIUS_FRAC * side..MAX_RADIUS_FRAC * side);
        let margin = radius + 0.5;
        let cx = rng.gen_range(margin..dims.width as f64 - margin);
        let cy = rng.gen_range(margin..dims.height as f64 - margin);
        let shape = Shape::ALL[rng.gen_range(0..SHAPE_CLASSES)];
        let mut color = [0.0; 3];
        let mut background = [0.0; 3];
        for c in 0..3 {
            color[c] = rng.gen_range(0.55..0.95);
            background[c] = rng.gen_range(0.05..0.35);
        }
        Scene {
            shape,
            cx,
            cy,
            radius,
            color,
            background,
            texture_amp: rng.gen_range(0.0..0.08),
            texture_freq: (rng.gen_range(0.3..1.5), rng.gen_range(0.3..1.5)),
            texture_phase: rng.gen_range(0.0..std::f64::consts::TAU),
        }
    }

    fn offset(&self, row: usize, col: usize) -> (f64, f64) {
        (col as f64 + 0.5 - self.cx, row as f64 + 0.5 - self.cy)
    }

    pub fn mask(&self, dims: ImageDims) -> Vec<bool> {
        let mut out = Vec::with_capacity(dims.spatial());
        for row in 0..dims.height {
            for col in 0..dims.width {
                let (dx, dy) = self.offset(row, col);
                out.push(self.shape.contains(dx, dy, self.radius));
            }
        }
        out
    }

    pub fn render(&self, dims: ImageDims) -> ImageTensor {
        let mask = self.mask(dims);
        let mut data = Vec::with_capacity(dims.len());
        for c in 0..dims.channels {
            let k = c % 3;
            for row in 0..dims.height {
                for col in 0..dims.width {
                    let v = if mask[row * dims.width + col] {
                        self.color[k]
                    } else {
                        let (fx, fy) = self.texture_freq;
                        let wave = (fx * col as f64 + fy * row as f64 + self.texture_phase).sin();
                        self.background[k] + self.texture_amp * wave
                    };
                    data.push(v.clamp(0.0, 1.0));
                }
            }
        }
        ImageTensor::new(dims, data).expect("rendered values are clamped")
    }

    pub fn size_class(&self, dims: ImageDims) -> usize {
        let side = dims.height.min(dims.width) as f64;
        let mid = 0.5 * (MIN_RADIUS_FRAC + MAX_RADIUS_FRAC) * side;
        usize::from(self.radius >= mid)
    }

    pub fn quadrant(&self, dims: ImageDims) -> usize {
        let right = self.cx >= dims.width as f64 / 2.0;
        let bottom = self.cy >= dims.height as f64 / 2.0;
        usize::from(right) + 2 * usize::from(bottom)
    }

    /// 1 on mask pixels with a 4-neighbour outside the mask (or the frame).
    pub fn edge_mask(&self, dims: ImageDims) -> Vec<usize> {
        let m = self.mask(dims);
        let (h, w) = (dims.height, dims.width);
        let inside = |r: isize, c: isize| {
            r >= 0 && c >= 0 && (r as usize) < h && (c as usize) < w && m[r as usize * w + c as usize]
        };
        let mut out = vec![0; h * w];
        for r in 0..h as isize {
            for c in 0..w as isize {
                if inside(r, c)
                    && !(inside(r - 1, c) && inside(r + 1, c) && inside(r, c - 1) && inside(r, c + 1))
                {
                    out[r as usize * w + c as usize] = 1;
                }
            }
        }
        out
    }

    /// Mask centroid `(x, y)` normalized to `[0, 1]`.
    pub fn centroid(&self, dims: ImageDims) -> [f64; 2] {
        let m = self.mask(dims);
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
        for (i, &on) in m.iter().enumerate() {
            if on {
                sx += (i % dims.width) as f64 + 0.5;
                sy += (i / dims.width) as f64 + 0.5;
                n += 1.0;
            }
        }
        if n == 0.0 {
            return [0.5, 0.5];
        }
        [sx / n / dims.width as f64, sy / n / dims.height as f64]
    }

    /// Foreground mask smoothed by two passes of a 3x3 box filter.
    pub fn occupancy(&self, dims: ImageDims) -> Vec<f64> {
        let mut field: Vec<f64> = self.mask(dims).iter().map(|&b| f64::from(u8::from(b))).collect();
        for _ in 0..2 {
            field = box_blur(&field, dims.height, dims.width);
        }
        field
    }

    /// Shape radius normalized to `[0, 1]` over the sampling range.
    pub fn extent(&self, dims: ImageDims) -> f64 {
        let side = dims.height.min(dims.width) as f64;
        (self.radius / side - MIN_RADIUS_FRAC) / (MAX_RADIUS_FRAC - MIN_RADIUS_FRAC)
    }
}

fn box_blur(src: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let (mut s, mut n) = (0.0, 0.0);
            for dr in -1isize..=1 {
                for dc in -1isize..=1 {
                    let (rr, cc) = (r as isize + dr, c as isize + dc);
                    if rr >= 0 && cc >= 0 && (rr as usize) < h && (cc as usize) < w {
                        s += src[rr as usize * w + cc as usize];
                        n += 1.0;
                    }
                }
            }
            out[r * w + c] = s / n;
        }
    }
    out
}
