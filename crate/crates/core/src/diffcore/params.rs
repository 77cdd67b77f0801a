//! Flat parameter and gradient vectors with a named segment table.

use std::sync::Arc;

use crate::error::{Error, Result};

/// A named, contiguous block of a flat parameter vector, viewed as a
/// row-major `rows x cols` matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Segment table covering a flat vector exactly, in offset order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Layout {
    segments: Vec<Segment>,
    len: usize,
}

impl Layout {
    pub fn builder() -> LayoutBuilder {
        LayoutBuilder::default()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn get(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }

    pub fn segment(&self, name: &str) -> Result<&Segment> {
        self.get(name)
            .ok_or_else(|| Error::LayoutMismatch(format!("no segment named `{name}`")))
    }

    /// Rebuilds a layout from an explicit segment list, checking that the
    /// segments tile `0..len` without gaps or overlaps.
    pub fn from_segments(segments: Vec<Segment>) -> Result<Self> {
        let mut next = 0;
        for s in &segments {
            if s.offset != next {
                return Err(Error::LayoutMismatch(format!(
                    "segment `{}` starts at {} but previous segment ended at {next}",
                    s.name, s.offset
                )));
            }
            next += s.len();
        }
        Ok(Self { segments, len: next })
    }
}

#[derive(Debug, Default)]
pub struct LayoutBuilder {
    segments: Vec<Segment>,
    len: usize,
}

impl LayoutBuilder {
    pub fn push(mut self, name: impl Into<String>, rows: usize, cols: usize) -> Self {
        self.add(name, rows, cols);
        self
    }

    pub fn add(&mut self, name: impl Into<String>, rows: usize, cols: usize) {
        let name = name.into();
        debug_assert!(
            self.segments.iter().all(|s| s.name != name),
            "duplicate segment {name}"
        );
        self.segments.push(Segment {
            name,
            offset: self.len,
            rows,
            cols,
        });
        self.len += rows * cols;
    }

    pub fn build(self) -> Arc<Layout> {
        Arc::new(Layout {
            segments: self.segments,
            len: self.len,
        })
    }
}

fn same_layout(a: &Arc<Layout>, b: &Arc<Layout>) -> bool {
    Arc::ptr_eq(a, b) || **a == **b
}

fn check_layout(a: &Arc<Layout>, b: &Arc<Layout>) -> Result<()> {
    if same_layout(a, b) {
        Ok(())
    } else {
        Err(Error::LayoutMismatch(format!(
            "vectors of length {} and {} have different segment tables",
            a.len(),
            b.len()
        )))
    }
}

/// Model parameters. All entries are finite.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Arc<Layout>,
}

impl ParamVector {
    pub fn new(values: Vec<f64>, layout: Arc<Layout>) -> Result<Self> {
        if values.len() != layout.len() {
            return Err(Error::LayoutMismatch(format!(
                "{} values for a layout of length {}",
                values.len(),
                layout.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteParam(i));
        }
        Ok(Self { values, layout })
    }

    pub fn zeros(layout: Arc<Layout>) -> Self {
        Self {
            values: vec![0.0; layout.len()],
            layout,
        }
    }

    /// Single-segment vector named `theta`, handy for scalar and toy losses.
    pub fn from_slice(values: &[f64]) -> Result<Self> {
        let layout = Layout::builder().push("theta", 1, values.len()).build();
        Self::new(values.to_vec(), layout)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn segment_values(&self, name: &str) -> Result<&[f64]> {
        let seg = self.layout.segment(name)?;
        Ok(&self.values[seg.range()])
    }

    pub fn segment_values_mut(&mut self, name: &str) -> Result<&mut [f64]> {
        let range = self.layout.segment(name)?.range();
        Ok(&mut self.values[range])
    }

    pub fn norm(&self) -> f64 {
        norm(&self.values)
    }

    /// Returns `self + scale * direction`.
    pub fn stepped(&self, direction: &GradVector, scale: f64) -> Result<Self> {
        check_layout(&self.layout, &direction.layout)?;
        let values: Vec<f64> = self
            .values
            .iter()
            .zip(&direction.values)
            .map(|(p, d)| p + scale * d)
            .collect();
        Self::new(values, self.layout.clone())
    }

    /// Returns `self + scale * direction` for a raw direction of matching length.
    pub fn offset_by(&self, direction: &[f64], scale: f64) -> Result<Self> {
        if direction.len() != self.len() {
            return Err(Error::LayoutMismatch(format!(
                "direction of length {} for {} parameters",
                direction.len(),
                self.len()
            )));
        }
        let values = self
            .values
            .iter()
            .zip(direction)
            .map(|(p, d)| p + scale * d)
            .collect();
        Self::new(values, self.layout.clone())
    }

    /// Concatenates several vectors; segment names get `prefix` prepended.
    pub fn concat(parts: &[(&str, &ParamVector)]) -> Result<Self> {
        let mut builder = Layout::builder();
        let mut values = Vec::new();
        for (prefix, p) in parts {
            for s in p.layout.segments() {
                builder.add(format!("{prefix}{}", s.name), s.rows, s.cols);
            }
            values.extend_from_slice(&p.values);
        }
        Self::new(values, builder.build())
    }

    /// Extracts the segments starting with `prefix` (prefix stripped) into a
    /// standalone vector. Inverse of [`ParamVector::concat`].
    pub fn extract(&self, prefix: &str) -> Result<Self> {
        let mut builder = Layout::builder();
        let mut values = Vec::new();
        for s in self.layout.segments() {
            if let Some(rest) = s.name.strip_prefix(prefix) {
                builder.add(rest, s.rows, s.cols);
                values.extend_from_slice(&self.values[s.range()]);
            }
        }
        Self::new(values, builder.build())
    }
}

/// Gradient-valued quantity sharing the layout of the parameters it
/// differentiates.
#[derive(Debug, Clone, PartialEq)]
pub struct GradVector {
    values: Vec<f64>,
    layout: Arc<Layout>,
}

impl GradVector {
    pub fn new(values: Vec<f64>, layout: Arc<Layout>) -> Result<Self> {
        if values.len() != layout.len() {
            return Err(Error::LayoutMismatch(format!(
                "{} gradient entries for a layout of length {}",
                values.len(),
                layout.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteParam(i));
        }
        Ok(Self { values, layout })
    }

    pub fn zeros(layout: Arc<Layout>) -> Self {
        Self {
            values: vec![0.0; layout.len()],
            layout,
        }
    }

    pub fn zeros_like(params: &ParamVector) -> Self {
        Self::zeros(params.layout.clone())
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn norm(&self) -> f64 {
        norm(&self.values)
    }

    pub fn dot(&self, other: &GradVector) -> Result<f64> {
        check_layout(&self.layout, &other.layout)?;
        Ok(dot(&self.values, &other.values))
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            values: self.values.iter().map(|v| v * c).collect(),
            layout: self.layout.clone(),
        }
    }

    /// `self += c * other`
    pub fn axpy(&mut self, c: f64, other: &GradVector) -> Result<()> {
        check_layout(&self.layout, &other.layout)?;
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += c * b;
        }
        Ok(())
    }

    pub fn sum(parts: &[&GradVector]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::LayoutMismatch("empty gradient sum".into()))?;
        let mut acc = GradVector::zeros(first.layout.clone());
        for p in parts {
            acc.axpy(1.0, p)?;
        }
        Ok(acc)
    }

    pub fn same_layout_as(&self, params: &ParamVector) -> bool {
        same_layout(&self.layout, &params.layout)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
