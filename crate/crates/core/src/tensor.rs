//! Rank-3 image tensor shared by every stage of the pipeline.
//!
//! Storage is row-major over `(row, column, channel)`, so the channel index
//! varies fastest. Images, high-dimensional lifts, observations, scores and
//! noise draws all use this one type.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_arg, Error, Result};

/// `(height, width, channels)`.
pub type Shape = (usize, usize, usize);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        ensure_arg!(
            height > 0 && width > 0 && channels > 0,
            "tensor dimensions must be positive, got {height}x{width}x{channels}"
        );
        ensure_arg!(
            data.len() == height * width * channels,
            "data length {} does not match {height}x{width}x{channels}",
            data.len()
        );
        ensure_arg!(
            data.iter().all(|v| v.is_finite()),
            "tensor data contains non-finite values"
        );
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: Shape, value: f64) -> Self {
        let (h, w, c) = shape;
        assert!(h > 0 && w > 0 && c > 0, "tensor dimensions must be positive");
        Self {
            height: h,
            width: w,
            channels: c,
            data: vec![value; h * w * c],
        }
    }

    /// Builds a tensor by evaluating `f(row, col, channel)` for every entry.
    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let (h, w, c) = shape;
        let mut out = Self::zeros(shape);
        for r in 0..h {
            for col in 0..w {
                for ch in 0..c {
                    out.data[(r * w + col) * c + ch] = f(r, col, ch);
                }
            }
        }
        out
    }

    /// Internal constructor for callers that already guarantee the length.
    pub(crate) fn from_parts(shape: Shape, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), shape.0 * shape.1 * shape.2);
        Self {
            height: shape.0,
            width: shape.1,
            channels: shape.2,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> Shape {
        (self.height, self.width, self.channels)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize, ch: usize) -> usize {
        (row * self.width + col) * self.channels + ch
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.data[self.index(row, col, ch)]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, ch: usize, value: f64) {
        let i = self.index(row, col, ch);
        self.data[i] = value;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn ensure_shape(&self, expected: Shape) -> Result<()> {
        if self.shape() != expected {
            return Err(Error::ShapeMismatch {
                expected,
                actual: self.shape(),
            });
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_parts(self.shape(), self.data.iter().map(|&v| f(v)).collect())
    }

    /// Elementwise combination of two tensors of equal shape.
    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        other.ensure_shape(self.shape())?;
        Ok(Self::from_parts(
            self.shape(),
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, k: f64) -> Self {
        self.map(|v| v * k)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.len() as f64
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Clamps to `[0, 1]`, the export domain.
    pub fn clamped(&self) -> Self {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    /// Copies channel `ch` into a single-channel tensor.
    pub fn channel(&self, ch: usize) -> Self {
        assert!(ch < self.channels);
        let data = self.data.iter().skip(ch).step_by(self.channels).copied().collect();
        Self::from_parts((self.height, self.width, 1), data)
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        other.ensure_shape(self.shape())?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}
