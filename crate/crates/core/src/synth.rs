//! Synthetic correlated-Gaussian images.
//!
//! Each image is `mean + luma + chroma_c`, where `luma` is one spatial field
//! shared by every channel and each `chroma_c` is an independent field of
//! its own. Both fields have separable AR(1) correlation `rho^|dr| rho^|dc|`.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_arg, Result};
use crate::noise::{standard_normal, NoiseSource};
use crate::tensor::{ImageTensor, Shape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelatedImageModel {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub mean: f64,
    pub rho: f64,
    pub luma_variance: f64,
    pub chroma_variance: f64,
}

impl CorrelatedImageModel {
    /// Single-field model (no per-channel component).
    pub fn ar1(shape: Shape, mean: f64, rho: f64, variance: f64) -> Self {
        Self {
            height: shape.0,
            width: shape.1,
            channels: shape.2,
            mean,
            rho,
            luma_variance: variance,
            chroma_variance: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure_arg!(
            self.height > 0 && self.width > 0 && self.channels > 0,
            "synthetic image dimensions must be positive"
        );
        ensure_arg!(
            (0.0..1.0).contains(&self.rho),
            "AR(1) coefficient must lie in [0, 1), got {}",
            self.rho
        );
        ensure_arg!(
            self.luma_variance >= 0.0 && self.chroma_variance >= 0.0,
            "variances must be non-negative"
        );
        ensure_arg!(
            self.luma_variance + self.chroma_variance > 0.0,
            "total variance must be positive"
        );
        Ok(())
    }

    pub fn shape(&self) -> Shape {
        (self.height, self.width, self.channels)
    }

    pub fn dim(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn mean_tensor(&self) -> ImageTensor {
        ImageTensor::filled(self.shape(), self.mean)
    }

    fn ar1_factor(&self, n: usize) -> DMatrix<f64> {
        let k = DMatrix::from_fn(n, n, |i, j| self.rho.powi((i as i32 - j as i32).abs()));
        k.cholesky().expect("AR(1) correlation is positive definite").l()
    }

    /// Dense covariance in tensor storage order (channel fastest).
    pub fn covariance(&self) -> DMatrix<f64> {
        let (h, w, c) = self.shape();
        let d = self.dim();
        DMatrix::from_fn(d, d, |i, j| {
            let (pi, ci) = (i / c, i % c);
            let (pj, cj) = (j / c, j % c);
            let (ri, coli) = (pi / w, pi % w);
            let (rj, colj) = (pj / w, pj % w);
            let _ = h;
            let spatial = self.rho.powi((ri as i32 - rj as i32).abs() + (coli as i32 - colj as i32).abs());
            let chroma = if ci == cj { self.chroma_variance } else { 0.0 };
            spatial * (self.luma_variance + chroma)
        })
    }

    fn field(&self, lr: &DMatrix<f64>, lc: &DMatrix<f64>, noise: &mut (impl NoiseSource + ?Sized)) -> DMatrix<f64> {
        let z = standard_normal((self.height, self.width, 1), noise);
        let z = DMatrix::from_row_slice(self.height, self.width, z.as_slice());
        lr * z * lc.transpose()
    }

    pub fn sample(&self, noise: &mut (impl NoiseSource + ?Sized)) -> Result<ImageTensor> {
        self.validate()?;
        let lr = self.ar1_factor(self.height);
        let lc = self.ar1_factor(self.width);
        let luma = self.field(&lr, &lc, noise);
        let (sl, sc) = (self.luma_variance.sqrt(), self.chroma_variance.sqrt());
        let mut out = ImageTensor::filled(self.shape(), self.mean);
        for ch in 0..self.channels {
            let chroma = if sc > 0.0 {
                Some(self.field(&lr, &lc, noise))
            } else {
                None
            };
            for r in 0..self.height {
                for c in 0..self.width {
                    let mut v = self.mean + sl * luma[(r, c)];
                    if let Some(f) = &chroma {
                        v += sc * f[(r, c)];
                    }
                    out.set(r, c, ch, v);
                }
            }
        }
        Ok(out)
    }

    pub fn sample_many(&self, n: usize, rng: &mut (impl Rng + ?Sized)) -> Result<Vec<ImageTensor>> {
        (0..n).map(|_| self.sample(rng)).collect()
    }
}
