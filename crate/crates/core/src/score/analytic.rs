//! Closed-form scores of Gaussian-smoothed Gaussians and Gaussian mixtures.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::degradation::DegradationOp;
use crate::error::{ensure_arg, Result};
use crate::tensor::{ImageTensor, Shape};
use crate::transforms::HighDimTransform;

#[derive(Debug)]
pub enum Covariance {
    /// `variance * I`
    Isotropic(f64),
    /// Dense covariance; `Sigma + sigma^2 I` factorisations are cached per
    /// noise level.
    Full {
        matrix: DMatrix<f64>,
        cache: Mutex<HashMap<u64, Arc<Cholesky<f64, Dyn>>>>,
    },
}

impl Clone for Covariance {
    fn clone(&self) -> Self {
        match self {
            Covariance::Isotropic(v) => Covariance::Isotropic(*v),
            Covariance::Full { matrix, .. } => Covariance::Full {
                matrix: matrix.clone(),
                cache: Mutex::new(HashMap::new()),
            },
        }
    }
}

/// Score of `N(mean, Sigma)` smoothed by `N(0, sigma^2 I)`.
#[derive(Debug, Clone)]
pub struct GaussianScore {
    mean: ImageTensor,
    cov: Covariance,
}

impl GaussianScore {
    pub fn isotropic(mean: ImageTensor, variance: f64) -> Result<Self> {
        ensure_arg!(variance > 0.0 && variance.is_finite(), "variance must be positive (got {variance})");
        Ok(Self {
            mean,
            cov: Covariance::Isotropic(variance),
        })
    }

    /// `covariance` must be symmetric positive semi-definite and indexed in
    /// tensor storage order.
    pub fn full(mean: ImageTensor, covariance: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        ensure_arg!(
            covariance.nrows() == d && covariance.ncols() == d,
            "covariance is {}x{}, expected {d}x{d}",
            covariance.nrows(),
            covariance.ncols()
        );
        let asym = (&covariance - covariance.transpose()).abs().max();
        ensure_arg!(asym <= 1e-12 * covariance.abs().max().max(1.0), "covariance must be symmetric");
        Ok(Self {
            mean,
            cov: Covariance::Full {
                matrix: covariance,
                cache: Mutex::new(HashMap::new()),
            },
        })
    }

    pub fn mean(&self) -> &ImageTensor {
        &self.mean
    }

    pub fn covariance(&self) -> &Covariance {
        &self.cov
    }

    pub fn shape(&self) -> Shape {
        self.mean.shape()
    }

    pub fn dense_covariance(&self) -> DMatrix<f64> {
        match &self.cov {
            Covariance::Isotropic(v) => DMatrix::identity(self.mean.len(), self.mean.len()) * *v,
            Covariance::Full { matrix, .. } => matrix.clone(),
        }
    }

    fn factor(&self, sigma: f64) -> Result<Arc<Cholesky<f64, Dyn>>> {
        let Covariance::Full { matrix, cache } = &self.cov else {
            unreachable!("factor is only used for dense covariances");
        };
        let key = sigma.to_bits();
        if let Some(f) = cache.lock().unwrap().get(&key) {
            return Ok(Arc::clone(f));
        }
        let d = matrix.nrows();
        let shifted = matrix + DMatrix::identity(d, d) * (sigma * sigma);
        let chol = shifted
            .cholesky()
            .ok_or_else(|| crate::Error::invalid("covariance + sigma^2 I is not positive definite"))?;
        let chol = Arc::new(chol);
        cache.lock().unwrap().insert(key, Arc::clone(&chol));
        Ok(chol)
    }

    pub fn evaluate(&self, x: &ImageTensor, sigma: f64) -> Result<ImageTensor> {
        x.ensure_shape(self.mean.shape())?;
        match &self.cov {
            Covariance::Isotropic(v) => {
                let k = -1.0 / (v + sigma * sigma);
                x.zip_map(&self.mean, |a, m| k * (a - m))
            }
            Covariance::Full { .. } => {
                let chol = self.factor(sigma)?;
                let r = DVector::from_iterator(
                    x.len(),
                    x.as_slice().iter().zip(self.mean.as_slice()).map(|(a, m)| a - m),
                );
                let sol = chol.solve(&r);
                Ok(ImageTensor::from_parts(x.shape(), sol.iter().map(|v| -v).collect()))
            }
        }
    }

    /// Posterior mean `E[x | x_obs = y_obs]` for a noiseless mask.
    pub fn conditional_mean(&self, y: &ImageTensor, op: &DegradationOp) -> Result<ImageTensor> {
        y.ensure_shape(self.mean.shape())?;
        op.mask().ensure_shape(self.mean.shape())?;
        let d = y.len();
        let obs: Vec<usize> = (0..d).filter(|&i| op.observed(i)).collect();
        let miss: Vec<usize> = (0..d).filter(|&i| !op.observed(i)).collect();
        ensure_arg!(!obs.is_empty(), "the mask observes nothing");
        let cov = self.dense_covariance();
        let mu = self.mean.as_slice();
        let c_oo = DMatrix::from_fn(obs.len(), obs.len(), |a, b| cov[(obs[a], obs[b])]);
        let c_mo = DMatrix::from_fn(miss.len(), obs.len(), |a, b| cov[(miss[a], obs[b])]);
        let r = DVector::from_iterator(obs.len(), obs.iter().map(|&i| y.as_slice()[i] - mu[i]));
        let w = c_oo
            .cholesky()
            .ok_or_else(|| crate::Error::invalid("observed covariance block is singular"))?
            .solve(&r);
        let fill = c_mo * w;
        let mut out = y.clone();
        for (k, &i) in miss.iter().enumerate() {
            out.as_mut_slice()[i] = mu[i] + fill[k];
        }
        Ok(out)
    }

    /// Distribution of `t.forward(x)` for `x` drawn from this Gaussian:
    /// mean `H mu`, covariance `H Sigma H^T`. For `Copy` the result is a
    /// degenerate Gaussian whose smoothed score is still well defined.
    pub fn lifted(&self, t: HighDimTransform) -> Result<Self> {
        if t == HighDimTransform::Identity {
            return Ok(self.clone());
        }
        let shape = self.mean.shape();
        let d = self.mean.len();
        let mean = t.forward(&self.mean)?;
        let big = mean.len();
        let mut h = DMatrix::<f64>::zeros(big, d);
        for j in 0..d {
            let mut e = ImageTensor::zeros(shape);
            e.as_mut_slice()[j] = 1.0;
            let col = t.forward(&e)?;
            h.set_column(j, &DVector::from_column_slice(col.as_slice()));
        }
        let cov = &h * self.dense_covariance() * h.transpose();
        let cov = (&cov + cov.transpose()) * 0.5;
        Self::full(mean, cov)
    }
}

#[derive(Debug, Clone)]
pub struct GmmComponent {
    pub weight: f64,
    pub mean: ImageTensor,
    pub variance: f64,
}

/// Score of an isotropic Gaussian mixture smoothed by `N(0, sigma^2 I)`.
#[derive(Debug, Clone)]
pub struct GmmScore {
    components: Vec<GmmComponent>,
}

impl GmmScore {
    pub fn new(components: Vec<GmmComponent>) -> Result<Self> {
        ensure_arg!(!components.is_empty(), "a mixture needs at least one component");
        let shape = components[0].mean.shape();
        for c in &components {
            c.mean.ensure_shape(shape)?;
            ensure_arg!(c.weight > 0.0, "mixture weights must be positive");
            ensure_arg!(c.variance > 0.0, "component variances must be positive");
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        ensure_arg!(
            (total - 1.0).abs() <= 1e-12,
            "mixture weights must sum to 1 (sum = {total})"
        );
        Ok(Self { components })
    }

    pub fn components(&self) -> &[GmmComponent] {
        &self.components
    }

    pub fn shape(&self) -> Shape {
        self.components[0].mean.shape()
    }

    /// Posterior component probabilities under the smoothed mixture.
    pub fn responsibilities(&self, x: &ImageTensor, sigma: f64) -> Result<Vec<f64>> {
        x.ensure_shape(self.shape())?;
        let d = x.len() as f64;
        let logits: Vec<f64> = self
            .components
            .iter()
            .map(|c| {
                let v = c.variance + sigma * sigma;
                let dist: f64 = x
                    .as_slice()
                    .iter()
                    .zip(c.mean.as_slice())
                    .map(|(a, m)| (a - m) * (a - m))
                    .sum();
                c.weight.ln() - 0.5 * d * v.ln() - dist / (2.0 * v)
            })
            .collect();
        let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
        let z: f64 = exps.iter().sum();
        Ok(exps.into_iter().map(|e| e / z).collect())
    }

    pub fn evaluate(&self, x: &ImageTensor, sigma: f64) -> Result<ImageTensor> {
        let gammas = self.responsibilities(x, sigma)?;
        let mut out = ImageTensor::zeros(x.shape());
        for (c, g) in self.components.iter().zip(gammas) {
            let k = -g / (c.variance + sigma * sigma);
            for ((o, a), m) in out.as_mut_slice().iter_mut().zip(x.as_slice()).zip(c.mean.as_slice()) {
                *o += k * (a - m);
            }
        }
        Ok(out)
    }
}
