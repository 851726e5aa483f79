//! Randomness plumbing: every stochastic operation takes an explicit source.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{ensure_arg, Result};
use crate::tensor::ImageTensor;

/// Source of the Gaussian and uniform draws consumed by samplers.
///
/// Implemented for every [`rand::Rng`]; tests substitute deterministic
/// sources (zero noise, mirrored noise) to exercise algebraic properties.
pub trait NoiseSource {
    fn fill_standard_normal(&mut self, out: &mut [f64]);
    fn fill_uniform(&mut self, out: &mut [f64]);
}

impl<R: Rng + ?Sized> NoiseSource for R {
    fn fill_standard_normal(&mut self, out: &mut [f64]) {
        for v in out.iter_mut() {
            *v = self.sample(StandardNormal);
        }
    }

    fn fill_uniform(&mut self, out: &mut [f64]) {
        for v in out.iter_mut() {
            *v = self.random::<f64>();
        }
    }
}

/// Source that always yields zeros.
#[derive(Debug, Default, Clone, Copy)]
pub struct ZeroNoise;

impl NoiseSource for ZeroNoise {
    fn fill_standard_normal(&mut self, out: &mut [f64]) {
        out.fill(0.0);
    }

    fn fill_uniform(&mut self, out: &mut [f64]) {
        out.fill(0.0);
    }
}

pub fn standard_normal(shape: crate::Shape, noise: &mut (impl NoiseSource + ?Sized)) -> ImageTensor {
    let mut t = ImageTensor::zeros(shape);
    noise.fill_standard_normal(t.as_mut_slice());
    t
}

pub fn uniform(shape: crate::Shape, noise: &mut (impl NoiseSource + ?Sized)) -> ImageTensor {
    let mut t = ImageTensor::zeros(shape);
    noise.fill_uniform(t.as_mut_slice());
    t
}

/// Gaussian perturbation `x + sigma * z`.
pub fn perturb(x: &ImageTensor, sigma: f64, noise: &mut (impl NoiseSource + ?Sized)) -> Result<ImageTensor> {
    ensure_arg!(sigma >= 0.0 && sigma.is_finite(), "sigma must be non-negative (got {sigma})");
    if sigma == 0.0 {
        return Ok(x.clone());
    }
    let mut out = standard_normal(x.shape(), noise);
    for (o, &v) in out.as_mut_slice().iter_mut().zip(x.as_slice()) {
        *o = v + sigma * *o;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_sigma_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = uniform((4, 5, 3), &mut rng);
        let y = perturb(&x, 0.0, &mut rng).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn deterministic_given_seed() {
        let x = ImageTensor::filled((8, 8, 3), 0.25);
        let a = perturb(&x, 0.3, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let b = perturb(&x, 0.3, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn negative_sigma_rejected() {
        let x = ImageTensor::zeros((2, 2, 1));
        assert!(perturb(&x, -0.1, &mut ZeroNoise).is_err());
    }

    #[test]
    fn perturbation_moments() {
        let x = ImageTensor::zeros((1000, 1000, 1));
        let y = perturb(&x, 0.5, &mut ChaCha8Rng::seed_from_u64(2024)).unwrap();
        let n = y.len() as f64;
        let mean = y.mean();
        let var = y.as_slice().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        assert!(mean.abs() < 0.005 * 0.5 * 2.0, "mean {mean}");
        assert!((0.2475..=0.2525).contains(&var), "variance {var}");
    }
}
