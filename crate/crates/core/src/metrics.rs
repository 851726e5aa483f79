//! Image quality metrics: PSNR and windowed SSIM.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_arg, Result};
use crate::tensor::ImageTensor;

pub const PSNR_CAP_DB: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_STD: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// `20 log10(MAX(reference) / RMSE)`, capped at [`PSNR_CAP_DB`].
pub fn psnr(u: &ImageTensor, reference: &ImageTensor) -> Result<f64> {
    u.ensure_shape(reference.shape())?;
    let peak = reference.max();
    ensure_arg!(peak > 0.0, "reference maximum must be positive");
    let mse = u.sub(reference)?.norm_sq() / u.len() as f64;
    if mse < 1e-19 * peak * peak {
        return Ok(PSNR_CAP_DB);
    }
    Ok((20.0 * (peak / mse.sqrt()).log10()).min(PSNR_CAP_DB))
}

/// Normalised Gaussian window weights along one axis.
pub fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let centre = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - centre;
        *v = (-d * d / (2.0 * SSIM_STD * SSIM_STD)).exp();
    }
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    w
}

/// Weighted moments over every fully-contained window of one channel.
struct Moments {
    mean_u: Vec<f64>,
    mean_r: Vec<f64>,
    uu: Vec<f64>,
    rr: Vec<f64>,
    ur: Vec<f64>,
}

/// Separable valid-mode filtering of a `h x w` plane.
fn filter(plane: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            rows[r * ow + c] = k.iter().enumerate().map(|(j, kv)| kv * plane[r * w + c + j]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = k.iter().enumerate().map(|(i, kv)| kv * rows[(r + i) * ow + c]).sum();
        }
    }
    out
}

fn moments(u: &[f64], r: &[f64], h: usize, w: usize) -> Moments {
    let k = gaussian_window();
    let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> { u.iter().zip(r).map(|(a, b)| f(*a, *b)).collect() };
    Moments {
        mean_u: filter(u, h, w, &k),
        mean_r: filter(r, h, w, &k),
        uu: filter(&prod(&|a, _| a * a), h, w, &k),
        rr: filter(&prod(&|_, b| b * b), h, w, &k),
        ur: filter(&prod(&|a, b| a * b), h, w, &k),
    }
}

/// Index for one window from its weighted moments.
pub fn ssim_index(mean_u: f64, mean_r: f64, var_u: f64, var_r: f64, cov: f64) -> f64 {
    ((2.0 * mean_u * mean_r + SSIM_C1) * (2.0 * cov + SSIM_C2))
        / ((mean_u * mean_u + mean_r * mean_r + SSIM_C1) * (var_u + var_r + SSIM_C2))
}

/// Mean SSIM over all 11x11 windows lying inside the image, per channel,
/// averaged over channels. Intensities are taken to span `[0, 1]`.
pub fn ssim(u: &ImageTensor, reference: &ImageTensor) -> Result<f64> {
    u.ensure_shape(reference.shape())?;
    let (h, w, channels) = u.shape();
    ensure_arg!(
        h >= SSIM_WINDOW && w >= SSIM_WINDOW,
        "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
    );
    let mut total = 0.0;
    for ch in 0..channels {
        let a = u.channel(ch);
        let b = reference.channel(ch);
        let m = moments(a.as_slice(), b.as_slice(), h, w);
        let n = m.mean_u.len();
        let mut acc = 0.0;
        for i in 0..n {
            let (mu, mr) = (m.mean_u[i], m.mean_r[i]);
            acc += ssim_index(mu, mr, m.uu[i] - mu * mu, m.rr[i] - mr * mr, m.ur[i] - mu * mr);
        }
        total += acc / n as f64;
    }
    Ok(total / channels as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub psnr_db: f64,
    /// Absent when the image is smaller than the SSIM window.
    pub ssim: Option<f64>,
}

impl MetricReport {
    /// Metrics of `u` against `reference`, both clamped to `[0, 1]` first.
    pub fn compute(u: &ImageTensor, reference: &ImageTensor) -> Result<Self> {
        let (u, reference) = (u.clamped(), reference.clamped());
        let psnr_db = psnr(&u, &reference)?;
        let (h, w, _) = u.shape();
        let ssim = if h >= SSIM_WINDOW && w >= SSIM_WINDOW {
            Some(ssim(&u, &reference)?)
        } else {
            None
        };
        Ok(Self { psnr_db, ssim })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct double loop over every window position and offset.
    fn naive_ssim(u: &ImageTensor, r: &ImageTensor) -> f64 {
        let (h, w, c) = u.shape();
        let k = gaussian_window();
        let mut total = 0.0;
        for ch in 0..c {
            let mut acc = 0.0;
            let mut count = 0;
            for top in 0..=h - SSIM_WINDOW {
                for left in 0..=w - SSIM_WINDOW {
                    let (mut mu, mut mr) = (0.0, 0.0);
                    for i in 0..SSIM_WINDOW {
                        for j in 0..SSIM_WINDOW {
                            let wt = k[i] * k[j];
                            mu += wt * u.get(top + i, left + j, ch);
                            mr += wt * r.get(top + i, left + j, ch);
                        }
                    }
                    let (mut vu, mut vr, mut cv) = (0.0, 0.0, 0.0);
                    for i in 0..SSIM_WINDOW {
                        for j in 0..SSIM_WINDOW {
                            let wt = k[i] * k[j];
                            let a = u.get(top + i, left + j, ch) - mu;
                            let b = r.get(top + i, left + j, ch) - mr;
                            vu += wt * a * a;
                            vr += wt * b * b;
                            cv += wt * a * b;
                        }
                    }
                    acc += ((2.0 * mu * mr + SSIM_C1) * (2.0 * cv + SSIM_C2))
                        / ((mu * mu + mr * mr + SSIM_C1) * (vu + vr + SSIM_C2));
                    count += 1;
                }
            }
            total += acc / count as f64;
        }
        total / c as f64
    }

    #[test]
    fn psnr_examples() {
        let r = ImageTensor::filled((10, 10, 1), 1.0);
        assert_eq!(psnr(&r, &r).unwrap(), PSNR_CAP_DB);
        let u = r.map(|v| v - 0.1);
        assert!((psnr(&u, &r).unwrap() - 20.0).abs() < 1e-9);
        let u = r.map(|v| v - 0.01);
        assert!((psnr(&u, &r).unwrap() - 40.0).abs() < 1e-9);
        assert!(psnr(&u, &ImageTensor::zeros((10, 10, 1))).is_err());
        assert!(psnr(&u, &ImageTensor::filled((10, 10, 3), 1.0)).is_err());
    }

    #[test]
    fn psnr_drops_as_noise_grows() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = crate::noise::uniform((16, 16, 3), &mut rng);
        let z = crate::noise::standard_normal((16, 16, 3), &mut rng);
        let vals: Vec<f64> = [0.01, 0.05, 0.1]
            .iter()
            .map(|s| psnr(&r.zip_map(&z, |a, b| a + s * b).unwrap(), &r).unwrap())
            .collect();
        assert!(vals[0] > vals[1] && vals[1] > vals[2]);
    }

    #[test]
    fn ssim_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = crate::noise::uniform((16, 16, 3), &mut rng);
        assert_eq!(ssim(&r, &r).unwrap(), 1.0);
        for c in [0.0, 0.3, 1.0] {
            let k = ImageTensor::filled((12, 12, 1), c);
            assert!((ssim(&k, &k).unwrap() - 1.0).abs() < 1e-12);
        }
        let board = ImageTensor::from_fn((16, 16, 1), |r, c, _| ((r / 2 + c / 2) % 2) as f64);
        let inverted = board.map(|v| 1.0 - v);
        let s = ssim(&inverted, &board).unwrap();
        assert!(s < 0.1, "{s}");
        assert!((s - naive_ssim(&inverted, &board)).abs() < 1e-10);
        assert!(ssim(&ImageTensor::zeros((10, 20, 1)), &ImageTensor::zeros((10, 20, 1))).is_err());
    }

    #[test]
    fn window_is_normalised() {
        let k = gaussian_window();
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(k[0], k[10]);
    }

    #[test]
    fn report_skips_ssim_on_small_images() {
        let r = ImageTensor::filled((8, 8, 3), 0.5);
        let rep = MetricReport::compute(&r, &r).unwrap();
        assert_eq!(rep.psnr_db, PSNR_CAP_DB);
        assert_eq!(rep.ssim, None);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]

        #[test]
        fn ssim_matches_naive_and_is_symmetric(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = crate::noise::uniform((32, 32, 3), &mut rng);
            let b = crate::noise::uniform((32, 32, 3), &mut rng);
            let fast = ssim(&a, &b).unwrap();
            prop_assert!((fast - naive_ssim(&a, &b)).abs() < 1e-10);
            prop_assert!((fast - ssim(&b, &a).unwrap()).abs() < 1e-12);
            prop_assert!(fast <= 1.0);
        }
    }
}
