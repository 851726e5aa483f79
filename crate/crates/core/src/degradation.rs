//! Binary degradation operators `y = M x + e` and the closed-form
//! data-fidelity update used between Langevin steps.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_arg, Error, Result};
use crate::io;
use crate::noise::NoiseSource;
use crate::tensor::{ImageTensor, Shape};
use crate::transforms::HighDimTransform;

/// Hard-projection limit for the data-fidelity weight.
pub const HARD_PROJECTION_LAMBDA: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskKind {
    Bayer,
    Block,
    Random,
    File,
    /// Every entry observed.
    Full,
}

impl MaskKind {
    pub fn name(self) -> &'static str {
        match self {
            MaskKind::Bayer => "bayer",
            MaskKind::Block => "block",
            MaskKind::Random => "random",
            MaskKind::File => "file",
            MaskKind::Full => "full",
        }
    }
}

impl fmt::Display for MaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bayer" => Ok(MaskKind::Bayer),
            "block" => Ok(MaskKind::Block),
            "random" => Ok(MaskKind::Random),
            "file" => Ok(MaskKind::File),
            "full" | "none" => Ok(MaskKind::Full),
            other => Err(Error::invalid(format!("unknown mask kind '{other}'"))),
        }
    }
}

/// Diagonal binary degradation `M` with optional observation noise.
#[derive(Debug, Clone, PartialEq)]
pub struct DegradationOp {
    mask: ImageTensor,
    kind: MaskKind,
    noise_std: f64,
}

impl DegradationOp {
    /// Wraps an explicit mask; every entry must be exactly 0 or 1.
    pub fn from_mask(mask: ImageTensor, kind: MaskKind) -> Result<Self> {
        ensure_arg!(
            mask.as_slice().iter().all(|&v| v == 0.0 || v == 1.0),
            "mask entries must be exactly 0 or 1"
        );
        Ok(Self {
            mask,
            kind,
            noise_std: 0.0,
        })
    }

    pub fn full(shape: Shape) -> Self {
        Self {
            mask: ImageTensor::filled(shape, 1.0),
            kind: MaskKind::Full,
            noise_std: 0.0,
        }
    }

    pub fn with_noise(mut self, noise_std: f64) -> Result<Self> {
        ensure_arg!(
            noise_std >= 0.0 && noise_std.is_finite(),
            "observation noise must be non-negative (got {noise_std})"
        );
        self.noise_std = noise_std;
        Ok(self)
    }

    pub fn mask(&self) -> &ImageTensor {
        &self.mask
    }

    pub fn kind(&self) -> MaskKind {
        self.kind
    }

    pub fn noise_std(&self) -> f64 {
        self.noise_std
    }

    pub fn shape(&self) -> Shape {
        self.mask.shape()
    }

    #[inline]
    pub fn observed(&self, i: usize) -> bool {
        self.mask.as_slice()[i] != 0.0
    }

    pub fn observed_count(&self) -> usize {
        self.mask.as_slice().iter().filter(|&&v| v != 0.0).count()
    }

    /// `y = M x + e`; unobserved entries are exactly zero.
    pub fn apply(&self, x: &ImageTensor, noise: &mut (impl NoiseSource + ?Sized)) -> Result<ImageTensor> {
        x.ensure_shape(self.shape())?;
        let mut y = x.zip_map(&self.mask, |v, m| v * m)?;
        if self.noise_std > 0.0 {
            let mut z = vec![0.0; y.len()];
            noise.fill_standard_normal(&mut z);
            for (i, v) in y.as_mut_slice().iter_mut().enumerate() {
                if self.mask.as_slice()[i] != 0.0 {
                    *v += self.noise_std * z[i];
                }
            }
        }
        Ok(y)
    }
}

/// RGGB colour filter array over a 3-channel image.
pub fn bayer_mask(height: usize, width: usize) -> Result<DegradationOp> {
    ensure_arg!(
        height > 0 && width > 0 && height.is_multiple_of(2) && width.is_multiple_of(2),
        "Bayer mask needs positive even dimensions, got {height}x{width}"
    );
    let mask = ImageTensor::from_fn((height, width, 3), |r, c, ch| {
        let keep = match (r % 2, c % 2) {
            (0, 0) => 0,
            (1, 1) => 2,
            _ => 1,
        };
        if ch == keep {
            1.0
        } else {
            0.0
        }
    });
    Ok(DegradationOp {
        mask,
        kind: MaskKind::Bayer,
        noise_std: 0.0,
    })
}

/// Keeps each pixel (all channels together) with probability `keep_fraction`.
pub fn random_mask(
    height: usize,
    width: usize,
    channels: usize,
    keep_fraction: f64,
    rng: &mut (impl Rng + ?Sized),
) -> Result<DegradationOp> {
    ensure_arg!(
        keep_fraction > 0.0 && keep_fraction <= 1.0,
        "keep fraction must lie in (0, 1], got {keep_fraction}"
    );
    ensure_arg!(height > 0 && width > 0 && channels > 0, "mask dimensions must be positive");
    let mut mask = ImageTensor::zeros((height, width, channels));
    for r in 0..height {
        for c in 0..width {
            let keep = rng.random::<f64>() < keep_fraction;
            if keep {
                for ch in 0..channels {
                    mask.set(r, c, ch, 1.0);
                }
            }
        }
    }
    Ok(DegradationOp {
        mask,
        kind: MaskKind::Random,
        noise_std: 0.0,
    })
}

/// Block geometry `(top, left, rows, cols)` for a centred hole.
///
/// Sides are `floor(sqrt(coverage) * H)` by `floor(sqrt(coverage) * W)`,
/// capped at `H - 2` / `W - 2` so the image border (and all four corners)
/// stays observed.
pub fn block_geometry(height: usize, width: usize, coverage: f64) -> (usize, usize, usize, usize) {
    let s = coverage.sqrt();
    let rows = ((s * height as f64).floor() as usize).min(height.saturating_sub(2));
    let cols = ((s * width as f64).floor() as usize).min(width.saturating_sub(2));
    ((height - rows) / 2, (width - cols) / 2, rows, cols)
}

/// Zeroes a centred rectangle covering about `coverage` of the image.
pub fn block_mask(height: usize, width: usize, channels: usize, coverage: f64) -> Result<DegradationOp> {
    ensure_arg!(
        coverage > 0.0 && coverage < 1.0,
        "block coverage must lie in (0, 1), got {coverage}"
    );
    ensure_arg!(height > 0 && width > 0 && channels > 0, "mask dimensions must be positive");
    let (top, left, rows, cols) = block_geometry(height, width, coverage);
    let mask = ImageTensor::from_fn((height, width, channels), |r, c, _| {
        let inside = (top..top + rows).contains(&r) && (left..left + cols).contains(&c);
        if inside {
            0.0
        } else {
            1.0
        }
    });
    Ok(DegradationOp {
        mask,
        kind: MaskKind::Block,
        noise_std: 0.0,
    })
}

/// Reads a PNG mask; any nonzero sample marks the pixel as observed.
pub fn load_mask(path: impl AsRef<Path>, channels: usize) -> Result<DegradationOp> {
    ensure_arg!(channels > 0, "mask channel count must be positive");
    let (h, w, keep) = io::load_binary_png(path)?;
    let mut mask = ImageTensor::zeros((h, w, channels));
    for (p, &k) in keep.iter().enumerate() {
        if k {
            mask.as_mut_slice()[p * channels..(p + 1) * channels].fill(1.0);
        }
    }
    Ok(DegradationOp {
        mask,
        kind: MaskKind::File,
        noise_std: 0.0,
    })
}

/// Loads a mask and checks it against the shape of the target images.
pub fn load_mask_for(path: impl AsRef<Path>, shape: Shape) -> Result<DegradationOp> {
    let op = load_mask(path, shape.2)?;
    op.mask.ensure_shape(shape)?;
    Ok(op)
}

pub fn apply(op: &DegradationOp, x: &ImageTensor, noise: &mut (impl NoiseSource + ?Sized)) -> Result<ImageTensor> {
    op.apply(x, noise)
}

/// Closed-form minimiser of `lambda ||y - M x||^2 + ||x - H^-1(X)||^2` for
/// a binary diagonal `M`.
///
/// Observed entries become `(lambda y + h) / (lambda + 1)`; unobserved
/// entries keep `h = H^-1(X)`.
pub fn data_fidelity_update(
    lifted: &ImageTensor,
    y: &ImageTensor,
    op: &DegradationOp,
    lambda: f64,
    t: HighDimTransform,
) -> Result<ImageTensor> {
    ensure_arg!(
        lambda >= 0.0 && lambda.is_finite(),
        "data-fidelity weight must be non-negative (got {lambda})"
    );
    y.ensure_shape(op.shape())?;
    let mut h = t.inverse(lifted)?;
    h.ensure_shape(op.shape())?;
    let denom = lambda + 1.0;
    for ((v, &obs), &m) in h
        .as_mut_slice()
        .iter_mut()
        .zip(y.as_slice())
        .zip(op.mask.as_slice())
    {
        if m != 0.0 {
            *v = (lambda * obs + *v) / denom;
        }
    }
    Ok(h)
}

/// Fills unobserved entries channel by channel with a normalised 3x3
/// bilinear kernel over observed neighbours; observed entries pass through.
///
/// Under an RGGB mask this is classic bilinear demosaicking. Pixels with no
/// observed neighbour in a channel stay at zero.
pub fn bilinear_fill(y: &ImageTensor, op: &DegradationOp) -> Result<ImageTensor> {
    y.ensure_shape(op.shape())?;
    const K: [[f64; 3]; 3] = [[1.0, 2.0, 1.0], [2.0, 4.0, 2.0], [1.0, 2.0, 1.0]];
    let (h, w, c) = y.shape();
    let mut out = y.clone();
    for r in 0..h {
        for col in 0..w {
            for ch in 0..c {
                if op.mask.get(r, col, ch) != 0.0 {
                    continue;
                }
                let (mut num, mut den) = (0.0, 0.0);
                for (dr, krow) in K.iter().enumerate() {
                    for (dc, &k) in krow.iter().enumerate() {
                        let (rr, cc) = (r as isize + dr as isize - 1, col as isize + dc as isize - 1);
                        if rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize {
                            continue;
                        }
                        let (rr, cc) = (rr as usize, cc as usize);
                        if op.mask.get(rr, cc, ch) != 0.0 {
                            num += k * y.get(rr, cc, ch);
                            den += k;
                        }
                    }
                }
                if den > 0.0 {
                    out.set(r, col, ch, num / den);
                }
            }
        }
    }
    Ok(out)
}
