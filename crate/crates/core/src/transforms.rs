//! Invertible high-dimensionalization maps.
//!
//! * `Copy` stacks the image twice along the channel axis.
//! * `Pool` splits the image into its four polyphase (checkerboard)
//!   sub-images, halving each spatial side.
//! * `Dwt` is a single-level orthonormal 2-D Haar transform whose
//!   `LL, LH, HL, HH` bands are stacked along the channel axis.
//! * `Identity` leaves the image untouched.
//!
//! For `Pool` and `Dwt`, output channel `k * C + c` holds block `k` of
//! original channel `c`. Block `k` of `Pool` samples row parity `k / 2` and
//! column parity `k % 2`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{ensure_arg, Error, Result};
use crate::tensor::{ImageTensor, Shape};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HighDimTransform {
    #[default]
    Identity,
    Copy,
    Pool,
    Dwt,
}

impl HighDimTransform {
    pub const ALL: [HighDimTransform; 4] = [
        HighDimTransform::Identity,
        HighDimTransform::Copy,
        HighDimTransform::Pool,
        HighDimTransform::Dwt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            HighDimTransform::Identity => "identity",
            HighDimTransform::Copy => "copy",
            HighDimTransform::Pool => "pool",
            HighDimTransform::Dwt => "dwt",
        }
    }

    /// Shape of `forward(x)` for an input of shape `shape`.
    pub fn forward_shape(self, shape: Shape) -> Result<Shape> {
        let (h, w, c) = shape;
        match self {
            HighDimTransform::Identity => Ok(shape),
            HighDimTransform::Copy => Ok((h, w, 2 * c)),
            HighDimTransform::Pool | HighDimTransform::Dwt => {
                ensure_arg!(
                    h % 2 == 0 && w % 2 == 0,
                    "{} transform needs even height and width, got {h}x{w}",
                    self.name()
                );
                Ok((h / 2, w / 2, 4 * c))
            }
        }
    }

    /// Shape of `inverse(X)` for a lifted tensor of shape `shape`.
    pub fn inverse_shape(self, shape: Shape) -> Result<Shape> {
        let (h, w, c) = shape;
        match self {
            HighDimTransform::Identity => Ok(shape),
            HighDimTransform::Copy => {
                ensure_arg!(c % 2 == 0, "copy inverse needs an even channel count, got {c}");
                Ok((h, w, c / 2))
            }
            HighDimTransform::Pool | HighDimTransform::Dwt => {
                ensure_arg!(
                    c % 4 == 0,
                    "{} inverse needs a channel count divisible by 4, got {c}",
                    self.name()
                );
                Ok((2 * h, 2 * w, c / 4))
            }
        }
    }

    pub fn forward(self, x: &ImageTensor) -> Result<ImageTensor> {
        let out_shape = self.forward_shape(x.shape())?;
        Ok(match self {
            HighDimTransform::Identity => x.clone(),
            HighDimTransform::Copy => copy_forward(x, out_shape),
            HighDimTransform::Pool => polyphase_forward(x, out_shape),
            HighDimTransform::Dwt => haar_forward(x, out_shape),
        })
    }

    pub fn inverse(self, lifted: &ImageTensor) -> Result<ImageTensor> {
        let out_shape = self.inverse_shape(lifted.shape())?;
        Ok(match self {
            HighDimTransform::Identity => lifted.clone(),
            HighDimTransform::Copy => copy_inverse(lifted, out_shape),
            HighDimTransform::Pool => polyphase_inverse(lifted, out_shape),
            HighDimTransform::Dwt => haar_inverse(lifted, out_shape),
        })
    }
}

impl fmt::Display for HighDimTransform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for HighDimTransform {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "identity" | "none" => Ok(HighDimTransform::Identity),
            "copy" => Ok(HighDimTransform::Copy),
            "pool" => Ok(HighDimTransform::Pool),
            "dwt" | "haar" => Ok(HighDimTransform::Dwt),
            other => Err(Error::invalid(format!("unknown transform '{other}'"))),
        }
    }
}

pub fn h_forward(x: &ImageTensor, t: HighDimTransform) -> Result<ImageTensor> {
    t.forward(x)
}

pub fn h_inverse(lifted: &ImageTensor, t: HighDimTransform) -> Result<ImageTensor> {
    t.inverse(lifted)
}

fn copy_forward(x: &ImageTensor, out_shape: Shape) -> ImageTensor {
    let c = x.channels();
    let mut data = Vec::with_capacity(2 * x.len());
    for px in x.as_slice().chunks_exact(c) {
        data.extend_from_slice(px);
        data.extend_from_slice(px);
    }
    ImageTensor::from_parts(out_shape, data)
}

// Averaging the two halves is the least-squares left inverse of the copy.
fn copy_inverse(lifted: &ImageTensor, out_shape: Shape) -> ImageTensor {
    let c = out_shape.2;
    let mut data = Vec::with_capacity(lifted.len() / 2);
    for px in lifted.as_slice().chunks_exact(2 * c) {
        let (a, b) = px.split_at(c);
        data.extend(a.iter().zip(b).map(|(u, v)| 0.5 * (u + v)));
    }
    ImageTensor::from_parts(out_shape, data)
}

fn polyphase_forward(x: &ImageTensor, out_shape: Shape) -> ImageTensor {
    let (h2, w2, _) = out_shape;
    let c = x.channels();
    let mut out = ImageTensor::zeros(out_shape);
    for r in 0..h2 {
        for col in 0..w2 {
            for k in 0..4 {
                let (sr, sc) = (2 * r + k / 2, 2 * col + k % 2);
                for ch in 0..c {
                    out.set(r, col, k * c + ch, x.get(sr, sc, ch));
                }
            }
        }
    }
    out
}

fn polyphase_inverse(lifted: &ImageTensor, out_shape: Shape) -> ImageTensor {
    let c = out_shape.2;
    let mut out = ImageTensor::zeros(out_shape);
    for r in 0..lifted.height() {
        for col in 0..lifted.width() {
            for k in 0..4 {
                let (sr, sc) = (2 * r + k / 2, 2 * col + k % 2);
                for ch in 0..c {
                    out.set(sr, sc, ch, lifted.get(r, col, k * c + ch));
                }
            }
        }
    }
    out
}

// 2x2 block [a b; c d]; orthonormal Haar (taps 1/sqrt(2) per axis).
fn haar_forward(x: &ImageTensor, out_shape: Shape) -> ImageTensor {
    let (h2, w2, _) = out_shape;
    let c = x.channels();
    let mut out = ImageTensor::zeros(out_shape);
    for r in 0..h2 {
        for col in 0..w2 {
            for ch in 0..c {
                let a = x.get(2 * r, 2 * col, ch);
                let b = x.get(2 * r, 2 * col + 1, ch);
                let cc = x.get(2 * r + 1, 2 * col, ch);
                let d = x.get(2 * r + 1, 2 * col + 1, ch);
                out.set(r, col, ch, 0.5 * (a + b + cc + d));
                out.set(r, col, c + ch, 0.5 * (a + b - cc - d));
                out.set(r, col, 2 * c + ch, 0.5 * (a - b + cc - d));
                out.set(r, col, 3 * c + ch, 0.5 * (a - b - cc + d));
            }
        }
    }
    out
}

fn haar_inverse(lifted: &ImageTensor, out_shape: Shape) -> ImageTensor {
    let c = out_shape.2;
    let mut out = ImageTensor::zeros(out_shape);
    for r in 0..lifted.height() {
        for col in 0..lifted.width() {
            for ch in 0..c {
                let ll = lifted.get(r, col, ch);
                let lh = lifted.get(r, col, c + ch);
                let hl = lifted.get(r, col, 2 * c + ch);
                let hh = lifted.get(r, col, 3 * c + ch);
                out.set(2 * r, 2 * col, ch, 0.5 * (ll + lh + hl + hh));
                out.set(2 * r, 2 * col + 1, ch, 0.5 * (ll + lh - hl - hh));
                out.set(2 * r + 1, 2 * col, ch, 0.5 * (ll - lh + hl - hh));
                out.set(2 * r + 1, 2 * col + 1, ch, 0.5 * (ll - lh - hl + hh));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid(rows: &[&[f64]]) -> ImageTensor {
        let h = rows.len();
        let w = rows[0].len();
        ImageTensor::from_fn((h, w, 1), |r, c, _| rows[r][c])
    }

    #[test]
    fn copy_duplicates_channels() {
        let x = grid(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let lifted = HighDimTransform::Copy.forward(&x).unwrap();
        assert_eq!(lifted.shape(), (2, 2, 2));
        assert_eq!(lifted.channel(0), x);
        assert_eq!(lifted.channel(1), x);
    }

    #[test]
    fn pool_enumerates_parity_classes() {
        let x = grid(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let lifted = HighDimTransform::Pool.forward(&x).unwrap();
        assert_eq!(lifted.shape(), (1, 1, 4));
        assert_eq!(lifted.as_slice(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn haar_of_constant_block() {
        let x = grid(&[&[1.0, 1.0], &[1.0, 1.0]]);
        let lifted = HighDimTransform::Dwt.forward(&x).unwrap();
        assert_eq!(lifted.as_slice(), &[2.0, 0.0, 0.0, 0.0]);
        let back = HighDimTransform::Dwt
            .inverse(&ImageTensor::new(1, 1, 4, vec![2.0, 0.0, 0.0, 0.0]).unwrap())
            .unwrap();
        assert_eq!(back, x);
    }

    #[test]
    fn copy_inverse_averages_halves() {
        let lifted = ImageTensor::new(1, 2, 2, vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let x = HighDimTransform::Copy.inverse(&lifted).unwrap();
        assert_eq!(x.as_slice(), &[0.5, 0.5]);
    }

    #[test]
    fn odd_sizes_and_bad_channels_rejected() {
        let odd = ImageTensor::zeros((3, 4, 1));
        assert!(HighDimTransform::Pool.forward(&odd).is_err());
        assert!(HighDimTransform::Dwt.forward(&ImageTensor::zeros((4, 5, 3))).is_err());
        assert!(HighDimTransform::Copy.forward(&odd).is_ok());
        assert!(HighDimTransform::Copy.inverse(&ImageTensor::zeros((2, 2, 3))).is_err());
        assert!(HighDimTransform::Pool.inverse(&ImageTensor::zeros((2, 2, 6))).is_err());
        assert!(HighDimTransform::Dwt.inverse(&ImageTensor::zeros((2, 2, 2))).is_err());
    }

    #[test]
    fn parse_names() {
        for t in HighDimTransform::ALL {
            assert_eq!(t.name().parse::<HighDimTransform>().unwrap(), t);
        }
        assert!("gradient".parse::<HighDimTransform>().is_err());
    }

    fn tensor_strategy() -> impl Strategy<Value = ImageTensor> {
        (1usize..6, 1usize..6, 1usize..4).prop_flat_map(|(h, w, c)| {
            proptest::collection::vec(-10.0f64..10.0, 4 * h * w * c)
                .prop_map(move |data| ImageTensor::new(2 * h, 2 * w, c, data).unwrap())
        })
    }

    proptest! {
        #[test]
        fn round_trips(x in tensor_strategy()) {
            for t in [HighDimTransform::Identity, HighDimTransform::Copy, HighDimTransform::Pool] {
                let back = t.inverse(&t.forward(&x).unwrap()).unwrap();
                prop_assert_eq!(&back, &x);
            }
            let back = HighDimTransform::Dwt.inverse(&HighDimTransform::Dwt.forward(&x).unwrap()).unwrap();
            prop_assert!(back.max_abs_diff(&x).unwrap() <= 1e-12);
        }

        #[test]
        fn norms_and_multisets(x in tensor_strategy()) {
            let n = x.norm_sq();
            let dwt = HighDimTransform::Dwt.forward(&x).unwrap().norm_sq();
            prop_assert!((dwt - n).abs() <= 1e-12 * n.max(1e-300));
            let copy = HighDimTransform::Copy.forward(&x).unwrap().norm_sq();
            prop_assert!((copy - 2.0 * n).abs() <= 1e-12 * n.max(1e-300));

            let mut a = x.as_slice().to_vec();
            let mut b = HighDimTransform::Pool.forward(&x).unwrap().into_vec();
            a.sort_by(f64::total_cmp);
            b.sort_by(f64::total_cmp);
            prop_assert_eq!(a, b);
        }
    }
}
