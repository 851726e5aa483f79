//! 8-bit PNG import and export.
//!
//! Pixel values map to `[0, 1]` by `v / 255` on load and
//! `round(255 * clamp(v, 0, 1))` on save.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{ensure_arg, Error, Result};
use crate::tensor::ImageTensor;

fn png_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Png {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

/// Decoded 8-bit pixels, one or three samples per pixel.
struct RawImage {
    width: usize,
    height: usize,
    samples: usize,
    data: Vec<u8>,
}

fn decode(path: &Path) -> Result<RawImage> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = decoder.read_info().map_err(|e| png_err(path, e))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| png_err(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| png_err(path, e))?;
    buf.truncate(info.buffer_size());
    let (width, height) = (info.width as usize, info.height as usize);
    // drop alpha; keep gray or rgb
    let (samples, data) = match info.color_type {
        png::ColorType::Grayscale => (1, buf),
        png::ColorType::GrayscaleAlpha => (1, buf.chunks_exact(2).map(|p| p[0]).collect()),
        png::ColorType::Rgb => (3, buf),
        png::ColorType::Rgba => (
            3,
            buf.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
        ),
        other => return Err(png_err(path, format!("unsupported color type {other:?}"))),
    };
    Ok(RawImage {
        width,
        height,
        samples,
        data,
    })
}

/// Loads a PNG as a `channels`-channel tensor (1 = luminance, 3 = RGB).
pub fn load_png(path: impl AsRef<Path>, channels: usize) -> Result<ImageTensor> {
    let path = path.as_ref();
    ensure_arg!(channels == 1 || channels == 3, "PNG images have 1 or 3 channels, not {channels}");
    let raw = decode(path)?;
    let data: Vec<f64> = match (raw.samples, channels) {
        (1, 1) | (3, 3) => raw.data.iter().map(|&v| v as f64 / 255.0).collect(),
        (1, 3) => raw
            .data
            .iter()
            .flat_map(|&v| [v as f64 / 255.0; 3])
            .collect(),
        (3, 1) => raw
            .data
            .chunks_exact(3)
            .map(|p| (0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64) / 255.0)
            .collect(),
        _ => unreachable!(),
    };
    ImageTensor::new(raw.height, raw.width, channels, data)
}

/// Loads a PNG as a binary keep-map: `true` where any sample is nonzero.
pub fn load_binary_png(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<bool>)> {
    let raw = decode(path.as_ref())?;
    let keep = raw
        .data
        .chunks_exact(raw.samples)
        .map(|p| p.iter().any(|&v| v != 0))
        .collect();
    Ok((raw.height, raw.width, keep))
}

pub fn quantize(v: f64) -> u8 {
    (255.0 * v.clamp(0.0, 1.0)).round() as u8
}

/// Encodes a 1- or 3-channel tensor as an 8-bit PNG byte stream.
pub fn encode_png(img: &ImageTensor) -> Result<Vec<u8>> {
    let color = match img.channels() {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        c => return Err(Error::invalid(format!("cannot export a {c}-channel tensor as PNG"))),
    };
    let mut out = Vec::new();
    {
        let mut encoder = png::Encoder::new(&mut out, img.width() as u32, img.height() as u32);
        encoder.set_color(color);
        encoder.set_depth(png::BitDepth::Eight);
        let mut writer = encoder
            .write_header()
            .map_err(|e| Error::invalid(format!("png encode: {e}")))?;
        let bytes: Vec<u8> = img.as_slice().iter().map(|&v| quantize(v)).collect();
        writer
            .write_image_data(&bytes)
            .map_err(|e| Error::invalid(format!("png encode: {e}")))?;
    }
    Ok(out)
}

pub fn save_png(path: impl AsRef<Path>, img: &ImageTensor) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_png(img)?;
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&bytes).map_err(|e| io_err(path, e))?;
    w.flush().map_err(|e| io_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn gray_and_rgb_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let rgb = ImageTensor::from_fn((3, 5, 3), |r, c, ch| (r * 5 + c) as f64 / 15.0 + ch as f64 * 0.01);
        let p = dir.path().join("rgb.png");
        save_png(&p, &rgb).unwrap();
        let back = load_png(&p, 3).unwrap();
        assert!(back.max_abs_diff(&rgb).unwrap() <= 1.0 / 510.0 + 1e-12);

        let gray = rgb.channel(0);
        let p = dir.path().join("gray.png");
        save_png(&p, &gray).unwrap();
        let back3 = load_png(&p, 3).unwrap();
        assert_eq!(back3.channel(0), back3.channel(2));
    }

    #[test]
    fn exports_clamp() {
        let t = ImageTensor::new(1, 2, 1, vec![-0.5, 1.7]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.png");
        save_png(&p, &t).unwrap();
        assert_eq!(load_png(&p, 1).unwrap().as_slice(), &[0.0, 1.0]);
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(load_png("/nonexistent/x.png", 3), Err(Error::Io { .. })));
        assert!(encode_png(&ImageTensor::zeros((2, 2, 2))).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn quantization_error_is_half_step(vals in proptest::collection::vec(0.0f64..=1.0, 12)) {
            let t = ImageTensor::new(2, 2, 3, vals).unwrap();
            let bytes = encode_png(&t).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("q.png");
            std::fs::write(&p, bytes).unwrap();
            let back = load_png(&p, 3).unwrap();
            prop_assert!(back.max_abs_diff(&t).unwrap() <= 1.0 / 510.0 + 1e-12);
        }
    }
}
