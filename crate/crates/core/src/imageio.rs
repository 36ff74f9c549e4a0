//! Image loading and the two working resolutions of the pipeline.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::{atomic_write, Tensor};

/// Working resolutions and per-channel normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImageSpec {
    /// Side of the full-resolution view fed to the guidance network.
    pub high_res: usize,
    /// Side of the downsampled view fed to the encoder.
    pub low_res: usize,
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for ImageSpec {
    fn default() -> Self {
        ImageSpec {
            high_res: 672,
            low_res: 336,
            mean: [0.5; 3],
            std: [0.5; 3],
        }
    }
}

impl ImageSpec {
    pub fn validate(&self) -> Result<()> {
        if self.high_res < 1 || self.low_res < 1 {
            return Err(Error::Config("image resolutions must be ≥ 1".into()));
        }
        if let Some(s) = self.std.iter().find(|s| !(**s > 0.0) || !s.is_finite()) {
            return Err(Error::Config(format!("image std components must be > 0, got {s}")));
        }
        if self.mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::Config("image mean must be finite".into()));
        }
        Ok(())
    }

    /// Per-channel `(v - mean) / std` on a 1×3×H×W tensor.
    pub fn normalize(&self, img: &Tensor) -> Result<Tensor> {
        self.per_channel(img, |v, c| (v - self.mean[c]) / self.std[c])
    }

    pub fn denormalize(&self, img: &Tensor) -> Result<Tensor> {
        self.per_channel(img, |v, c| v * self.std[c] + self.mean[c])
    }

    fn per_channel(&self, img: &Tensor, f: impl Fn(f64, usize) -> f64) -> Result<Tensor> {
        let [n, c, h, w] = img.dims4()?;
        if c != 3 {
            return Err(Error::shape(format!("expected 3 image channels, got {c}")));
        }
        let plane = h * w;
        Ok(Tensor::from_fn(&[n, c, h, w], |i| {
            f(img.data()[i], (i / plane) % 3)
        }))
    }
}

/// Reads a binary (P6) PPM with maxval 255 as a 1×3×H×W tensor in [0, 1].
pub fn load_ppm(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes)
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(Error::Format("not a binary PPM (missing P6 magic)".into()));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // skip whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(Error::Truncated("PPM header ended early".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("malformed PPM header".into()));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format("PPM header number out of range".into()))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(Error::InvalidValue(format!("PPM maxval must be 255, got {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(Error::Format("PPM has zero width or height".into()));
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::Truncated("PPM header not terminated".into())),
    }
    let need = width * height * 3;
    let pixels = &bytes[pos..];
    if pixels.len() < need {
        return Err(Error::Truncated(format!(
            "PPM pixel data has {} of {need} bytes",
            pixels.len()
        )));
    }
    let plane = width * height;
    Ok(Tensor::from_fn(&[1, 3, height, width], |i| {
        let c = i / plane;
        let p = i % plane;
        pixels[p * 3 + c] as f64 / 255.0
    }))
}

/// Writes a 1×3×H×W tensor in [0, 1] as binary PPM, rounding to 8 bits.
pub fn save_ppm(img: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let [n, c, h, w] = img.dims4()?;
    if n != 1 || c != 3 {
        return Err(Error::shape(format!(
            "save_ppm needs a 1×3×H×W tensor, got {:?}",
            img.shape()
        )));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    for p in 0..plane {
        for ch in 0..3 {
            let v = img.data()[ch * plane + p];
            out.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    atomic_write(path.as_ref(), |f| f.write_all(&out))
}

/// Produces the full-resolution view `I` and the encoder view `i`.
///
/// `I` is a bicubic resize of the input to `high_res`, then normalized; `i`
/// is a bicubic resize of `I` to `low_res`, so the two views agree.
pub fn prepare_pair(img: &Tensor, spec: &ImageSpec) -> Result<(Tensor, Tensor)> {
    spec.validate()?;
    let [n, c, h, w] = img.dims4()?;
    if n != 1 || c != 3 {
        return Err(Error::shape(format!(
            "prepare_pair needs a 1×3×H×W image, got {:?}",
            img.shape()
        )));
    }
    if h < 2 || w < 2 {
        return Err(Error::shape(format!(
            "image must be at least 2×2 pixels, got {h}×{w}"
        )));
    }
    let high = spec.normalize(&ops::bicubic_resize(img, spec.high_res, spec.high_res)?)?;
    let low = ops::bicubic_resize(&high, spec.low_res, spec.low_res)?;
    Ok((high, low))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decodes_white_and_single_pixel() {
        let mut bytes = b"P6\n2 2\n255\n".to_vec();
        bytes.extend([255u8; 12]);
        let t = decode_ppm(&bytes).unwrap();
        assert_eq!(t.shape(), &[1, 3, 2, 2]);
        assert!(t.data().iter().all(|&v| v == 1.0));

        let mut bytes = b"P6 # comment\n1 1 255\n".to_vec();
        bytes.extend([0u8, 128, 255]);
        let t = decode_ppm(&bytes).unwrap();
        assert_eq!(t.data(), &[0.0, 128.0 / 255.0, 1.0]);
    }

    #[test]
    fn distinct_errors() {
        assert!(matches!(decode_ppm(b"P3\n1 1\n255\n..."), Err(Error::Format(_))));
        assert!(matches!(
            decode_ppm(b"P6\n1 1\n65535\n\0\0\0\0\0\0"),
            Err(Error::InvalidValue(_))
        ));
        assert!(matches!(decode_ppm(b"P6\n2 2\n255\n\0\0\0"), Err(Error::Truncated(_))));
    }

    #[test]
    fn normalization_inverts() {
        let spec = ImageSpec {
            mean: [0.48, 0.45, 0.40],
            std: [0.27, 0.26, 0.28],
            ..ImageSpec::default()
        };
        let x = Tensor::from_fn(&[1, 3, 3, 4], |i| (i as f64 * 0.37).fract());
        let back = spec.denormalize(&spec.normalize(&x).unwrap()).unwrap();
        assert!(back.max_abs_diff(&x).unwrap() < 1e-12);
    }

    #[test]
    fn gray_input_normalizes_to_zero() {
        let spec = ImageSpec {
            high_res: 16,
            low_res: 8,
            ..ImageSpec::default()
        };
        let img = Tensor::full(&[1, 3, 5, 7], 0.5);
        let (hi, lo) = prepare_pair(&img, &spec).unwrap();
        assert_eq!(hi.shape(), &[1, 3, 16, 16]);
        assert_eq!(lo.shape(), &[1, 3, 8, 8]);
        assert!(hi.data().iter().chain(lo.data()).all(|&v| v.abs() < 1e-15));
    }

    #[test]
    fn rejects_degenerate_and_bad_std() {
        let spec = ImageSpec::default();
        assert!(prepare_pair(&Tensor::zeros(&[1, 3, 1, 5]), &spec).is_err());
        let bad = ImageSpec {
            std: [0.5, 0.0, 0.5],
            ..ImageSpec::default()
        };
        assert!(bad.validate().is_err());
    }
}
