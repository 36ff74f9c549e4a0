//! Frozen stand-in for the vision encoder.
//!
//! Each non-overlapping patch is flattened in (channel, row, column) order,
//! multiplied by a fixed seeded matrix and squashed with `tanh`. No bias, no
//! mixing between patches, so a feature cell only depends on its own patch.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSpec {
    pub input_res: usize,
    pub patch: usize,
    pub out_channels: usize,
    pub seed: u64,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        EncoderSpec {
            input_res: 336,
            patch: 14,
            out_channels: 1024,
            seed: 0x5eed_c11b,
        }
    }
}

impl EncoderSpec {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.input_res == 0 || self.input_res % self.patch != 0 {
            return Err(Error::Config(format!(
                "encoder input_res {} must be a positive multiple of patch {}",
                self.input_res, self.patch
            )));
        }
        if self.out_channels == 0 {
            return Err(Error::Config("encoder out_channels must be ≥ 1".into()));
        }
        Ok(())
    }

    /// Side of the feature grid.
    pub fn grid(&self) -> usize {
        self.input_res / self.patch
    }

    pub fn feature_shape(&self) -> [usize; 4] {
        [1, self.out_channels, self.grid(), self.grid()]
    }
}

/// The seeded projection, materialized once and reusable across calls.
#[derive(Debug, Clone)]
pub struct SurrogateEncoder {
    spec: EncoderSpec,
    /// out_channels × (3·patch²), row-major.
    projection: Vec<f64>,
}

impl SurrogateEncoder {
    pub fn new(spec: &EncoderSpec) -> Result<Self> {
        spec.validate()?;
        let fan_in = 3 * spec.patch * spec.patch;
        // unit-variance preserving uniform init
        let bound = (3.0 / fan_in as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let projection = (0..spec.out_channels * fan_in)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        Ok(SurrogateEncoder {
            spec: spec.clone(),
            projection,
        })
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    pub fn encode(&self, image: &Tensor) -> Result<Tensor> {
        let s = &self.spec;
        let expected = [1, 3, s.input_res, s.input_res];
        if image.shape() != expected {
            return Err(Error::shape(format!(
                "encoder expects input {expected:?}, got {:?}",
                image.shape()
            )));
        }
        let (p, res, grid) = (s.patch, s.input_res, s.grid());
        let fan_in = 3 * p * p;
        let cells = grid * grid;
        let mut out = vec![0.0; s.out_channels * cells];
        let mut patch = vec![0.0; fan_in];
        for gy in 0..grid {
            for gx in 0..grid {
                for c in 0..3 {
                    for dy in 0..p {
                        let row = &image.data()[(c * res + gy * p + dy) * res + gx * p..][..p];
                        patch[(c * p + dy) * p..][..p].copy_from_slice(row);
                    }
                }
                for (k, wrow) in self.projection.chunks_exact(fan_in).enumerate() {
                    let pre: f64 = wrow.iter().zip(&patch).map(|(w, x)| w * x).sum();
                    out[k * cells + gy * grid + gx] = pre.tanh();
                }
            }
        }
        Ok(Tensor::from_parts(s.feature_shape().to_vec(), out))
    }
}

/// Convenience wrapper building the projection for a single call.
pub fn encode(image: &Tensor, spec: &EncoderSpec) -> Result<Tensor> {
    SurrogateEncoder::new(spec)?.encode(image)
}

/// Loads externally computed features, checking the expected shape.
pub fn load_features(path: impl AsRef<Path>, spec: &EncoderSpec) -> Result<Tensor> {
    let t = Tensor::load(path)?;
    let expected = spec.feature_shape();
    if t.shape() != expected {
        return Err(Error::shape(format!(
            "feature file shape mismatch: expected {expected:?}, found {:?}",
            t.shape()
        )));
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::DType;

    fn small() -> EncoderSpec {
        EncoderSpec {
            input_res: 12,
            patch: 4,
            out_channels: 5,
            seed: 3,
        }
    }

    #[test]
    fn zero_image_gives_zero_features() {
        let f = encode(&Tensor::zeros(&[1, 3, 12, 12]), &small()).unwrap();
        assert_eq!(f.shape(), &[1, 5, 3, 3]);
        assert!(f.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn deterministic_per_seed() {
        let img = Tensor::from_fn(&[1, 3, 12, 12], |i| (i as f64 * 0.1).sin());
        let a = encode(&img, &small()).unwrap();
        let b = encode(&img, &small()).unwrap();
        assert_eq!(a, b);
        let other = EncoderSpec { seed: 4, ..small() };
        assert_ne!(a, encode(&img, &other).unwrap());
    }

    #[test]
    fn rejects_wrong_input() {
        assert!(encode(&Tensor::zeros(&[1, 3, 12, 11]), &small()).is_err());
        let bad = EncoderSpec { input_res: 13, ..small() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn default_grid_is_24() {
        let s = EncoderSpec::default();
        assert_eq!(s.grid(), 24);
        assert_eq!(s.feature_shape(), [1, 1024, 24, 24]);
    }

    #[test]
    fn load_features_checks_shape() {
        let dir = tempfile::tempdir().unwrap();
        let spec = small();
        let good = Tensor::from_fn(&spec.feature_shape(), |i| i as f64 * 0.5);
        let p = dir.path().join("f.hirt");
        good.save(&p, DType::F64).unwrap();
        assert_eq!(load_features(&p, &spec).unwrap(), good);
        good.save(&p, DType::F32).unwrap();
        assert_eq!(load_features(&p, &spec).unwrap(), good);

        Tensor::zeros(&[1, 5, 3, 4]).save(&p, DType::F64).unwrap();
        let err = load_features(&p, &spec).unwrap_err().to_string();
        assert!(err.contains("expected [1, 5, 3, 3], found [1, 5, 3, 4]"), "{err}");
    }
}
