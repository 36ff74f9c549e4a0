//! Guidance network: a five-level encoder-decoder with skip connections.
//!
//! Encoder level `k` runs a 3×3 conv (stride 1 at level 0, stride 2 after)
//! and a second 3×3 conv, both followed by ReLU, giving features at scales
//! 1, 1/2, 1/4, 1/8 and 1/16. The decoder starts from the coarsest level and
//! repeatedly upsamples 2× bilinearly, concatenates the encoder skip and
//! applies conv3×3 + ReLU. Every decoder resolution (including the
//! bottleneck) emits a 1×1 linear projection to `guidance_channels`; these
//! five maps form the [`GuidancePyramid`], coarsest first.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{no_grad, Var};
use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::Tensor;
use crate::weights::{VarStore, WeightStore};

pub const LEVELS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UNetConfig {
    pub encoder_widths: [usize; LEVELS],
    pub guidance_channels: usize,
    pub seed: u64,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            encoder_widths: [16, 24, 32, 48, 64],
            guidance_channels: 32,
            seed: 7,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.encoder_widths.iter().any(|&w| w == 0) {
            return Err(Error::Config("UNet encoder widths must all be ≥ 1".into()));
        }
        if self.guidance_channels == 0 {
            return Err(Error::Config("guidance_channels must be ≥ 1".into()));
        }
        Ok(())
    }

    pub fn layers(&self) -> Vec<ConvLayer> {
        unet_layers(self)
    }

    pub fn param_count(&self) -> usize {
        self.layers().iter().map(ConvLayer::param_count).sum()
    }
}

/// Pyramid side lengths for an input of side `image_res`, coarsest first.
pub fn pyramid_sizes(image_res: usize) -> Result<[usize; LEVELS]> {
    if image_res == 0 || image_res % 16 != 0 {
        return Err(Error::Config(format!(
            "guidance input side {image_res} must be a positive multiple of 16"
        )));
    }
    let base = image_res / 16;
    Ok([base, base * 2, base * 4, base * 8, base * 16])
}

/// One convolution of the architecture table.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    /// Output side as a fraction `1 / 2^scale` of the input side.
    pub scale: u32,
}

impl ConvLayer {
    fn new(name: String, cin: usize, cout: usize, kernel: usize, stride: usize, scale: u32) -> Self {
        ConvLayer {
            name,
            in_channels: cin,
            out_channels: cout,
            kernel,
            stride,
            scale,
        }
    }

    pub fn param_count(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel + self.out_channels
    }

    /// Multiply-accumulates of this layer for an input side of `image_res`.
    pub fn macs(&self, image_res: u64) -> u64 {
        let side = image_res >> self.scale;
        side * side * (self.out_channels * self.in_channels * self.kernel * self.kernel) as u64
    }
}

fn unet_layers(cfg: &UNetConfig) -> Vec<ConvLayer> {
    let w = cfg.encoder_widths;
    let g = cfg.guidance_channels;
    let mut layers = Vec::new();
    let mut cin = 3;
    for (k, &width) in w.iter().enumerate() {
        let stride = if k == 0 { 1 } else { 2 };
        layers.push(ConvLayer::new(format!("unet.enc{k}.conv1"), cin, width, 3, stride, k as u32));
        layers.push(ConvLayer::new(format!("unet.enc{k}.conv2"), width, width, 3, 1, k as u32));
        cin = width;
    }
    layers.push(ConvLayer::new("unet.head0".into(), w[4], g, 1, 1, 4));
    let mut prev = w[4];
    for level in 1..LEVELS {
        let skip = w[LEVELS - 1 - level];
        let scale = (LEVELS - 1 - level) as u32;
        layers.push(ConvLayer::new(format!("unet.dec{level}.conv"), prev + skip, skip, 3, 1, scale));
        layers.push(ConvLayer::new(format!("unet.head{level}"), skip, g, 1, 1, scale));
        prev = skip;
    }
    layers
}

/// Kaiming-uniform fan-in weights and zero biases, reproducible per seed.
pub fn unet_init(cfg: &UNetConfig) -> Result<WeightStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = WeightStore::new();
    for layer in cfg.layers() {
        let fan_in = layer.in_channels * layer.kernel * layer.kernel;
        let bound = (6.0 / fan_in as f64).sqrt();
        let shape = [layer.out_channels, layer.in_channels, layer.kernel, layer.kernel];
        store.insert(
            format!("{}.weight", layer.name),
            Tensor::from_fn(&shape, |_| rng.gen_range(-bound..bound)),
        );
        store.insert(format!("{}.bias", layer.name), Tensor::zeros(&[layer.out_channels]));
    }
    Ok(store)
}

/// Names of all UNet weight entries for `cfg`.
pub fn unet_weight_names(cfg: &UNetConfig) -> Vec<String> {
    cfg.layers()
        .iter()
        .flat_map(|l| [format!("{}.weight", l.name), format!("{}.bias", l.name)])
        .collect()
}

/// Multi-scale guidance maps, coarsest first.
#[derive(Debug, Clone)]
pub struct GuidancePyramid {
    pub levels: Vec<Tensor>,
}

impl GuidancePyramid {
    pub fn sizes(&self) -> Vec<usize> {
        self.levels.iter().map(|t| t.shape()[2]).collect()
    }
}

pub struct UNet {
    config: UNetConfig,
    image_res: usize,
    sizes: [usize; LEVELS],
}

impl UNet {
    pub fn new(config: &UNetConfig, image_res: usize) -> Result<Self> {
        config.validate()?;
        Ok(UNet {
            config: config.clone(),
            image_res,
            sizes: pyramid_sizes(image_res)?,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn sizes(&self) -> [usize; LEVELS] {
        self.sizes
    }

    fn conv(&self, vars: &VarStore, name: &str, x: &Var, stride: usize) -> Result<Var> {
        let w = vars.get(&format!("{name}.weight"))?;
        let b = vars.get(&format!("{name}.bias"))?;
        let pad = w.shape()[2] / 2;
        x.conv2d(w, Some(b), stride, pad)
    }

    /// Recorded forward pass; returns the pyramid levels coarsest first.
    pub fn forward_var(&self, image: &Var, vars: &VarStore) -> Result<Vec<Var>> {
        self.forward_impl(image, vars, &mut |_| {})
    }

    fn forward_impl(
        &self,
        image: &Var,
        vars: &VarStore,
        pre_relu: &mut dyn FnMut(&Tensor),
    ) -> Result<Vec<Var>> {
        let expected = [1, 3, self.image_res, self.image_res];
        if image.shape() != expected {
            return Err(Error::shape(format!(
                "guidance network expects input {expected:?}, got {:?}",
                image.shape()
            )));
        }
        let mut conv_relu = |name: &str, x: &Var, stride: usize| -> Result<Var> {
            let pre = self.conv(vars, name, x, stride)?;
            pre_relu(pre.value());
            Ok(pre.relu())
        };
        let mut skips = Vec::with_capacity(LEVELS);
        let mut x = image.clone();
        for k in 0..LEVELS {
            let stride = if k == 0 { 1 } else { 2 };
            x = conv_relu(&format!("unet.enc{k}.conv1"), &x, stride)?;
            x = conv_relu(&format!("unet.enc{k}.conv2"), &x, 1)?;
            skips.push(x.clone());
        }
        let mut d = skips.pop().expect("five encoder levels");
        let mut pyramid = vec![self.conv(vars, "unet.head0", &d, 1)?];
        for level in 1..LEVELS {
            let skip = skips.pop().expect("one skip per decoder level");
            let size = self.sizes[level];
            let up = d.bilinear_resize(size, size)?;
            d = conv_relu(&format!("unet.dec{level}.conv"), &up.concat_channels(&skip)?, 1)?;
            pyramid.push(self.conv(vars, &format!("unet.head{level}"), &d, 1)?);
        }
        Ok(pyramid)
    }

    /// Smallest `|x|` over every ReLU input of a forward pass.
    pub fn relu_margin(&self, image: &Tensor, weights: &WeightStore) -> Result<f64> {
        weights.require(&unet_weight_names(&self.config))?;
        let mut margin = f64::INFINITY;
        no_grad(|| {
            self.forward_impl(&Var::constant(image.clone()), &VarStore::constants(weights), &mut |t| {
                margin = t.data().iter().fold(margin, |m, v| m.min(v.abs()));
            })
        })?;
        Ok(margin)
    }

    pub fn forward(&self, image: &Tensor, weights: &WeightStore) -> Result<GuidancePyramid> {
        weights.require(&unet_weight_names(&self.config))?;
        no_grad(|| {
            let vars = VarStore::constants(weights);
            let levels = self.forward_var(&Var::constant(image.clone()), &vars)?;
            Ok(GuidancePyramid {
                levels: levels.into_iter().map(Var::into_value).collect(),
            })
        })
    }
}

/// Guidance without the network, for the ablation switch: the raw image is
/// bicubically resized to each pyramid size and mapped to
/// `guidance_channels` by a fixed seeded 1×1 projection.
pub struct RawGuidance {
    projection: Tensor,
    sizes: [usize; LEVELS],
}

impl RawGuidance {
    pub fn new(guidance_channels: usize, image_res: usize, seed: u64) -> Result<Self> {
        if guidance_channels == 0 {
            return Err(Error::Config("guidance_channels must be ≥ 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9a1d_a9ce);
        let bound = 1.0;
        Ok(RawGuidance {
            projection: Tensor::from_fn(&[guidance_channels, 3, 1, 1], |_| {
                rng.gen_range(-bound..bound)
            }),
            sizes: pyramid_sizes(image_res)?,
        })
    }

    pub fn forward_var(&self, image: &Var) -> Result<Vec<Var>> {
        let proj = Var::constant(self.projection.clone());
        self.sizes
            .iter()
            .map(|&s| image.bicubic_resize(s, s)?.conv2d(&proj, None, 1, 0))
            .collect()
    }

    pub fn forward(&self, image: &Tensor) -> Result<GuidancePyramid> {
        let levels = self
            .sizes
            .iter()
            .map(|&s| {
                ops::conv2d(&ops::bicubic_resize(image, s, s)?, &self.projection, None, 1, 0)
            })
            .collect::<Result<_>>()?;
        Ok(GuidancePyramid { levels })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pyramid_sizes_for_672() {
        assert_eq!(pyramid_sizes(672).unwrap(), [42, 84, 168, 336, 672]);
        assert_eq!(pyramid_sizes(1008).unwrap(), [63, 126, 252, 504, 1008]);
        assert!(pyramid_sizes(100).is_err());
    }

    #[test]
    fn init_is_reproducible_and_counted() {
        let cfg = UNetConfig::default();
        let a = unet_init(&cfg).unwrap();
        let b = unet_init(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.count_with_prefixes(&["unet."]), cfg.param_count());
        assert!(a.iter().filter(|(n, _)| n.ends_with(".bias")).all(|(_, t)| t.sum() == 0.0));
    }

    #[test]
    fn rejects_wrong_input_size() {
        let cfg = UNetConfig {
            encoder_widths: [1; 5],
            guidance_channels: 1,
            seed: 0,
        };
        let net = UNet::new(&cfg, 32).unwrap();
        let w = unet_init(&cfg).unwrap();
        assert!(net.forward(&Tensor::zeros(&[1, 3, 48, 48]), &w).is_err());
        assert!(net.forward(&Tensor::zeros(&[1, 3, 32, 32]), &w).is_ok());
    }
}
