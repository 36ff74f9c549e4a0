//! The full enrichment pipeline: guidance, upsampling stack, pooling and
//! fusion with the encoder features.
//!
//! Geometry comes from the inputs: an image of side `R` and features on a
//! `g × g` grid give a pyramid `R/16 … R`, enriched features `x_en` of side
//! `R` and a pooling kernel `R / g`. At the default 672 / 24 geometry `x_en`
//! alone is 3.7 GB in f64, so [`enrich_streamed`] pushes it through the stack
//! in channel chunks and hands each finished chunk to a [`FeatureSink`].

use serde::{Deserialize, Serialize};

use crate::autodiff::{no_grad, Var};
use crate::error::{Error, Result};
use crate::jbu::{self, jbu_kernel, JBUConfig, JBULayerParams, JbuKernel, JbuVars};
use crate::ops;
use crate::tensor::{HirtWriter, Tensor};
use crate::unet::{self, pyramid_sizes, GuidancePyramid, RawGuidance, UNet, UNetConfig};
use crate::weights::{VarStore, WeightStore};

pub const PARAM_BUDGET: (usize, usize) = (200_000, 350_000);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnricherConfig {
    /// When false the guidance is the raw image under a fixed projection.
    pub use_unet: bool,
    pub unet: UNetConfig,
    pub jbu: JBUConfig,
    /// Channels pushed through the stack at once by the streaming path.
    pub chunk_channels: usize,
}

impl Default for EnricherConfig {
    fn default() -> Self {
        EnricherConfig {
            use_unet: true,
            unet: UNetConfig::default(),
            jbu: JBUConfig::default(),
            chunk_channels: 32,
        }
    }
}

impl EnricherConfig {
    pub fn validate(&self) -> Result<()> {
        self.unet.validate()?;
        self.jbu.validate()?;
        if self.chunk_channels == 0 {
            return Err(Error::Config("chunk_channels must be ≥ 1".into()));
        }
        Ok(())
    }

    pub fn guidance_channels(&self) -> usize {
        self.unet.guidance_channels
    }

    /// Every weight entry the pipeline reads.
    pub fn weight_names(&self) -> Vec<String> {
        let mut names = if self.use_unet {
            unet::unet_weight_names(&self.unet)
        } else {
            Vec::new()
        };
        names.extend(jbu::jbu_weight_names(&self.jbu));
        names
    }

    /// Closed-form trainable parameter count.
    pub fn param_count(&self) -> usize {
        let unet = if self.use_unet { self.unet.param_count() } else { 0 };
        unet + self.jbu.param_count(self.guidance_channels())
    }
}

/// Freshly initialized enricher weights.
pub fn enricher_init(cfg: &EnricherConfig) -> Result<WeightStore> {
    cfg.validate()?;
    let mut store = if cfg.use_unet {
        unet::unet_init(&cfg.unet)?
    } else {
        WeightStore::new()
    };
    store.merge(jbu::jbu_init(&cfg.jbu, cfg.guidance_channels(), cfg.unet.seed)?);
    Ok(store)
}

/// Element count of all trainable enricher entries in `weights`.
pub fn enricher_param_count(weights: &WeightStore) -> usize {
    weights.count_with_prefixes(&["unet.", "jbu."])
}

/// Parameter counts split by component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ParamReport {
    pub unet: usize,
    pub jbu: usize,
    pub total: usize,
}

impl ParamReport {
    pub fn of(weights: &WeightStore) -> Self {
        let unet = weights.count_with_prefixes(&["unet."]);
        let jbu = weights.count_with_prefixes(&["jbu."]);
        ParamReport {
            unet,
            jbu,
            total: unet + jbu,
        }
    }

    pub fn within_budget(&self) -> bool {
        (PARAM_BUDGET.0..=PARAM_BUDGET.1).contains(&self.total)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnricherOutput {
    /// 1×C×R×R
    pub x_en: Tensor,
    /// 1×2C×g×g: encoder features, then pooled `x_en`.
    pub fused: Tensor,
}

/// Sizes implied by an image / feature pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geometry {
    pub image_res: usize,
    pub grid: usize,
    pub channels: usize,
}

impl Geometry {
    pub fn of(image_shape: &[usize], feats_shape: &[usize]) -> Result<Self> {
        let (r, g, c) = match (image_shape, feats_shape) {
            (&[1, 3, rh, rw], &[1, c, gh, gw]) if rh == rw && gh == gw => (rh, gh, c),
            _ => {
                return Err(Error::shape(format!(
                    "enrich needs a 1×3×R×R image and 1×C×g×g features, got {image_shape:?} and {feats_shape:?}"
                )))
            }
        };
        let geom = Geometry {
            image_res: r,
            grid: g,
            channels: c,
        };
        geom.validate()?;
        Ok(geom)
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid == 0 || self.image_res % self.grid != 0 {
            return Err(Error::shape(format!(
                "image side {} is not a multiple of the feature grid {}",
                self.image_res, self.grid
            )));
        }
        Ok(())
    }

    /// Checks that the guidance pyramid exists and starts at or above the grid.
    pub fn validate_pyramid(&self) -> Result<()> {
        let sizes = pyramid_sizes(self.image_res)?;
        if self.grid > sizes[0] {
            return Err(Error::shape(format!(
                "feature grid {} exceeds the coarsest guidance level {}",
                self.grid, sizes[0]
            )));
        }
        Ok(())
    }

    pub fn pool_kernel(&self) -> usize {
        self.image_res / self.grid
    }

    pub fn x_en_shape(&self) -> [usize; 4] {
        [1, self.channels, self.image_res, self.image_res]
    }

    pub fn fused_shape(&self) -> [usize; 4] {
        [1, 2 * self.channels, self.grid, self.grid]
    }
}

/// Receives `x_en` in consecutive channel blocks.
pub trait FeatureSink {
    fn accept(&mut self, start_channel: usize, block: &Tensor) -> Result<()>;
}

/// Materializes the blocks into one tensor.
#[derive(Debug, Default)]
pub struct CollectSink {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl CollectSink {
    pub fn into_tensor(self) -> Result<Tensor> {
        Tensor::new(&self.shape, self.data)
    }
}

impl FeatureSink for CollectSink {
    fn accept(&mut self, start_channel: usize, block: &Tensor) -> Result<()> {
        let [_, c, h, w] = block.dims4()?;
        if self.shape.is_empty() {
            self.shape = vec![1, 0, h, w];
        }
        if start_channel != self.shape[1] {
            return Err(Error::shape("feature blocks arrived out of order"));
        }
        self.shape[1] += c;
        self.data.extend_from_slice(block.data());
        Ok(())
    }
}

/// Streams blocks to disk.
impl FeatureSink for HirtWriter {
    fn accept(&mut self, _: usize, block: &Tensor) -> Result<()> {
        self.append(block.data())
    }
}

/// Keeps only the shape and a few statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct SummarySink {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub elements: usize,
    pub all_finite: bool,
    pub min: f64,
    pub max: f64,
}

impl Default for SummarySink {
    fn default() -> Self {
        SummarySink {
            channels: 0,
            height: 0,
            width: 0,
            elements: 0,
            all_finite: true,
            min: f64::INFINITY,
            max: f64::NEG_INFINITY,
        }
    }
}

impl SummarySink {
    pub fn shape(&self) -> [usize; 4] {
        [1, self.channels, self.height, self.width]
    }
}

impl FeatureSink for SummarySink {
    fn accept(&mut self, _: usize, block: &Tensor) -> Result<()> {
        let [_, c, h, w] = block.dims4()?;
        self.channels += c;
        self.height = h;
        self.width = w;
        self.elements += block.numel();
        self.all_finite &= block.is_finite();
        let (lo, hi) = block.min_max();
        self.min = self.min.min(lo);
        self.max = self.max.max(hi);
        Ok(())
    }
}

/// How low-resolution features are lifted to image resolution.
enum Lift {
    Jbu(Vec<JbuKernel>),
    Bicubic(usize),
}

impl Lift {
    fn apply(&self, block: &Tensor) -> Result<Tensor> {
        match self {
            Lift::Jbu(kernels) => {
                let mut x = kernels[0].apply(block)?;
                for k in &kernels[1..] {
                    x = k.apply(&x)?;
                }
                Ok(x)
            }
            Lift::Bicubic(res) => ops::bicubic_resize(block, *res, *res),
        }
    }
}

fn guidance(image: &Tensor, weights: &WeightStore, cfg: &EnricherConfig) -> Result<GuidancePyramid> {
    let [_, _, r, _] = image.dims4()?;
    if cfg.use_unet {
        UNet::new(&cfg.unet, r)?.forward(image, weights)
    } else {
        RawGuidance::new(cfg.guidance_channels(), r, cfg.unet.seed)?.forward(image)
    }
}

fn stream(
    feats: &Tensor,
    geom: &Geometry,
    lift: &Lift,
    chunk: usize,
    sink: &mut dyn FeatureSink,
) -> Result<Tensor> {
    let k = geom.pool_kernel();
    let mut pooled = Vec::with_capacity(geom.channels * geom.grid * geom.grid);
    for c0 in (0..geom.channels).step_by(chunk) {
        let c1 = (c0 + chunk).min(geom.channels);
        let x = lift.apply(&feats.slice_channels(c0, c1)?)?;
        pooled.extend_from_slice(ops::avg_pool2d(&x, k)?.data());
        sink.accept(c0, &x)?;
    }
    let pooled = Tensor::new(&[1, geom.channels, geom.grid, geom.grid], pooled)?;
    ops::concat_channels(feats, &pooled)
}

/// Runs the pipeline, streaming `x_en` into `sink`; returns `fused`.
pub fn enrich_streamed(
    image: &Tensor,
    feats: &Tensor,
    weights: &WeightStore,
    cfg: &EnricherConfig,
    sink: &mut dyn FeatureSink,
) -> Result<Tensor> {
    cfg.validate()?;
    let geom = Geometry::of(image.shape(), feats.shape())?;
    geom.validate_pyramid()?;
    weights.require(&cfg.weight_names())?;
    let pyramid = guidance(image, weights, cfg)?;
    let params = (0..cfg.jbu.param_sets())
        .map(|s| JBULayerParams::from_store(weights, s))
        .collect::<Result<Vec<_>>>()?;
    let mut input = (geom.grid, geom.grid);
    let mut kernels = Vec::with_capacity(jbu::STAGES);
    for (stage, level) in pyramid.levels.iter().enumerate() {
        let k = jbu_kernel(input, level, &params[cfg.jbu.set_for_stage(stage)], &cfg.jbu)?;
        input = k.output_size();
        kernels.push(k);
    }
    stream(feats, &geom, &Lift::Jbu(kernels), cfg.chunk_channels, sink)
}

/// Materializing wrapper around [`enrich_streamed`].
pub fn enrich(
    image: &Tensor,
    feats: &Tensor,
    weights: &WeightStore,
    cfg: &EnricherConfig,
) -> Result<EnricherOutput> {
    let mut sink = CollectSink::default();
    let fused = enrich_streamed(image, feats, weights, cfg, &mut sink)?;
    Ok(EnricherOutput {
        x_en: sink.into_tensor()?,
        fused,
    })
}

/// Recorded pipeline for training: returns `(x_en, fused)`.
pub fn enrich_var(
    image: &Var,
    feats: &Var,
    vars: &VarStore,
    cfg: &EnricherConfig,
) -> Result<(Var, Var)> {
    cfg.validate()?;
    let geom = Geometry::of(image.shape(), feats.shape())?;
    geom.validate_pyramid()?;
    vars.require(&cfg.weight_names())?;
    let pyramid = if cfg.use_unet {
        UNet::new(&cfg.unet, geom.image_res)?.forward_var(image, vars)?
    } else {
        RawGuidance::new(cfg.guidance_channels(), geom.image_res, cfg.unet.seed)?.forward_var(image)?
    };
    let layers = (0..cfg.jbu.param_sets())
        .map(|s| JbuVars::from_store(vars, s))
        .collect::<Result<Vec<_>>>()?;
    let x_en = jbu::jbu_stack_var(feats, &pyramid, &layers, &cfg.jbu)?;
    let fused = feats.concat_channels(&x_en.avg_pool2d(geom.pool_kernel())?)?;
    Ok((x_en, fused))
}

/// Streaming ablation baseline: bicubic upsampling to `image_res`, no
/// learned parameters.
pub fn bicubic_baseline_streamed(
    feats: &Tensor,
    image_res: usize,
    chunk_channels: usize,
    sink: &mut dyn FeatureSink,
) -> Result<Tensor> {
    let geom = Geometry::of(&[1, 3, image_res, image_res], feats.shape())?;
    if geom.grid < 2 {
        return Err(Error::shape("bicubic baseline needs a feature grid of at least 2×2"));
    }
    stream(feats, &geom, &Lift::Bicubic(image_res), chunk_channels.max(1), sink)
}

pub fn bicubic_baseline(feats: &Tensor, image_res: usize) -> Result<EnricherOutput> {
    let mut sink = CollectSink::default();
    let fused = no_grad(|| bicubic_baseline_streamed(feats, image_res, 64, &mut sink))?;
    Ok(EnricherOutput {
        x_en: sink.into_tensor()?,
        fused,
    })
}
