//! Learned joint bilateral upsampling.
//!
//! An output pixel `p` at the guidance resolution maps to the continuous
//! low-resolution coordinate `s(p) = (p + 0.5) * h / S - 0.5`. Its window is
//! the `window × window` block of low-resolution cells centred on the cell
//! nearest to `s(p)`, clipped to the grid. Each cell `q` in the window gets
//! the logit
//!
//! ```text
//! -|s(p) - q|² / (2 σ²)  -  τ · |P·G(p) - P·G(c(q))|²
//! ```
//!
//! where `G` is the guidance map, `P` the learned projection and `c(q)` the
//! high-resolution centre of cell `q`, sampled bilinearly. The logits are
//! softmax-normalized over the window and the output is the weighted sum of
//! the low-resolution features.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{no_grad, Backward, Var};
use crate::error::{Error, Result};
use crate::reference::bilinear_sample;
use crate::tensor::Tensor;
use crate::unet::LEVELS;
use crate::weights::{VarStore, WeightStore};

pub const SIGMA_SPATIAL_INIT: f64 = 1.0;
pub const RANGE_TEMP_INIT: f64 = 10.0;

/// Number of upsampling stages in the stack.
pub const STAGES: usize = LEVELS;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JBUConfig {
    pub window: usize,
    pub proj_dim: usize,
    pub share_params: bool,
}

impl Default for JBUConfig {
    fn default() -> Self {
        JBUConfig {
            window: 7,
            proj_dim: 16,
            share_params: false,
        }
    }
}

impl JBUConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.window % 2 == 0 {
            return Err(Error::Config(format!(
                "JBU window must be odd and ≥ 1, got {}",
                self.window
            )));
        }
        if self.proj_dim == 0 {
            return Err(Error::Config("JBU proj_dim must be ≥ 1".into()));
        }
        Ok(())
    }

    /// Number of distinct parameter sets in a stack.
    pub fn param_sets(&self) -> usize {
        if self.share_params {
            1
        } else {
            STAGES
        }
    }

    /// Parameter-set index used by stack stage `stage`.
    pub fn set_for_stage(&self, stage: usize) -> usize {
        if self.share_params {
            0
        } else {
            stage
        }
    }

    pub fn param_count(&self, guidance_channels: usize) -> usize {
        self.param_sets() * (2 + self.proj_dim * guidance_channels)
    }
}

/// Learnable part of one upsampling layer.
#[derive(Debug, Clone, PartialEq)]
pub struct JBULayerParams {
    pub sigma_spatial: f64,
    pub range_temp: f64,
    /// proj_dim × guidance_channels
    pub guidance_proj: Tensor,
}

impl JBULayerParams {
    pub fn init(cfg: &JBUConfig, guidance_channels: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = (3.0 / guidance_channels as f64).sqrt();
        JBULayerParams {
            sigma_spatial: SIGMA_SPATIAL_INIT,
            range_temp: RANGE_TEMP_INIT,
            guidance_proj: Tensor::from_fn(&[cfg.proj_dim, guidance_channels], |_| {
                rng.gen_range(-bound..bound)
            }),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_spatial > 0.0) || !(self.range_temp > 0.0) {
            return Err(Error::InvalidValue(format!(
                "JBU sigma_spatial ({}) and range_temp ({}) must be > 0",
                self.sigma_spatial, self.range_temp
            )));
        }
        if self.guidance_proj.ndim() != 2 {
            return Err(Error::shape("guidance_proj must be proj_dim × guidance_channels"));
        }
        Ok(())
    }

    fn vars(&self) -> JbuVars {
        JbuVars {
            sigma_spatial: Var::constant(Tensor::scalar(self.sigma_spatial)),
            range_temp: Var::constant(Tensor::scalar(self.range_temp)),
            guidance_proj: Var::constant(self.guidance_proj.clone()),
        }
    }

    pub fn insert_into(&self, store: &mut WeightStore, set: usize) {
        store.insert(param_name(set, "sigma_spatial"), Tensor::scalar(self.sigma_spatial));
        store.insert(param_name(set, "range_temp"), Tensor::scalar(self.range_temp));
        store.insert(param_name(set, "guidance_proj"), self.guidance_proj.clone());
    }

    pub fn from_store(store: &WeightStore, set: usize) -> Result<Self> {
        let names: Vec<String> = ["sigma_spatial", "range_temp", "guidance_proj"]
            .iter()
            .map(|f| param_name(set, f))
            .collect();
        store.require(&names)?;
        let p = JBULayerParams {
            sigma_spatial: store.get(&names[0]).expect("checked").item()?,
            range_temp: store.get(&names[1]).expect("checked").item()?,
            guidance_proj: store.get(&names[2]).expect("checked").clone(),
        };
        p.validate()?;
        Ok(p)
    }
}

pub fn param_name(set: usize, field: &str) -> String {
    format!("jbu.{set}.{field}")
}

pub fn jbu_weight_names(cfg: &JBUConfig) -> Vec<String> {
    (0..cfg.param_sets())
        .flat_map(|s| {
            ["sigma_spatial", "range_temp", "guidance_proj"].map(|f| param_name(s, f))
        })
        .collect()
}

/// Seeded initial parameters for a whole stack, stored under `jbu.{set}.*`.
pub fn jbu_init(cfg: &JBUConfig, guidance_channels: usize, seed: u64) -> Result<WeightStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0b11_a7e2);
    let mut store = WeightStore::new();
    for set in 0..cfg.param_sets() {
        JBULayerParams::init(cfg, guidance_channels, &mut rng).insert_into(&mut store, set);
    }
    Ok(store)
}

/// Tape handles for one layer's parameters.
#[derive(Clone)]
pub struct JbuVars {
    pub sigma_spatial: Var,
    pub range_temp: Var,
    pub guidance_proj: Var,
}

impl JbuVars {
    pub fn from_store(vars: &VarStore, set: usize) -> Result<Self> {
        Ok(JbuVars {
            sigma_spatial: vars.get(&param_name(set, "sigma_spatial"))?.clone(),
            range_temp: vars.get(&param_name(set, "range_temp"))?.clone(),
            guidance_proj: vars.get(&param_name(set, "guidance_proj"))?.clone(),
        })
    }
}

// Geometry -----------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Geometry {
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
    window: usize,
}

impl Geometry {
    fn new(in_hw: (usize, usize), out_hw: (usize, usize), window: usize) -> Result<Self> {
        if out_hw.0 < in_hw.0 || out_hw.1 < in_hw.1 {
            return Err(Error::shape(format!(
                "JBU only upsamples: target {}×{} is smaller than input {}×{}",
                out_hw.0, out_hw.1, in_hw.0, in_hw.1
            )));
        }
        Ok(Geometry {
            in_h: in_hw.0,
            in_w: in_hw.1,
            out_h: out_hw.0,
            out_w: out_hw.1,
            window,
        })
    }

    fn slots(&self) -> usize {
        self.window * self.window
    }

    fn radius(&self) -> isize {
        (self.window / 2) as isize
    }

    /// Continuous source coordinate and nearest cell along one axis.
    fn source(out: usize, in_len: usize, out_len: usize) -> (f64, isize) {
        let s = (out as f64 + 0.5) * (in_len as f64 / out_len as f64) - 0.5;
        let centre = ((s + 0.5).floor() as isize).clamp(0, in_len as isize - 1);
        (s, centre)
    }

    /// Cell for window slot `slot` of output pixel `(y, x)`, if inside the grid.
    fn cell(&self, cy: isize, cx: isize, slot: usize) -> Option<(usize, usize)> {
        let r = self.radius();
        let qy = cy + (slot / self.window) as isize - r;
        let qx = cx + (slot % self.window) as isize - r;
        if qy < 0 || qx < 0 || qy >= self.in_h as isize || qx >= self.in_w as isize {
            None
        } else {
            Some((qy as usize, qx as usize))
        }
    }
}

/// How window logits are turned into weights.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Normalization {
    Softmax,
    /// Raw `exp(logit)` without dividing by the window sum; exists only so
    /// the self-test can prove it detects broken normalization.
    Unnormalized,
}

/// Precomputed per-pixel window weights of one upsampling step.
///
/// Weights do not depend on the features, so one kernel can be applied to
/// any number of channel blocks.
pub struct JbuKernel {
    geom: Geometry,
    /// out_h·out_w·window², zero for slots outside the grid.
    weights: Vec<f64>,
}

impl JbuKernel {
    /// `proj_out` is the projected guidance at output resolution
    /// (1×P×S×S); `proj_cells` the same map sampled at the low-resolution
    /// cell centres (1×P×h×w).
    fn build(
        proj_out: &Tensor,
        proj_cells: &Tensor,
        sigma: f64,
        temp: f64,
        window: usize,
        normalization: Normalization,
    ) -> Result<Self> {
        let [_, p, out_h, out_w] = proj_out.dims4()?;
        let [_, pc, in_h, in_w] = proj_cells.dims4()?;
        if p != pc {
            return Err(Error::shape("projected guidance channel mismatch"));
        }
        let geom = Geometry::new((in_h, in_w), (out_h, out_w), window)?;
        let slots = geom.slots();
        let (po, pcd) = (proj_out.data(), proj_cells.data());
        let plane_out = out_h * out_w;
        let plane_in = in_h * in_w;
        let inv_two_sigma2 = 1.0 / (2.0 * sigma * sigma);
        let mut weights = vec![0.0; plane_out * slots];
        weights
            .par_chunks_mut(out_w * slots)
            .enumerate()
            .for_each(|(y, row)| {
                let (sy, cy) = Geometry::source(y, in_h, out_h);
                let mut logits = vec![0.0; slots];
                let mut valid = vec![false; slots];
                for x in 0..out_w {
                    let (sx, cx) = Geometry::source(x, in_w, out_w);
                    let mut max = f64::NEG_INFINITY;
                    for slot in 0..slots {
                        let Some((qy, qx)) = geom.cell(cy, cx, slot) else {
                            valid[slot] = false;
                            continue;
                        };
                        valid[slot] = true;
                        let dy = sy - qy as f64;
                        let dx = sx - qx as f64;
                        let mut range = 0.0;
                        for k in 0..p {
                            let d = po[k * plane_out + y * out_w + x] - pcd[k * plane_in + qy * in_w + qx];
                            range += d * d;
                        }
                        let l = -(dy * dy + dx * dx) * inv_two_sigma2 - temp * range;
                        logits[slot] = l;
                        max = max.max(l);
                    }
                    let w = &mut row[x * slots..][..slots];
                    let mut total = 0.0;
                    for slot in 0..slots {
                        if valid[slot] {
                            let e = (logits[slot] - max).exp();
                            w[slot] = e;
                            total += e;
                        }
                    }
                    if normalization == Normalization::Softmax {
                        for v in w.iter_mut() {
                            *v /= total;
                        }
                    }
                }
            });
        Ok(JbuKernel { geom, weights })
    }

    pub fn output_size(&self) -> (usize, usize) {
        (self.geom.out_h, self.geom.out_w)
    }

    pub fn input_size(&self) -> (usize, usize) {
        (self.geom.in_h, self.geom.in_w)
    }

    /// Window weights as an `S×S×window×window` tensor (zeros outside the grid).
    pub fn weights(&self) -> Tensor {
        let g = &self.geom;
        Tensor::from_parts(
            vec![g.out_h, g.out_w, g.window, g.window],
            self.weights.clone(),
        )
    }

    /// Applies the kernel to `features` (1×C×h×w), producing 1×C×S×S.
    ///
    /// Channels are processed in blocks transposed to pixel-major order so
    /// the inner loop runs over contiguous channels. Each output element
    /// still sums its window slots in slot order.
    pub fn apply(&self, features: &Tensor) -> Result<Tensor> {
        const BLOCK: usize = 64;
        let [n, c, h, w] = features.dims4()?;
        let g = &self.geom;
        if n != 1 || (h, w) != (g.in_h, g.in_w) {
            return Err(Error::shape(format!(
                "JBU kernel built for 1×C×{}×{} features, got {:?}",
                g.in_h,
                g.in_w,
                features.shape()
            )));
        }
        let plane_in = h * w;
        let plane_out = g.out_h * g.out_w;
        let mut out = vec![0.0; c * plane_out];
        for c0 in (0..c).step_by(BLOCK) {
            let cb = BLOCK.min(c - c0);
            let block = self.apply_block(&features.data()[c0 * plane_in..(c0 + cb) * plane_in], cb);
            out[c0 * plane_out..(c0 + cb) * plane_out].copy_from_slice(&block);
        }
        Ok(Tensor::from_parts(vec![1, c, g.out_h, g.out_w], out))
    }

    /// `src` holds `cb` channel planes; returns `cb` output planes.
    fn apply_block(&self, src: &[f64], cb: usize) -> Vec<f64> {
        let g = &self.geom;
        let plane_in = g.in_h * g.in_w;
        let plane_out = g.out_h * g.out_w;
        let slots = g.slots();
        // pixel-major copy: [cell][channel]
        let mut cells = vec![0.0; plane_in * cb];
        for ch in 0..cb {
            for i in 0..plane_in {
                cells[i * cb + ch] = src[ch * plane_in + i];
            }
        }
        let mut pix = vec![0.0; plane_out * cb];
        pix.par_chunks_mut(g.out_w * cb)
            .enumerate()
            .for_each(|(y, row)| {
                let (_, cy) = Geometry::source(y, g.in_h, g.out_h);
                for x in 0..g.out_w {
                    let (_, cx) = Geometry::source(x, g.in_w, g.out_w);
                    let acc = &mut row[x * cb..][..cb];
                    let wts = &self.weights[(y * g.out_w + x) * slots..][..slots];
                    for (slot, &wv) in wts.iter().enumerate() {
                        if let Some((qy, qx)) = g.cell(cy, cx, slot) {
                            let f = &cells[(qy * g.in_w + qx) * cb..][..cb];
                            for (a, v) in acc.iter_mut().zip(f) {
                                *a += wv * v;
                            }
                        }
                    }
                }
            });
        let mut out = vec![0.0; plane_out * cb];
        for i in 0..plane_out {
            for ch in 0..cb {
                out[ch * plane_out + i] = pix[i * cb + ch];
            }
        }
        out
    }

}

/// Multiply-accumulates of one upsampling stage with output side `out_side`:
/// guidance projection, range distances and the weighted feature sum. Edge
/// windows are counted in full.
pub fn stage_macs(out_side: u64, cfg: &JBUConfig, channels: u64, guidance_channels: u64) -> u64 {
    let pixels = out_side * out_side;
    let slots = (cfg.window * cfg.window) as u64;
    let p = cfg.proj_dim as u64;
    pixels * (p * guidance_channels + slots * (p + channels))
}

// Differentiable core ------------------------------------------------------

/// Recorded kernel application. Parents: features, projected guidance at
/// output resolution, projected guidance at cell centres, sigma, temp.
struct JbuCoreBackward {
    geom: Geometry,
    weights: Vec<f64>,
}

impl Backward for JbuCoreBackward {
    fn name(&self) -> &'static str {
        "jbu"
    }

    fn backward(&self, _: &Tensor, grad: &Tensor, parents: &[Var]) -> Result<Vec<Option<Tensor>>> {
        let g = &self.geom;
        let f = parents[0].value();
        let po = parents[1].value();
        let pc = parents[2].value();
        let sigma = parents[3].value().data()[0];
        let temp = parents[4].value().data()[0];
        let [_, c, _, _] = f.dims4()?;
        let [_, p, _, _] = po.dims4()?;
        let plane_in = g.in_h * g.in_w;
        let plane_out = g.out_h * g.out_w;
        let slots = g.slots();
        let (fd, pod, pcd, gd) = (f.data(), po.data(), pc.data(), grad.data());

        let mut d_f = vec![0.0; c * plane_in];
        let mut d_po = vec![0.0; p * plane_out];
        let mut d_pc = vec![0.0; p * plane_in];
        let mut d_sigma = 0.0;
        let mut d_temp = 0.0;
        let mut d_w = vec![0.0; slots];
        for y in 0..g.out_h {
            let (sy, cy) = Geometry::source(y, g.in_h, g.out_h);
            for x in 0..g.out_w {
                let (sx, cx) = Geometry::source(x, g.in_w, g.out_w);
                let pix = y * g.out_w + x;
                let w = &self.weights[pix * slots..][..slots];
                let mut dot = 0.0;
                for slot in 0..slots {
                    d_w[slot] = 0.0;
                    let Some((qy, qx)) = g.cell(cy, cx, slot) else {
                        continue;
                    };
                    let cell = qy * g.in_w + qx;
                    let mut acc = 0.0;
                    for ch in 0..c {
                        let go = gd[ch * plane_out + pix];
                        acc += go * fd[ch * plane_in + cell];
                        d_f[ch * plane_in + cell] += w[slot] * go;
                    }
                    d_w[slot] = acc;
                    dot += w[slot] * acc;
                }
                for slot in 0..slots {
                    let Some((qy, qx)) = g.cell(cy, cx, slot) else {
                        continue;
                    };
                    let cell = qy * g.in_w + qx;
                    // gradient w.r.t. the logit of this slot
                    let dl = w[slot] * (d_w[slot] - dot);
                    let dy = sy - qy as f64;
                    let dx = sx - qx as f64;
                    d_sigma += dl * (dy * dy + dx * dx) / (sigma * sigma * sigma);
                    let mut range = 0.0;
                    for k in 0..p {
                        let diff = pod[k * plane_out + pix] - pcd[k * plane_in + cell];
                        range += diff * diff;
                        d_po[k * plane_out + pix] -= 2.0 * temp * diff * dl;
                        d_pc[k * plane_in + cell] += 2.0 * temp * diff * dl;
                    }
                    d_temp -= dl * range;
                }
            }
        }
        let wrap = |i: usize, data: Vec<f64>| {
            parents[i]
                .requires_grad()
                .then(|| Tensor::from_parts(parents[i].shape().to_vec(), data))
        };
        Ok(vec![
            wrap(0, d_f),
            wrap(1, d_po),
            wrap(2, d_pc),
            wrap(3, vec![d_sigma]),
            wrap(4, vec![d_temp]),
        ])
    }
}

fn check_inputs(features: &[usize], guidance: &[usize], proj: &[usize]) -> Result<()> {
    let &[n, _, _, _] = features else {
        return Err(Error::shape(format!("JBU features must be 1×C×h×w, got {features:?}")));
    };
    let &[ng, gc, _, _] = guidance else {
        return Err(Error::shape(format!("JBU guidance must be 1×g×S×S, got {guidance:?}")));
    };
    if n != 1 || ng != 1 {
        return Err(Error::shape("JBU works on a single image (N = 1)"));
    }
    match proj {
        &[_, pg] if pg == gc => Ok(()),
        _ => Err(Error::shape(format!(
            "guidance has {gc} channels but guidance_proj has shape {proj:?}"
        ))),
    }
}

/// Recorded upsampling of `features` under `guidance`.
pub fn jbu_upsample_var(
    features: &Var,
    guidance: &Var,
    params: &JbuVars,
    cfg: &JBUConfig,
) -> Result<Var> {
    cfg.validate()?;
    check_inputs(features.shape(), guidance.shape(), params.guidance_proj.shape())?;
    let [_, _, h, w] = features.value().dims4()?;
    let [_, _, out_h, out_w] = guidance.value().dims4()?;
    Geometry::new((h, w), (out_h, out_w), cfg.window)?;
    let (proj_out, proj_cells) = project_guidance(guidance, &params.guidance_proj, h, w)?;
    let sigma = params.sigma_spatial.value().item()?;
    let temp = params.range_temp.value().item()?;
    let kernel = JbuKernel::build(
        proj_out.value(),
        proj_cells.value(),
        sigma,
        temp,
        cfg.window,
        Normalization::Softmax,
    )?;
    let value = kernel.apply(features.value())?;
    Ok(Var::from_op(
        value,
        vec![
            features.clone(),
            proj_out,
            proj_cells,
            params.sigma_spatial.clone(),
            params.range_temp.clone(),
        ],
        JbuCoreBackward {
            geom: kernel.geom,
            weights: kernel.weights,
        },
    ))
}

fn project_guidance(guidance: &Var, proj: &Var, h: usize, w: usize) -> Result<(Var, Var)> {
    let [pd, gc] = [proj.shape()[0], proj.shape()[1]];
    let proj_out = guidance.conv2d(&proj.reshape(&[pd, gc, 1, 1])?, None, 1, 0)?;
    let proj_cells = proj_out.bilinear_resize(h, w)?;
    Ok((proj_out, proj_cells))
}

/// Builds the kernel of one layer without recording anything.
pub fn jbu_kernel(
    input_hw: (usize, usize),
    guidance: &Tensor,
    params: &JBULayerParams,
    cfg: &JBUConfig,
) -> Result<JbuKernel> {
    jbu_kernel_with(input_hw, guidance, params, cfg, Normalization::Softmax)
}

#[doc(hidden)]
pub fn jbu_kernel_with(
    input_hw: (usize, usize),
    guidance: &Tensor,
    params: &JBULayerParams,
    cfg: &JBUConfig,
    normalization: Normalization,
) -> Result<JbuKernel> {
    cfg.validate()?;
    params.validate()?;
    check_inputs(&[1, 1, input_hw.0, input_hw.1], guidance.shape(), params.guidance_proj.shape())?;
    let [_, _, out_h, out_w] = guidance.dims4()?;
    Geometry::new(input_hw, (out_h, out_w), cfg.window)?;
    no_grad(|| {
        let v = params.vars();
        let (po, pc) = project_guidance(&Var::constant(guidance.clone()), &v.guidance_proj, input_hw.0, input_hw.1)?;
        JbuKernel::build(
            po.value(),
            pc.value(),
            params.sigma_spatial,
            params.range_temp,
            cfg.window,
            normalization,
        )
    })
}

/// Upsamples `features` (1×C×h×w) to the guidance resolution.
pub fn jbu_upsample(
    features: &Tensor,
    guidance: &Tensor,
    params: &JBULayerParams,
    cfg: &JBUConfig,
) -> Result<Tensor> {
    let [n, _, h, w] = features.dims4()?;
    if n != 1 {
        return Err(Error::shape("JBU works on a single image (N = 1)"));
    }
    jbu_kernel((h, w), guidance, params, cfg)?.apply(features)
}

/// Five chained upsampling steps, stage `k` guided by pyramid level `k`.
pub fn jbu_stack_var(
    features: &Var,
    pyramid: &[Var],
    layers: &[JbuVars],
    cfg: &JBUConfig,
) -> Result<Var> {
    check_pyramid(pyramid.iter().map(|v| v.shape()))?;
    let mut x = features.clone();
    for (stage, level) in pyramid.iter().enumerate() {
        x = jbu_upsample_var(&x, level, &layers[cfg.set_for_stage(stage)], cfg)?;
    }
    Ok(x)
}

pub fn jbu_stack(
    features: &Tensor,
    pyramid: &[Tensor],
    params: &[JBULayerParams],
    cfg: &JBUConfig,
) -> Result<Tensor> {
    check_pyramid(pyramid.iter().map(|t| t.shape()))?;
    if params.len() != cfg.param_sets() {
        return Err(Error::Config(format!(
            "JBU stack needs {} parameter sets, got {}",
            cfg.param_sets(),
            params.len()
        )));
    }
    let mut x = features.clone();
    for (stage, level) in pyramid.iter().enumerate() {
        x = jbu_upsample(&x, level, &params[cfg.set_for_stage(stage)], cfg)?;
    }
    Ok(x)
}

fn check_pyramid<'a>(shapes: impl Iterator<Item = &'a [usize]>) -> Result<()> {
    let sides: Vec<usize> = shapes.map(|s| s.get(2).copied().unwrap_or(0)).collect();
    let ok = sides.len() == STAGES
        && sides[0] > 0
        && sides.windows(2).all(|p| p[1] == 2 * p[0]);
    if !ok {
        return Err(Error::shape(format!(
            "guidance pyramid must have {STAGES} levels doubling in size, got sides {sides:?}"
        )));
    }
    Ok(())
}

/// Literal per-pixel evaluation of the upsampling formula, sharing no code
/// with the optimized path apart from the border-clamped bilinear sampler.
pub fn jbu_naive_oracle(
    features: &Tensor,
    guidance: &Tensor,
    params: &JBULayerParams,
    cfg: &JBUConfig,
) -> Result<Tensor> {
    cfg.validate()?;
    params.validate()?;
    check_inputs(features.shape(), guidance.shape(), params.guidance_proj.shape())?;
    let [_, c, h, w] = features.dims4()?;
    let [_, gc, s_h, s_w] = guidance.dims4()?;
    if s_h < h || s_w < w {
        return Err(Error::shape("JBU only upsamples"));
    }
    let pd = params.guidance_proj.shape()[0];
    let pm = |k: usize, j: usize| params.guidance_proj.data()[k * gc + j];
    let r = (cfg.window / 2) as i64;
    let sigma = params.sigma_spatial;
    let temp = params.range_temp;
    let mut out = vec![0.0; c * s_h * s_w];
    for y in 0..s_h {
        for x in 0..s_w {
            let sy = (y as f64 + 0.5) * h as f64 / s_h as f64 - 0.5;
            let sx = (x as f64 + 0.5) * w as f64 / s_w as f64 - 0.5;
            let cy = ((sy + 0.5).floor() as i64).clamp(0, h as i64 - 1);
            let cx = ((sx + 0.5).floor() as i64).clamp(0, w as i64 - 1);
            let gp: Vec<f64> = (0..pd)
                .map(|k| (0..gc).map(|j| pm(k, j) * guidance.at4(0, j, y, x)).sum())
                .collect();
            let mut cells = Vec::new();
            let mut logits = Vec::new();
            for qy in cy - r..=cy + r {
                for qx in cx - r..=cx + r {
                    if qy < 0 || qx < 0 || qy >= h as i64 || qx >= w as i64 {
                        continue;
                    }
                    let hy = (qy as f64 + 0.5) * s_h as f64 / h as f64 - 0.5;
                    let hx = (qx as f64 + 0.5) * s_w as f64 / w as f64 - 0.5;
                    let sampled: Vec<f64> = (0..gc)
                        .map(|j| {
                            let plane = &guidance.data()[j * s_h * s_w..(j + 1) * s_h * s_w];
                            bilinear_sample(plane, s_h, s_w, hy, hx)
                        })
                        .collect();
                    let mut range = 0.0;
                    for (k, gpk) in gp.iter().enumerate() {
                        let gq: f64 = (0..gc).map(|j| pm(k, j) * sampled[j]).sum();
                        range += (gpk - gq).powi(2);
                    }
                    let spatial = (sy - qy as f64).powi(2) + (sx - qx as f64).powi(2);
                    logits.push(-spatial / (2.0 * sigma * sigma) - temp * range);
                    cells.push((qy as usize, qx as usize));
                }
            }
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let total: f64 = exps.iter().sum();
            for ch in 0..c {
                let mut acc = 0.0;
                for (e, &(qy, qx)) in exps.iter().zip(&cells) {
                    acc += e / total * features.at4(0, ch, qy, qx);
                }
                out[(ch * s_h + y) * s_w + x] = acc;
            }
        }
    }
    Ok(Tensor::from_parts(vec![1, c, s_h, s_w], out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(g: usize, pd: usize, seed: u64) -> JBULayerParams {
        let cfg = JBUConfig {
            proj_dim: pd,
            ..JBUConfig::default()
        };
        JBULayerParams::init(&cfg, g, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn window_one_is_nearest_neighbour() {
        let cfg = JBUConfig {
            window: 1,
            proj_dim: 2,
            share_params: false,
        };
        let f = Tensor::from_fn(&[1, 2, 3, 3], |i| i as f64);
        let g = Tensor::from_fn(&[1, 3, 6, 6], |i| (i as f64 * 0.7).sin());
        let out = jbu_upsample(&f, &g, &params(3, 2, 1), &cfg).unwrap();
        for ch in 0..2 {
            for y in 0..6 {
                for x in 0..6 {
                    assert_eq!(out.at4(0, ch, y, x), f.at4(0, ch, y / 2, x / 2));
                }
            }
        }
    }

    #[test]
    fn identity_resolution_with_unit_window_is_identity() {
        let cfg = JBUConfig {
            window: 1,
            proj_dim: 2,
            share_params: false,
        };
        let f = Tensor::from_fn(&[1, 2, 4, 5], |i| (i as f64).cos());
        let g = Tensor::from_fn(&[1, 3, 4, 5], |i| i as f64);
        assert_eq!(jbu_upsample(&f, &g, &params(3, 2, 1), &cfg).unwrap(), f);
        assert_eq!(jbu_naive_oracle(&f, &g, &params(3, 2, 1), &cfg).unwrap(), f);
    }

    #[test]
    fn rejects_downsampling_and_channel_mismatch() {
        let cfg = JBUConfig::default();
        let f = Tensor::zeros(&[1, 1, 6, 6]);
        let g = Tensor::zeros(&[1, 3, 4, 4]);
        assert!(jbu_upsample(&f, &g, &params(3, 16, 0), &cfg).is_err());
        let g = Tensor::zeros(&[1, 4, 8, 8]);
        assert!(jbu_upsample(&f, &g, &params(3, 16, 0), &cfg).is_err());
        assert!(JBUConfig { window: 4, ..cfg }.validate().is_err());
    }

    #[test]
    fn store_round_trip() {
        let cfg = JBUConfig::default();
        let store = jbu_init(&cfg, 32, 9).unwrap();
        assert_eq!(store.len(), 15);
        assert_eq!(store.count_with_prefixes(&["jbu."]), cfg.param_count(32));
        let p = JBULayerParams::from_store(&store, 3).unwrap();
        assert_eq!(p.sigma_spatial, 1.0);
        assert_eq!(p.range_temp, 10.0);
        let shared = JBUConfig {
            share_params: true,
            ..cfg
        };
        assert_eq!(jbu_init(&shared, 32, 9).unwrap().len(), 3);
    }

    #[test]
    fn pyramid_check() {
        assert!(check_pyramid([&[1, 1, 42][..], &[1, 1, 84], &[1, 1, 168], &[1, 1, 336], &[1, 1, 672]].into_iter()).is_ok());
        assert!(check_pyramid([&[1, 1, 42][..], &[1, 1, 84], &[1, 1, 168], &[1, 1, 336]].into_iter()).is_err());
        assert!(check_pyramid([&[1, 1, 42][..], &[1, 1, 84], &[1, 1, 160], &[1, 1, 336], &[1, 1, 672]].into_iter()).is_err());
    }
}
