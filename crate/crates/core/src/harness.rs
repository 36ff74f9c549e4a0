//! Desk-scale training of the enricher on a proxy objective.
//!
//! The objective asks the pooled enriched map to reproduce the encoder
//! features and a trainable 1×1 probe on the enriched map to reproduce the
//! image:
//!
//! ```text
//! α · MSE(pool(x_en), E(i)) + β · MSE(pool_q(probe(x_en)), pool_q(I))
//! ```
//!
//! Images are seeded procedural scenes (gradients, checkerboards, blobs) so
//! runs need no data and are reproducible bit for bit.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{no_grad, Var};
use crate::encoder::{EncoderSpec, SurrogateEncoder};
use crate::enricher::{enrich_var, enricher_init, EnricherConfig, EnricherOutput};
use crate::error::{Error, Result};
use crate::imageio::{prepare_pair, ImageSpec};
use crate::jbu::JBUConfig;
use crate::ops;
use crate::tensor::{atomic_write, Tensor};
use crate::unet::UNetConfig;
use crate::weights::{VarStore, WeightStore};

/// Lower bound kept on the JBU bandwidth and temperature after each update.
pub const POSITIVE_FLOOR: f64 = 1e-3;

pub const PROBE_WEIGHT: &str = "probe.weight";
pub const PROBE_BIAS: &str = "probe.bias";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Adam,
}

/// Reduced geometry the demo trains at.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeskModel {
    pub image: ImageSpec,
    pub encoder: EncoderSpec,
    pub enricher: EnricherConfig,
}

impl Default for DeskModel {
    fn default() -> Self {
        DeskModel {
            image: ImageSpec {
                high_res: 64,
                low_res: 56,
                ..ImageSpec::default()
            },
            encoder: EncoderSpec {
                input_res: 56,
                patch: 14,
                out_channels: 32,
                ..EncoderSpec::default()
            },
            enricher: EnricherConfig {
                unet: UNetConfig {
                    encoder_widths: [8, 12, 16, 24, 32],
                    guidance_channels: 16,
                    seed: 7,
                },
                jbu: JBUConfig::default(),
                ..EnricherConfig::default()
            },
        }
    }
}

impl DeskModel {
    pub fn validate(&self) -> Result<()> {
        self.image.validate()?;
        self.encoder.validate()?;
        self.enricher.validate()?;
        if self.encoder.input_res != self.image.low_res {
            return Err(Error::Config(format!(
                "encoder input_res {} must equal image low_res {}",
                self.encoder.input_res, self.image.low_res
            )));
        }
        crate::enricher::Geometry {
            image_res: self.image.high_res,
            grid: self.encoder.grid(),
            channels: self.encoder.out_channels,
        }
        .validate_pyramid()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    /// Weight of the feature-consistency term.
    pub alpha: f64,
    /// Weight of the image-probe term.
    pub beta: f64,
    pub optimizer: Optimizer,
    pub adam_betas: [f64; 2],
    pub adam_eps: f64,
    /// Synthetic images per step.
    pub batch: usize,
    /// Block size both sides of the probe term are averaged over.
    pub probe_pool: usize,
    pub model: DeskModel,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 200,
            lr: 2e-5,
            seed: 0,
            alpha: 1.0,
            beta: 1.0,
            optimizer: Optimizer::Adam,
            adam_betas: [0.9, 0.999],
            adam_eps: 1e-8,
            batch: 2,
            probe_pool: 2,
            model: DeskModel::default(),
        }
    }
}

impl TrainConfig {
    /// The lower of the two published learning rates.
    pub fn preset_low_lr() -> Self {
        TrainConfig::default()
    }

    /// The higher of the two published learning rates.
    pub fn preset_high_lr() -> Self {
        TrainConfig {
            lr: 5e-3,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("lr must be finite and ≥ 0, got {}", self.lr)));
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0) || self.alpha + self.beta == 0.0 {
            return Err(Error::Config(format!(
                "loss weights must be ≥ 0 and not both zero, got alpha {} beta {}",
                self.alpha, self.beta
            )));
        }
        let [b1, b2] = self.adam_betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) || !(self.adam_eps > 0.0) {
            return Err(Error::Config("adam betas must lie in [0, 1) and eps be > 0".into()));
        }
        if self.batch == 0 || self.probe_pool == 0 || self.model.image.high_res % self.probe_pool != 0 {
            return Err(Error::Config(format!(
                "batch must be ≥ 1 and probe_pool must divide high_res {}",
                self.model.image.high_res
            )));
        }
        self.model.validate()
    }
}

// Synthetic data -----------------------------------------------------------

/// Seeded procedural RGB image in [0, 1], cycling through linear gradients,
/// checkerboards and Gaussian blobs with `index`.
pub fn synthetic_image(res: usize, seed: u64, index: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ index as u64);
    let mut colour = || [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()];
    let (a, b) = (colour(), colour());
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (index as u64).rotate_left(17));
    let r = res as f64;
    let pixel: Box<dyn Fn(usize, f64, f64) -> f64> = match index % 3 {
        0 => {
            let theta: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let (c, s) = (theta.cos(), theta.sin());
            Box::new(move |ch, y, x| {
                let t = (((x / r - 0.5) * c + (y / r - 0.5) * s) / std::f64::consts::SQRT_2 + 0.5).clamp(0.0, 1.0);
                a[ch] * (1.0 - t) + b[ch] * t
            })
        }
        1 => {
            let period = rng.gen_range(4.0..r / 2.0);
            let phase: f64 = rng.gen_range(0.0..period);
            Box::new(move |ch, y, x| {
                let cell = ((x + phase) / period).floor() as i64 + ((y + phase) / period).floor() as i64;
                if cell.rem_euclid(2) == 0 { a[ch] } else { b[ch] }
            })
        }
        _ => {
            let blobs: Vec<(f64, f64, f64, [f64; 3])> = (0..4)
                .map(|_| {
                    (
                        rng.gen_range(0.0..r),
                        rng.gen_range(0.0..r),
                        rng.gen_range(r / 16.0..r / 4.0),
                        [rng.gen(), rng.gen(), rng.gen()],
                    )
                })
                .collect();
            Box::new(move |ch, y, x| {
                let mut v = a[ch] * 0.5;
                for (by, bx, rad, col) in &blobs {
                    let d2 = (y - by).powi(2) + (x - bx).powi(2);
                    v += col[ch] * (-d2 / (2.0 * rad * rad)).exp();
                }
                v.clamp(0.0, 1.0)
            })
        }
    };
    let plane = res * res;
    Tensor::from_fn(&[1, 3, res, res], |i| {
        let ch = i / plane;
        let p = i % plane;
        pixel(ch, (p / res) as f64 + 0.5, (p % res) as f64 + 0.5)
    })
}

/// One training example: full-resolution view and frozen encoder features.
#[derive(Debug, Clone)]
pub struct Example {
    pub image: Tensor,
    pub feats: Tensor,
}

pub fn synthetic_batch(cfg: &TrainConfig) -> Result<Vec<Example>> {
    let m = &cfg.model;
    let encoder = SurrogateEncoder::new(&m.encoder)?;
    (0..cfg.batch)
        .map(|i| {
            let raw = synthetic_image(m.image.high_res, cfg.seed, i);
            let (high, low) = prepare_pair(&raw, &m.image)?;
            Ok(Example {
                feats: encoder.encode(&low)?,
                image: high,
            })
        })
        .collect()
}

// Objective ----------------------------------------------------------------

pub fn probe_init(channels: usize, seed: u64) -> WeightStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x970b_e5ee);
    let bound = (3.0 / channels as f64).sqrt();
    let mut store = WeightStore::new();
    store.insert(
        PROBE_WEIGHT,
        Tensor::from_fn(&[3, channels, 1, 1], |_| rng.gen_range(-bound..bound)),
    );
    store.insert(PROBE_BIAS, Tensor::zeros(&[3]));
    store
}

/// Recorded proxy loss of one example.
pub fn proxy_loss_var(
    x_en: &Var,
    feats: &Tensor,
    image: &Tensor,
    vars: &VarStore,
    cfg: &TrainConfig,
) -> Result<Var> {
    let [_, _, res, _] = x_en.value().dims4()?;
    let [_, _, grid, _] = feats.dims4()?;
    if grid == 0 || res % grid != 0 {
        return Err(Error::shape(format!("x_en side {res} is not a multiple of the grid {grid}")));
    }
    let pooled = x_en.avg_pool2d(res / grid)?;
    let mut loss = pooled.mse_loss(&Var::constant(feats.clone()))?.scale(cfg.alpha);
    if cfg.beta != 0.0 {
        let probe = x_en.conv2d(vars.get(PROBE_WEIGHT)?, Some(vars.get(PROBE_BIAS)?), 1, 0)?;
        let q = cfg.probe_pool;
        let target = ops::avg_pool2d(image, q)?;
        let term = probe.avg_pool2d(q)?.mse_loss(&Var::constant(target))?;
        loss = loss.add(&term.scale(cfg.beta))?;
    }
    Ok(loss)
}

/// Proxy loss of a finished enrichment, without recording.
pub fn proxy_loss(
    out: &EnricherOutput,
    feats: &Tensor,
    image: &Tensor,
    probe: &WeightStore,
    cfg: &TrainConfig,
) -> Result<f64> {
    probe.require(&[PROBE_WEIGHT.to_string(), PROBE_BIAS.to_string()])?;
    no_grad(|| {
        proxy_loss_var(&Var::constant(out.x_en.clone()), feats, image, &VarStore::constants(probe), cfg)?
            .value()
            .item()
    })
}

// Optimization -------------------------------------------------------------

/// Optimizer state kept alongside the weights.
#[derive(Debug, Clone, PartialEq)]
struct Moments {
    m: WeightStore,
    v: WeightStore,
}

pub struct Trainer {
    cfg: TrainConfig,
    data: Vec<Example>,
    weights: WeightStore,
    moments: Moments,
    step: usize,
}

#[derive(Debug, Clone)]
pub struct StepResult {
    pub loss: f64,
    pub gradients: WeightStore,
}

impl Trainer {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut weights = enricher_init(&cfg.model.enricher)?;
        weights.merge(probe_init(cfg.model.encoder.out_channels, cfg.seed));
        Self::with_weights(cfg, weights)
    }

    pub fn with_weights(cfg: &TrainConfig, weights: WeightStore) -> Result<Self> {
        cfg.validate()?;
        let mut required = cfg.model.enricher.weight_names();
        required.extend([PROBE_WEIGHT.to_string(), PROBE_BIAS.to_string()]);
        weights.require(&required)?;
        let zeros = || {
            let mut s = WeightStore::new();
            for (n, t) in weights.iter() {
                s.insert(n, Tensor::zeros(t.shape()));
            }
            s
        };
        Ok(Trainer {
            moments: Moments { m: zeros(), v: zeros() },
            data: synthetic_batch(cfg)?,
            cfg: cfg.clone(),
            weights,
            step: 0,
        })
    }

    pub fn weights(&self) -> &WeightStore {
        &self.weights
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn data(&self) -> &[Example] {
        &self.data
    }

    /// Mean proxy loss over the batch and its gradients, without updating.
    pub fn evaluate(&self) -> Result<StepResult> {
        let vars = VarStore::params(&self.weights);
        let mut total: Option<Var> = None;
        for ex in &self.data {
            let (x_en, _) = enrich_var(
                &Var::constant(ex.image.clone()),
                &Var::constant(ex.feats.clone()),
                &vars,
                &self.cfg.model.enricher,
            )?;
            let l = proxy_loss_var(&x_en, &ex.feats, &ex.image, &vars, &self.cfg)?;
            total = Some(match total {
                None => l,
                Some(t) => t.add(&l)?,
            });
        }
        let loss = total.expect("batch ≥ 1").scale(1.0 / self.data.len() as f64);
        let grads = loss.backward()?;
        let mut gradients = WeightStore::new();
        for (name, var) in vars.iter() {
            gradients.insert(name, grads.get_or_zeros(var));
        }
        Ok(StepResult {
            loss: loss.value().item()?,
            gradients,
        })
    }

    /// One forward/backward/update; returns the loss before the update.
    pub fn step(&mut self) -> Result<f64> {
        let StepResult { loss, gradients } = self.evaluate()?;
        if !loss.is_finite() {
            return Err(Error::Divergence { step: self.step, loss });
        }
        self.step += 1;
        let t = self.step as i32;
        let lr = self.cfg.lr;
        let [b1, b2] = self.cfg.adam_betas;
        let eps = self.cfg.adam_eps;
        let mut next = WeightStore::new();
        for (name, w) in self.weights.iter() {
            let g = gradients.get(name).expect("gradient for every weight");
            let updated = match self.cfg.optimizer {
                Optimizer::Sgd => w.zip_map(g, |w, g| w - lr * g)?,
                Optimizer::Adam => {
                    let m = self.moments.m.get(name).expect("moment").zip_map(g, |m, g| b1 * m + (1.0 - b1) * g)?;
                    let v = self.moments.v.get(name).expect("moment").zip_map(g, |v, g| b2 * v + (1.0 - b2) * g * g)?;
                    let c1 = 1.0 - b1.powi(t);
                    let c2 = 1.0 - b2.powi(t);
                    let step = m.zip_map(&v, |m, v| (m / c1) / ((v / c2).sqrt() + eps))?;
                    self.moments.m.insert(name, m);
                    self.moments.v.insert(name, v);
                    w.zip_map(&step, |w, s| w - lr * s)?
                }
            };
            let updated = if name.ends_with(".sigma_spatial") || name.ends_with(".range_temp") {
                updated.map(|v| v.max(POSITIVE_FLOOR))
            } else {
                updated
            };
            next.insert(name, updated);
        }
        self.weights = next;
        Ok(loss)
    }

    /// Weights plus optimizer state, as one weight file.
    pub fn checkpoint(&self) -> WeightStore {
        let mut s = self.weights.clone();
        for (n, t) in self.moments.m.iter() {
            s.insert(format!("optim.m.{n}"), t.clone());
        }
        for (n, t) in self.moments.v.iter() {
            s.insert(format!("optim.v.{n}"), t.clone());
        }
        s.insert("optim.step", Tensor::scalar(self.step as f64));
        s
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        self.checkpoint().save(path)
    }

    /// Restores a trainer from [`Trainer::checkpoint`] output.
    pub fn resume(cfg: &TrainConfig, checkpoint: &WeightStore) -> Result<Self> {
        let mut weights = WeightStore::new();
        let mut m = WeightStore::new();
        let mut v = WeightStore::new();
        let mut step = None;
        for (n, t) in checkpoint.iter() {
            if let Some(rest) = n.strip_prefix("optim.m.") {
                m.insert(rest, t.clone());
            } else if let Some(rest) = n.strip_prefix("optim.v.") {
                v.insert(rest, t.clone());
            } else if n == "optim.step" {
                step = Some(t.item()? as usize);
            } else {
                weights.insert(n, t.clone());
            }
        }
        let mut trainer = Trainer::with_weights(cfg, weights)?;
        let names: Vec<String> = trainer.weights.names().map(str::to_owned).collect();
        m.require(&names)?;
        v.require(&names)?;
        trainer.moments = Moments { m, v };
        trainer.step = step.ok_or_else(|| Error::MissingWeights(vec!["optim.step".into()]))?;
        Ok(trainer)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub losses: Vec<f64>,
    pub weights: WeightStore,
}

/// Runs `cfg.steps` updates from a fresh initialization.
pub fn train_demo(cfg: &TrainConfig) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(cfg)?;
    let mut losses = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        losses.push(trainer.step()?);
    }
    Ok(TrainOutcome {
        losses,
        weights: trainer.weights,
    })
}

/// `step,loss` rows with a header; values print in shortest round-trip form.
pub fn loss_csv(losses: &[f64]) -> String {
    let mut s = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        writeln!(s, "{i},{l}").expect("write to String");
    }
    s
}

pub fn write_loss_csv(losses: &[f64], path: impl AsRef<Path>) -> Result<()> {
    let body = loss_csv(losses);
    atomic_write(path.as_ref(), |w| w.write_all(body.as_bytes()))
}

/// Mean of `losses[range]`, clipped to the curve.
pub fn window_mean(losses: &[f64], start: usize, end: usize) -> f64 {
    let end = end.min(losses.len());
    let s = &losses[start.min(end)..end];
    s.iter().sum::<f64>() / s.len() as f64
}
