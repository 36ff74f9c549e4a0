//! Closed-form compute model for first-token generation.
//!
//! Counts multiply-accumulates and reports them as FLOPs one-for-one, so a
//! "TMAC" here is what FLOP counters of the fvcore kind call a TFLOP.
//! Normalizations, activations, softmax and resampling are not counted.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::enricher::EnricherConfig;
use crate::error::{Error, Result};
use crate::jbu;
use crate::unet::pyramid_sizes;

pub const FOOTER: &str = "MAC convention: 1 multiply-accumulate = 1 FLOP. \
Normalization, activation, softmax and resampling costs are excluded.";

const TERA: f64 = 1e12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViTSpec {
    pub name: String,
    pub depth: u64,
    pub hidden: u64,
    pub mlp_ratio: f64,
    pub patch: u64,
    pub input_res: u64,
}

impl ViTSpec {
    fn preset(name: &str, depth: u64, hidden: u64, mlp_hidden: u64, input_res: u64) -> Self {
        ViTSpec {
            name: name.into(),
            depth,
            hidden,
            mlp_ratio: mlp_hidden as f64 / hidden as f64,
            patch: 14,
            input_res,
        }
    }

    /// ViT-L/14.
    pub fn large(input_res: u64) -> Self {
        Self::preset("L", 24, 1024, 4096, input_res)
    }

    /// ViT-H/14.
    pub fn huge(input_res: u64) -> Self {
        Self::preset("H", 32, 1280, 5120, input_res)
    }

    /// ViT-bigG/14.
    pub fn giant(input_res: u64) -> Self {
        Self::preset("G", 48, 1664, 8192, input_res)
    }

    pub fn by_name(name: &str, input_res: u64) -> Result<Self> {
        match name {
            "L" | "l" => Ok(Self::large(input_res)),
            "H" | "h" => Ok(Self::huge(input_res)),
            "G" | "g" => Ok(Self::giant(input_res)),
            other => Err(Error::Config(format!("unknown ViT size {other:?} (expected L, H or G)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.input_res == 0 || self.input_res % self.patch != 0 {
            return Err(Error::Config(format!(
                "ViT input_res {} must be a positive multiple of patch {}",
                self.input_res, self.patch
            )));
        }
        if self.hidden == 0 || !(self.mlp_ratio >= 0.0) {
            return Err(Error::Config("ViT hidden must be ≥ 1 and mlp_ratio ≥ 0".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> u64 {
        self.input_res / self.patch
    }

    /// Patch tokens plus the class token.
    pub fn tokens(&self) -> u64 {
        self.grid() * self.grid() + 1
    }

    pub fn mlp_hidden(&self) -> u64 {
        (self.hidden as f64 * self.mlp_ratio).round() as u64
    }

    pub fn params(&self) -> u64 {
        let d = self.hidden;
        let embed = 3 * self.patch * self.patch * d + d + self.tokens() * d + d;
        let layer = 4 * d * d + 4 * d + 2 * d * self.mlp_hidden() + self.mlp_hidden() + d + 4 * d;
        embed + self.depth * layer
    }
}

/// Single forward pass of the ViT.
pub fn vit_macs(spec: &ViTSpec) -> u64 {
    let d = spec.hidden;
    let n = spec.tokens();
    let patches = spec.grid() * spec.grid();
    let embed = patches * 3 * spec.patch * spec.patch * d;
    // q, k, v, out projections + two MLP matrices, then QKᵀ and AV
    let per_layer = n * (4 * d * d + 2 * d * spec.mlp_hidden()) + 2 * n * n * d;
    embed + spec.depth * per_layer
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LLMSpec {
    pub layers: u64,
    pub hidden: u64,
    pub ffn_hidden: u64,
    pub vocab: u64,
    pub n_tokens: u64,
}

impl Default for LLMSpec {
    fn default() -> Self {
        LLMSpec {
            layers: 32,
            hidden: 4096,
            ffn_hidden: 11008,
            vocab: 32000,
            n_tokens: 577,
        }
    }
}

impl LLMSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_tokens == 0 {
            return Err(Error::Config("LLM n_tokens must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Prefill of the whole prompt plus the vocabulary head for the one token
/// being generated.
pub fn llm_prefill_macs(spec: &LLMSpec) -> u64 {
    let d = spec.hidden;
    let n = spec.n_tokens;
    let per_token = 4 * d * d + 3 * d * spec.ffn_hidden;
    spec.layers * (n * per_token + 2 * n * n * d) + d * spec.vocab
}

/// Two-layer MLP from visual features to the LLM embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectorSpec {
    pub hidden: u64,
    pub out: u64,
    pub visual_tokens: u64,
}

impl Default for ProjectorSpec {
    fn default() -> Self {
        ProjectorSpec {
            hidden: 4096,
            out: 4096,
            visual_tokens: 576,
        }
    }
}

pub fn projector_macs(spec: &ProjectorSpec, in_width: u64) -> u64 {
    spec.visual_tokens * (in_width * spec.hidden + spec.hidden * spec.out)
}

/// Number of ViT passes of the multi-scale crop scheme: scale `k·base`
/// is tiled into `k²` crops of side `base`.
pub fn s2_vit_passes(image_res: u64, base_res: u64) -> Result<u64> {
    if base_res == 0 || image_res == 0 || image_res % base_res != 0 {
        return Err(Error::Config(format!(
            "multi-crop resolution {image_res} must be a positive multiple of the encoder resolution {base_res}"
        )));
    }
    let scales = image_res / base_res;
    Ok((1..=scales).map(|k| k * k).sum())
}

/// Enricher shape as seen by the cost model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnricherCostSpec {
    pub enricher: EnricherConfig,
    /// Width of the feature stream lifted by the stack.
    pub channels: u64,
}

impl Default for EnricherCostSpec {
    fn default() -> Self {
        EnricherCostSpec {
            enricher: EnricherConfig::default(),
            channels: 1024,
        }
    }
}

/// Guidance-network convolutions plus the five upsampling stages.
pub fn enricher_macs(image_res: u64, spec: &EnricherCostSpec) -> Result<u64> {
    let cfg = &spec.enricher;
    let sizes = pyramid_sizes(image_res as usize)?;
    let unet: u64 = if cfg.use_unet {
        cfg.unet.layers().iter().map(|l| l.macs(image_res)).sum()
    } else {
        // raw-image projection to guidance channels at every level
        sizes
            .iter()
            .map(|&s| (s * s * 3 * cfg.guidance_channels()) as u64)
            .sum()
    };
    let g = cfg.guidance_channels() as u64;
    let stack: u64 = sizes
        .iter()
        .map(|&s| jbu::stage_macs(s as u64, &cfg.jbu, spec.channels, g))
        .sum();
    Ok(unet + stack)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PipelineKind {
    Vanilla,
    S2,
    Hire,
}

impl PipelineKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            PipelineKind::Vanilla => "vanilla",
            PipelineKind::S2 => "s2",
            PipelineKind::Hire => "hire",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(PipelineKind::Vanilla),
            "s2" => Ok(PipelineKind::S2),
            "hire" => Ok(PipelineKind::Hire),
            other => Err(Error::Config(format!(
                "unknown pipeline {other:?} (expected vanilla, s2 or hire)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineSpec {
    pub kind: PipelineKind,
    pub image_res: u64,
    pub vit: ViTSpec,
    #[serde(default)]
    pub llm: LLMSpec,
    #[serde(default)]
    pub projector: ProjectorSpec,
    #[serde(default)]
    pub enricher: EnricherCostSpec,
}

impl PipelineSpec {
    pub fn new(kind: PipelineKind, image_res: u64, vit: ViTSpec) -> Self {
        PipelineSpec {
            kind,
            image_res,
            vit,
            llm: LLMSpec::default(),
            projector: ProjectorSpec::default(),
            enricher: EnricherCostSpec::default(),
        }
    }
}

/// MAC counts of one pipeline; `total_macs` is the sum of the four parts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub pipeline: PipelineKind,
    pub image_res: u64,
    pub vit: String,
    pub vit_passes: u64,
    pub vit_macs: u64,
    pub enricher_macs: u64,
    pub projector_macs: u64,
    pub llm_macs: u64,
    pub total_macs: u64,
}

impl CostReport {
    pub fn total_tmacs(&self) -> f64 {
        self.total_macs as f64 / TERA
    }

    /// `self.total / other.total`.
    pub fn ratio_to(&self, other: &CostReport) -> f64 {
        self.total_macs as f64 / other.total_macs as f64
    }

    /// Fraction of `baseline` saved by `self`.
    pub fn reduction_vs(&self, baseline: &CostReport) -> f64 {
        1.0 - self.total_macs as f64 / baseline.total_macs as f64
    }

    /// Extra MACs over `baseline`.
    pub fn overhead_over(&self, baseline: &CostReport) -> i128 {
        self.total_macs as i128 - baseline.total_macs as i128
    }

    pub fn row(&self) -> CostRow {
        CostRow {
            pipeline: self.pipeline.as_str().into(),
            image_res: self.image_res,
            vit: self.vit.clone(),
            vit_passes: self.vit_passes,
            vit_tmacs: self.vit_macs as f64 / TERA,
            enricher_tmacs: self.enricher_macs as f64 / TERA,
            projector_tmacs: self.projector_macs as f64 / TERA,
            llm_tmacs: self.llm_macs as f64 / TERA,
            total_tmacs: self.total_tmacs(),
        }
    }
}

/// Serialized form of a [`CostReport`], in tera-MACs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub pipeline: String,
    pub image_res: u64,
    pub vit: String,
    pub vit_passes: u64,
    pub vit_tmacs: f64,
    pub enricher_tmacs: f64,
    pub projector_tmacs: f64,
    pub llm_tmacs: f64,
    pub total_tmacs: f64,
}

pub fn pipeline_cost(spec: &PipelineSpec) -> Result<CostReport> {
    spec.vit.validate()?;
    spec.llm.validate()?;
    let base = spec.vit.input_res;
    let d = spec.vit.hidden;
    let (passes, enricher, in_width) = match spec.kind {
        PipelineKind::Vanilla => {
            if spec.image_res != base {
                return Err(Error::Config(format!(
                    "vanilla pipeline runs at the encoder resolution {base}, got image_res {}",
                    spec.image_res
                )));
            }
            (1, 0, d)
        }
        PipelineKind::S2 => {
            let passes = s2_vit_passes(spec.image_res, base)?;
            (passes, 0, d * (spec.image_res / base))
        }
        PipelineKind::Hire => {
            if spec.image_res < base {
                return Err(Error::Config(format!(
                    "enriched pipeline needs image_res ≥ encoder resolution {base}, got {}",
                    spec.image_res
                )));
            }
            let e = enricher_macs(spec.image_res, &spec.enricher)?;
            (1, e, d + spec.enricher.channels)
        }
    };
    let vit = passes * vit_macs(&spec.vit);
    let projector = projector_macs(&spec.projector, in_width);
    let llm = llm_prefill_macs(&spec.llm);
    Ok(CostReport {
        pipeline: spec.kind,
        image_res: spec.image_res,
        vit: spec.vit.name.clone(),
        vit_passes: passes,
        vit_macs: vit,
        enricher_macs: enricher,
        projector_macs: projector,
        llm_macs: llm,
        total_macs: vit + enricher + projector + llm,
    })
}

/// Image side used for `kind` in the scaling sweep: the encoder resolution
/// for vanilla, twice it for multi-crop, and `hire_res` for the enriched
/// pipeline regardless of the encoder.
pub fn sweep_resolution(kind: PipelineKind, vit: &ViTSpec, hire_res: u64) -> u64 {
    match kind {
        PipelineKind::Vanilla => vit.input_res,
        PipelineKind::S2 => 2 * vit.input_res,
        PipelineKind::Hire => hire_res,
    }
}

/// One report per `(vit, pipeline)`, in that nesting order.
pub fn scaling_sweep(
    vits: &[ViTSpec],
    pipelines: &[PipelineKind],
    template: &PipelineSpec,
) -> Result<Vec<CostReport>> {
    let hire_res = template.image_res;
    let mut out = Vec::with_capacity(vits.len() * pipelines.len());
    for vit in vits {
        for &kind in pipelines {
            let spec = PipelineSpec {
                kind,
                image_res: sweep_resolution(kind, vit, hire_res),
                vit: vit.clone(),
                ..template.clone()
            };
            out.push(pipeline_cost(&spec)?);
        }
    }
    Ok(out)
}

/// The six encoders of the scaling figure.
pub fn sweep_vits() -> Vec<ViTSpec> {
    let mut v = Vec::new();
    for res in [224, 336] {
        v.push(ViTSpec::large(res));
        v.push(ViTSpec::huge(res));
        v.push(ViTSpec::giant(res));
    }
    v
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Table2Row {
    pub model: &'static str,
    pub pipeline: PipelineKind,
    pub image_res: u64,
    pub published_tflops: f64,
    pub model_tmacs: f64,
    pub rel_error: f64,
}

pub const TABLE2: [(&str, PipelineKind, u64, f64); 5] = [
    ("LLaVA1.5-7B", PipelineKind::Vanilla, 336, 4.278),
    ("LLaVA1.5-7B-S2", PipelineKind::S2, 672, 5.013),
    ("LLaVA1.5-7B-HIRE", PipelineKind::Hire, 672, 4.296),
    ("LLaVA1.5-7B-S2", PipelineKind::S2, 1008, 6.664),
    ("LLaVA1.5-7B-HIRE", PipelineKind::Hire, 1008, 4.317),
];

/// The five published first-token costs next to the model's values.
pub fn reproduce_table2(template: &PipelineSpec) -> Result<Vec<Table2Row>> {
    TABLE2
        .iter()
        .map(|&(model, kind, res, published)| {
            let spec = PipelineSpec {
                kind,
                image_res: res,
                vit: ViTSpec::large(336),
                ..template.clone()
            };
            let r = pipeline_cost(&spec)?;
            let m = r.total_tmacs();
            Ok(Table2Row {
                model,
                pipeline: kind,
                image_res: res,
                published_tflops: published,
                model_tmacs: m,
                rel_error: (m - published).abs() / published,
            })
        })
        .collect()
}

pub fn write_csv<W: Write>(reports: &[CostReport], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for r in reports {
        wr.serialize(r.row()).map_err(csv_err)?;
    }
    if reports.is_empty() {
        wr.write_record(CSV_COLUMNS).map_err(csv_err)?;
    }
    wr.flush().map_err(|e| Error::io("<csv>", e))
}

pub fn read_csv<R: std::io::Read>(r: R) -> Result<Vec<CostRow>> {
    csv::Reader::from_reader(r)
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(csv_err)
}

pub const CSV_COLUMNS: [&str; 9] = [
    "pipeline",
    "image_res",
    "vit",
    "vit_passes",
    "vit_tmacs",
    "enricher_tmacs",
    "projector_tmacs",
    "llm_tmacs",
    "total_tmacs",
];

pub fn to_json(reports: &[CostReport]) -> Result<String> {
    let rows: Vec<CostRow> = reports.iter().map(CostReport::row).collect();
    serde_json::to_string_pretty(&rows).map_err(|e| Error::Format(e.to_string()))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("CSV: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vit_l_336_closed_form() {
        // embed 576·588·1024 + 24 · (577·12·1024² + 2·577²·1024)
        assert_eq!(vit_macs(&ViTSpec::large(336)), 346_816_512 + 24 * (7_260_340_224 + 681_838_592));
    }

    #[test]
    fn depth_zero_is_patch_embed_only() {
        let v = ViTSpec {
            depth: 0,
            ..ViTSpec::large(336)
        };
        assert_eq!(vit_macs(&v), 576 * 588 * 1024);
    }

    #[test]
    fn passes() {
        assert_eq!(s2_vit_passes(672, 336).unwrap(), 5);
        assert_eq!(s2_vit_passes(1008, 336).unwrap(), 14);
        assert_eq!(s2_vit_passes(336, 336).unwrap(), 1);
        assert!(s2_vit_passes(700, 336).is_err());
    }

    #[test]
    fn pipeline_kind_round_trip() {
        for k in [PipelineKind::Vanilla, PipelineKind::S2, PipelineKind::Hire] {
            assert_eq!(PipelineKind::parse(k.as_str()).unwrap(), k);
        }
        assert!(PipelineKind::parse("s3").is_err());
    }
}
