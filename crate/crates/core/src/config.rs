//! Run configuration shared by the command-line tools.
//!
//! Every section and field is optional; missing ones take the defaults of
//! the corresponding type. Unknown keys anywhere are rejected.
//!
//! ```json
//! {
//!   "image":    { "high_res": 672, "low_res": 336 },
//!   "encoder":  { "out_channels": 1024 },
//!   "enricher": { "unet": { "guidance_channels": 32 }, "jbu": { "window": 7 } },
//!   "train":    { "steps": 200, "lr": 2e-5 },
//!   "cost":     { "vit": "L", "vit_res": 336 }
//! }
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::costmodel::{EnricherCostSpec, LLMSpec, PipelineKind, PipelineSpec, ProjectorSpec, ViTSpec};
use crate::encoder::EncoderSpec;
use crate::enricher::{EnricherConfig, Geometry};
use crate::error::{Error, Result};
use crate::harness::TrainConfig;
use crate::imageio::ImageSpec;

/// Models priced by the compute model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostConfig {
    /// `L`, `H` or `G`.
    pub vit: String,
    pub vit_res: u64,
    pub llm: LLMSpec,
    pub projector: ProjectorSpec,
    /// Width of the encoder features the stack lifts.
    pub enricher_channels: u64,
}

impl Default for CostConfig {
    fn default() -> Self {
        CostConfig {
            vit: "L".into(),
            vit_res: 336,
            llm: LLMSpec::default(),
            projector: ProjectorSpec::default(),
            enricher_channels: 1024,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub image: ImageSpec,
    pub encoder: EncoderSpec,
    /// Guidance network and upsampling stack used by `enrich`.
    pub enricher: EnricherConfig,
    /// Desk-scale training; carries its own reduced model.
    pub train: TrainConfig,
    pub cost: CostConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.image.validate()?;
        self.encoder.validate()?;
        self.enricher.validate()?;
        self.train.validate()?;
        self.vit()?.validate()?;
        self.cost.llm.validate()?;
        if self.encoder.input_res != self.image.low_res {
            return Err(Error::Config(format!(
                "encoder input_res {} must equal image low_res {}",
                self.encoder.input_res, self.image.low_res
            )));
        }
        Ok(())
    }

    /// Enrichment geometry implied by the image and encoder sections.
    pub fn geometry(&self) -> Geometry {
        Geometry {
            image_res: self.image.high_res,
            grid: self.encoder.grid(),
            channels: self.encoder.out_channels,
        }
    }

    pub fn vit(&self) -> Result<ViTSpec> {
        ViTSpec::by_name(&self.cost.vit, self.cost.vit_res)
    }

    pub fn pipeline(&self, kind: PipelineKind, image_res: u64) -> Result<PipelineSpec> {
        Ok(PipelineSpec {
            llm: self.cost.llm.clone(),
            projector: self.cost.projector.clone(),
            enricher: EnricherCostSpec {
                enricher: self.enricher.clone(),
                channels: self.cost.enricher_channels,
            },
            ..PipelineSpec::new(kind, image_res, self.vit()?)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_the_default() {
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
        let round = RunConfig::from_json(&RunConfig::default().to_json()).unwrap();
        assert_eq!(round, RunConfig::default());
    }

    #[test]
    fn unknown_keys_fail_at_any_depth() {
        for doc in [
            r#"{"imgae": {}}"#,
            r#"{"enricher": {"jbu": {"windw": 5}}}"#,
            r#"{"train": {"model": {"image": {"hi_res": 3}}}}"#,
            r#"{"cost": {"llm": {"layer": 2}}}"#,
        ] {
            assert!(matches!(RunConfig::from_json(doc), Err(Error::Config(_))), "{doc}");
        }
    }

    #[test]
    fn partial_sections_keep_other_defaults() {
        let c = RunConfig::from_json(r#"{"enricher": {"jbu": {"window": 5}}, "cost": {"vit": "H"}}"#).unwrap();
        assert_eq!(c.enricher.jbu.window, 5);
        assert_eq!(c.enricher.jbu.proj_dim, crate::jbu::JBUConfig::default().proj_dim);
        assert_eq!(c.vit().unwrap(), ViTSpec::huge(336));
        assert!(RunConfig::from_json(r#"{"cost": {"vit": "Q"}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"image": {"low_res": 224}}"#).is_err());
    }
}
