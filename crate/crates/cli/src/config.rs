//! Pipeline configuration: one TOML document with a section per stage.
//! Every field has a default, so an empty file is valid; unknown keys are
//! rejected with their name in the error.

use std::path::Path;

use anyhow::{Context, Result};
use dforge_core::constants as k;
use dforge_core::diffusion::{BetaSpacing, RefinementConfig};
use dforge_core::flow::{FlowPolicy, ReferenceWeights};
use dforge_core::fusion::{VolumeParams, DEFAULT_MAX_WEIGHT};
use dforge_core::geometry::FilterPolicy;
use dforge_core::loss::LossWeights;
use dforge_core::trajectory::DirectorPolicy;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Root of every random stream a command draws from.
    pub rng_seed: u64,
    pub filter: FilterPolicy,
    pub director: DirectorPolicy,
    pub fusion: FusionConfig,
    pub flow: FlowPolicy,
    pub reference: ReferenceWeights,
    pub sampler: SamplerConfig,
    pub refine: RefinementConfig,
    /// Weights of the confidence-weighted objective.
    pub loss: LossWeights,
    /// Weights of the dynamic-scene objective (L1 + TV + SSIM).
    pub dynamic_loss: LossWeights,
    pub training: TrainingRecipe,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            rng_seed: 0,
            filter: FilterPolicy::default(),
            director: DirectorPolicy::default(),
            fusion: FusionConfig::default(),
            flow: FlowPolicy::default(),
            reference: ReferenceWeights::default(),
            sampler: SamplerConfig::default(),
            refine: RefinementConfig::default(),
            loss: LossWeights::default(),
            dynamic_loss: LossWeights::dynamic(),
            training: TrainingRecipe::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub origin: [f64; 3],
    pub voxel_size: f64,
    pub dims: [usize; 3],
    /// World units; 0 selects four voxels.
    pub truncation: f64,
    pub max_weight: f64,
    /// Half-thickness of the occupied shell around the zero crossing.
    pub occupancy_band: f64,
    /// Minimum camera distance to occupied voxels when planning.
    pub clearance_margin: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        let v = VolumeParams::default();
        Self {
            origin: v.origin,
            voxel_size: v.voxel_size,
            dims: v.dims,
            truncation: 0.0,
            max_weight: DEFAULT_MAX_WEIGHT,
            occupancy_band: 0.0,
            clearance_margin: 0.0,
        }
    }
}

impl FusionConfig {
    pub fn volume_params(&self) -> VolumeParams {
        VolumeParams {
            origin: self.origin,
            voxel_size: self.voxel_size,
            dims: self.dims,
            truncation: (self.truncation > 0.0).then_some(self.truncation),
            max_weight: self.max_weight,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub train_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub beta_spacing: BetaSpacing,
    pub inference_steps: usize,
    /// Steps run by the S-Director before switching to the T-Director.
    pub switch_step: usize,
    pub guidance_scale: f64,
    pub blend_window: usize,
    pub blend_lambda: f64,
    /// Offset the director-sensitive mock adds per director.
    pub director_strength: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            train_steps: k::DEFAULT_TRAIN_TIMESTEPS,
            beta_start: k::DEFAULT_BETA_START,
            beta_end: k::DEFAULT_BETA_END,
            beta_spacing: BetaSpacing::Linear,
            inference_steps: k::DEFAULT_INFERENCE_STEPS,
            switch_step: k::DEFAULT_SWITCH_STEP,
            guidance_scale: k::DEFAULT_GUIDANCE_SCALE,
            blend_window: k::DEFAULT_BLEND_WINDOW,
            blend_lambda: k::DEFAULT_BLEND_LAMBDA,
            director_strength: 0.05,
        }
    }
}

/// Adapter training recipe. Nothing here trains a model; the values are
/// recorded so run manifests carry the settings generated data assumes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingRecipe {
    pub lora_rank: u32,
    pub lora_steps: u32,
    pub lora_learning_rate: f64,
    pub base_frames: usize,
    pub extended_frames: usize,
    pub width: u32,
    pub height: u32,
    pub gs_training_frames: usize,
    pub gs_steps: u32,
    pub deformable_views: usize,
}

impl Default for TrainingRecipe {
    fn default() -> Self {
        Self {
            lora_rank: k::LORA_RANK,
            lora_steps: k::LORA_TRAIN_STEPS,
            lora_learning_rate: k::LORA_LEARNING_RATE,
            base_frames: k::BASE_VIDEO_FRAMES,
            extended_frames: k::EXTENDED_VIDEO_FRAMES,
            width: k::VIDEO_WIDTH,
            height: k::VIDEO_HEIGHT,
            gs_training_frames: k::GS_TRAINING_FRAMES,
            gs_steps: k::GS_OPTIMIZATION_STEPS,
            deformable_views: k::DEFORMABLE_VIEWS,
        }
    }
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: PipelineConfig =
            toml::from_str(text).map_err(|e| anyhow::anyhow!("config: {}", e.message()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn validate(&self) -> Result<()> {
        self.filter
            .validate()
            .map_err(|e| anyhow::anyhow!("filter: {e}"))?;
        self.loss
            .validate()
            .map_err(|e| anyhow::anyhow!("loss: {e}"))?;
        self.dynamic_loss
            .validate()
            .map_err(|e| anyhow::anyhow!("dynamic_loss: {e}"))?;
        let f = &self.fusion;
        anyhow::ensure!(f.voxel_size > 0.0, "fusion.voxel_size must be > 0");
        anyhow::ensure!(f.truncation >= 0.0, "fusion.truncation must be >= 0");
        anyhow::ensure!(
            f.occupancy_band >= 0.0,
            "fusion.occupancy_band must be >= 0"
        );
        anyhow::ensure!(
            f.clearance_margin >= 0.0,
            "fusion.clearance_margin must be >= 0"
        );
        anyhow::ensure!(
            self.director.scene_diagonal > 0.0,
            "director.scene_diagonal must be > 0"
        );
        let s = &self.sampler;
        anyhow::ensure!(
            s.switch_step <= s.inference_steps,
            "sampler.switch_step {} exceeds sampler.inference_steps {}",
            s.switch_step,
            s.inference_steps
        );
        anyhow::ensure!(
            s.blend_window <= s.inference_steps,
            "sampler.blend_window exceeds inference_steps"
        );
        anyhow::ensure!(
            (0.0..=1.0).contains(&s.blend_lambda),
            "sampler.blend_lambda must be in [0, 1]"
        );
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 over the canonical JSON form, so formatting and key order in
    /// the source file do not matter.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_the_default() {
        assert_eq!(
            PipelineConfig::parse("").unwrap(),
            PipelineConfig::default()
        );
    }

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = PipelineConfig::default();
        assert_eq!(PipelineConfig::parse(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = PipelineConfig::parse("[loss]\nl2 = 1.0\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("l2"), "{err}");
    }

    #[test]
    fn partial_section_keeps_other_defaults() {
        let cfg = PipelineConfig::parse("rng_seed = 9\n[loss]\nl1 = 0.5\n").unwrap();
        assert_eq!(cfg.rng_seed, 9);
        assert_eq!(cfg.loss.l1, 0.5);
        assert_eq!(cfg.loss.ssim, 0.2);
        assert_eq!(cfg.sampler, SamplerConfig::default());
    }

    #[test]
    fn bad_value_is_rejected() {
        assert!(PipelineConfig::parse("[sampler]\nswitch_step = 80\n").is_err());
        assert!(PipelineConfig::parse("[fusion]\nvoxel_size = \"big\"\n").is_err());
    }
}
