//! Model and run configuration.
//!
//! `Default` carries the full-size architecture and training schedule;
//! [`ModelConfig::toy`] is the desk-scale variant used for training runs on
//! synthetic data. Both serialize to the same TOML grammar as the dataset
//! manifest (see `docs/FORMAT.md`).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Modality {
    Fused,
    SkeletonOnly,
    VideoOnly,
}

impl Modality {
    pub fn uses_skeleton(self) -> bool {
        self != Modality::VideoOnly
    }

    pub fn uses_video(self) -> bool {
        self != Modality::SkeletonOnly
    }
}

/// Source of the Meta-Net input for each prompt bank.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Conditioning {
    /// Global bank from the global feature, each limb bank from its limb feature.
    PerLimb,
    /// Every bank conditioned on the global feature.
    GlobalOnly,
    /// No shift is added to the context vectors.
    Off,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassSlot {
    Front,
    Middle,
    End,
}

/// Which token set supplies the attention queries in salience attention.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SalienceDirection {
    /// Queries from the full token set, keys/values from the downsampled set.
    FullToDown,
    /// Queries from the downsampled set, keys/values from the full set.
    DownToFull,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage {
    pub channels: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub joints: usize,
    pub persons: usize,
    pub frames: usize,
    pub image_size: usize,
    pub patch: usize,
    /// Width of the skeleton, text and video features compared by the
    /// contrastive loss.
    pub embed_dim: usize,

    pub skeleton_stem: usize,
    pub skeleton_stages: Vec<Stage>,

    pub visual_width: usize,
    pub visual_depth: usize,
    pub visual_heads: usize,
    pub temporal_depth: usize,

    pub text_width: usize,
    pub text_depth: usize,
    pub text_heads: usize,
    pub context_tokens: usize,
    pub class_slot: ClassSlot,
    pub max_text_len: usize,
    pub meta_hidden: usize,

    pub fusion_width: usize,
    pub fusion_heads: usize,
    pub fusion_depth: usize,
    pub salience_heads: usize,
    pub skeleton_iterations: usize,
    pub visual_iterations: usize,
    pub salience_direction: SalienceDirection,

    pub lambda: f64,
    pub init_temperature: f64,

    pub modality: Modality,
    pub conditioning: Conditioning,
    pub learnable_prompts: bool,
    pub text_sup_skeleton: bool,
    pub text_sup_video: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            joints: 25,
            persons: 1,
            frames: 16,
            image_size: 224,
            patch: 16,
            embed_dim: 512,
            skeleton_stem: 64,
            skeleton_stages: vec![
                Stage { channels: 64, stride: 1 },
                Stage { channels: 128, stride: 2 },
                Stage { channels: 256, stride: 2 },
            ],
            visual_width: 512,
            visual_depth: 2,
            visual_heads: 8,
            temporal_depth: 1,
            text_width: 512,
            text_depth: 1,
            text_heads: 8,
            context_tokens: 24,
            class_slot: ClassSlot::End,
            max_text_len: 77,
            meta_hidden: 32,
            fusion_width: 512,
            fusion_heads: 8,
            fusion_depth: 1,
            salience_heads: 8,
            skeleton_iterations: 2,
            visual_iterations: 1,
            salience_direction: SalienceDirection::FullToDown,
            lambda: 0.8,
            init_temperature: 0.07,
            modality: Modality::Fused,
            conditioning: Conditioning::PerLimb,
            learnable_prompts: true,
            text_sup_skeleton: true,
            text_sup_video: false,
        }
    }
}

impl ModelConfig {
    /// Desk-scale dimensions: 32×32 crops with 8×8 patches, 64-wide
    /// encoders and two temporal stride-2 stages.
    pub fn toy() -> Self {
        ModelConfig {
            joints: 11,
            image_size: 32,
            patch: 8,
            embed_dim: 32,
            skeleton_stem: 16,
            skeleton_stages: vec![
                Stage { channels: 32, stride: 1 },
                Stage { channels: 32, stride: 2 },
                Stage { channels: 32, stride: 2 },
            ],
            visual_width: 64,
            visual_depth: 2,
            visual_heads: 4,
            text_width: 64,
            text_heads: 4,
            meta_hidden: 16,
            fusion_width: 64,
            fusion_heads: 4,
            salience_heads: 4,
            ..Default::default()
        }
    }

    /// Frames left after all temporal strides of the skeleton encoder.
    pub fn skeleton_frames_out(&self) -> usize {
        self.skeleton_stages
            .iter()
            .fold(self.frames, |t, s| (t - 1) / s.stride + 1)
    }

    pub fn skeleton_width(&self) -> usize {
        self.skeleton_stages.last().map_or(self.skeleton_stem, |s| s.channels)
    }

    pub fn skeleton_tokens(&self) -> usize {
        self.skeleton_frames_out() * self.joints
    }

    pub fn patches_per_frame(&self) -> usize {
        (self.image_size / self.patch).pow(2)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.joints == 0 || self.frames == 0 {
            return fail("joints and frames must be positive".into());
        }
        if !(1..=2).contains(&self.persons) {
            return fail(format!("persons must be 1 or 2, got {}", self.persons));
        }
        if self.patch == 0 || self.image_size % self.patch != 0 {
            return fail(format!("image size {} not divisible by patch {}", self.image_size, self.patch));
        }
        for s in &self.skeleton_stages {
            if s.channels % 4 != 0 || s.channels == 0 {
                return fail(format!("stage width {} must be a positive multiple of 4", s.channels));
            }
            if s.stride == 0 {
                return fail("stage stride must be positive".into());
            }
        }
        for (name, width, heads) in [
            ("visual", self.visual_width, self.visual_heads),
            ("text", self.text_width, self.text_heads),
            ("fusion", self.fusion_width, self.fusion_heads),
            ("salience/skeleton", self.skeleton_width(), self.salience_heads),
            ("salience/visual", self.visual_width, self.salience_heads),
        ] {
            if heads == 0 || width % heads != 0 {
                return fail(format!("{name}: width {width} not divisible by {heads} heads"));
            }
        }
        if self.context_tokens == 0 {
            return fail("context_tokens must be positive".into());
        }
        if self.context_tokens >= self.max_text_len {
            return fail("context_tokens leave no room for class tokens".into());
        }
        if self.skeleton_tokens() < 1 << self.skeleton_iterations {
            return fail(format!(
                "{} skeleton tokens cannot be halved {} times",
                self.skeleton_tokens(),
                self.skeleton_iterations
            ));
        }
        if self.frames < 1 << self.visual_iterations {
            return fail(format!("{} frames cannot be halved {} times", self.frames, self.visual_iterations));
        }
        if self.lambda < 0.0 || !self.lambda.is_finite() {
            return fail(format!("lambda must be non-negative, got {}", self.lambda));
        }
        if self.init_temperature <= 0.0 {
            return fail("temperature must be positive".into());
        }
        Ok(())
    }

    /// Whether any contrastive term contributes to the loss.
    pub fn text_supervision(&self) -> bool {
        (self.text_sup_skeleton && self.modality.uses_skeleton())
            || (self.text_sup_video && self.modality.uses_video())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub fresh_rate: f64,
    pub pretrained_rate: f64,
    pub warmup_epochs: usize,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Stop once training accuracy reaches 1.0.
    pub stop_at_full_train_accuracy: bool,
    /// Evaluate on the test split after every epoch.
    pub eval_each_epoch: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            epochs: 55,
            batch_size: 16,
            fresh_rate: 5e-5,
            pretrained_rate: 5e-6,
            warmup_epochs: 5,
            decay_epochs: vec![35, 45],
            decay_factor: 10.0,
            weight_decay: 0.01,
            seed: 0,
            stop_at_full_train_accuracy: false,
            eval_each_epoch: true,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        if !(self.fresh_rate > 0.0 && self.pretrained_rate > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if let Some(d) = self.decay_epochs.iter().find(|&&d| d >= self.epochs) {
            return Err(Error::Config(format!("decay epoch {d} not before final epoch {}", self.epochs)));
        }
        if self.decay_factor <= 0.0 {
            return Err(Error::Config("decay factor must be positive".into()));
        }
        Ok(())
    }

    /// Toy model trained from scratch. The full-size rates assume a
    /// pretrained backbone and barely move randomly initialized weights.
    pub fn toy() -> Self {
        RunConfig {
            model: ModelConfig::toy(),
            epochs: 200,
            fresh_rate: 1e-3,
            pretrained_rate: 1e-4,
            decay_epochs: vec![150, 180],
            stop_at_full_train_accuracy: true,
            ..RunConfig::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_the_published_settings() {
        let run = RunConfig::default();
        assert_eq!(run.model.context_tokens, 24);
        assert_eq!(run.model.lambda, 0.8);
        assert_eq!(run.model.frames, 16);
        assert_eq!(run.batch_size, 16);
        assert_eq!(run.warmup_epochs, 5);
        assert_eq!(run.decay_epochs, vec![35, 45]);
        assert_eq!(run.epochs, 55);
        assert_eq!(run.fresh_rate, 5e-5);
        assert_eq!(run.pretrained_rate, 5e-6);
        assert_eq!(run.model.fusion_heads, 8);
        assert_eq!(run.model.fusion_width, 512);
        assert_eq!(run.model.skeleton_tokens(), 100);
        assert_eq!(run.model.skeleton_width(), 256);
        run.validate().unwrap();
        ModelConfig::toy().validate().unwrap();
    }

    #[test]
    fn toml_round_trip_and_partial_files() {
        let run = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&run.to_toml()).unwrap(), run);
        let partial = RunConfig::from_toml("epochs = 70\n[model]\nlambda = 0.0\n").unwrap();
        assert_eq!(partial.epochs, 70);
        assert_eq!(partial.model.lambda, 0.0);
        assert_eq!(partial.model.context_tokens, 24);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(RunConfig::from_toml("bogus = 1").is_err());
        assert!(RunConfig::from_toml("epochs = 40").is_err());
        assert!(RunConfig::from_toml("fresh_rate = 0.0").is_err());
        assert!(RunConfig::from_toml("[model]\nlambda = -1.0").is_err());
        assert!(RunConfig::from_toml("[model]\nfusion_heads = 7").is_err());
    }
}
