use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::conditioning::{MaskPolicy, MultiAeConfig, TauConfig};
use crate::dataset::AbstractionLevel;
use crate::diffusion::ScheduleConfig;
use crate::error::{Error, Result};
use crate::image_ae::ImageAeConfig;
use crate::nn::AdamConfig;
use crate::unet::UNetConfig;

/// Which model a config trains. Serialized as `"image_ae"`, `1` or `2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    ImageAe,
    One,
    Two,
}

impl Serialize for Stage {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Stage::ImageAe => s.serialize_str("image_ae"),
            Stage::One => s.serialize_u8(1),
            Stage::Two => s.serialize_u8(2),
        }
    }
}

impl<'de> Deserialize<'de> for Stage {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            N(u64),
            S(String),
        }
        match Repr::deserialize(d)? {
            Repr::N(1) => Ok(Stage::One),
            Repr::N(2) => Ok(Stage::Two),
            Repr::S(s) if s == "image_ae" => Ok(Stage::ImageAe),
            Repr::S(s) if s == "1" => Ok(Stage::One),
            Repr::S(s) if s == "2" => Ok(Stage::Two),
            _ => Err(serde::de::Error::custom("stage must be 1, 2 or \"image_ae\"")),
        }
    }
}

/// Sketches fed to training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SketchSource {
    /// Regions drawn independently from the three levels each step.
    Sra,
    /// Every level and stored seamed variant.
    All,
    Low,
    Mid,
    High,
}

impl SketchSource {
    pub fn fixed_level(self) -> Option<AbstractionLevel> {
        match self {
            Self::Low => Some(AbstractionLevel::Low),
            Self::Mid => Some(AbstractionLevel::Mid),
            Self::High => Some(AbstractionLevel::High),
            Self::Sra | Self::All => None,
        }
    }
}

/// Architecture settings for every network, so one file describes a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub image_ae: ImageAeConfig,
    pub multi_ae: MultiAeConfig,
    pub tau: TauConfig,
    pub unet: UNetConfig,
    pub diffusion: ScheduleConfig,
}

impl ModelConfig {
    pub fn paper() -> Self {
        Self {
            image_ae: ImageAeConfig::default(),
            multi_ae: MultiAeConfig::default(),
            tau: TauConfig::default(),
            unet: UNetConfig::full(),
            diffusion: ScheduleConfig::default(),
        }
    }

    pub fn toy() -> Self {
        Self {
            image_ae: ImageAeConfig { width: 16 },
            multi_ae: MultiAeConfig {
                latent_dim: 64,
                width: 8,
            },
            tau: TauConfig {
                width: 32,
                max_upsamples: 4,
            },
            unet: UNetConfig::toy(),
            diffusion: ScheduleConfig {
                steps: 100,
                // Ten times the default betas keep alpha_bar(T) near the
                // 1000-step value.
                beta_start: 1e-3,
                beta_end: 0.2,
                ..ScheduleConfig::default()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.image_ae.validate()?;
        self.multi_ae.validate()?;
        self.tau.validate()?;
        self.unet.validate()?;
        self.diffusion.build().map(|_| ())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    pub epochs: usize,
    /// Optional cap on optimizer steps, applied after `epochs`.
    #[serde(default)]
    pub max_steps: Option<usize>,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    #[serde(default)]
    pub mask: MaskPolicy,
    pub seed: u64,
    /// Write a checkpoint every this many steps; 0 writes only the final one.
    #[serde(default)]
    pub checkpoint_every: usize,
    pub sketches: SketchSource,
    pub model: ModelConfig,
}

impl TrainConfig {
    /// Paper-scale settings.
    pub fn paper(stage: Stage) -> Self {
        let (epochs, batch_size, lr) = match stage {
            Stage::ImageAe => (100, 16, 1e-4),
            Stage::One => (500, 64, 1e-4),
            Stage::Two => (300, 8, 5e-5),
        };
        Self {
            stage,
            epochs,
            max_steps: None,
            batch_size,
            optimizer: AdamConfig::with_lr(lr),
            mask: MaskPolicy::default(),
            seed: 0,
            checkpoint_every: 1000,
            sketches: match stage {
                Stage::Two => SketchSource::Sra,
                _ => SketchSource::All,
            },
            model: ModelConfig::paper(),
        }
    }

    /// Desk-scale settings for 32x32 toy data.
    pub fn toy(stage: Stage) -> Self {
        let (steps, batch_size, lr) = match stage {
            Stage::ImageAe => (1500, 16, 2e-3),
            Stage::One => (1500, 16, 2e-3),
            Stage::Two => (3000, 8, 1e-3),
        };
        Self {
            epochs: 100_000,
            max_steps: Some(steps),
            batch_size,
            optimizer: AdamConfig::with_lr(lr),
            checkpoint_every: 0,
            model: ModelConfig::toy(),
            ..Self::paper(stage)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.max_steps == Some(0) {
            return Err(Error::InvalidConfig(
                "epochs, batch_size and max_steps must be positive".into(),
            ));
        }
        self.optimizer.validate()?;
        self.mask.validate()?;
        self.model.validate()
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let cfg: Self = serde_json::from_slice(&std::fs::read(path)?)
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Total optimizer steps for `n` training items.
    pub fn total_steps(&self, n: usize) -> usize {
        let per_epoch = n.div_ceil(self.batch_size).max(1);
        let total = self.epochs.saturating_mul(per_epoch);
        self.max_steps.map_or(total, |m| m.min(total))
    }
}
