use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, GuidanceVariant};
use crate::diffusion_head::{DiffusionConfig, HeadConfig};
use crate::error::{config, Result};
use crate::masking::{RatioConfig, ScheduleShape};
use crate::mixture::TiMixConfig;

/// Independent seeds; each names its own random stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub init: u64,
    pub data: u64,
    pub masking: u64,
    pub diffusion: u64,
    pub ti_mix: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self {
            init: 0,
            data: 1,
            masking: 2,
            diffusion: 3,
            ti_mix: 4,
        }
    }
}

impl Seeds {
    /// All streams derived from one base seed.
    pub fn from_base(base: u64) -> Self {
        Self {
            init: base,
            data: base.wrapping_add(1),
            masking: base.wrapping_add(2),
            diffusion: base.wrapping_add(3),
            ti_mix: base.wrapping_add(4),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: GuidanceVariant,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_frac: f64,
    pub grad_clip: f64,
    pub ema_decay: f64,
    /// Probability of replacing the class by the null class during training
    /// (classifier-free guidance); 0 disables it.
    pub class_dropout: f64,
    /// Noise draws per masked token per step.
    pub diffusion_batch_mul: usize,
    pub ratio: RatioConfig,
    pub ti_mix: TiMixConfig,
    pub backbone: BackboneConfig,
    pub head: HeadConfig,
    pub diffusion: DiffusionConfig,
    pub seeds: Seeds,
    pub eval_every: usize,
    /// Validation batches used for held-out losses.
    pub eval_batches: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: GuidanceVariant::DcMix,
            epochs: 200,
            batch_size: 64,
            lr: 1e-3,
            warmup_frac: 0.05,
            grad_clip: 1.0,
            ema_decay: 0.999,
            class_dropout: 0.1,
            diffusion_batch_mul: 1,
            ratio: RatioConfig::default(),
            ti_mix: TiMixConfig {
                start_epoch: 100,
                ..TiMixConfig::default()
            },
            backbone: BackboneConfig::default(),
            head: HeadConfig::default(),
            diffusion: DiffusionConfig::default(),
            seeds: Seeds::default(),
            eval_every: 10,
            eval_batches: 4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.diffusion_batch_mul == 0 {
            return Err(config("epochs, batch_size and diffusion_batch_mul must be positive"));
        }
        if self.lr.is_nan() || self.lr <= 0.0 || !(0.0..=1.0).contains(&self.warmup_frac) {
            return Err(config("need lr > 0 and warmup_frac in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) || !(0.0..1.0).contains(&self.class_dropout) {
            return Err(config("ema_decay must lie in [0, 1] and class_dropout in [0, 1)"));
        }
        self.ratio.validate()?;
        self.ti_mix.validate()?;
        self.backbone.validate()?;
        self.diffusion.validate()
    }

    /// Whether any training epoch mixes in generated guidance.
    pub fn needs_generator(&self) -> bool {
        self.variant.uses_guidance() && self.ti_mix.needs_generator()
    }
}

/// Settings of the end-to-end sampler.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateConfig {
    pub steps: usize,
    pub schedule: ScheduleShape,
    pub discrete_steps: usize,
    pub discrete_temperature: f64,
    pub guidance_scale: f64,
    pub t_sample: usize,
    pub temperature: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            steps: 8,
            schedule: ScheduleShape::Cosine,
            discrete_steps: 8,
            discrete_temperature: 1.0,
            guidance_scale: 1.0,
            t_sample: 100,
            temperature: 1.0,
            batch_size: 128,
            seed: 0,
        }
    }
}
