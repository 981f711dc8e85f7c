//! The merged run configuration, read from and written as JSON with the
//! sections `data`, `sample`, `augment`, `encoder`, `loss`, `optim`, `run`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::objectives::LossConfig;
use crate::sampling::{AugmentationSpec, SampleSpec};
use crate::training::{Schedule, WeightDecayMode};
use crate::videoio::SyntheticSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub pretrain: Schedule,
    pub finetune: Schedule,
    pub weight_decay_mode: WeightDecayMode,
    pub batch_size: usize,
    pub epochs: usize,
    /// Write a checkpoint every this many epochs (the final one is always written).
    pub checkpoint_every: usize,
    pub finetune_epochs: usize,
    pub finetune_batch_size: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            pretrain: Schedule::desk_pretrain(),
            finetune: Schedule::desk_finetune(),
            weight_decay_mode: WeightDecayMode::Decoupled,
            batch_size: 16,
            epochs: 30,
            checkpoint_every: 10,
            finetune_epochs: 60,
            finetune_batch_size: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub name: String,
    pub seed: u64,
    /// Single-threaded numerics.
    pub deterministic: bool,
    /// Worker threads for batch assembly; 0 lets the runtime decide.
    pub threads: usize,
    pub eval_examples: usize,
    /// Frames per window for classification and sliding-window inference.
    pub clip_window: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            name: "skipclip".into(),
            seed: 0,
            deterministic: false,
            threads: 0,
            eval_examples: 512,
            clip_window: 16,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: SyntheticSpec,
    pub sample: SampleSpec,
    pub augment: AugmentationSpec,
    pub encoder: EncoderConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub run: RunSection,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.sample.validate()?;
        self.encoder.validate()?;
        self.loss.validate()?;
        self.optim.pretrain.validate()?;
        self.optim.finetune.validate()?;
        self.data.validate(self.sample.min_frames())?;
        if self.encoder.context_len != self.sample.context_len {
            return Err(Error::Config(format!(
                "encoder.context_len = {} but sample.context_len = {}",
                self.encoder.context_len, self.sample.context_len
            )));
        }
        if self.encoder.in_channels != self.data.channels {
            return Err(Error::Config("encoder.in_channels must equal data.channels".into()));
        }
        if self.encoder.frame_size != self.augment.crop {
            return Err(Error::Config(format!(
                "encoder.frame_size {:?} must equal augment.crop {:?}",
                self.encoder.frame_size, self.augment.crop
            )));
        }
        if self.augment.crop.0 > self.data.height || self.augment.crop.1 > self.data.width {
            return Err(Error::Config("crop larger than the generated frames".into()));
        }
        if self.augment.rotation_enabled && self.augment.crop.0 != self.augment.crop.1 {
            return Err(Error::Config("rotation needs a square crop".into()));
        }
        if self.loss.enable_rotation && !self.augment.rotation_enabled {
            return Err(Error::Config(
                "loss.enable_rotation requires augment.rotation_enabled".into(),
            ));
        }
        if self.sample.target_len != 1 {
            return Err(Error::Config(
                "target encoder requires single-frame clips (sample.target_len = 1)".into(),
            ));
        }
        if self.encoder.num_classes != self.data.num_motion_classes {
            return Err(Error::Config("encoder.num_classes must equal data.num_motion_classes".into()));
        }
        if self.optim.batch_size == 0 || self.optim.finetune_batch_size == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if self.run.clip_window == 0 || self.run.clip_window != self.encoder.context_len {
            return Err(Error::Config(
                "run.clip_window must equal the context length the encoder accepts".into(),
            ));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }

    /// A miniature configuration for gradient checks and fast tests.
    pub fn tiny() -> Self {
        use crate::encoders::ConvBlock;
        let mut cfg = RunConfig::default();
        cfg.data = SyntheticSpec {
            num_videos: 6,
            num_test_videos: 4,
            frames_per_video: 12,
            height: 10,
            width: 10,
            channels: 1,
            num_motion_classes: 8,
            sprite_size: 2,
            speed_min: 0.25,
            speed_max: 0.25,
            seed: 0,
        };
        cfg.sample = SampleSpec {
            context_len: 4,
            num_targets: 3,
            rate: 2,
            target_len: 1,
            num_negatives: 2,
        };
        cfg.augment.crop = (8, 8);
        cfg.encoder = EncoderConfig {
            in_channels: 1,
            frame_size: (8, 8),
            context_len: 4,
            kernel: 3,
            context_blocks: vec![ConvBlock::new(4, 2, 2), ConvBlock::new(6, 2, 2)],
            target_blocks: vec![ConvBlock::new(4, 2, 1), ConvBlock::new(6, 2, 1)],
            num_classes: 8,
        };
        cfg.optim.batch_size = 2;
        cfg.optim.epochs = 2;
        cfg.optim.checkpoint_every = 1;
        cfg.optim.finetune_epochs = 2;
        cfg.optim.finetune_batch_size = 4;
        cfg.run.eval_examples = 8;
        cfg.run.clip_window = 4;
        cfg
    }
}
