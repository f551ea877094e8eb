//! Run configuration: model dimensions, data, and the three stage recipes.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bridge::DecoderConfig;
use crate::data::{IterationMode, Split};
use crate::encoder::EncoderConfig;
use crate::enhancer::EnhancerConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::optim::LrMap;
use crate::params::{Group, GroupSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub manifest: PathBuf,
    #[serde(default = "default_train_split")]
    pub train_split: Split,
    #[serde(default = "default_eval_split")]
    pub eval_split: Split,
}

fn default_train_split() -> Split {
    Split::Train
}

fn default_eval_split() -> Split {
    Split::Test
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub encoder_lr_ratio: f64,
    /// Global gradient-norm cap over the trainable groups.
    pub grad_clip: f64,
    /// Also train the projector in stage 1.
    pub stage1_projector: bool,
    /// Fresh optimizer moments at the start of every stage.
    pub reset_moments: bool,
    pub skip_stage1: bool,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            encoder_lr_ratio: 0.2,
            grad_clip: 1.0,
            stage1_projector: false,
            reset_moments: true,
            skip_stage1: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub mode: IterationMode,
    /// Stops the stage early after this many optimizer steps.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub encoder: EncoderConfig,
    pub enhancer: EnhancerConfig,
    pub decoder: DecoderConfig,
    pub data: DataConfig,
    pub train: TrainSettings,
    pub stage1: StageSettings,
    pub stage2: StageSettings,
    pub stage3: StageSettings,
}

fn stages(epochs: [usize; 3], batch: [usize; 3], lr: f64) -> [StageSettings; 3] {
    let modes = [IterationMode::Flatten, IterationMode::Flatten, IterationMode::RandomChoice];
    [0, 1, 2].map(|i| StageSettings {
        epochs: epochs[i],
        batch_size: batch[i],
        base_lr: lr,
        mode: modes[i],
        max_steps: None,
    })
}

pub const PROFILES: [&str; 3] = ["toy", "overfit", "paper"];

impl Config {
    /// Named presets. `toy` is the default desk-scale recipe, `overfit`
    /// the small model used to drive a 32-pair set to near-zero loss, and
    /// `paper` keeps the published batch sizes and epoch counts.
    pub fn profile(name: &str) -> Result<Config> {
        let model = ModelConfig::default();
        let base = |model: ModelConfig, [s1, s2, s3]: [StageSettings; 3]| Config {
            seed: 0,
            encoder: model.encoder,
            enhancer: model.enhancer,
            decoder: model.decoder,
            data: DataConfig {
                manifest: PathBuf::from("data/manifest.jsonl"),
                train_split: Split::Train,
                eval_split: Split::Test,
            },
            train: TrainSettings::default(),
            stage1: s1,
            stage2: s2,
            stage3: s3,
        };
        match name {
            "toy" => Ok(base(model, stages([1, 1, 10], [8, 8, 8], 1e-5))),
            "paper" => Ok(base(model, stages([1, 1, 50], [64, 256, 256], 1e-5))),
            "overfit" => {
                let mut c = base(overfit_model(), stages([1, 1, 190], [8, 8, 8], 1e-3));
                c.data.eval_split = Split::Train;
                Ok(c)
            }
            _ => Err(Error::Config(format!("unknown profile '{name}' (expected one of {PROFILES:?})"))),
        }
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder.clone(),
            enhancer: self.enhancer.clone(),
            decoder: self.decoder.clone(),
        }
    }

    pub fn stage_settings(&self, stage: u8) -> Result<&StageSettings> {
        match stage {
            1 => Ok(&self.stage1),
            2 => Ok(&self.stage2),
            3 => Ok(&self.stage3),
            _ => Err(Error::Config(format!("stage must be 1, 2 or 3, got {stage}"))),
        }
    }

    pub fn stage(&self, stage: u8) -> Result<StageConfig> {
        let s = self.stage_settings(stage)?;
        let trainable: GroupSet = if stage == 1 {
            let mut g: GroupSet = [Group::Enhancer].into_iter().collect();
            if self.train.stage1_projector {
                g.insert(Group::Projector);
            }
            g
        } else {
            GroupSet::all()
        };
        let cfg = StageConfig {
            stage,
            trainable,
            base_lr: s.base_lr,
            encoder_lr_ratio: self.train.encoder_lr_ratio,
            epochs: s.epochs,
            batch_size: s.batch_size,
            mode: s.mode,
            max_steps: s.max_steps,
            grad_clip: self.train.grad_clip,
        };
        cfg.validate(self.train.stage1_projector)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model().validate()?;
        for s in 1..=3 {
            self.stage(s)?;
        }
        if !(self.train.grad_clip > 0.0) {
            return Err(Error::Config("train.grad_clip must be positive".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str, origin: &str) -> Result<Config> {
        let c: Config = toml::from_str(text).map_err(|e| Error::Config(format!("{origin}: {e}")))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Config::from_toml(&text, &path.display().to_string())
    }

    /// SHA-256 over the model dimensions; checkpoints only load into a
    /// model with the same fingerprint.
    pub fn fingerprint(&self) -> String {
        let text = toml::to_string(&self.model()).expect("model config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

fn overfit_model() -> ModelConfig {
    let encoder = EncoderConfig {
        image_size: 32,
        patch_size: 8,
        depth: 12,
        d_model: 16,
        heads: 2,
        tap_indices: vec![-11, -8, -5, -2],
        residual_index: -2,
    };
    ModelConfig {
        enhancer: EnhancerConfig {
            heads: 2,
            ..EnhancerConfig::for_width(encoder.d_model)
        },
        encoder,
        decoder: DecoderConfig {
            c_model: 32,
            depth: 2,
            heads: 2,
            max_len: 12,
        },
    }
}

/// One stage's resolved recipe.
#[derive(Debug, Clone, PartialEq)]
pub struct StageConfig {
    pub stage: u8,
    pub trainable: GroupSet,
    pub base_lr: f64,
    pub encoder_lr_ratio: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub mode: IterationMode,
    pub max_steps: Option<usize>,
    pub grad_clip: f64,
}

impl StageConfig {
    pub fn validate(&self, allow_stage1_projector: bool) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("stage {}: {m}", self.stage)));
        let expected: GroupSet = match self.stage {
            1 => {
                let mut g: GroupSet = [Group::Enhancer].into_iter().collect();
                if allow_stage1_projector && self.trainable.contains(Group::Projector) {
                    g.insert(Group::Projector);
                }
                g
            }
            2 | 3 => GroupSet::all(),
            s => return bad(format!("unknown stage {s}")),
        };
        if self.trainable != expected {
            return bad(format!("trainable groups {:?} violate the stage schedule", self.trainable.iter().collect::<Vec<_>>()));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) || !(self.encoder_lr_ratio >= 0.0) {
            return bad("learning rates must be finite and non-negative".into());
        }
        Ok(())
    }

    /// Frozen groups at 0, the encoder at `ratio * base`, the rest at `base`.
    pub fn lr_map(&self) -> LrMap {
        Group::ALL
            .into_iter()
            .map(|g| {
                let rate = if !self.trainable.contains(g) {
                    0.0
                } else if g == Group::Encoder {
                    self.encoder_lr_ratio * self.base_lr
                } else {
                    self.base_lr
                };
                (g, rate)
            })
            .collect()
    }
}
