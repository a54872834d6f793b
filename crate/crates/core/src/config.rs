//! Model and training configuration, readable from flat TOML sections.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Layer widths. The defaults are a desk-scale reduction of the
/// 512-channel reference network; every width stays adjustable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Output channels of the three stride-2 encoder convolutions.
    pub conv_widths: [usize; 3],
    /// Channels `D` of every ConvLSTM and of the latent code.
    pub latent_channels: usize,
    pub lstm_kernel: usize,
    /// First critic width; each later stride-2 layer doubles it.
    pub critic_base: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            conv_widths: [64, 64, 64],
            latent_channels: 64,
            lstm_kernel: 4,
            critic_base: 64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.conv_widths.contains(&0) || self.latent_channels == 0 || self.critic_base == 0 {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if self.lstm_kernel == 0 {
            return Err(Error::Config("lstm_kernel must be positive".into()));
        }
        Ok(())
    }
}

/// Which parts of the model take part in training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub frame_branch_on: bool,
    pub flow_branch_on: bool,
    pub frame_gan_on: bool,
    pub flow_gan_on: bool,
    /// Off: the latent code is the deterministic mean map and the KL term is dropped.
    pub encoder_probabilistic_on: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            frame_branch_on: true,
            flow_branch_on: true,
            frame_gan_on: true,
            flow_gan_on: true,
            encoder_probabilistic_on: true,
        }
    }
}

impl Ablation {
    /// Named variants: `full`, `frame_off`, `flow_off`, `gan_off`,
    /// `frame_gan_off`, `flow_gan_off`, `no_motion_encoder`.
    pub fn preset(name: &str) -> Result<Self> {
        let full = Self::default();
        Ok(match name {
            "full" => full,
            "flow_off" => Self {
                flow_branch_on: false,
                flow_gan_on: false,
                ..full
            },
            "frame_off" => Self {
                frame_branch_on: false,
                frame_gan_on: false,
                ..full
            },
            "gan_off" => Self {
                frame_gan_on: false,
                flow_gan_on: false,
                ..full
            },
            "frame_gan_off" => Self {
                frame_gan_on: false,
                ..full
            },
            "flow_gan_off" => Self {
                flow_gan_on: false,
                ..full
            },
            "no_motion_encoder" => Self {
                encoder_probabilistic_on: false,
                ..full
            },
            other => return Err(Error::Config(format!("unknown ablation preset `{other}`"))),
        })
    }

    pub fn both_branches(&self) -> bool {
        self.frame_branch_on && self.flow_branch_on
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    /// Weight of both adversarial terms.
    pub lambda: f64,
    pub learning_rate: f64,
    pub critic_steps_per_gen_step: usize,
    pub clip_bound: f64,
    pub batch_size: usize,
    /// Number of generator updates (each preceded by the critic updates).
    pub steps: u64,
    pub seed: u64,
    pub ablation: Ablation,
    /// Write a checkpoint every this many steps; 0 disables periodic saves.
    pub checkpoint_interval: u64,
    pub deterministic: bool,
    /// Number of past frames fed to the encoder.
    pub window: usize,
    /// Multiplier on the KL term of the variational bound.
    pub kl_weight: f64,
    pub rms_decay: f64,
    pub rms_eps: f64,
    pub model: ModelConfig,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            lambda: 0.001,
            learning_rate: 0.0001,
            critic_steps_per_gen_step: 5,
            clip_bound: 0.01,
            batch_size: 1,
            steps: 2000,
            seed: 0,
            ablation: Ablation::default(),
            checkpoint_interval: 500,
            deterministic: true,
            window: 4,
            kl_weight: 1.0,
            rms_decay: 0.99,
            rms_eps: 1e-8,
            model: ModelConfig::default(),
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("clip_bound", self.clip_bound),
            ("rms_eps", self.rms_eps),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!(
                "lambda must be non-negative, got {}",
                self.lambda
            )));
        }
        if !(self.kl_weight >= 0.0 && self.kl_weight.is_finite()) {
            return Err(Error::Config("kl_weight must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.rms_decay) {
            return Err(Error::Config("rms_decay must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 || self.window == 0 {
            return Err(Error::Config("batch_size and window must be positive".into()));
        }
        if !self.ablation.frame_branch_on && !self.ablation.flow_branch_on {
            return Err(Error::Config("at least one generator branch must be on".into()));
        }
        self.model.validate()
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file: ConfigFile = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let cfg = file.train;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(&ConfigFile { train: self.clone() }).expect("config serializes")
    }
}

/// On-disk layout: `[train]` with nested `[train.ablation]` / `[train.model]`.
#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ConfigFile {
    train: TrainingConfig,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_reference_schedule() {
        let c = TrainingConfig::default();
        assert_eq!(c.lambda, 0.001);
        assert_eq!(c.learning_rate, 0.0001);
        assert_eq!(c.critic_steps_per_gen_step, 5);
        assert_eq!(c.clip_bound, 0.01);
        assert_eq!(c.batch_size, 1);
        c.validate().unwrap();
    }

    #[test]
    fn toml_round_trip_and_partial_files() {
        let c = TrainingConfig {
            seed: 9,
            ablation: Ablation::preset("flow_off").unwrap(),
            ..Default::default()
        };
        let back = TrainingConfig::from_toml_str(&c.to_toml_string()).unwrap();
        assert_eq!(back, c);
        let partial =
            TrainingConfig::from_toml_str("[train]\nlambda = 0.0\n[train.model]\nlatent_channels = 8\n").unwrap();
        assert_eq!(partial.lambda, 0.0);
        assert_eq!(partial.model.latent_channels, 8);
        assert_eq!(partial.learning_rate, 0.0001);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(TrainingConfig::from_toml_str("[train]\nlamda = 1.0\n").is_err());
        assert!(TrainingConfig::from_toml_str("[train]\nclip_bound = 0.0\n").is_err());
        assert!(
            TrainingConfig::from_toml_str("[train.ablation]\nframe_branch_on = false\nflow_branch_on = false\n")
                .is_err()
        );
    }
}
