//! Run configuration, read from TOML with `[gnn]`, `[ppo]`, `[reward]`,
//! `[train]` and `[data]` sections. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gnn::{Architecture, GnnConfig, Pooling};
use crate::graph::Mode;
use crate::ppo::PpoConfig;
use crate::reward::RewardConfig;

/// Where conformal calibration scores come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CalibrationSource {
    /// The classifier's own training graphs, as in the reference algorithm.
    Train,
    /// A slice of the training split withheld from classifier updates.
    Holdout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub classifier_lr: f64,
    pub classifier_scheduler_factor: f64,
    pub rl_scheduler_factor: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub ppo_patience: usize,
    /// Non-improving epochs tolerated before a scheduler decays its rate.
    #[serde(default)]
    pub scheduler_patience: usize,
    pub seed: u64,
    pub mode: Mode,
    #[serde(default)]
    pub report_last_epoch: bool,
    #[serde(default = "default_calibration")]
    pub calibration: CalibrationSource,
    /// Share of the training split used for calibration with `holdout`.
    #[serde(default = "default_calibration_fraction")]
    pub calibration_fraction: f64,
    /// Permits `ppo.policy_lr > classifier_lr`.
    #[serde(default)]
    pub allow_fast_policy: bool,
    /// Initial bias of the policy's removal logit; negative starts from
    /// keeping most units.
    #[serde(default)]
    pub policy_init_bias: f64,
}

fn default_calibration() -> CalibrationSource {
    CalibrationSource::Train
}

fn default_calibration_fraction() -> f64 {
    0.2
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            classifier_lr: 1e-3,
            classifier_scheduler_factor: 0.95,
            rl_scheduler_factor: 0.9,
            batch_size: 16,
            max_epochs: 100,
            early_stop_patience: 500,
            ppo_patience: 10,
            scheduler_patience: 0,
            seed: 0,
            mode: Mode::Node,
            report_last_epoch: false,
            calibration: CalibrationSource::Train,
            calibration_fraction: 0.2,
            allow_fast_policy: false,
            policy_init_bias: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// TU dataset name, or `ba_shapes` for the synthetic generator.
    pub dataset: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_dir: Option<PathBuf>,
    pub splits: [f64; 3],
    #[serde(default = "default_folds")]
    pub folds: usize,
    #[serde(default = "default_synthetic_graphs")]
    pub synthetic_graphs: usize,
    #[serde(default = "default_synthetic_base_nodes")]
    pub synthetic_base_nodes: usize,
    #[serde(default)]
    pub synthetic_seed: u64,
}

fn default_folds() -> usize {
    5
}

fn default_synthetic_graphs() -> usize {
    200
}

fn default_synthetic_base_nodes() -> usize {
    10
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            dataset: "MUTAG".into(),
            data_dir: None,
            splits: [0.4, 0.5, 0.1],
            folds: 5,
            synthetic_graphs: 200,
            synthetic_base_nodes: 10,
            synthetic_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub gnn: GnnConfig,
    pub ppo: PpoConfig,
    pub reward: RewardConfig,
    pub train: TrainSection,
    pub data: DataSection,
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.gnn.validate()?;
        self.ppo.validate()?;
        self.reward.validate()?;
        let t = &self.train;
        if t.classifier_lr.is_nan() || t.classifier_lr <= 0.0 {
            return Err(Error::Config("train.classifier_lr must be positive".into()));
        }
        if !t.allow_fast_policy && self.ppo.policy_lr > t.classifier_lr {
            return Err(Error::Config(format!(
                "ppo.policy_lr {} exceeds train.classifier_lr {}; set train.allow_fast_policy to permit",
                self.ppo.policy_lr, t.classifier_lr
            )));
        }
        for (name, f) in [
            ("train.classifier_scheduler_factor", t.classifier_scheduler_factor),
            ("train.rl_scheduler_factor", t.rl_scheduler_factor),
        ] {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::Config(format!("{name} {f} outside (0, 1]")));
            }
        }
        if t.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        if !(t.calibration_fraction > 0.0 && t.calibration_fraction < 1.0) {
            return Err(Error::Config(format!(
                "train.calibration_fraction {} outside (0, 1)",
                t.calibration_fraction
            )));
        }
        let d = &self.data;
        if d.splits.iter().any(|r| *r < 0.0) || (d.splits.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "data.splits {:?} must be non-negative and sum to 1",
                d.splits
            )));
        }
        if d.folds == 0 {
            return Err(Error::Config("data.folds must be at least 1".into()));
        }
        Ok(())
    }

    /// GIN setup tuned for MUTAG: classifier and node-mode policy values.
    pub fn mutag() -> Self {
        Self {
            gnn: GnnConfig {
                architecture: Architecture::Gin,
                num_layers: 3,
                hidden_dim: 16,
                dropout: 0.0,
                batch_norm: true,
                pooling: vec![Pooling::Mean, Pooling::Add],
                gin_epsilon: 0.2,
                gin_epsilon_trainable: true,
                num_classes: 0,
            },
            ppo: PpoConfig {
                clip_epsilon: 0.2,
                entropy_coef: 0.001,
                value_coef: 1.0,
                ppo_epochs: 15,
                minibatch_size: 32,
                policy_lr: 1e-4,
                critic_lr_ratio: 3.0,
                advantage_normalization: true,
                env_steps: 128,
            },
            reward: RewardConfig {
                lambda: 0.1,
                desired_ratio: 0.7,
                env_penalty: 0.5,
                alpha_conf: 0.2,
            },
            train: TrainSection {
                classifier_lr: 1e-3,
                classifier_scheduler_factor: 0.95,
                rl_scheduler_factor: 0.9,
                batch_size: 16,
                max_epochs: 1000,
                early_stop_patience: 500,
                ppo_patience: 10,
                ..TrainSection::default()
            },
            data: DataSection {
                dataset: "MUTAG".into(),
                splits: [0.4, 0.5, 0.1],
                ..DataSection::default()
            },
        }
    }
}
