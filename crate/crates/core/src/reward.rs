//! Reward for a sparsified graph.
//!
//! The sparsity term `R_s = 1 − ρ^d̃` uses `d̃ = ln 0.05 / ln d`, so a graph
//! kept at exactly the desired ratio `d` earns 0.95. It is combined with the
//! classifier's confidence according to the conformal prediction set.

use serde::{Deserialize, Serialize};

use crate::conformal::PredictionSet;
use crate::error::{Error, Result};

pub const DESIRED_RATIO_MIN: f64 = 0.01;
pub const DESIRED_RATIO_MAX: f64 = 0.99;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardConfig {
    pub lambda: f64,
    pub desired_ratio: f64,
    pub env_penalty: f64,
    pub alpha_conf: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            desired_ratio: 0.5,
            env_penalty: 1.0,
            alpha_conf: 0.1,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("reward.lambda {} outside [0, 1]", self.lambda)));
        }
        if !(self.desired_ratio > 0.0 && self.desired_ratio < 1.0) {
            return Err(Error::Config(format!(
                "reward.desired_ratio {} outside (0, 1)",
                self.desired_ratio
            )));
        }
        if self.env_penalty < 0.0 || !self.env_penalty.is_finite() {
            return Err(Error::Config(format!(
                "reward.env_penalty {} must be non-negative",
                self.env_penalty
            )));
        }
        if !(self.alpha_conf > 0.0 && self.alpha_conf < 1.0) {
            return Err(Error::Config(format!(
                "reward.alpha_conf {} outside (0, 1)",
                self.alpha_conf
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Case {
    Certain,
    Uncertain,
    Miss,
    Invalid,
}

impl Case {
    pub fn as_str(self) -> &'static str {
        match self {
            Case::Certain => "certain",
            Case::Uncertain => "uncertain",
            Case::Miss => "miss",
            Case::Invalid => "invalid",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RewardBreakdown {
    pub r_perf: f64,
    pub r_sparse: f64,
    pub set_size: usize,
    pub in_set: bool,
    pub total: f64,
    pub case: Case,
}

/// Exponent `d̃` with `1 − d^d̃ = 0.95`; `d` is clamped to `[0.01, 0.99]`.
pub fn sparsity_exponent(desired_ratio: f64) -> f64 {
    let d = desired_ratio.clamp(DESIRED_RATIO_MIN, DESIRED_RATIO_MAX);
    0.05f64.ln() / d.ln()
}

pub fn sparsity_reward(ratio: f64, desired_ratio: f64) -> Result<f64> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Domain(format!("kept ratio {ratio} outside (0, 1]")));
    }
    Ok(1.0 - ratio.powf(sparsity_exponent(desired_ratio)))
}

pub fn performance_reward(probs: &[f64], label: usize) -> Result<f64> {
    probs.get(label).copied().ok_or(Error::Index {
        what: "class label",
        index: label,
        len: probs.len(),
    })
}

/// Reward for one sparsified graph. For invalid (empty) subgraphs `probs`,
/// `ratio` and `pset` are ignored.
pub fn compute_reward(
    probs: &[f64],
    label: usize,
    ratio: f64,
    pset: &PredictionSet,
    cfg: &RewardConfig,
    valid: bool,
) -> Result<RewardBreakdown> {
    if !valid {
        return Ok(RewardBreakdown {
            r_perf: 0.0,
            r_sparse: 0.0,
            set_size: 0,
            in_set: false,
            total: -cfg.env_penalty,
            case: Case::Invalid,
        });
    }
    let r_perf = performance_reward(probs, label)?;
    let r_sparse = sparsity_reward(ratio, cfg.desired_ratio)?;
    let in_set = pset.contains(label);
    let set_size = pset.size();
    let (total, case) = match (in_set, set_size) {
        (true, 1) => (
            cfg.lambda * r_perf + (1.0 - cfg.lambda) * r_sparse,
            Case::Certain,
        ),
        (true, n) => (r_perf / n as f64, Case::Uncertain),
        (false, _) => (-r_sparse, Case::Miss),
    };
    Ok(RewardBreakdown {
        r_perf,
        r_sparse,
        set_size,
        in_set,
        total,
        case,
    })
}
