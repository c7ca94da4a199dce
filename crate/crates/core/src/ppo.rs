//! One-step PPO for the removal policy.
//!
//! Every rollout is a single action on a single graph, so the advantage is
//! just `reward − value`. Updates run `ppo_epochs` passes of shuffled
//! minibatches over the buffer with the clipped surrogate objective.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::graph::{batch_graphs, Graph};
use crate::params::Adam;
use crate::policy::PolicyModel;
use crate::tensor::{Tensor, TensorError};

pub const ADV_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PpoConfig {
    pub clip_epsilon: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub ppo_epochs: usize,
    pub minibatch_size: usize,
    pub policy_lr: f64,
    pub critic_lr_ratio: f64,
    pub advantage_normalization: bool,
    /// Rollout buffer capacity.
    pub env_steps: usize,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            clip_epsilon: 0.2,
            entropy_coef: 0.001,
            value_coef: 0.5,
            ppo_epochs: 10,
            minibatch_size: 32,
            policy_lr: 1e-4,
            critic_lr_ratio: 1.0,
            advantage_normalization: true,
            env_steps: 128,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return Err(Error::Config(format!(
                "ppo.clip_epsilon {} outside (0, 1)",
                self.clip_epsilon
            )));
        }
        if self.ppo_epochs == 0 || self.minibatch_size == 0 || self.env_steps == 0 {
            return Err(Error::Config(
                "ppo.ppo_epochs, ppo.minibatch_size and ppo.env_steps must be positive".into(),
            ));
        }
        if [self.policy_lr, self.critic_lr_ratio].iter().any(|x| x.is_nan() || *x <= 0.0) {
            return Err(Error::Config(
                "ppo.policy_lr and ppo.critic_lr_ratio must be positive".into(),
            ));
        }
        if self.entropy_coef < 0.0 || self.value_coef < 0.0 {
            return Err(Error::Config("ppo loss coefficients must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutRecord {
    /// Index into the dataset the graph came from.
    pub graph_id: usize,
    pub mask: Vec<bool>,
    pub log_prob: f64,
    pub value: f64,
    pub reward: f64,
    pub set_size: usize,
}

#[derive(Debug, Clone)]
pub struct RolloutBuffer {
    records: Vec<RolloutRecord>,
    capacity: usize,
}

impl RolloutBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            records: Vec::with_capacity(capacity),
            capacity,
        }
    }

    pub fn push(&mut self, record: RolloutRecord) -> Result<()> {
        if self.is_full() {
            return Err(Error::State(format!(
                "rollout buffer full ({} records)",
                self.capacity
            )));
        }
        self.records.push(record);
        Ok(())
    }

    pub fn is_full(&self) -> bool {
        self.records.len() >= self.capacity
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn records(&self) -> &[RolloutRecord] {
        &self.records
    }

    pub fn clear(&mut self) {
        self.records.clear();
    }
}

/// `reward − value` per record, optionally standardized with population std.
pub fn compute_advantages(records: &[RolloutRecord], normalize: bool) -> Result<Vec<f64>> {
    if records.is_empty() {
        return Err(Error::State("advantages of an empty buffer".into()));
    }
    let adv: Vec<f64> = records.iter().map(|r| r.reward - r.value).collect();
    if !normalize {
        return Ok(adv);
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let std = (adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
    Ok(adv.iter().map(|a| (a - mean) / (std + ADV_EPS)).collect())
}

/// Values of the loss terms, for logging.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub surrogate: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    /// Largest `|r − 1|` in the minibatch.
    pub max_ratio_deviation: f64,
}

/// `−mean(min(rÂ, clip(r, 1−ε, 1+ε)Â)) + c_v·mean((V − R)²) − c_e·mean(H)`
/// with `r = exp(new_log_prob − old_log_prob)`.
#[allow(clippy::too_many_arguments)]
pub fn ppo_loss(
    tape: &mut Tape,
    new_log_probs: Var,
    old_log_probs: &[f64],
    advantages: &[f64],
    new_values: Var,
    rewards: &[f64],
    entropies: Var,
    cfg: &PpoConfig,
) -> Result<(Var, LossParts)> {
    let n = old_log_probs.len();
    for (v, len) in [
        (new_log_probs, tape.value(new_log_probs).numel()),
        (new_values, tape.value(new_values).numel()),
        (entropies, tape.value(entropies).numel()),
    ] {
        if len != n || advantages.len() != n || rewards.len() != n {
            return Err(TensorError::Shape {
                op: "ppo_loss",
                lhs: tape.value(v).shape().to_vec(),
                rhs: vec![n, advantages.len(), rewards.len()],
            }
            .into());
        }
    }
    let eps = cfg.clip_epsilon;
    let old = tape.constant(Tensor::vector(old_log_probs.to_vec()));
    let adv = tape.constant(Tensor::vector(advantages.to_vec()));
    let ret = tape.constant(Tensor::vector(rewards.to_vec()));

    let diff = tape.sub(new_log_probs, old)?;
    let ratio = tape.exp(diff);
    let unclipped = tape.mul(ratio, adv)?;
    let clipped_ratio = tape.clip(ratio, 1.0 - eps, 1.0 + eps);
    let clipped = tape.mul(clipped_ratio, adv)?;
    let surr = tape.minimum(unclipped, clipped)?;
    let surr_mean = tape.mean(surr);

    let err = tape.sub(new_values, ret)?;
    let sq = tape.mul(err, err)?;
    let value_loss = tape.mean(sq);
    let ent = tape.mean(entropies);

    let neg_surr = tape.neg(surr_mean);
    let cv = tape.scalar(cfg.value_coef);
    let ce = tape.scalar(-cfg.entropy_coef);
    let v_term = tape.mul(value_loss, cv)?;
    let e_term = tape.mul(ent, ce)?;
    let partial = tape.add(neg_surr, v_term)?;
    let loss = tape.add(partial, e_term)?;

    let r = tape.value(ratio).data();
    let parts = LossParts {
        surrogate: tape.value(surr_mean).item(),
        value_loss: tape.value(value_loss).item(),
        entropy: tape.value(ent).item(),
        clip_fraction: r.iter().filter(|x| (*x - 1.0).abs() > eps).count() as f64 / n.max(1) as f64,
        max_ratio_deviation: r.iter().map(|x| (x - 1.0).abs()).fold(0.0, f64::max),
    };
    Ok((loss, parts))
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct UpdateStats {
    pub surrogate: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    /// `max |r − 1|` on the first minibatch of the first epoch.
    pub first_ratio_deviation: f64,
    pub steps: usize,
    pub records: usize,
}

/// PPO optimizer state kept across update phases.
#[derive(Debug, Clone)]
pub struct Ppo {
    cfg: PpoConfig,
    adam: Adam,
}

impl Ppo {
    pub fn new(cfg: &PpoConfig, policy: &PolicyModel) -> Result<Self> {
        cfg.validate()?;
        let mut adam = Adam::new(policy.params(), cfg.policy_lr);
        for id in policy.critic_params() {
            adam.set_scale(id, cfg.critic_lr_ratio);
        }
        Ok(Self {
            cfg: cfg.clone(),
            adam,
        })
    }

    pub fn config(&self) -> &PpoConfig {
        &self.cfg
    }

    pub fn lr(&self) -> f64 {
        self.adam.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.adam.lr = lr;
    }

    /// Runs the update phase on `buffer`; graphs are looked up in `dataset`
    /// by `graph_id`. The buffer is left untouched; callers clear it.
    pub fn update(
        &mut self,
        policy: &mut PolicyModel,
        dataset: &[Graph],
        buffer: &RolloutBuffer,
        rng: &mut impl Rng,
    ) -> Result<UpdateStats> {
        let records = buffer.records();
        let adv = compute_advantages(records, self.cfg.advantage_normalization)?;
        let mut order: Vec<usize> = (0..records.len()).collect();
        let mut stats = UpdateStats {
            records: records.len(),
            ..UpdateStats::default()
        };
        for epoch in 0..self.cfg.ppo_epochs {
            order.shuffle(rng);
            for (mb, chunk) in order.chunks(self.cfg.minibatch_size).enumerate() {
                let graphs = chunk
                    .iter()
                    .map(|&i| {
                        let id = records[i].graph_id;
                        dataset.get(id).ok_or(Error::Index {
                            what: "rollout graph",
                            index: id,
                            len: dataset.len(),
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                let batch = batch_graphs(&graphs)?;
                let masks: Vec<Vec<bool>> = chunk.iter().map(|&i| records[i].mask.clone()).collect();
                let old: Vec<f64> = chunk.iter().map(|&i| records[i].log_prob).collect();
                let a: Vec<f64> = chunk.iter().map(|&i| adv[i]).collect();
                let rew: Vec<f64> = chunk.iter().map(|&i| records[i].reward).collect();

                let mut tape = Tape::new();
                let bound = policy.params().bind(&mut tape);
                let ev = policy.evaluate(&mut tape, &bound, &batch, &masks)?;
                let (loss, parts) =
                    ppo_loss(&mut tape, ev.log_prob, &old, &a, ev.value, &rew, ev.entropy, &self.cfg)?;
                let lv = tape.value(loss).item();
                if !lv.is_finite() {
                    return Err(Error::Domain(format!("non-finite PPO loss {lv}")));
                }
                if epoch == 0 && mb == 0 {
                    stats.first_ratio_deviation = parts.max_ratio_deviation;
                }
                let grads = tape.backward(loss)?;
                policy.params_mut().accumulate(&grads, &bound);
                self.adam.step(policy.params_mut());

                stats.surrogate += parts.surrogate;
                stats.value_loss += parts.value_loss;
                stats.entropy += parts.entropy;
                stats.clip_fraction += parts.clip_fraction;
                stats.steps += 1;
            }
        }
        let k = stats.steps.max(1) as f64;
        stats.surrogate /= k;
        stats.value_loss /= k;
        stats.entropy /= k;
        stats.clip_fraction /= k;
        Ok(stats)
    }
}
