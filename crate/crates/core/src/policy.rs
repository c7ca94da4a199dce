//! Node or edge removal policy.
//!
//! The policy sees the full graph, runs its own GNN trunk and emits one
//! Bernoulli removal logit per unit (node or edge). A critic head reads the
//! pooled trunk states and predicts the reward of the graph.

use std::collections::BTreeMap;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::gnn::{eval_phase, pool, BnUpdates, GnnConfig, GnnTrunk, MessageIndex, Mlp};
use crate::graph::{batch_graphs, BatchedGraph, Graph, Mode};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Tensor, TensorError};

/// Probabilities are kept in `[PROB_CLAMP, 1 − PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct ActionSample {
    /// `true` removes the unit.
    pub mask: Vec<bool>,
    pub log_prob: f64,
    pub value: f64,
    pub entropy: f64,
}

fn clamped(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// `Σ_i a_i ln p_i + (1 − a_i) ln(1 − p_i)` with `p_i = sigmoid(logit_i)`.
pub fn bernoulli_log_prob(logits: &[f64], mask: &[bool]) -> f64 {
    logits
        .iter()
        .zip(mask)
        .map(|(&l, &a)| {
            let p = clamped(crate::autodiff::sigmoid(l));
            if a {
                p.ln()
            } else {
                (1.0 - p).ln()
            }
        })
        .sum()
}

pub fn bernoulli_entropy(logits: &[f64]) -> f64 {
    logits
        .iter()
        .map(|&l| {
            let p = clamped(crate::autodiff::sigmoid(l));
            -(p * p.ln() + (1.0 - p) * (1.0 - p).ln())
        })
        .sum()
}

/// Differentiable per-graph outputs of [`PolicyModel::evaluate`].
#[derive(Debug, Clone, Copy)]
pub struct Evaluation {
    /// `[G]` summed log-probabilities of the given masks.
    pub log_prob: Var,
    /// `[G]` critic estimates.
    pub value: Var,
    /// `[G]` summed Bernoulli entropies.
    pub entropy: Var,
}

#[derive(Debug, Clone)]
pub struct PolicyModel {
    config: GnnConfig,
    mode: Mode,
    input_dim: usize,
    params: ParamStore,
    trunk: GnnTrunk,
    actor: Mlp,
    critic: Mlp,
}

impl PolicyModel {
    /// Builds a policy whose trunk follows `config` minus dropout and batch
    /// norm, so a forward pass is a pure function of the parameters.
    pub fn new(config: &GnnConfig, mode: Mode, input_dim: usize, rng: &mut impl Rng) -> Result<Self> {
        let config = GnnConfig {
            dropout: 0.0,
            batch_norm: false,
            ..config.clone()
        };
        config.validate()?;
        let hd = config.hidden_dim;
        let mut params = ParamStore::new();
        let trunk = GnnTrunk::new(&mut params, "policy", &config, input_dim, rng);
        let actor_in = match mode {
            Mode::Node => hd,
            Mode::Edge => 2 * hd,
        };
        let actor = Mlp::new(&mut params, "policy.actor", [actor_in, hd, 1], rng);
        let critic = Mlp::new(&mut params, "policy.critic", [config.pooled_dim(), hd, 1], rng);
        Ok(Self {
            config,
            mode,
            input_dim,
            params,
            trunk,
            actor,
            critic,
        })
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn config(&self) -> &GnnConfig {
        &self.config
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Parameters trained only by the value loss.
    pub fn critic_params(&self) -> Vec<ParamId> {
        vec![
            self.critic.first.weight,
            self.critic.first.bias,
            self.critic.second.weight,
            self.critic.second.bias,
        ]
    }

    /// Parameter ids of the actor's output layer.
    pub fn actor_output(&self) -> (ParamId, ParamId) {
        (self.actor.second.weight, self.actor.second.bias)
    }

    /// Records the trunk and heads; returns `[U]` removal logits and `[G]`
    /// values. Units are nodes or edges of `batch` in batch order.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, batch: &BatchedGraph) -> Result<(Var, Var)> {
        if batch.num_features() != self.input_dim {
            return Err(TensorError::Shape {
                op: "policy forward",
                lhs: vec![batch.num_features()],
                rhs: vec![self.input_dim],
            }
            .into());
        }
        let index = MessageIndex::from_batch(batch);
        let x = tape.constant(batch.features.clone());
        let mut updates = BnUpdates::default();
        let h = self
            .trunk
            .forward(tape, bound, x, &index, &mut eval_phase(), &mut updates)?;
        let logits = match self.mode {
            Mode::Node => {
                let l = self.actor.forward(tape, bound, h, 0.0, &mut eval_phase())?;
                tape.reshape(l, vec![batch.num_nodes()])?
            }
            Mode::Edge => self.edge_logits(tape, bound, h, &batch.edges)?,
        };
        let g = pool(tape, h, batch, &self.config.pooling)?;
        let v = self.critic.forward(tape, bound, g, 0.0, &mut eval_phase())?;
        let value = tape.reshape(v, vec![batch.num_graphs])?;
        Ok((logits, value))
    }

    /// Actor on `[h_u + h_v ⊕ h_u ⊙ h_v]`, invariant to endpoint order.
    pub fn edge_logits(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        h: Var,
        edges: &[(usize, usize)],
    ) -> Result<Var> {
        let us: Vec<usize> = edges.iter().map(|e| e.0).collect();
        let vs: Vec<usize> = edges.iter().map(|e| e.1).collect();
        let hu = tape.gather_rows(h, &us)?;
        let hv = tape.gather_rows(h, &vs)?;
        let sum = tape.add(hu, hv)?;
        let prod = tape.mul(hu, hv)?;
        let feats = tape.concat_cols(&[sum, prod])?;
        let l = self.actor.forward(tape, bound, feats, 0.0, &mut eval_phase())?;
        Ok(tape.reshape(l, vec![edges.len()])?)
    }

    fn unit_to_graph(&self, batch: &BatchedGraph) -> Vec<usize> {
        match self.mode {
            Mode::Node => batch.node_to_graph.clone(),
            Mode::Edge => batch.edge_to_graph.clone(),
        }
    }

    /// Differentiable log-probabilities, values and entropies of `masks`
    /// (one per graph of `batch`, concatenated in batch order).
    pub fn evaluate(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        batch: &BatchedGraph,
        masks: &[Vec<bool>],
    ) -> Result<Evaluation> {
        let (logits, value) = self.forward(tape, bound, batch)?;
        let units = self.unit_to_graph(batch);
        let flat: Vec<f64> = masks
            .iter()
            .flat_map(|m| m.iter().map(|&a| if a { 1.0 } else { 0.0 }))
            .collect();
        if masks.len() != batch.num_graphs || flat.len() != units.len() {
            return Err(TensorError::Shape {
                op: "policy evaluate",
                lhs: vec![masks.len(), flat.len()],
                rhs: vec![batch.num_graphs, units.len()],
            }
            .into());
        }
        let keep: Vec<f64> = flat.iter().map(|a| 1.0 - a).collect();
        let n = flat.len();

        let p = tape.sigmoid(logits);
        let p = tape.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP);
        let one = tape.scalar(1.0);
        let neg_p = tape.neg(p);
        let q = tape.add(neg_p, one)?;
        let ln_p = tape.log(p)?;
        let ln_q = tape.log(q)?;

        let a = tape.constant(Tensor::vector(flat));
        let k = tape.constant(Tensor::vector(keep));
        let remove_term = tape.mul(ln_p, a)?;
        let keep_term = tape.mul(ln_q, k)?;
        let unit_lp = tape.add(remove_term, keep_term)?;

        let p_ln_p = tape.mul(p, ln_p)?;
        let q_ln_q = tape.mul(q, ln_q)?;
        let s = tape.add(p_ln_p, q_ln_q)?;
        let unit_h = tape.neg(s);

        let g = batch.num_graphs;
        let lp = tape.reshape(unit_lp, vec![n, 1])?;
        let lp = tape.segment_reduce(lp, &units, g, crate::autodiff::Reduce::Sum)?;
        let log_prob = tape.reshape(lp, vec![g])?;
        let h = tape.reshape(unit_h, vec![n, 1])?;
        let h = tape.segment_reduce(h, &units, g, crate::autodiff::Reduce::Sum)?;
        let entropy = tape.reshape(h, vec![g])?;
        Ok(Evaluation {
            log_prob,
            value,
            entropy,
        })
    }

    /// Per-graph removal logits and values without recording gradients.
    pub fn logits_and_values(&self, graphs: &[&Graph]) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
        let batch = batch_graphs(graphs)?;
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let (logits, values) = self.forward(&mut tape, &bound, &batch)?;
        let flat = tape.value(logits).data();
        let offsets = match self.mode {
            Mode::Node => &batch.node_offsets,
            Mode::Edge => &batch.edge_offsets,
        };
        let per_graph = (0..graphs.len())
            .map(|i| flat[offsets[i]..offsets[i + 1]].to_vec())
            .collect();
        Ok((per_graph, tape.value(values).data().to_vec()))
    }

    /// Samples (or thresholds at 0.5 when `deterministic`) one action per
    /// graph. Random draws are consumed in graph then unit order.
    pub fn act_batch(
        &self,
        graphs: &[&Graph],
        rng: &mut impl Rng,
        deterministic: bool,
    ) -> Result<Vec<ActionSample>> {
        if graphs.is_empty() {
            return Ok(Vec::new());
        }
        let (logits, values) = self.logits_and_values(graphs)?;
        Ok(logits
            .into_iter()
            .zip(values)
            .map(|(l, value)| {
                let mask: Vec<bool> = l
                    .iter()
                    .map(|&x| {
                        let p = crate::autodiff::sigmoid(x);
                        if deterministic {
                            p > 0.5
                        } else {
                            rng.gen::<f64>() < p
                        }
                    })
                    .collect();
                ActionSample {
                    log_prob: bernoulli_log_prob(&l, &mask),
                    entropy: bernoulli_entropy(&l),
                    mask,
                    value,
                }
            })
            .collect())
    }

    pub fn act(&self, graph: &Graph, rng: &mut impl Rng, deterministic: bool) -> Result<ActionSample> {
        let mut out = self.act_batch(&[graph], rng, deterministic)?;
        Ok(out.remove(0))
    }

    pub fn header(&self) -> BTreeMap<String, String> {
        let mut map = BTreeMap::new();
        map.insert("kind".into(), "policy".into());
        map.insert("mode".into(), self.mode.as_str().into());
        map.insert("input_dim".into(), self.input_dim.to_string());
        self.config.write_header(&mut map);
        map
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::from_store(crate::checkpoint::render_header(&self.header()), &self.params)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let map = ck.header_map();
        if map.get("kind").map(String::as_str) != Some("policy") {
            return Err(Error::Config("checkpoint is not a policy".into()));
        }
        let config = GnnConfig::from_header(&map)?;
        let mode: Mode = map
            .get("mode")
            .and_then(|m| m.parse().ok())
            .ok_or_else(|| Error::Config("checkpoint header lacks mode".into()))?;
        let input_dim = map
            .get("input_dim")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Config("checkpoint header lacks input_dim".into()))?;
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut model = Self::new(&config, mode, input_dim, &mut rng)?;
        ck.load_into(&mut model.params)?;
        Ok(model)
    }

    /// Sets the actor's output bias, e.g. to start from a keep-everything
    /// policy.
    pub fn set_actor_bias(&mut self, bias: f64) {
        let (_, b) = self.actor_output();
        self.params.get_mut(b).data_mut()[0] = bias;
    }
}
