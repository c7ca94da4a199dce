//! Message-passing graph classifier.
//!
//! A [`GnnTrunk`] runs `num_layers` rounds of GIN or GCN aggregation over a
//! [`BatchedGraph`]; [`ClassifierModel`] pools the node states per graph and
//! maps them to class logits with a one-hidden-layer MLP. The trunk is
//! shared with the sparsification policy.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Reduce, Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::graph::BatchedGraph;
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Architecture {
    #[serde(rename = "GIN")]
    Gin,
    #[serde(rename = "GCN")]
    Gcn,
}

impl Architecture {
    pub fn as_str(self) -> &'static str {
        match self {
            Architecture::Gin => "GIN",
            Architecture::Gcn => "GCN",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Mean,
    Add,
}

impl Pooling {
    fn reduce(self) -> Reduce {
        match self {
            Pooling::Mean => Reduce::Mean,
            Pooling::Add => Reduce::Sum,
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            Pooling::Mean => "mean",
            Pooling::Add => "add",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GnnConfig {
    pub architecture: Architecture,
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub dropout: f64,
    pub batch_norm: bool,
    /// Concatenated in the listed order when more than one is given.
    pub pooling: Vec<Pooling>,
    pub gin_epsilon: f64,
    pub gin_epsilon_trainable: bool,
    /// 0 means "take it from the dataset".
    #[serde(default)]
    pub num_classes: usize,
}

impl Default for GnnConfig {
    fn default() -> Self {
        Self {
            architecture: Architecture::Gin,
            num_layers: 3,
            hidden_dim: 32,
            dropout: 0.0,
            batch_norm: true,
            pooling: vec![Pooling::Mean, Pooling::Add],
            gin_epsilon: 0.0,
            gin_epsilon_trainable: false,
            num_classes: 0,
        }
    }
}

impl GnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 {
            return Err(Error::Config("gnn.num_layers must be at least 1".into()));
        }
        if self.hidden_dim == 0 {
            return Err(Error::Config("gnn.hidden_dim must be positive".into()));
        }
        if self.pooling.is_empty() {
            return Err(Error::Config("gnn.pooling must not be empty".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "gnn.dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }

    pub fn pooled_dim(&self) -> usize {
        self.hidden_dim * self.pooling.len()
    }

    pub fn write_header(&self, map: &mut BTreeMap<String, String>) {
        map.insert("gnn.architecture".into(), self.architecture.as_str().into());
        map.insert("gnn.num_layers".into(), self.num_layers.to_string());
        map.insert("gnn.hidden_dim".into(), self.hidden_dim.to_string());
        map.insert("gnn.dropout".into(), format!("{:?}", self.dropout));
        map.insert("gnn.batch_norm".into(), self.batch_norm.to_string());
        let pooling: Vec<&str> = self.pooling.iter().map(|p| p.as_str()).collect();
        map.insert("gnn.pooling".into(), pooling.join(","));
        map.insert("gnn.gin_epsilon".into(), format!("{:?}", self.gin_epsilon));
        map.insert(
            "gnn.gin_epsilon_trainable".into(),
            self.gin_epsilon_trainable.to_string(),
        );
        map.insert("gnn.num_classes".into(), self.num_classes.to_string());
    }

    pub fn from_header(map: &BTreeMap<String, String>) -> Result<Self> {
        fn get<'a>(map: &'a BTreeMap<String, String>, key: &str) -> Result<&'a str> {
            map.get(key)
                .map(String::as_str)
                .ok_or_else(|| Error::Config(format!("checkpoint header lacks {key}")))
        }
        fn parse<T: std::str::FromStr>(map: &BTreeMap<String, String>, key: &str) -> Result<T> {
            get(map, key)?
                .parse()
                .map_err(|_| Error::Config(format!("bad value for {key}")))
        }
        let architecture = match get(map, "gnn.architecture")? {
            "GIN" => Architecture::Gin,
            "GCN" => Architecture::Gcn,
            other => return Err(Error::Config(format!("unknown architecture {other}"))),
        };
        let pooling = get(map, "gnn.pooling")?
            .split(',')
            .map(|p| match p.trim() {
                "mean" => Ok(Pooling::Mean),
                "add" => Ok(Pooling::Add),
                other => Err(Error::Config(format!("unknown pooling {other}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            architecture,
            num_layers: parse(map, "gnn.num_layers")?,
            hidden_dim: parse(map, "gnn.hidden_dim")?,
            dropout: parse(map, "gnn.dropout")?,
            batch_norm: parse(map, "gnn.batch_norm")?,
            pooling,
            gin_epsilon: parse(map, "gnn.gin_epsilon")?,
            gin_epsilon_trainable: parse(map, "gnn.gin_epsilon_trainable")?,
            num_classes: parse(map, "gnn.num_classes")?,
        })
    }
}

/// Whether a forward pass trains (dropout, batch statistics) or evaluates.
pub enum Phase<'a, R: Rng> {
    Eval,
    Train(&'a mut R),
}

impl<R: Rng> Phase<'_, R> {
    fn is_train(&self) -> bool {
        matches!(self, Phase::Train(_))
    }
}

/// Evaluation phase with a placeholder RNG type.
pub fn eval_phase<'a>() -> Phase<'a, rand_chacha::ChaCha8Rng> {
    Phase::Eval
}

/// Affine map `x·W + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    /// Glorot-uniform weights, zero bias.
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / (input + output) as f64).sqrt();
        let w: Vec<f64> = (0..input * output)
            .map(|_| rng.gen_range(-limit..=limit))
            .collect();
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::matrix(input, output, w).expect("in×out"),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[output]));
        Self { weight, bias }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let h = tape.matmul(x, bound.var(self.weight))?;
        Ok(tape.add_row(h, bound.var(self.bias))?)
    }
}

/// `Linear → ReLU → (dropout) → Linear`.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub first: Linear,
    pub second: Linear,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dims: [usize; 3],
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            first: Linear::new(store, &format!("{name}.0"), dims[0], dims[1], rng),
            second: Linear::new(store, &format!("{name}.1"), dims[1], dims[2], rng),
        }
    }

    pub fn forward<R: Rng>(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x: Var,
        dropout: f64,
        phase: &mut Phase<'_, R>,
    ) -> Result<Var> {
        let h = self.first.forward(tape, bound, x)?;
        let h = tape.relu(h);
        let h = apply_dropout(tape, h, dropout, phase)?;
        self.second.forward(tape, bound, h)
    }
}

fn apply_dropout<R: Rng>(tape: &mut Tape, x: Var, rate: f64, phase: &mut Phase<'_, R>) -> Result<Var> {
    let Phase::Train(rng) = phase else {
        return Ok(x);
    };
    if rate <= 0.0 {
        return Ok(x);
    }
    let shape = tape.value(x).shape().to_vec();
    let n = tape.value(x).numel();
    let scale = 1.0 / (1.0 - rate);
    let mask: Vec<f64> = (0..n)
        .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { scale })
        .collect();
    let m = tape.constant(Tensor::new(shape, mask)?);
    Ok(tape.mul(x, m)?)
}

/// Both directions of every undirected edge as `(source, target)` lists,
/// plus the symmetric GCN normalization.
#[derive(Debug, Clone)]
pub struct MessageIndex {
    pub num_nodes: usize,
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
    /// `1/sqrt(d_src·d_dst)` with self-loop degrees.
    pub gcn_edge_norm: Vec<f64>,
    /// `1/d_i` self-loop weight.
    pub gcn_self_norm: Vec<f64>,
}

impl MessageIndex {
    pub fn new(num_nodes: usize, edges: &[(usize, usize)]) -> Self {
        let mut src = Vec::with_capacity(2 * edges.len());
        let mut dst = Vec::with_capacity(2 * edges.len());
        let mut deg = vec![1.0f64; num_nodes];
        for &(u, v) in edges {
            src.push(u);
            dst.push(v);
            src.push(v);
            dst.push(u);
            deg[u] += 1.0;
            deg[v] += 1.0;
        }
        let gcn_edge_norm = src
            .iter()
            .zip(&dst)
            .map(|(&s, &d)| 1.0 / (deg[s] * deg[d]).sqrt())
            .collect();
        let gcn_self_norm = deg.iter().map(|d| 1.0 / d).collect();
        Self {
            num_nodes,
            src,
            dst,
            gcn_edge_norm,
            gcn_self_norm,
        }
    }

    pub fn from_batch(batch: &BatchedGraph) -> Self {
        Self::new(batch.num_nodes(), &batch.edges)
    }

    /// Σ over neighbours j of `h_j`, optionally scaled per message.
    fn neighbour_sum(&self, tape: &mut Tape, h: Var, scale: Option<&[f64]>) -> Result<Var> {
        let msgs = tape.gather_rows(h, &self.src)?;
        let msgs = match scale {
            Some(s) => tape.scale_rows(msgs, s.to_vec())?,
            None => msgs,
        };
        Ok(tape.segment_reduce(msgs, &self.dst, self.num_nodes, Reduce::Sum)?)
    }
}

/// GIN aggregation `(1 + ε)·h_i + Σ_j h_j`.
pub fn gin_aggregate(tape: &mut Tape, h: Var, eps: Var, index: &MessageIndex) -> Result<Var> {
    let one = tape.scalar(1.0);
    let scale = tape.add(eps, one)?;
    let own = tape.mul(h, scale)?;
    let nb = index.neighbour_sum(tape, h, None)?;
    Ok(tape.add(own, nb)?)
}

/// `D^{-1/2}(A + I)D^{-1/2}·h`.
pub fn gcn_propagate(tape: &mut Tape, h: Var, index: &MessageIndex) -> Result<Var> {
    let own = tape.scale_rows(h, index.gcn_self_norm.clone())?;
    let nb = index.neighbour_sum(tape, h, Some(&index.gcn_edge_norm))?;
    Ok(tape.add(own, nb)?)
}

#[derive(Debug, Clone)]
enum Conv {
    Gin { mlp: Mlp, eps: ParamId },
    Gcn { lin: Linear },
}

#[derive(Debug, Clone)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
}

/// Pending running-statistics updates from a training forward pass.
#[derive(Debug, Default)]
pub struct BnUpdates(Vec<(ParamId, ParamId, Vec<f64>, Vec<f64>)>);

impl BnUpdates {
    pub fn apply(self, store: &mut ParamStore) {
        for (rm, rv, mean, var) in self.0 {
            for (r, m) in store.get_mut(rm).data_mut().iter_mut().zip(&mean) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * m;
            }
            for (r, v) in store.get_mut(rv).data_mut().iter_mut().zip(&var) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * v;
            }
        }
    }
}

/// Stack of message-passing layers producing `[N × hidden_dim]` node states.
#[derive(Debug, Clone)]
pub struct GnnTrunk {
    config: GnnConfig,
    convs: Vec<Conv>,
    norms: Vec<Option<Norm>>,
}

impl GnnTrunk {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        config: &GnnConfig,
        input_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let hd = config.hidden_dim;
        let mut convs = Vec::with_capacity(config.num_layers);
        let mut norms = Vec::with_capacity(config.num_layers);
        for l in 0..config.num_layers {
            let inp = if l == 0 { input_dim } else { hd };
            let name = format!("{prefix}.conv{l}");
            let conv = match config.architecture {
                Architecture::Gin => {
                    let mlp = Mlp::new(store, &name, [inp, hd, hd], rng);
                    let eps_t = Tensor::scalar(config.gin_epsilon);
                    let eps = if config.gin_epsilon_trainable {
                        store.add(format!("{name}.eps"), eps_t)
                    } else {
                        store.add_buffer(format!("{name}.eps"), eps_t)
                    };
                    Conv::Gin { mlp, eps }
                }
                Architecture::Gcn => Conv::Gcn {
                    lin: Linear::new(store, &name, inp, hd, rng),
                },
            };
            convs.push(conv);
            norms.push(config.batch_norm.then(|| {
                let n = format!("{prefix}.bn{l}");
                Norm {
                    gamma: store.add(format!("{n}.gamma"), Tensor::filled(&[hd], 1.0)),
                    beta: store.add(format!("{n}.beta"), Tensor::zeros(&[hd])),
                    running_mean: store.add_buffer(format!("{n}.running_mean"), Tensor::zeros(&[hd])),
                    running_var: store.add_buffer(format!("{n}.running_var"), Tensor::filled(&[hd], 1.0)),
                }
            }));
        }
        Self {
            config: config.clone(),
            convs,
            norms,
        }
    }

    pub fn config(&self) -> &GnnConfig {
        &self.config
    }

    pub fn forward<R: Rng>(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x: Var,
        index: &MessageIndex,
        phase: &mut Phase<'_, R>,
        updates: &mut BnUpdates,
    ) -> Result<Var> {
        let mut h = x;
        for (conv, norm) in self.convs.iter().zip(&self.norms) {
            h = match conv {
                Conv::Gin { mlp, eps } => {
                    let agg = gin_aggregate(tape, h, bound.var(*eps), index)?;
                    // inner MLP: affine, relu, affine
                    let z = mlp.first.forward(tape, bound, agg)?;
                    let z = tape.relu(z);
                    mlp.second.forward(tape, bound, z)?
                }
                Conv::Gcn { lin } => {
                    let z = tape.matmul(h, bound.var(lin.weight))?;
                    let z = gcn_propagate(tape, z, index)?;
                    tape.add_row(z, bound.var(lin.bias))?
                }
            };
            if let Some(n) = norm {
                h = batch_norm(tape, bound, h, n, phase.is_train(), updates)?;
            }
            h = tape.relu(h);
            h = apply_dropout(tape, h, self.config.dropout, phase)?;
        }
        Ok(h)
    }
}

fn batch_norm(
    tape: &mut Tape,
    bound: &Bound,
    h: Var,
    n: &Norm,
    training: bool,
    updates: &mut BnUpdates,
) -> Result<Var> {
    let xhat = if training {
        let (xhat, stats) = tape.batch_norm(h, BN_EPS)?;
        updates
            .0
            .push((n.running_mean, n.running_var, stats.mean, stats.var));
        xhat
    } else {
        let rm = tape.value(bound.var(n.running_mean)).data().to_vec();
        let rv = tape.value(bound.var(n.running_var)).data().to_vec();
        let neg_mean = tape.constant(Tensor::vector(rm.iter().map(|m| -m).collect()));
        let inv_std = tape.constant(Tensor::vector(
            rv.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect(),
        ));
        let c = tape.add_row(h, neg_mean)?;
        tape.mul_row(c, inv_std)?
    };
    let scaled = tape.mul_row(xhat, bound.var(n.gamma))?;
    Ok(tape.add_row(scaled, bound.var(n.beta))?)
}

/// Concatenation of the configured per-graph poolings.
pub fn pool(
    tape: &mut Tape,
    h: Var,
    batch: &BatchedGraph,
    pooling: &[Pooling],
) -> Result<Var> {
    let parts = pooling
        .iter()
        .map(|p| tape.segment_reduce(h, &batch.node_to_graph, batch.num_graphs, p.reduce()))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    if parts.len() == 1 {
        Ok(parts[0])
    } else {
        Ok(tape.concat_cols(&parts)?)
    }
}

/// The graph classifier: trunk, pooling and readout MLP.
#[derive(Debug, Clone)]
pub struct ClassifierModel {
    config: GnnConfig,
    input_dim: usize,
    params: ParamStore,
    trunk: GnnTrunk,
    readout: Mlp,
}

impl ClassifierModel {
    pub fn new(config: &GnnConfig, input_dim: usize, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        if config.num_classes < 2 {
            return Err(Error::Config(format!(
                "classifier needs at least 2 classes, got {}",
                config.num_classes
            )));
        }
        let mut params = ParamStore::new();
        let trunk = GnnTrunk::new(&mut params, "clf", config, input_dim, rng);
        let readout = Mlp::new(
            &mut params,
            "clf.readout",
            [config.pooled_dim(), config.hidden_dim, config.num_classes],
            rng,
        );
        Ok(Self {
            config: config.clone(),
            input_dim,
            params,
            trunk,
            readout,
        })
    }

    pub fn config(&self) -> &GnnConfig {
        &self.config
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Parameter ids of the final readout layer.
    pub fn readout_output(&self) -> (ParamId, ParamId) {
        (self.readout.second.weight, self.readout.second.bias)
    }

    /// Records the forward pass on `tape` and returns `[num_graphs × K]` logits.
    pub fn forward<R: Rng>(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        batch: &BatchedGraph,
        phase: &mut Phase<'_, R>,
        updates: &mut BnUpdates,
    ) -> Result<Var> {
        if batch.num_nodes() == 0 || batch.num_graphs == 0 {
            return Err(crate::tensor::TensorError::Shape {
                op: "classifier forward",
                lhs: vec![batch.num_graphs, batch.num_nodes()],
                rhs: vec![],
            }
            .into());
        }
        if batch.num_features() != self.input_dim {
            return Err(crate::tensor::TensorError::Shape {
                op: "classifier forward",
                lhs: vec![batch.num_features()],
                rhs: vec![self.input_dim],
            }
            .into());
        }
        let index = MessageIndex::from_batch(batch);
        let x = tape.constant(batch.features.clone());
        let h = self.trunk.forward(tape, bound, x, &index, phase, updates)?;
        let g = pool(tape, h, batch, &self.config.pooling)?;
        self.readout
            .forward(tape, bound, g, self.config.dropout, phase)
    }

    /// Logits without recording gradients for later use.
    pub fn logits(&self, batch: &BatchedGraph) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let mut updates = BnUpdates::default();
        let out = self.forward(&mut tape, &bound, batch, &mut eval_phase(), &mut updates)?;
        Ok(tape.value(out).clone())
    }

    /// Row-wise class probabilities in evaluation mode.
    pub fn predict_proba(&self, batch: &BatchedGraph) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let mut updates = BnUpdates::default();
        let out = self.forward(&mut tape, &bound, batch, &mut eval_phase(), &mut updates)?;
        let p = tape.softmax_rows(out);
        Ok(tape.value(p).clone())
    }

    /// One training step's loss; accumulates gradients into the parameters
    /// and folds in batch-norm statistics. Returns the loss value and the
    /// number of graphs whose training-mode argmax was correct.
    pub fn accumulate_loss_grad<R: Rng>(
        &mut self,
        batch: &BatchedGraph,
        rng: &mut R,
    ) -> Result<(f64, usize)> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let mut updates = BnUpdates::default();
        let logits = self.forward(&mut tape, &bound, batch, &mut Phase::Train(rng), &mut updates)?;
        let loss = cross_entropy(&mut tape, logits, &batch.labels)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Domain(format!("non-finite loss {value}")));
        }
        let out = tape.value(logits);
        let correct = (0..out.rows())
            .filter(|&i| argmax(out.row(i)) == batch.labels[i])
            .count();
        let grads = tape.backward(loss)?;
        self.params.accumulate(&grads, &bound);
        updates.apply(&mut self.params);
        Ok((value, correct))
    }

    pub fn header(&self) -> BTreeMap<String, String> {
        let mut map = BTreeMap::new();
        map.insert("kind".into(), "classifier".into());
        map.insert("input_dim".into(), self.input_dim.to_string());
        self.config.write_header(&mut map);
        map
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::from_store(crate::checkpoint::render_header(&self.header()), &self.params)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let map = ck.header_map();
        if map.get("kind").map(String::as_str) != Some("classifier") {
            return Err(Error::Config("checkpoint is not a classifier".into()));
        }
        let config = GnnConfig::from_header(&map)?;
        let input_dim = map
            .get("input_dim")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Config("checkpoint header lacks input_dim".into()))?;
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut model = Self::new(&config, input_dim, &mut rng)?;
        ck.load_into(&mut model.params)?;
        Ok(model)
    }
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Mean negative log-likelihood of `labels` under row-wise softmax(`logits`).
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let k = tape.value(logits).cols();
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::Index {
            what: "class label",
            index: bad,
            len: k,
        });
    }
    let logp = tape.log_softmax_rows(logits);
    let picked = tape.pick_per_row(logp, labels)?;
    let m = tape.mean(picked);
    Ok(tape.neg(m))
}
