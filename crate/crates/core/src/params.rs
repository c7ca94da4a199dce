//! Named parameter storage and the Adam optimizer.

use crate::autodiff::{Gradients, Tape, Var};
use crate::tensor::Tensor;

/// Index of a tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Ordered, named collection of model tensors.
///
/// Trainable parameters have `requires_grad` set; buffers (running
/// statistics) do not and are bound to tapes as constants.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

/// The tape handles of every tensor in a store, in store order.
#[derive(Debug, Clone)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.push(name.into(), tensor.requiring_grad())
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, mut tensor: Tensor) -> ParamId {
        tensor.set_requires_grad(false);
        self.push(name.into(), tensor)
    }

    fn push(&mut self, name: String, tensor: Tensor) -> ParamId {
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Tensor)> {
        self.tensors
            .iter_mut()
            .enumerate()
            .map(|(i, t)| (ParamId(i), t))
    }

    /// Records every tensor on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound(self.tensors.iter().map(|t| tape.leaf(t)).collect())
    }

    /// Adds the gradients of a backward pass into each trainable tensor.
    pub fn accumulate(&mut self, grads: &Gradients, bound: &Bound) {
        for (t, &v) in self.tensors.iter_mut().zip(&bound.0) {
            if t.requires_grad() {
                t.accumulate_grad(&grads.wrt(v));
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    pub fn num_trainable(&self) -> usize {
        self.tensors
            .iter()
            .filter(|t| t.requires_grad())
            .map(Tensor::numel)
            .sum()
    }
}

/// Adaptive-moment gradient descent with a per-parameter learning-rate
/// multiplier.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    scales: Vec<f64>,
}

impl Adam {
    pub fn new(params: &ParamStore, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.tensors.iter().map(|t| vec![0.0; t.numel()]).collect(),
            v: params.tensors.iter().map(|t| vec![0.0; t.numel()]).collect(),
            scales: vec![1.0; params.len()],
        }
    }

    pub fn set_scale(&mut self, id: ParamId, scale: f64) {
        self.scales[id.0] = scale;
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from the accumulated gradients, then clears them.
    pub fn step(&mut self, params: &mut ParamStore) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, t) in params.tensors.iter_mut().enumerate() {
            if !t.requires_grad() {
                continue;
            }
            let Some(g) = t.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            let lr = self.lr * self.scales[i];
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (k, x) in t.data_mut().iter_mut().enumerate() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                *x -= lr * mhat / (vhat.sqrt() + self.eps);
            }
            t.zero_grad();
        }
    }
}
