//! Joint training of a graph classifier and a graph sparsification policy.
//!
//! The policy removes nodes or edges from each input graph; the classifier
//! predicts from what is left. The policy is trained with one-step PPO on a
//! reward that mixes classifier confidence, conformal prediction-set size
//! and sparsity.

pub mod autodiff;
pub mod checkpoint;
pub mod conformal;
pub mod config;
pub mod error;
pub mod gnn;
pub mod graph;
pub mod metrics;
pub mod params;
pub mod policy;
pub mod ppo;
pub mod reward;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
