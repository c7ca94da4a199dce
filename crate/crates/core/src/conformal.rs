//! Adaptive prediction sets.
//!
//! The score of class `y` is the probability mass of every class ranked at
//! or above `y` when classes are sorted by descending probability (ties go
//! to the lower class index). Calibration takes the `⌈(n+1)(1−α)⌉`-th
//! smallest score as the threshold `q̂`; a prediction set holds every class
//! whose score is at most `q̂`.

use crate::error::{Error, Result};

/// Class indices sorted by descending probability, ties by ascending index.
pub fn rank_order(probs: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    order
}

pub fn aps_score(probs: &[f64], label: usize) -> Result<f64> {
    if label >= probs.len() {
        return Err(Error::Index {
            what: "class label",
            index: label,
            len: probs.len(),
        });
    }
    let mut acc = 0.0;
    for c in rank_order(probs) {
        acc += probs[c];
        if c == label {
            break;
        }
    }
    Ok(acc)
}

/// Score of every class at once, indexed by class.
pub fn aps_scores_all(probs: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; probs.len()];
    let mut acc = 0.0;
    for c in rank_order(probs) {
        acc += probs[c];
        out[c] = acc;
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationState {
    scores: Vec<f64>,
    alpha: f64,
    quantile: f64,
}

impl CalibrationState {
    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// `q̂`, or `f64::INFINITY` when the rank exceeds the sample size.
    pub fn quantile(&self) -> f64 {
        self.quantile
    }

    /// A state with a fixed threshold and no backing scores.
    pub fn with_quantile(alpha: f64, quantile: f64) -> Self {
        Self {
            scores: Vec::new(),
            alpha,
            quantile,
        }
    }
}

pub fn calibrate(scores: &[f64], alpha: f64) -> Result<CalibrationState> {
    if scores.is_empty() {
        return Err(Error::Calibration("no calibration scores".into()));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Calibration(format!("alpha {alpha} outside (0, 1)")));
    }
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::Calibration(format!("non-finite score {bad}")));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let k = quantile_rank(n, alpha);
    let quantile = if k <= n { sorted[k - 1] } else { f64::INFINITY };
    Ok(CalibrationState {
        scores: sorted,
        alpha,
        quantile,
    })
}

/// `⌈(n+1)(1−α)⌉`, computed so that exact products are not pushed up by
/// rounding noise (e.g. `20·0.95`).
pub fn quantile_rank(n: usize, alpha: f64) -> usize {
    let x = (n as f64 + 1.0) * (1.0 - alpha);
    let r = x.round();
    if (x - r).abs() < 1e-9 {
        r as usize
    } else {
        x.ceil() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PredictionSet {
    pub classes: Vec<usize>,
}

impl PredictionSet {
    pub fn size(&self) -> usize {
        self.classes.len()
    }

    pub fn contains(&self, class: usize) -> bool {
        self.classes.contains(&class)
    }
}

pub fn prediction_set(probs: &[f64], state: &CalibrationState) -> PredictionSet {
    let q = state.quantile();
    let classes = aps_scores_all(probs)
        .iter()
        .enumerate()
        .filter(|(_, s)| **s <= q)
        .map(|(c, _)| c)
        .collect();
    PredictionSet { classes }
}
