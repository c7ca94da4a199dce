//! Metric rows and their CSV/JSON outputs.
//!
//! [`MetricsSink`] is an append-only long-format log
//! (`timestamp,run_id,epoch,split,name,value`). The per-epoch history goes
//! to `metrics.csv` through [`write_history_csv`]; it carries no wall-clock
//! columns so two identical runs produce identical files.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reward::RewardBreakdown;

pub const SINK_HEADER: &str = "timestamp,run_id,epoch,split,name,value";

/// Version 1 of the `metrics.csv` schema.
pub const HISTORY_HEADER: &str = "epoch,split,accuracy,node_ratio,edge_ratio,mean_reward,mean_set_size,coverage,invalid_fraction,clf_loss,ppo_surrogate,ppo_value_loss,ppo_entropy,ppo_clip_fraction,classifier_lr,policy_lr";

pub const REWARD_HEADER: &str = "epoch,graph_id,case,r_perf,r_sparse,set_size,total";

/// Names accepted by [`MetricsSink::record`].
pub const METRIC_NAMES: &[&str] = &[
    "accuracy",
    "node_ratio",
    "edge_ratio",
    "mean_reward",
    "mean_set_size",
    "coverage",
    "invalid_fraction",
    "clf_loss",
    "ppo_surrogate",
    "ppo_value_loss",
    "ppo_entropy",
    "ppo_clip_fraction",
    "classifier_lr",
    "policy_lr",
    "quantile",
    "wall_clock_s",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Metrics of one split after one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub split: Split,
    pub accuracy: f64,
    pub mean_node_ratio: f64,
    pub mean_edge_ratio: f64,
    pub mean_reward: f64,
    pub mean_set_size: f64,
    pub coverage: f64,
    pub invalid_fraction: f64,
    pub clf_loss: f64,
    pub ppo_surrogate: f64,
    pub ppo_value_loss: f64,
    pub ppo_entropy: f64,
    pub ppo_clip_fraction: f64,
    pub classifier_lr: f64,
    pub policy_lr: f64,
    /// Not written to `metrics.csv`.
    pub wall_clock_s: f64,
}

impl EpochMetrics {
    pub fn empty(epoch: usize, split: Split) -> Self {
        Self {
            epoch,
            split,
            accuracy: 0.0,
            mean_node_ratio: 0.0,
            mean_edge_ratio: 0.0,
            mean_reward: 0.0,
            mean_set_size: 0.0,
            coverage: 0.0,
            invalid_fraction: 0.0,
            clf_loss: 0.0,
            ppo_surrogate: 0.0,
            ppo_value_loss: 0.0,
            ppo_entropy: 0.0,
            ppo_clip_fraction: 0.0,
            classifier_lr: 0.0,
            policy_lr: 0.0,
            wall_clock_s: 0.0,
        }
    }

    /// `(name, value)` pairs in sink vocabulary.
    pub fn named_values(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("accuracy", self.accuracy),
            ("node_ratio", self.mean_node_ratio),
            ("edge_ratio", self.mean_edge_ratio),
            ("mean_reward", self.mean_reward),
            ("mean_set_size", self.mean_set_size),
            ("coverage", self.coverage),
            ("invalid_fraction", self.invalid_fraction),
            ("clf_loss", self.clf_loss),
            ("ppo_surrogate", self.ppo_surrogate),
            ("ppo_value_loss", self.ppo_value_loss),
            ("ppo_entropy", self.ppo_entropy),
            ("ppo_clip_fraction", self.ppo_clip_fraction),
            ("classifier_lr", self.classifier_lr),
            ("policy_lr", self.policy_lr),
            ("wall_clock_s", self.wall_clock_s),
        ]
    }

    fn csv_row(&self) -> String {
        let v = [
            self.accuracy,
            self.mean_node_ratio,
            self.mean_edge_ratio,
            self.mean_reward,
            self.mean_set_size,
            self.coverage,
            self.invalid_fraction,
            self.clf_loss,
            self.ppo_surrogate,
            self.ppo_value_loss,
            self.ppo_entropy,
            self.ppo_clip_fraction,
            self.classifier_lr,
            self.policy_lr,
        ];
        let cols: Vec<String> = v.iter().map(|x| x.to_string()).collect();
        format!("{},{},{}", self.epoch, self.split, cols.join(","))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub timestamp: f64,
    pub run_id: String,
    pub epoch: usize,
    pub split: Split,
    pub name: String,
    pub value: f64,
}

/// Append-only CSV sink.
pub struct MetricsSink {
    out: BufWriter<File>,
    run_id: String,
    rows: usize,
}

impl MetricsSink {
    pub fn create(path: &Path, run_id: impl Into<String>) -> Result<Self> {
        let run_id = run_id.into();
        if run_id.contains(',') || run_id.contains('\n') {
            return Err(Error::Metrics(format!("run id {run_id:?} contains a separator")));
        }
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "{SINK_HEADER}")?;
        Ok(Self {
            out,
            run_id,
            rows: 0,
        })
    }

    pub fn run_id(&self) -> &str {
        &self.run_id
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Appends a row stamped with the current time.
    pub fn record(&mut self, epoch: usize, split: Split, name: &str, value: f64) -> Result<()> {
        let ts = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs_f64())
            .unwrap_or(0.0);
        self.record_row(&MetricRow {
            timestamp: ts,
            run_id: self.run_id.clone(),
            epoch,
            split,
            name: name.to_string(),
            value,
        })
    }

    pub fn record_row(&mut self, row: &MetricRow) -> Result<()> {
        if !METRIC_NAMES.contains(&row.name.as_str()) {
            return Err(Error::Metrics(format!("unregistered metric {:?}", row.name)));
        }
        if !row.value.is_finite() {
            return Err(Error::Metrics(format!(
                "non-finite value {} for {}",
                row.value, row.name
            )));
        }
        writeln!(
            self.out,
            "{},{},{},{},{},{}",
            row.timestamp, row.run_id, row.epoch, row.split, row.name, row.value
        )?;
        self.rows += 1;
        Ok(())
    }

    pub fn record_epoch(&mut self, m: &EpochMetrics) -> Result<()> {
        for (name, value) in m.named_values() {
            self.record(m.epoch, m.split, name, value)?;
        }
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

impl Drop for MetricsSink {
    fn drop(&mut self) {
        let _ = self.out.flush();
    }
}

pub fn read_sink(path: &Path) -> Result<Vec<MetricRow>> {
    let reader = BufReader::new(File::open(path)?);
    let mut rows = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if i == 0 {
            if line != SINK_HEADER {
                return Err(Error::Metrics(format!("unexpected header {line:?}")));
            }
            continue;
        }
        let bad = || Error::Metrics(format!("line {}: malformed row", i + 1));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(bad());
        }
        rows.push(MetricRow {
            timestamp: f[0].parse().map_err(|_| bad())?,
            run_id: f[1].to_string(),
            epoch: f[2].parse().map_err(|_| bad())?,
            split: Split::parse(f[3]).ok_or_else(bad)?,
            name: f[4].to_string(),
            value: f[5].parse().map_err(|_| bad())?,
        });
    }
    Ok(rows)
}

/// Writes the per-epoch history with [`HISTORY_HEADER`].
pub fn write_history_csv(path: &Path, history: &[EpochMetrics]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "{HISTORY_HEADER}")?;
    for m in history {
        writeln!(out, "{}", m.csv_row())?;
    }
    out.flush()?;
    Ok(())
}

/// One reward computed during a rollout.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RewardRow {
    pub epoch: usize,
    pub graph_id: usize,
    pub breakdown: RewardBreakdown,
}

pub fn write_reward_csv(path: &Path, rows: &[RewardRow]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "{REWARD_HEADER}")?;
    for r in rows {
        let b = &r.breakdown;
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.epoch,
            r.graph_id,
            b.case.as_str(),
            b.r_perf,
            b.r_sparse,
            b.set_size,
            b.total
        )?;
    }
    out.flush()?;
    Ok(())
}
