//! The bi-level training loop.
//!
//! Each epoch:
//! 1. the policy samples subgraphs of the training graphs and the
//!    classifier takes one step per batch on the valid ones;
//! 2. conformal scores of those subgraphs calibrate `q̂`;
//! 3. the policy acts on the validation graphs and each action is rewarded
//!    into the rollout buffer, triggering PPO whenever it fills;
//! 4. validation and test metrics are computed with the deterministic
//!    policy, learning rates decay and early stopping is checked.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{CalibrationSource, DataSection, TrainConfig};
use crate::conformal::{aps_score, calibrate, prediction_set, CalibrationState};
use crate::error::{Error, Result};
use crate::gnn::{argmax, ClassifierModel, GnnConfig};
use crate::graph::{
    apply_action, batch, generate_ba_shapes, parse_tu_dataset, DatasetSplit, Graph, Mode, Subgraph,
};
use crate::metrics::{EpochMetrics, RewardRow, Split};
use crate::params::Adam;
use crate::policy::PolicyModel;
use crate::ppo::{Ppo, RolloutBuffer, RolloutRecord, UpdateStats};
use crate::reward::{compute_reward, RewardConfig};

/// Receives the metric rows of each finished epoch.
pub type Observer<'o> = &'o mut dyn FnMut(&[EpochMetrics]) -> Result<()>;

pub const LR_FLOOR: f64 = 1e-6;

/// Graphs per forward pass when nothing is being trained.
const EVAL_CHUNK: usize = 64;

/// Multiplies `lr` by `factor` unless the monitored metric improved;
/// never returns less than [`LR_FLOOR`].
pub fn step_scheduler(current_lr: f64, factor: f64, improved: bool) -> f64 {
    if improved {
        current_lr
    } else {
        (current_lr * factor).max(LR_FLOOR)
    }
}

/// Applies [`step_scheduler`] only after more than `patience` consecutive
/// non-improving epochs, then starts counting again. Patience 0 decays on
/// every non-improving epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlateauScheduler {
    patience: usize,
    bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            bad_epochs: 0,
        }
    }

    pub fn step(&mut self, lr: f64, factor: f64, improved: bool) -> f64 {
        if improved {
            self.bad_epochs = 0;
            return lr;
        }
        self.bad_epochs += 1;
        if self.bad_epochs > self.patience {
            self.bad_epochs = 0;
            step_scheduler(lr, factor, false)
        } else {
            lr
        }
    }
}

/// Loads the dataset named in `data`. `ba_shapes` selects the synthetic
/// generator; anything else is read as a TU dataset from `data_dir`.
pub fn load_dataset(data: &DataSection, data_dir: Option<&Path>) -> Result<Vec<Graph>> {
    if data.dataset.eq_ignore_ascii_case("ba_shapes") {
        return Ok(generate_ba_shapes(
            data.synthetic_graphs,
            data.synthetic_base_nodes,
            data.synthetic_seed,
        )?);
    }
    let dir = data_dir
        .or(data.data_dir.as_deref())
        .ok_or_else(|| Error::Config("no data directory given".into()))?;
    Ok(parse_tu_dataset(dir, &data.dataset)?)
}

pub fn num_classes(dataset: &[Graph]) -> usize {
    dataset.iter().map(|g| g.label() + 1).max().unwrap_or(0)
}

/// `config` with `num_classes` filled in from the dataset when unset.
pub fn resolve_gnn_config(config: &GnnConfig, dataset: &[Graph]) -> GnnConfig {
    let mut c = config.clone();
    if c.num_classes == 0 {
        c.num_classes = num_classes(dataset).max(2);
    }
    c
}

/// Results of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    /// The reported classifier: best by validation accuracy, or the last
    /// one with `report_last_epoch`.
    pub classifier: ClassifierModel,
    pub policy: Option<PolicyModel>,
    pub calibration: Option<CalibrationState>,
    pub history: Vec<EpochMetrics>,
    pub best_epoch: Option<usize>,
    pub epochs_run: usize,
    pub rewards: Vec<RewardRow>,
    /// Test metrics of the reported models.
    pub test: Option<EpochMetrics>,
}

/// Inputs of [`evaluate`] besides the models.
#[derive(Debug, Clone, Copy)]
pub struct EvalSettings<'a> {
    pub mode: Mode,
    pub calibration: Option<&'a CalibrationState>,
    pub reward: &'a RewardConfig,
    pub epoch: usize,
    pub split: Split,
}

/// Per-graph outcome of an evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphOutcome {
    pub graph_id: usize,
    pub mask: Vec<bool>,
    pub valid: bool,
    pub correct: bool,
    pub node_ratio: f64,
    pub edge_ratio: f64,
    pub probs: Vec<f64>,
}

/// Classifier predictions on the policy's deterministic subgraphs (or on
/// full graphs when `policy` is `None`).
pub fn evaluate_graphs(
    classifier: &ClassifierModel,
    policy: Option<&PolicyModel>,
    dataset: &[Graph],
    ids: &[usize],
    mode: Mode,
) -> Result<Vec<GraphOutcome>> {
    let mut out = Vec::with_capacity(ids.len());
    let mut unused = ChaCha8Rng::seed_from_u64(0);
    for chunk in ids.chunks(EVAL_CHUNK) {
        let graphs = lookup(dataset, chunk)?;
        let masks: Vec<Vec<bool>> = match policy {
            Some(p) => p
                .act_batch(&graphs, &mut unused, true)?
                .into_iter()
                .map(|a| a.mask)
                .collect(),
            None => graphs.iter().map(|g| vec![false; g.num_units(mode)]).collect(),
        };
        let subs = graphs
            .iter()
            .zip(&masks)
            .map(|(g, m)| apply_action(g, mode, m))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let probs = predict_valid(classifier, &subs, mode)?;
        for (((&id, sub), mask), p) in chunk.iter().zip(&subs).zip(masks).zip(probs) {
            let valid = p.is_some();
            let probs = p.unwrap_or_default();
            out.push(GraphOutcome {
                graph_id: id,
                valid,
                correct: valid && argmax(&probs) == sub.parent().label(),
                node_ratio: if valid { sub.node_ratio() } else { 0.0 },
                edge_ratio: if valid { sub.edge_ratio() } else { 0.0 },
                probs,
                mask,
            });
        }
    }
    Ok(out)
}

/// Accuracy, kept ratios and (with a calibration state) reward, set size
/// and coverage on `ids`.
pub fn evaluate(
    classifier: &ClassifierModel,
    policy: Option<&PolicyModel>,
    dataset: &[Graph],
    ids: &[usize],
    settings: &EvalSettings<'_>,
) -> Result<EpochMetrics> {
    if ids.is_empty() {
        return Err(Error::Metrics(format!(
            "no graphs to evaluate for {}",
            settings.split
        )));
    }
    let outcomes = evaluate_graphs(classifier, policy, dataset, ids, settings.mode)?;
    let n = outcomes.len() as f64;
    let mut m = EpochMetrics::empty(settings.epoch, settings.split);
    m.accuracy = outcomes.iter().filter(|o| o.correct).count() as f64 / n;
    m.mean_node_ratio = outcomes.iter().map(|o| o.node_ratio).sum::<f64>() / n;
    m.mean_edge_ratio = outcomes.iter().map(|o| o.edge_ratio).sum::<f64>() / n;
    m.invalid_fraction = outcomes.iter().filter(|o| !o.valid).count() as f64 / n;
    if let Some(cal) = settings.calibration {
        let (mut reward, mut size, mut covered) = (0.0, 0.0, 0.0);
        for o in &outcomes {
            let g = &dataset[o.graph_id];
            let ratio = match settings.mode {
                Mode::Node => o.node_ratio,
                Mode::Edge => o.edge_ratio,
            };
            let set = prediction_set(&o.probs, cal);
            let b = compute_reward(&o.probs, g.label(), ratio, &set, settings.reward, o.valid)?;
            reward += b.total;
            size += b.set_size as f64;
            if b.in_set {
                covered += 1.0;
            }
        }
        m.mean_reward = reward / n;
        m.mean_set_size = size / n;
        m.coverage = covered / n;
    }
    Ok(m)
}

fn lookup<'a>(dataset: &'a [Graph], ids: &[usize]) -> Result<Vec<&'a Graph>> {
    ids.iter()
        .map(|&i| {
            dataset.get(i).ok_or(Error::Index {
                what: "graph id",
                index: i,
                len: dataset.len(),
            })
        })
        .collect()
}

/// Evaluation-mode probabilities for each non-empty subgraph.
fn predict_valid(
    classifier: &ClassifierModel,
    subs: &[Subgraph<'_>],
    mode: Mode,
) -> Result<Vec<Option<Vec<f64>>>> {
    let valid: Vec<Subgraph<'_>> = subs.iter().filter(|s| !s.is_empty(mode)).cloned().collect();
    let mut rows = if valid.is_empty() {
        Vec::new()
    } else {
        let p = classifier.predict_proba(&batch(&valid)?)?;
        (0..p.rows()).map(|i| p.row(i).to_vec()).collect()
    }
    .into_iter();
    Ok(subs
        .iter()
        .map(|s| if s.is_empty(mode) { None } else { rows.next() })
        .collect())
}

/// State of one run shared by the vanilla and joint loops.
struct Run {
    mode: Mode,
    rng: ChaCha8Rng,
    classifier: ClassifierModel,
    clf_opt: Adam,
    history: Vec<EpochMetrics>,
}

impl Run {
    fn new(cfg: &TrainConfig, split: &DatasetSplit, dataset: &[Graph]) -> Result<Self> {
        cfg.validate()?;
        if split.train.is_empty() {
            return Err(Error::Config("training split is empty".into()));
        }
        let input_dim = dataset
            .first()
            .map(Graph::num_features)
            .ok_or_else(|| Error::Config("dataset is empty".into()))?;
        let gnn = resolve_gnn_config(&cfg.gnn, dataset);
        let mut init = ChaCha8Rng::seed_from_u64(cfg.train.seed);
        let classifier = ClassifierModel::new(&gnn, input_dim, &mut init)?;
        let clf_opt = Adam::new(classifier.params(), cfg.train.classifier_lr);
        Ok(Self {
            mode: cfg.train.mode,
            rng: ChaCha8Rng::seed_from_u64(cfg.train.seed.wrapping_add(2)),
            classifier,
            clf_opt,
            history: Vec::new(),
        })
    }

    /// One classifier step on the valid members of `subs`; returns the loss
    /// and the number of correct training predictions, or `None` when
    /// every subgraph was empty.
    fn classifier_step(
        &mut self,
        ids: &[usize],
        subs: &[Subgraph<'_>],
        epoch: usize,
    ) -> Result<Option<(f64, usize)>> {
        let keep: Vec<usize> = (0..subs.len()).filter(|&i| !subs[i].is_empty(self.mode)).collect();
        let valid: Vec<Subgraph<'_>> = keep.iter().map(|&i| subs[i].clone()).collect();
        if valid.is_empty() {
            return Ok(None);
        }
        let b = batch(&valid)?;
        match self.classifier.accumulate_loss_grad(&b, &mut self.rng) {
            Ok(r) => {
                self.clf_opt.step(self.classifier.params_mut());
                Ok(Some(r))
            }
            Err(Error::Domain(detail)) => {
                let ids: Vec<usize> = keep.iter().map(|&i| ids[i]).collect();
                log::error!(
                    "classifier diverged at epoch {epoch}: {detail}; batch graph ids {ids:?}, kept nodes {:?}",
                    valid.iter().map(Subgraph::num_kept_nodes).collect::<Vec<_>>()
                );
                Err(Error::Divergence {
                    epoch,
                    phase: "classifier",
                    detail: format!("{detail} on graphs {ids:?}"),
                })
            }
            Err(e) => Err(e),
        }
    }
}

/// Trains the classifier alone on full graphs.
pub fn train_vanilla(config: &TrainConfig, split: &DatasetSplit, dataset: &[Graph]) -> Result<TrainOutput> {
    train_vanilla_observed(config, split, dataset, &mut |_| Ok(()))
}

/// [`train_vanilla`] that hands each epoch's metric rows to `observer` as
/// soon as they exist; an observer error aborts the run.
pub fn train_vanilla_observed(
    config: &TrainConfig,
    split: &DatasetSplit,
    dataset: &[Graph],
    observer: Observer<'_>,
) -> Result<TrainOutput> {
    let mut run = Run::new(config, split, dataset)?;
    run.mode = Mode::Node;
    let t = &config.train;
    let mut best: Option<(f64, usize, ClassifierModel)> = None;
    let mut since_best = 0;
    let mut lr = t.classifier_lr;
    let mut clf_sched = PlateauScheduler::new(t.scheduler_patience);
    let mut epochs_run = 0;
    let mut train_ids = split.train.clone();
    for epoch in 0..t.max_epochs {
        let started = Instant::now();
        train_ids.shuffle(&mut run.rng);
        let (mut loss, mut correct, mut steps) = (0.0, 0, 0);
        for chunk in train_ids.chunks(t.batch_size) {
            let graphs = lookup(dataset, chunk)?;
            let subs: Vec<Subgraph<'_>> = graphs.iter().map(|g| Subgraph::full(g)).collect();
            if let Some((l, c)) = run.classifier_step(chunk, &subs, epoch)? {
                loss += l;
                correct += c;
                steps += 1;
            }
        }
        let mut train_m = EpochMetrics::empty(epoch, Split::Train);
        train_m.accuracy = correct as f64 / train_ids.len() as f64;
        train_m.mean_node_ratio = 1.0;
        train_m.mean_edge_ratio = 1.0;
        train_m.clf_loss = loss / steps.max(1) as f64;
        train_m.classifier_lr = lr;

        let reward = RewardConfig::default();
        let settings = |split| EvalSettings {
            mode: Mode::Node,
            calibration: None,
            reward: &reward,
            epoch,
            split,
        };
        let val_ids = if split.val.is_empty() { &split.train } else { &split.val };
        let mut val_m = evaluate(&run.classifier, None, dataset, val_ids, &settings(Split::Val))?;
        val_m.classifier_lr = lr;
        let improved = best.as_ref().is_none_or(|b| val_m.accuracy > b.0);
        if improved {
            best = Some((val_m.accuracy, epoch, run.classifier.clone()));
            since_best = 0;
        } else {
            since_best += 1;
        }
        lr = clf_sched.step(lr, t.classifier_scheduler_factor, improved);
        run.clf_opt.lr = lr;

        let elapsed = started.elapsed().as_secs_f64();
        train_m.wall_clock_s = elapsed;
        val_m.wall_clock_s = elapsed;
        let first_row = run.history.len();
        run.history.push(train_m);
        run.history.push(val_m);
        if !split.test.is_empty() {
            let mut test_m = evaluate(&run.classifier, None, dataset, &split.test, &settings(Split::Test))?;
            test_m.classifier_lr = lr;
            test_m.wall_clock_s = elapsed;
            run.history.push(test_m);
        }
        observer(&run.history[first_row..])?;
        epochs_run = epoch + 1;
        log::debug!("vanilla epoch {epoch}: val acc {:.4}", run.history[run.history.len() - 1].accuracy);
        if since_best >= t.early_stop_patience {
            log::info!("early stopping after epoch {epoch}");
            break;
        }
    }
    let best_epoch = best.as_ref().map(|b| b.1);
    let classifier = match best {
        Some((_, _, m)) if !t.report_last_epoch => m,
        _ => run.classifier,
    };
    let test = if split.test.is_empty() {
        None
    } else {
        let reward = RewardConfig::default();
        Some(evaluate(
            &classifier,
            None,
            dataset,
            &split.test,
            &EvalSettings {
                mode: Mode::Node,
                calibration: None,
                reward: &reward,
                epoch: epochs_run,
                split: Split::Test,
            },
        )?)
    };
    Ok(TrainOutput {
        classifier,
        policy: None,
        calibration: None,
        history: run.history,
        best_epoch,
        epochs_run,
        rewards: Vec::new(),
        test,
    })
}

struct Snapshot {
    accuracy: f64,
    epoch: usize,
    classifier: ClassifierModel,
    policy: PolicyModel,
    calibration: CalibrationState,
}

/// Joint training of classifier and removal policy.
pub fn train(config: &TrainConfig, split: &DatasetSplit, dataset: &[Graph]) -> Result<TrainOutput> {
    train_observed(config, split, dataset, &mut |_| Ok(()))
}

/// [`train`] with a per-epoch metrics observer, as in [`train_vanilla_observed`].
pub fn train_observed(
    config: &TrainConfig,
    split: &DatasetSplit,
    dataset: &[Graph],
    observer: Observer<'_>,
) -> Result<TrainOutput> {
    let mut run = Run::new(config, split, dataset)?;
    let t = &config.train;
    let mode = t.mode;
    let input_dim = run.classifier.input_dim();
    let mut init = ChaCha8Rng::seed_from_u64(t.seed.wrapping_add(1));
    let mut policy = PolicyModel::new(&run.classifier.config().clone(), mode, input_dim, &mut init)?;
    policy.set_actor_bias(t.policy_init_bias);
    let mut ppo = Ppo::new(&config.ppo, &policy)?;
    let mut buffer = RolloutBuffer::new(config.ppo.env_steps);
    let val_ids: Vec<usize> = if split.val.is_empty() {
        log::warn!("validation split is empty; rolling out on the training split");
        split.train.clone()
    } else {
        split.val.clone()
    };

    let (mut fit_ids, calib_ids) = match t.calibration {
        CalibrationSource::Train => (split.train.clone(), Vec::new()),
        CalibrationSource::Holdout => {
            let n_cal = ((split.train.len() as f64 * t.calibration_fraction).round() as usize)
                .clamp(1, split.train.len().saturating_sub(1).max(1));
            let cut = split.train.len() - n_cal;
            (split.train[..cut].to_vec(), split.train[cut..].to_vec())
        }
    };
    if fit_ids.is_empty() {
        return Err(Error::Config("no training graphs left after the calibration holdout".into()));
    }

    let mut calibration = CalibrationState::with_quantile(config.reward.alpha_conf, f64::INFINITY);
    let mut best: Option<Snapshot> = None;
    let mut since_best = 0;
    let mut best_reward = f64::NEG_INFINITY;
    let mut since_reward = 0;
    let mut clf_sched = PlateauScheduler::new(t.scheduler_patience);
    let mut rl_sched = PlateauScheduler::new(t.scheduler_patience);
    let mut clf_lr = t.classifier_lr;
    let mut rl_lr = config.ppo.policy_lr;
    let mut rewards = Vec::new();
    let mut epochs_run = 0;

    for epoch in 0..t.max_epochs {
        let started = Instant::now();
        let policy_frozen = since_reward >= t.ppo_patience && t.ppo_patience > 0;

        // inner problem: classifier on sampled training subgraphs
        fit_ids.shuffle(&mut run.rng);
        let (mut loss, mut correct, mut steps, mut valid_count) = (0.0, 0usize, 0usize, 0usize);
        let (mut node_r, mut edge_r) = (0.0, 0.0);
        let mut cal_masks: Vec<(usize, Vec<bool>)> = Vec::with_capacity(fit_ids.len());
        for chunk in fit_ids.chunks(t.batch_size) {
            let graphs = lookup(dataset, chunk)?;
            let actions = policy.act_batch(&graphs, &mut run.rng, false)?;
            let subs = graphs
                .iter()
                .zip(&actions)
                .map(|(g, a)| apply_action(g, mode, &a.mask))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            for s in subs.iter().filter(|s| !s.is_empty(mode)) {
                node_r += s.node_ratio();
                edge_r += s.edge_ratio();
                valid_count += 1;
            }
            if let Some((l, c)) = run.classifier_step(chunk, &subs, epoch)? {
                loss += l;
                correct += c;
                steps += 1;
            }
            cal_masks.extend(chunk.iter().copied().zip(actions.into_iter().map(|a| a.mask)));
        }
        let n_fit = fit_ids.len() as f64;
        let mut train_m = EpochMetrics::empty(epoch, Split::Train);
        train_m.accuracy = correct as f64 / n_fit;
        train_m.mean_node_ratio = node_r / n_fit;
        train_m.mean_edge_ratio = edge_r / n_fit;
        train_m.invalid_fraction = (fit_ids.len() - valid_count) as f64 / n_fit;
        train_m.clf_loss = loss / steps.max(1) as f64;
        train_m.classifier_lr = clf_lr;
        train_m.policy_lr = rl_lr;

        // conformal calibration with the updated classifier
        if t.calibration == CalibrationSource::Holdout {
            cal_masks.clear();
            for chunk in calib_ids.chunks(EVAL_CHUNK) {
                let graphs = lookup(dataset, chunk)?;
                let actions = policy.act_batch(&graphs, &mut run.rng, false)?;
                cal_masks.extend(chunk.iter().copied().zip(actions.into_iter().map(|a| a.mask)));
            }
        }
        let mut scores = Vec::with_capacity(cal_masks.len());
        for chunk in cal_masks.chunks(EVAL_CHUNK) {
            let subs = chunk
                .iter()
                .map(|(id, m)| apply_action(&dataset[*id], mode, m))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            for (s, p) in subs.iter().zip(predict_valid(&run.classifier, &subs, mode)?) {
                if let Some(p) = p {
                    scores.push(aps_score(&p, s.parent().label())?);
                }
            }
        }
        calibration = if scores.is_empty() {
            CalibrationState::with_quantile(config.reward.alpha_conf, f64::INFINITY)
        } else {
            calibrate(&scores, config.reward.alpha_conf)?
        };

        // outer problem: rollouts on validation graphs and PPO
        let mut ppo_stats: Vec<UpdateStats> = Vec::new();
        if !policy_frozen {
            let mut order = val_ids.clone();
            order.shuffle(&mut run.rng);
            for chunk in order.chunks(t.batch_size) {
                let graphs = lookup(dataset, chunk)?;
                let actions = policy.act_batch(&graphs, &mut run.rng, false)?;
                let subs = graphs
                    .iter()
                    .zip(&actions)
                    .map(|(g, a)| apply_action(g, mode, &a.mask))
                    .collect::<std::result::Result<Vec<_>, _>>()?;
                let probs = predict_valid(&run.classifier, &subs, mode)?;
                for ((&id, (sub, p)), action) in chunk.iter().zip(subs.iter().zip(probs)).zip(actions) {
                    let valid = p.is_some();
                    let p = p.unwrap_or_default();
                    let set = prediction_set(&p, &calibration);
                    let label = sub.parent().label();
                    let b = compute_reward(&p, label, sub.ratio(mode), &set, &config.reward, valid)?;
                    buffer.push(RolloutRecord {
                        graph_id: id,
                        mask: action.mask,
                        log_prob: action.log_prob,
                        value: action.value,
                        reward: b.total,
                        set_size: b.set_size,
                    })?;
                    rewards.push(RewardRow {
                        epoch,
                        graph_id: id,
                        breakdown: b,
                    });
                    if buffer.is_full() {
                        ppo_stats.push(ppo_phase(&mut ppo, &mut policy, dataset, &mut buffer, &mut run.rng, epoch)?);
                    }
                }
            }
            if !buffer.is_empty() {
                ppo_stats.push(ppo_phase(&mut ppo, &mut policy, dataset, &mut buffer, &mut run.rng, epoch)?);
            }
        }

        // evaluation, schedulers, early stopping
        let settings = |split| EvalSettings {
            mode,
            calibration: Some(&calibration),
            reward: &config.reward,
            epoch,
            split,
        };
        let mut val_m = evaluate(&run.classifier, Some(&policy), dataset, &val_ids, &settings(Split::Val))?;
        if !ppo_stats.is_empty() {
            let k = ppo_stats.len() as f64;
            val_m.ppo_surrogate = ppo_stats.iter().map(|s| s.surrogate).sum::<f64>() / k;
            val_m.ppo_value_loss = ppo_stats.iter().map(|s| s.value_loss).sum::<f64>() / k;
            val_m.ppo_entropy = ppo_stats.iter().map(|s| s.entropy).sum::<f64>() / k;
            val_m.ppo_clip_fraction = ppo_stats.iter().map(|s| s.clip_fraction).sum::<f64>() / k;
        }
        val_m.classifier_lr = clf_lr;
        val_m.policy_lr = rl_lr;

        let improved = best.as_ref().is_none_or(|b| val_m.accuracy > b.accuracy);
        if improved {
            best = Some(Snapshot {
                accuracy: val_m.accuracy,
                epoch,
                classifier: run.classifier.clone(),
                policy: policy.clone(),
                calibration: calibration.clone(),
            });
            since_best = 0;
        } else {
            since_best += 1;
        }
        let reward_improved = val_m.mean_reward > best_reward;
        if reward_improved {
            best_reward = val_m.mean_reward;
            since_reward = 0;
        } else {
            since_reward += 1;
        }
        clf_lr = clf_sched.step(clf_lr, t.classifier_scheduler_factor, improved);
        run.clf_opt.lr = clf_lr;
        if !policy_frozen {
            rl_lr = rl_sched.step(rl_lr, t.rl_scheduler_factor, reward_improved);
            ppo.set_lr(rl_lr);
        }

        let elapsed = started.elapsed().as_secs_f64();
        train_m.wall_clock_s = elapsed;
        val_m.wall_clock_s = elapsed;
        log::debug!(
            "epoch {epoch}: val acc {:.4} reward {:.4} ratio n={:.3} e={:.3} q̂={:.4}",
            val_m.accuracy,
            val_m.mean_reward,
            val_m.mean_node_ratio,
            val_m.mean_edge_ratio,
            calibration.quantile()
        );
        let first_row = run.history.len();
        run.history.push(train_m);
        run.history.push(val_m);
        if !split.test.is_empty() {
            let mut test_m = evaluate(&run.classifier, Some(&policy), dataset, &split.test, &settings(Split::Test))?;
            test_m.classifier_lr = clf_lr;
            test_m.policy_lr = rl_lr;
            test_m.wall_clock_s = elapsed;
            run.history.push(test_m);
        }
        observer(&run.history[first_row..])?;
        epochs_run = epoch + 1;
        if since_best >= t.early_stop_patience {
            log::info!("early stopping after epoch {epoch}");
            break;
        }
    }

    let (classifier, policy, calibration, best_epoch) = match best {
        Some(b) if !t.report_last_epoch => (b.classifier, b.policy, b.calibration, Some(b.epoch)),
        Some(b) => (run.classifier, policy, calibration, Some(b.epoch)),
        None => (run.classifier, policy, calibration, None),
    };
    let test = if split.test.is_empty() || epochs_run == 0 {
        None
    } else {
        Some(evaluate(
            &classifier,
            Some(&policy),
            dataset,
            &split.test,
            &EvalSettings {
                mode,
                calibration: Some(&calibration),
                reward: &config.reward,
                epoch: epochs_run,
                split: Split::Test,
            },
        )?)
    };
    Ok(TrainOutput {
        classifier,
        policy: Some(policy),
        calibration: Some(calibration),
        history: run.history,
        best_epoch,
        epochs_run,
        rewards,
        test,
    })
}

fn ppo_phase(
    ppo: &mut Ppo,
    policy: &mut PolicyModel,
    dataset: &[Graph],
    buffer: &mut RolloutBuffer,
    rng: &mut ChaCha8Rng,
    epoch: usize,
) -> Result<UpdateStats> {
    let stats = ppo.update(policy, dataset, buffer, rng).map_err(|e| match e {
        Error::Domain(detail) => Error::Divergence {
            epoch,
            phase: "policy",
            detail,
        },
        e => e,
    })?;
    buffer.clear();
    Ok(stats)
}
