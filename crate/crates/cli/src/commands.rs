use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use cores::checkpoint::{parse_header, render_header, Checkpoint};
use cores::config::TrainConfig;
use cores::conformal::{aps_score, calibrate, CalibrationState};
use cores::gnn::ClassifierModel;
use cores::graph::{
    apply_action, dataset_stats, generate_ba_shapes, parse_tu_dataset, split_folds, write_tu_dataset,
    DatasetSplit, Graph, GraphError, Mode,
};
use cores::metrics::{write_history_csv, write_reward_csv, EpochMetrics, MetricsSink, Split};
use cores::policy::PolicyModel;
use cores::trainer::{
    evaluate, evaluate_graphs, num_classes, train_observed, train_vanilla_observed, EvalSettings,
    TrainOutput,
};
use serde_json::json;

use crate::{DataArgs, EvalArgs, RunArgs, SweepArgs, SyntheticArgs, TrainArgs};

pub const DATA_DIR_ENV: &str = "CORES_DATA_DIR";

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Dataset(String),
    Checkpoint(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Runtime(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Dataset(_) => 3,
            CliError::Checkpoint(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Dataset(m) | CliError::Checkpoint(m) | CliError::Runtime(m) => {
                f.write_str(m)
            }
        }
    }
}

impl From<cores::Error> for CliError {
    fn from(e: cores::Error) -> Self {
        let msg = e.to_string();
        match e {
            cores::Error::Config(_) => CliError::Usage(msg),
            cores::Error::Graph(GraphError::MissingFile(_) | GraphError::Io { .. }) => CliError::Dataset(msg),
            cores::Error::Checkpoint(_) => CliError::Checkpoint(msg),
            _ => CliError::Runtime(msg),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

type Result<T> = std::result::Result<T, CliError>;

/// Config file with command-line overrides applied.
fn load_config(run: &RunArgs) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::load(&run.config)?;
    if let Some(name) = &run.data.dataset {
        cfg.data.dataset = name.clone();
    }
    if let Some(mode) = run.mode {
        cfg.train.mode = mode;
    }
    if let Some(seed) = run.seed {
        cfg.train.seed = seed;
    }
    if let Some(n) = run.max_epochs {
        cfg.train.max_epochs = n;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// `--data-dir`, then `data.data_dir`, then `$CORES_DATA_DIR`.
fn data_dir(args: &DataArgs, cfg_dir: Option<&Path>) -> Option<PathBuf> {
    args.data_dir
        .clone()
        .or_else(|| cfg_dir.map(Path::to_path_buf))
        .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
}

/// Directory holding `<name>_A.txt`, either `dir/<name>/` or `dir` itself.
fn tu_dir(dir: PathBuf, name: &str) -> PathBuf {
    let nested = dir.join(name);
    if nested.is_dir() {
        nested
    } else {
        dir
    }
}

/// TU files found on disk win over the built-in `ba_shapes` generator, so a
/// dataset written by `generate-synthetic` reads back as written.
fn load_data(cfg: &TrainConfig, args: &DataArgs) -> Result<Vec<Graph>> {
    let d = &cfg.data;
    let dir = data_dir(args, d.data_dir.as_deref()).map(|dir| tu_dir(dir, &d.dataset));
    let on_disk = dir
        .as_ref()
        .is_some_and(|dir| dir.join(format!("{}_A.txt", d.dataset)).is_file());
    let graphs = if d.dataset.eq_ignore_ascii_case("ba_shapes") && !on_disk {
        generate_ba_shapes(d.synthetic_graphs, d.synthetic_base_nodes, d.synthetic_seed)
            .map_err(|e| CliError::Usage(e.to_string()))?
    } else {
        let dir = dir.ok_or_else(|| {
            CliError::Dataset(format!(
                "dataset {} needs --data-dir, data.data_dir or {DATA_DIR_ENV}",
                d.dataset
            ))
        })?;
        parse_tu_dataset(&dir, &d.dataset).map_err(cores::Error::from)?
    };
    if graphs.is_empty() {
        return Err(CliError::Dataset(format!("dataset {} has no graphs", d.dataset)));
    }
    Ok(graphs)
}

fn folds(cfg: &TrainConfig, dataset: &[Graph], requested: Option<usize>) -> Result<Vec<DatasetSplit>> {
    let n = requested.unwrap_or(cfg.data.folds);
    split_folds(dataset, cfg.data.splits, n, cfg.train.seed).map_err(|e| CliError::Usage(e.to_string()))
}

fn run_fold(cfg: &TrainConfig, split: &DatasetSplit, dataset: &[Graph], vanilla: bool, dir: &Path) -> Result<TrainOutput> {
    fs::create_dir_all(dir)?;
    let run_id = format!("seed{}-fold{}", cfg.train.seed, split.fold_index);
    let mut sink = MetricsSink::create(&dir.join("metrics_sink.csv"), run_id)?;
    let mut observer = |rows: &[EpochMetrics]| {
        for m in rows {
            sink.record_epoch(m)?;
        }
        sink.flush()
    };
    if vanilla {
        Ok(train_vanilla_observed(cfg, split, dataset, &mut observer)?)
    } else {
        Ok(train_observed(cfg, split, dataset, &mut observer)?)
    }
}

/// Policy checkpoint whose header also carries the calibrated quantile.
fn policy_checkpoint(policy: &PolicyModel, cal: Option<&CalibrationState>) -> Checkpoint {
    let mut ck = policy.to_checkpoint();
    if let Some(cal) = cal {
        let mut map = parse_header(&ck.header);
        map.insert("conformal.alpha".into(), cal.alpha().to_string());
        map.insert("conformal.quantile".into(), cal.quantile().to_string());
        ck.header = render_header(&map);
    }
    ck
}

fn write_run(cfg: &TrainConfig, split: &DatasetSplit, vanilla: bool, out: &TrainOutput, dir: &Path) -> Result<serde_json::Value> {
    fs::write(dir.join("config.toml"), cfg.to_toml_string())?;
    write_history_csv(&dir.join("metrics.csv"), &out.history)?;
    out.classifier
        .to_checkpoint()
        .save(&dir.join("classifier.ckpt"))
        .map_err(cores::Error::from)?;
    if let Some(policy) = &out.policy {
        policy_checkpoint(policy, out.calibration.as_ref())
            .save(&dir.join("policy.ckpt"))
            .map_err(cores::Error::from)?;
        write_reward_csv(&dir.join("rewards.csv"), &out.rewards)?;
    }
    let summary = json!({
        "fold": split.fold_index,
        "seed": cfg.train.seed,
        "dataset": cfg.data.dataset,
        "mode": cfg.train.mode,
        "vanilla": vanilla,
        "epochs_run": out.epochs_run,
        "best_epoch": out.best_epoch,
        "report_last_epoch": cfg.train.report_last_epoch,
        "quantile": out.calibration.as_ref().map(|c| c.quantile()).filter(|q| q.is_finite()),
        "test": out.test,
        "split_sizes": [split.train.len(), split.val.len(), split.test.len()],
        "config": cfg,
    });
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len().max(1) as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn train(args: &TrainArgs) -> Result<()> {
    let mut cfg = load_config(&args.run)?;
    cfg.train.report_last_epoch |= args.report_last_epoch;
    let dataset = load_data(&cfg, &args.run.data)?;
    let splits = folds(&cfg, &dataset, args.folds)?;
    let mut fold_summaries = Vec::new();
    let mut tests: Vec<EpochMetrics> = Vec::new();
    for split in &splits {
        let dir = args.out.join(format!("fold_{}", split.fold_index));
        log::info!("fold {}: {} train / {} val / {} test", split.fold_index, split.train.len(), split.val.len(), split.test.len());
        let out = run_fold(&cfg, split, &dataset, args.vanilla, &dir)?;
        fold_summaries.push(write_run(&cfg, split, args.vanilla, &out, &dir)?);
        if let Some(t) = out.test {
            log::info!(
                "fold {} test: accuracy {:.4}, node ratio {:.4}, edge ratio {:.4}",
                split.fold_index,
                t.accuracy,
                t.mean_node_ratio,
                t.mean_edge_ratio
            );
            tests.push(t);
        }
    }
    let stat = |f: fn(&EpochMetrics) -> f64| {
        let (m, s) = mean_std(&tests.iter().map(f).collect::<Vec<_>>());
        json!({ "mean": m, "std": s })
    };
    let summary = json!({
        "folds": fold_summaries.len(),
        "test_accuracy": stat(|m| m.accuracy),
        "test_node_ratio": stat(|m| m.mean_node_ratio),
        "test_edge_ratio": stat(|m| m.mean_edge_ratio),
        "runs": fold_summaries,
    });
    write_json(&args.out.join("summary.json"), &summary)?;
    println!(
        "{}",
        serde_json::to_string(&json!({
            "test_accuracy": summary["test_accuracy"],
            "test_node_ratio": summary["test_node_ratio"],
            "test_edge_ratio": summary["test_edge_ratio"],
        }))
        .map_err(|e| CliError::Runtime(e.to_string()))?
    );
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).map_err(|e| CliError::Checkpoint(format!("{}: {e}", path.display())))
}

fn mismatch(what: impl Into<String>) -> CliError {
    CliError::Checkpoint(what.into())
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    let cfg = load_config(&args.run)?;
    let classifier_ck = load_checkpoint(&args.classifier)?;
    let policy_ck = args.policy.as_deref().map(load_checkpoint).transpose()?;
    let dataset = load_data(&cfg, &args.run.data)?;

    let classifier = ClassifierModel::from_checkpoint(&classifier_ck).map_err(|e| mismatch(e.to_string()))?;
    let mut expected = cfg.gnn.clone();
    if expected.num_classes == 0 {
        expected.num_classes = classifier.num_classes();
    }
    if classifier.config() != &expected {
        return Err(mismatch(format!(
            "classifier checkpoint was trained with {:?}, config says {:?}",
            classifier.config(),
            expected
        )));
    }
    if classifier.input_dim() != dataset[0].num_features() {
        return Err(mismatch(format!(
            "classifier expects {} node features, dataset has {}",
            classifier.input_dim(),
            dataset[0].num_features()
        )));
    }
    if num_classes(&dataset) > classifier.num_classes() {
        return Err(mismatch(format!(
            "dataset has {} classes, classifier {}",
            num_classes(&dataset),
            classifier.num_classes()
        )));
    }
    let (policy, stored_cal) = match &policy_ck {
        Some(ck) => {
            let p = PolicyModel::from_checkpoint(ck).map_err(|e| mismatch(e.to_string()))?;
            if p.input_dim() != classifier.input_dim() {
                return Err(mismatch("policy and classifier disagree on the input dimension"));
            }
            if args.run.mode.is_some_and(|m| m != p.mode()) {
                return Err(mismatch(format!("policy checkpoint acts in {} mode", p.mode())));
            }
            let map = ck.header_map();
            let alpha = map.get("conformal.alpha").and_then(|v| v.parse().ok());
            let q = map.get("conformal.quantile").and_then(|v| v.parse().ok());
            let cal = alpha.zip(q).map(|(a, q)| CalibrationState::with_quantile(a, q));
            (Some(p), cal)
        }
        None => (None, None),
    };
    let mode = policy.as_ref().map_or(cfg.train.mode, PolicyModel::mode);
    let splits = folds(&cfg, &dataset, args.folds)?;
    let split = splits
        .get(args.fold)
        .ok_or_else(|| CliError::Usage(format!("fold {} out of range for {} folds", args.fold, splits.len())))?;
    if split.test.is_empty() {
        return Err(CliError::Usage("test split is empty".into()));
    }

    let calibration = match (stored_cal, &policy) {
        (Some(c), _) => Some(c),
        (None, Some(p)) => Some(recalibrate(&classifier, p, &dataset, &split.train, mode, cfg.reward.alpha_conf)?),
        (None, None) => None,
    };
    let settings = EvalSettings {
        mode,
        calibration: calibration.as_ref(),
        reward: &cfg.reward,
        epoch: 0,
        split: Split::Test,
    };
    let metrics = evaluate(&classifier, policy.as_ref(), &dataset, &split.test, &settings)?;
    let mut report = json!({ "fold": args.fold, "mode": mode, "test": metrics });

    if let Some(path) = &args.dump_subgraphs {
        let recall = dump_subgraphs(path, &classifier, policy.as_ref(), &dataset, &split.test, mode)?;
        if let Some(r) = recall {
            report["motif_recall"] = json!(r);
        }
    }
    let text = serde_json::to_string(&report).map_err(|e| CliError::Runtime(e.to_string()))?;
    println!("{text}");
    if let Some(out) = &args.out {
        write_json(out, &report)?;
    }
    Ok(())
}

/// Calibration from deterministic subgraphs of `ids` when the checkpoint
/// carries no quantile.
fn recalibrate(
    classifier: &ClassifierModel,
    policy: &PolicyModel,
    dataset: &[Graph],
    ids: &[usize],
    mode: Mode,
    alpha: f64,
) -> Result<CalibrationState> {
    let outcomes = evaluate_graphs(classifier, Some(policy), dataset, ids, mode)?;
    let scores = outcomes
        .iter()
        .filter(|o| o.valid)
        .map(|o| aps_score(&o.probs, dataset[o.graph_id].label()))
        .collect::<cores::Result<Vec<_>>>()?;
    if scores.is_empty() {
        return Ok(CalibrationState::with_quantile(alpha, f64::INFINITY));
    }
    Ok(calibrate(&scores, alpha)?)
}

/// Writes one JSON line per graph; returns the pooled recall of motif
/// nodes when the dataset has motif annotations.
fn dump_subgraphs(
    path: &Path,
    classifier: &ClassifierModel,
    policy: Option<&PolicyModel>,
    dataset: &[Graph],
    ids: &[usize],
    mode: Mode,
) -> Result<Option<f64>> {
    let outcomes = evaluate_graphs(classifier, policy, dataset, ids, mode)?;
    let mut out = BufWriter::new(File::create(path)?);
    let (mut hit, mut total) = (0usize, 0usize);
    for o in &outcomes {
        let g = &dataset[o.graph_id];
        let sub = apply_action(g, mode, &o.mask).map_err(cores::Error::from)?;
        let kept_nodes: Vec<usize> = (0..g.num_nodes()).filter(|&v| sub.kept_nodes()[v]).collect();
        let kept_edges: Vec<(usize, usize)> = g
            .edges()
            .iter()
            .zip(sub.kept_edges())
            .filter(|(_, &k)| k)
            .map(|(&e, _)| e)
            .collect();
        let mut line = json!({
            "graph_id": o.graph_id,
            "label": g.label(),
            "correct": o.correct,
            "kept_nodes": kept_nodes,
            "kept_edges": kept_edges,
        });
        if let Some(p) = policy {
            let (logits, _) = p.logits_and_values(&[g])?;
            let probs: Vec<f64> = logits[0].iter().map(|l| 1.0 / (1.0 + (-l).exp())).collect();
            line["remove_prob"] = json!(probs);
        }
        if let Some(motif) = g.motif_mask() {
            let motif_nodes: Vec<usize> = (0..g.num_nodes()).filter(|&v| motif[v]).collect();
            hit += motif_nodes.iter().filter(|&&v| sub.kept_nodes()[v]).count();
            total += motif_nodes.len();
            line["motif_nodes"] = json!(motif_nodes);
        }
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok((total > 0).then(|| hit as f64 / total as f64))
}

pub const SWEEP_HEADER: &str = "d,lambda,fold,accuracy,node_ratio,edge_ratio";

pub fn sweep(args: &SweepArgs) -> Result<()> {
    if args.d_grid.is_empty() || args.lambda_grid.is_empty() {
        return Err(CliError::Usage("sweep needs at least one value for each of --d and --lambda".into()));
    }
    if let Some(d) = args.d_grid.iter().find(|d| !(**d > 0.0 && **d < 1.0)) {
        return Err(CliError::Usage(format!("desired ratio {d} outside (0, 1)")));
    }
    if let Some(l) = args.lambda_grid.iter().find(|l| !(0.0..=1.0).contains(*l)) {
        return Err(CliError::Usage(format!("lambda {l} outside [0, 1]")));
    }
    let base = load_config(&args.run)?;
    let dataset = load_data(&base, &args.run.data)?;
    let splits = folds(&base, &dataset, args.folds)?;
    fs::create_dir_all(&args.out)?;
    let mut csv = BufWriter::new(File::create(args.out.join("sweep.csv"))?);
    writeln!(csv, "{SWEEP_HEADER}")?;
    for &d in &args.d_grid {
        for &lambda in &args.lambda_grid {
            let mut cfg = base.clone();
            cfg.reward.desired_ratio = d;
            cfg.reward.lambda = lambda;
            cfg.validate()?;
            for split in &splits {
                let dir = args.out.join(format!("d{d}_lambda{lambda}")).join(format!("fold_{}", split.fold_index));
                let out = run_fold(&cfg, split, &dataset, false, &dir)?;
                write_run(&cfg, split, false, &out, &dir)?;
                let t = out
                    .test
                    .ok_or_else(|| CliError::Usage("sweep needs a non-empty test split".into()))?;
                log::info!("d={d} lambda={lambda} fold {}: accuracy {:.4}", split.fold_index, t.accuracy);
                writeln!(
                    csv,
                    "{d},{lambda},{},{},{},{}",
                    split.fold_index, t.accuracy, t.mean_node_ratio, t.mean_edge_ratio
                )?;
                csv.flush()?;
            }
        }
    }
    Ok(())
}

pub fn dataset_info(args: &DataArgs) -> Result<()> {
    let name = args
        .dataset
        .clone()
        .ok_or_else(|| CliError::Usage("dataset-info needs --dataset".into()))?;
    let cfg = TrainConfig {
        data: cores::config::DataSection {
            dataset: name.clone(),
            ..Default::default()
        },
        ..Default::default()
    };
    let graphs = load_data(&cfg, args)?;
    let stats = dataset_stats(&graphs);
    let text = serde_json::to_string(&json!({ "dataset": name, "stats": stats }))
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    println!("{text}");
    Ok(())
}

pub fn generate_synthetic(args: &SyntheticArgs) -> Result<()> {
    let graphs = generate_ba_shapes(args.graphs, args.base_nodes, args.seed).map_err(|e| CliError::Usage(e.to_string()))?;
    let dir = args.out.join(&args.name);
    write_tu_dataset(&dir, &args.name, &graphs).map_err(|e| CliError::Runtime(e.to_string()))?;
    log::info!("wrote {} graphs to {}", graphs.len(), dir.display());
    Ok(())
}
