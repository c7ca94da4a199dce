//! Reader and writer for the TU Dortmund plain-text graph format.
//!
//! Mandatory files for a dataset `DS`: `DS_A.txt` (one `i, j` pair of
//! 1-indexed global node ids per line), `DS_graph_indicator.txt` (graph id
//! of each node) and `DS_graph_labels.txt` (one label per graph). Optional:
//! `DS_node_labels.txt`, `DS_node_attributes.txt`, `DS_edge_labels.txt`,
//! `DS_edge_attributes.txt`, and the non-standard `DS_node_motif.txt`
//! (0/1 ground-truth explanation flags written by the synthetic generator).

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{Graph, GraphError};
use crate::tensor::Tensor;

struct TuFile {
    path: PathBuf,
    label: String,
    lines: Vec<String>,
}

fn file_path(dir: &Path, name: &str, suffix: &str) -> PathBuf {
    dir.join(format!("{name}_{suffix}.txt"))
}

fn read_lines(path: PathBuf, required: bool) -> Result<Option<TuFile>, GraphError> {
    if !path.exists() {
        return if required {
            Err(GraphError::MissingFile(path))
        } else {
            Ok(None)
        };
    }
    let text = fs::read_to_string(&path).map_err(|source| GraphError::Io {
        path: path.clone(),
        source,
    })?;
    let label = path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let lines = text
        .lines()
        .map(|l| l.trim().to_string())
        .filter(|l| !l.is_empty())
        .collect();
    Ok(Some(TuFile { path, label, lines }))
}

impl TuFile {
    fn err(&self, line: usize, msg: impl Into<String>) -> GraphError {
        GraphError::Format {
            file: self.label.clone(),
            line: line + 1,
            msg: msg.into(),
        }
    }

    fn ints(&self) -> Result<Vec<i64>, GraphError> {
        self.lines
            .iter()
            .enumerate()
            .map(|(i, l)| {
                l.parse::<i64>()
                    .map_err(|_| self.err(i, format!("expected an integer, found {l:?}")))
            })
            .collect()
    }

    fn reals(&self) -> Result<Vec<Vec<f64>>, GraphError> {
        let rows: Vec<Vec<f64>> = self
            .lines
            .iter()
            .enumerate()
            .map(|(i, l)| {
                l.split(',')
                    .map(|x| {
                        x.trim()
                            .parse::<f64>()
                            .map_err(|_| self.err(i, format!("expected a real, found {x:?}")))
                    })
                    .collect::<Result<Vec<_>, _>>()
            })
            .collect::<Result<_, _>>()?;
        if let Some(w) = rows.first().map(Vec::len) {
            if let Some(i) = rows.iter().position(|r| r.len() != w) {
                return Err(self.err(i, format!("expected {w} columns")));
            }
        }
        Ok(rows)
    }

    fn expect_len(&self, n: usize) -> Result<(), GraphError> {
        if self.lines.len() != n {
            return Err(GraphError::Format {
                file: self.label.clone(),
                line: self.lines.len().min(n) + 1,
                msg: format!("expected {n} lines, found {}", self.lines.len()),
            });
        }
        Ok(())
    }
}

/// Maps distinct integer values to `0..k` in ascending order.
fn contiguous(values: &[i64]) -> (Vec<usize>, usize) {
    let distinct: BTreeSet<i64> = values.iter().copied().collect();
    let index: HashMap<i64, usize> = distinct.iter().enumerate().map(|(i, &v)| (v, i)).collect();
    (values.iter().map(|v| index[v]).collect(), distinct.len())
}

fn one_hot(codes: &[usize], width: usize) -> Vec<Vec<f64>> {
    codes
        .iter()
        .map(|&c| {
            let mut row = vec![0.0; width];
            row[c] = 1.0;
            row
        })
        .collect()
}

/// Parses the dataset `name` in `directory`.
pub fn parse_tu_dataset(directory: &Path, name: &str) -> Result<Vec<Graph>, GraphError> {
    let req = |s: &str| read_lines(file_path(directory, name, s), true).map(Option::unwrap);
    let opt = |s: &str| read_lines(file_path(directory, name, s), false);
    let adjacency = req("A")?;
    let indicator = req("graph_indicator")?;
    let graph_labels = req("graph_labels")?;
    let node_labels = opt("node_labels")?;
    let node_attrs = opt("node_attributes")?;
    let edge_labels = opt("edge_labels")?;
    let edge_attrs = opt("edge_attributes")?;
    let node_motif = opt("node_motif")?;

    let (labels, _) = contiguous(&graph_labels.ints()?);
    let num_graphs = labels.len();
    let raw_indicator = indicator.ints()?;
    let num_nodes_total = raw_indicator.len();

    // global node -> (graph, local id)
    let mut owner = Vec::with_capacity(num_nodes_total);
    let mut sizes = vec![0usize; num_graphs];
    for (i, &g) in raw_indicator.iter().enumerate() {
        if g < 1 || g as usize > num_graphs {
            return Err(indicator.err(i, format!("graph id {g} outside 1..={num_graphs}")));
        }
        let g = g as usize - 1;
        owner.push((g, sizes[g]));
        sizes[g] += 1;
    }

    let node_features: Vec<Vec<f64>> = if let Some(f) = &node_attrs {
        f.expect_len(num_nodes_total)?;
        f.reals()?
    } else if let Some(f) = &node_labels {
        f.expect_len(num_nodes_total)?;
        let (codes, width) = contiguous(&f.ints()?);
        one_hot(&codes, width)
    } else {
        vec![vec![1.0]; num_nodes_total]
    };
    let edge_rows: Option<Vec<Vec<f64>>> = if let Some(f) = &edge_attrs {
        f.expect_len(adjacency.lines.len())?;
        Some(f.reals()?)
    } else if let Some(f) = &edge_labels {
        f.expect_len(adjacency.lines.len())?;
        let (codes, width) = contiguous(&f.ints()?);
        Some(one_hot(&codes, width))
    } else {
        None
    };
    let motif = match &node_motif {
        Some(f) => {
            f.expect_len(num_nodes_total)?;
            Some(f.ints()?.into_iter().map(|v| v != 0).collect::<Vec<_>>())
        }
        None => None,
    };

    let mut edges: Vec<Vec<(usize, usize)>> = vec![Vec::new(); num_graphs];
    let mut edge_feats: Vec<Vec<Vec<f64>>> = vec![Vec::new(); num_graphs];
    let mut seen: Vec<BTreeMap<(usize, usize), ()>> = vec![BTreeMap::new(); num_graphs];
    let mut self_loops = 0usize;
    for (i, line) in adjacency.lines.iter().enumerate() {
        let mut parts = line.split(',').map(str::trim);
        let (Some(a), Some(b), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(adjacency.err(i, format!("expected \"i, j\", found {line:?}")));
        };
        let parse = |s: &str| -> Result<usize, GraphError> {
            let v: i64 = s
                .parse()
                .map_err(|_| adjacency.err(i, format!("bad node id {s:?}")))?;
            if v < 1 || v as usize > num_nodes_total {
                return Err(adjacency.err(i, format!("edge references nonexistent node {v}")));
            }
            Ok(v as usize - 1)
        };
        let (a, b) = (parse(a)?, parse(b)?);
        let ((ga, la), (gb, lb)) = (owner[a], owner[b]);
        if ga != gb {
            return Err(adjacency.err(
                i,
                format!("edge joins graphs {} and {}", ga + 1, gb + 1),
            ));
        }
        if la == lb {
            self_loops += 1;
            continue;
        }
        let key = (la.min(lb), la.max(lb));
        if seen[ga].insert(key, ()).is_none() {
            edges[ga].push(key);
            if let Some(rows) = &edge_rows {
                edge_feats[ga].push(rows[i].clone());
            }
        }
    }
    if self_loops > 0 {
        log::warn!(
            "{}: dropped {self_loops} self-loop lines",
            adjacency.path.display()
        );
    }

    let width = node_features.first().map_or(1, Vec::len);
    let mut per_graph_feats: Vec<Vec<f64>> = sizes.iter().map(|&n| Vec::with_capacity(n * width)).collect();
    let mut per_graph_motif: Vec<Vec<bool>> = vec![Vec::new(); num_graphs];
    for (i, &(g, _)) in owner.iter().enumerate() {
        per_graph_feats[g].extend_from_slice(&node_features[i]);
        if let Some(m) = &motif {
            per_graph_motif[g].push(m[i]);
        }
    }

    let edge_width = edge_rows.as_ref().and_then(|r| r.first()).map(Vec::len);
    let mut graphs = Vec::with_capacity(num_graphs);
    for g in 0..num_graphs {
        let feats = Tensor::new(vec![sizes[g], width], std::mem::take(&mut per_graph_feats[g]))
            .map_err(|e| GraphError::Invalid(e.to_string()))?;
        let mut graph = Graph::new(sizes[g], std::mem::take(&mut edges[g]), feats, labels[g])?;
        if let Some(w) = edge_width {
            let flat: Vec<f64> = edge_feats[g].concat();
            let t = Tensor::new(vec![graph.num_edges(), w], flat)
                .map_err(|e| GraphError::Invalid(e.to_string()))?;
            graph = graph.with_edge_features(t)?;
        }
        if motif.is_some() {
            graph = graph.with_motif_mask(std::mem::take(&mut per_graph_motif[g]))?;
        }
        graphs.push(graph);
    }
    Ok(graphs)
}

/// Writes graphs in TU format. Each undirected edge is emitted in both
/// directions; features go to the attribute files.
pub fn write_tu_dataset(directory: &Path, name: &str, graphs: &[Graph]) -> Result<(), GraphError> {
    fs::create_dir_all(directory).map_err(|source| GraphError::Io {
        path: directory.to_path_buf(),
        source,
    })?;
    let mut a = String::new();
    let mut ind = String::new();
    let mut gl = String::new();
    let mut na = String::new();
    let mut ea = String::new();
    let mut motif = String::new();
    let has_edge_feats = graphs.iter().any(|g| g.edge_features().is_some());
    let has_motif = graphs.iter().any(|g| g.motif_mask().is_some());
    let join = |row: &[f64]| {
        row.iter()
            .map(|v| format!("{v:?}"))
            .collect::<Vec<_>>()
            .join(", ")
    };

    let mut offset = 0usize;
    for (gi, g) in graphs.iter().enumerate() {
        let _ = writeln!(gl, "{}", g.label());
        for v in 0..g.num_nodes() {
            let _ = writeln!(ind, "{}", gi + 1);
            let _ = writeln!(na, "{}", join(g.node_features().row(v)));
            if has_motif {
                let flag = g.motif_mask().is_some_and(|m| m[v]);
                let _ = writeln!(motif, "{}", u8::from(flag));
            }
        }
        for (e, &(u, v)) in g.edges().iter().enumerate() {
            let (gu, gv) = (offset + u + 1, offset + v + 1);
            let _ = writeln!(a, "{gu}, {gv}");
            let _ = writeln!(a, "{gv}, {gu}");
            if has_edge_feats {
                let row = g
                    .edge_features()
                    .map(|t| join(t.row(e)))
                    .unwrap_or_default();
                let _ = writeln!(ea, "{row}");
                let _ = writeln!(ea, "{row}");
            }
        }
        offset += g.num_nodes();
    }

    let write = |suffix: &str, body: &str| -> Result<(), GraphError> {
        let path = file_path(directory, name, suffix);
        fs::write(&path, body).map_err(|source| GraphError::Io { path, source })
    };
    write("A", &a)?;
    write("graph_indicator", &ind)?;
    write("graph_labels", &gl)?;
    write("node_attributes", &na)?;
    if has_edge_feats {
        write("edge_attributes", &ea)?;
    }
    if has_motif {
        write("node_motif", &motif)?;
    }
    Ok(())
}

/// Summary statistics in the shape of a dataset table row.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct DatasetStats {
    pub num_graphs: usize,
    pub num_features: usize,
    pub num_edge_features: usize,
    pub num_classes: usize,
    pub nodes_mean: f64,
    pub nodes_std: f64,
    pub edges_mean: f64,
    pub edges_std: f64,
}

fn mean_std(xs: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = xs.clone().count().max(1) as f64;
    let mean = xs.clone().sum::<f64>() / n;
    let var = xs.map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Node and (undirected) edge counts are reported as mean and population std.
pub fn dataset_stats(graphs: &[Graph]) -> DatasetStats {
    let (nodes_mean, nodes_std) = mean_std(graphs.iter().map(|g| g.num_nodes() as f64));
    let (edges_mean, edges_std) = mean_std(graphs.iter().map(|g| g.num_edges() as f64));
    let classes: BTreeSet<usize> = graphs.iter().map(Graph::label).collect();
    DatasetStats {
        num_graphs: graphs.len(),
        num_features: graphs.first().map_or(0, Graph::num_features),
        num_edge_features: graphs
            .first()
            .and_then(Graph::edge_features)
            .map_or(0, Tensor::cols),
        num_classes: classes.len(),
        nodes_mean,
        nodes_std,
        edges_mean,
        edges_std,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, files: &[(&str, &str)]) {
        for (suffix, body) in files {
            fs::write(dir.join(format!("T_{suffix}.txt")), body).unwrap();
        }
    }

    #[test]
    fn two_graph_fixture() {
        let dir = tempfile::tempdir().unwrap();
        write(
            dir.path(),
            &[
                ("A", "1, 2\n2, 1\n"),
                ("graph_indicator", "1\n1\n2\n"),
                ("graph_labels", "1\n-1\n"),
            ],
        );
        let gs = parse_tu_dataset(dir.path(), "T").unwrap();
        assert_eq!(gs.len(), 2);
        assert_eq!((gs[0].num_nodes(), gs[0].num_edges()), (2, 1));
        assert_eq!((gs[1].num_nodes(), gs[1].num_edges()), (1, 0));
        assert_eq!(gs[0].edges(), &[(0, 1)]);
        // {-1, 1} -> {0, 1}
        assert_eq!((gs[0].label(), gs[1].label()), (1, 0));
        // no labels, no attributes -> constant feature
        assert_eq!(gs[0].node_features().shape(), &[2, 1]);
    }

    #[test]
    fn node_labels_become_one_hot() {
        let dir = tempfile::tempdir().unwrap();
        write(
            dir.path(),
            &[
                ("A", "1, 2\n2, 1\n2, 3\n3, 2\n"),
                ("graph_indicator", "1\n1\n1\n"),
                ("graph_labels", "0\n"),
                ("node_labels", "5\n2\n5\n"),
                ("edge_labels", "0\n0\n3\n3\n"),
            ],
        );
        let gs = parse_tu_dataset(dir.path(), "T").unwrap();
        assert_eq!(gs[0].node_features().data(), &[0., 1., 1., 0., 0., 1.]);
        assert_eq!(gs[0].edge_features().unwrap().data(), &[1., 0., 0., 1.]);
    }

    #[test]
    fn missing_mandatory_file_is_named() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), &[("A", "1, 2\n"), ("graph_indicator", "1\n1\n")]);
        match parse_tu_dataset(dir.path(), "T") {
            Err(GraphError::MissingFile(p)) => {
                assert!(p.ends_with("T_graph_labels.txt"))
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn nonexistent_node_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        write(
            dir.path(),
            &[
                ("A", "1, 2\n2, 1\n2, 7\n"),
                ("graph_indicator", "1\n1\n"),
                ("graph_labels", "0\n"),
            ],
        );
        match parse_tu_dataset(dir.path(), "T") {
            Err(GraphError::Format { file, line, msg }) => {
                assert_eq!(file, "T_A.txt");
                assert_eq!(line, 3);
                assert!(msg.contains("nonexistent node 7"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn cross_graph_edge_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write(
            dir.path(),
            &[
                ("A", "1, 2\n"),
                ("graph_indicator", "1\n2\n"),
                ("graph_labels", "0\n1\n"),
            ],
        );
        assert!(matches!(
            parse_tu_dataset(dir.path(), "T"),
            Err(GraphError::Format { line: 1, .. })
        ));
    }

    #[test]
    fn stats_of_fixture() {
        let f = Tensor::filled(&[2, 1], 1.0);
        let gs = vec![
            Graph::new(2, vec![(0, 1)], f.clone(), 0).unwrap(),
            Graph::new(2, vec![], f, 1).unwrap(),
        ];
        let s = dataset_stats(&gs);
        assert_eq!((s.num_graphs, s.num_classes, s.num_features), (2, 2, 1));
        assert_eq!((s.nodes_mean, s.nodes_std), (2.0, 0.0));
        assert_eq!((s.edges_mean, s.edges_std), (0.5, 0.5));
    }
}
