//! Graph data model and the sparsification action semantics.
//!
//! Graphs are undirected and stored with one canonical `(u, v)` pair per
//! edge, `u < v`. A [`Subgraph`] is a pair of keep-masks over a parent
//! graph's nodes and edges.

mod batch;
mod split;
mod synthetic;
mod tu;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

pub use batch::{batch, batch_graphs, BatchedGraph};
pub use split::{split_folds, split_sizes, DatasetSplit};
pub use synthetic::{generate_ba_shapes, CYCLE_EDGES, HOUSE_EDGES, MOTIF_NODES};
pub use tu::{dataset_stats, parse_tu_dataset, write_tu_dataset, DatasetStats};

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("missing dataset file {0}")]
    MissingFile(PathBuf),
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}:{line}: {msg}")]
    Format {
        file: String,
        line: usize,
        msg: String,
    },
    #[error("{what}: expected {expected}, got {got}")]
    Shape {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("invalid graph: {0}")]
    Invalid(String),
}

/// What the sparsification policy removes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Node,
    Edge,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Node => "node",
            Mode::Edge => "edge",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "node" => Ok(Mode::Node),
            "edge" => Ok(Mode::Edge),
            other => Err(format!("unknown mode {other:?} (expected node or edge)")),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A labeled undirected graph.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    num_nodes: usize,
    edges: Vec<(usize, usize)>,
    node_features: Tensor,
    label: usize,
    edge_features: Option<Tensor>,
    motif_mask: Option<Vec<bool>>,
}

impl Graph {
    /// Validates and builds a graph. Edges must already be canonical
    /// (`u < v`), unique and in range.
    pub fn new(
        num_nodes: usize,
        edges: Vec<(usize, usize)>,
        node_features: Tensor,
        label: usize,
    ) -> Result<Self, GraphError> {
        if node_features.shape().len() != 2 || node_features.rows() != num_nodes {
            return Err(GraphError::Shape {
                what: "node feature rows",
                expected: num_nodes,
                got: node_features.rows(),
            });
        }
        let mut seen = std::collections::HashSet::with_capacity(edges.len());
        for &(u, v) in &edges {
            if u >= v {
                return Err(GraphError::Invalid(format!(
                    "edge ({u}, {v}) is not canonical (need u < v)"
                )));
            }
            if v >= num_nodes {
                return Err(GraphError::Invalid(format!(
                    "edge ({u}, {v}) references a node >= {num_nodes}"
                )));
            }
            if !seen.insert((u, v)) {
                return Err(GraphError::Invalid(format!("duplicate edge ({u}, {v})")));
            }
        }
        Ok(Self {
            num_nodes,
            edges,
            node_features,
            label,
            edge_features: None,
            motif_mask: None,
        })
    }

    pub fn with_edge_features(mut self, features: Tensor) -> Result<Self, GraphError> {
        if features.rows() != self.edges.len() {
            return Err(GraphError::Shape {
                what: "edge feature rows",
                expected: self.edges.len(),
                got: features.rows(),
            });
        }
        self.edge_features = Some(features);
        Ok(self)
    }

    /// Attaches ground-truth explanation nodes (diagnostics only).
    pub fn with_motif_mask(mut self, mask: Vec<bool>) -> Result<Self, GraphError> {
        if mask.len() != self.num_nodes {
            return Err(GraphError::Shape {
                what: "motif mask",
                expected: self.num_nodes,
                got: mask.len(),
            });
        }
        self.motif_mask = Some(mask);
        Ok(self)
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn node_features(&self) -> &Tensor {
        &self.node_features
    }

    pub fn node_features_mut(&mut self) -> &mut Tensor {
        &mut self.node_features
    }

    pub fn num_features(&self) -> usize {
        self.node_features.cols()
    }

    pub fn label(&self) -> usize {
        self.label
    }

    pub fn edge_features(&self) -> Option<&Tensor> {
        self.edge_features.as_ref()
    }

    pub fn motif_mask(&self) -> Option<&[bool]> {
        self.motif_mask.as_deref()
    }

    /// Number of action units for `mode`.
    pub fn num_units(&self, mode: Mode) -> usize {
        match mode {
            Mode::Node => self.num_nodes,
            Mode::Edge => self.edges.len(),
        }
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.num_nodes];
        for &(u, v) in &self.edges {
            deg[u] += 1;
            deg[v] += 1;
        }
        deg
    }
}

/// Nodes and edges of a parent graph that survive an action.
#[derive(Debug, Clone, PartialEq)]
pub struct Subgraph<'a> {
    parent: &'a Graph,
    kept_nodes: Vec<bool>,
    kept_edges: Vec<bool>,
}

impl<'a> Subgraph<'a> {
    /// The identity subgraph.
    pub fn full(parent: &'a Graph) -> Self {
        Self {
            parent,
            kept_nodes: vec![true; parent.num_nodes()],
            kept_edges: vec![true; parent.num_edges()],
        }
    }

    pub fn parent(&self) -> &'a Graph {
        self.parent
    }

    pub fn kept_nodes(&self) -> &[bool] {
        &self.kept_nodes
    }

    pub fn kept_edges(&self) -> &[bool] {
        &self.kept_edges
    }

    pub fn num_kept_nodes(&self) -> usize {
        self.kept_nodes.iter().filter(|k| **k).count()
    }

    pub fn num_kept_edges(&self) -> usize {
        self.kept_edges.iter().filter(|k| **k).count()
    }

    /// |V_s| / |V|; 1 for a graph without nodes.
    pub fn node_ratio(&self) -> f64 {
        ratio(self.num_kept_nodes(), self.parent.num_nodes())
    }

    /// |E_s| / |E|; 1 for a graph without edges.
    pub fn edge_ratio(&self) -> f64 {
        ratio(self.num_kept_edges(), self.parent.num_edges())
    }

    /// The ratio in the dimension the policy acts on.
    pub fn ratio(&self, mode: Mode) -> f64 {
        match mode {
            Mode::Node => self.node_ratio(),
            Mode::Edge => self.edge_ratio(),
        }
    }

    /// An action is invalid when it empties the dimension it acts on: no
    /// nodes left in node mode, or every edge of a graph that had edges
    /// removed in edge mode.
    pub fn is_empty(&self, mode: Mode) -> bool {
        match mode {
            Mode::Node => self.num_kept_nodes() == 0,
            Mode::Edge => self.parent.num_edges() > 0 && self.num_kept_edges() == 0,
        }
    }
}

fn ratio(kept: usize, total: usize) -> f64 {
    if total == 0 {
        1.0
    } else {
        kept as f64 / total as f64
    }
}

/// Applies a removal mask (`true` = remove) to `graph`.
///
/// Node mode keeps `{v : a_v = 0}` and every edge whose endpoints are both
/// kept. Edge mode keeps every node and `{e : a_e = 0}`.
pub fn apply_action<'a>(
    graph: &'a Graph,
    mode: Mode,
    remove: &[bool],
) -> Result<Subgraph<'a>, GraphError> {
    let expected = graph.num_units(mode);
    if remove.len() != expected {
        return Err(GraphError::Shape {
            what: "action mask length",
            expected,
            got: remove.len(),
        });
    }
    let (kept_nodes, kept_edges) = match mode {
        Mode::Node => {
            let kept_nodes: Vec<bool> = remove.iter().map(|r| !r).collect();
            let kept_edges = graph
                .edges()
                .iter()
                .map(|&(u, v)| kept_nodes[u] && kept_nodes[v])
                .collect();
            (kept_nodes, kept_edges)
        }
        Mode::Edge => (
            vec![true; graph.num_nodes()],
            remove.iter().map(|r| !r).collect(),
        ),
    };
    Ok(Subgraph {
        parent: graph,
        kept_nodes,
        kept_edges,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn path3() -> Graph {
        Graph::new(3, vec![(0, 1), (1, 2)], Tensor::filled(&[3, 1], 1.0), 0).unwrap()
    }

    #[test]
    fn node_action_drops_incident_edges() {
        let g = path3();
        let s = apply_action(&g, Mode::Node, &[false, true, false]).unwrap();
        assert_eq!(s.kept_nodes(), &[true, false, true]);
        assert_eq!(s.kept_edges(), &[false, false]);
        assert!((s.node_ratio() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(s.edge_ratio(), 0.0);
    }

    #[test]
    fn edge_action_keeps_all_nodes() {
        let g = path3();
        let s = apply_action(&g, Mode::Edge, &[true, false]).unwrap();
        assert_eq!(s.kept_nodes(), &[true, true, true]);
        assert_eq!(s.kept_edges(), &[false, true]);
        assert_eq!(s.node_ratio(), 1.0);
    }

    #[test]
    fn zero_action_is_identity() {
        let g = path3();
        for mode in [Mode::Node, Mode::Edge] {
            let s = apply_action(&g, mode, &vec![false; g.num_units(mode)]).unwrap();
            assert_eq!(s, Subgraph::full(&g));
            assert_eq!(s.ratio(mode), 1.0);
        }
    }

    #[test]
    fn mask_length_is_checked() {
        let g = path3();
        assert!(matches!(
            apply_action(&g, Mode::Edge, &[true]),
            Err(GraphError::Shape { expected: 2, got: 1, .. })
        ));
    }

    #[test]
    fn emptiness_by_mode() {
        let g = path3();
        let all_nodes = apply_action(&g, Mode::Node, &[true; 3]).unwrap();
        assert!(all_nodes.is_empty(Mode::Node));
        let all_edges = apply_action(&g, Mode::Edge, &[true; 2]).unwrap();
        assert!(all_edges.is_empty(Mode::Edge));
        let lone = Graph::new(1, vec![], Tensor::filled(&[1, 1], 1.0), 0).unwrap();
        assert!(!apply_action(&lone, Mode::Edge, &[]).unwrap().is_empty(Mode::Edge));
    }

    #[test]
    fn graph_invariants_enforced() {
        let f = Tensor::filled(&[3, 1], 1.0);
        assert!(Graph::new(3, vec![(1, 0)], f.clone(), 0).is_err());
        assert!(Graph::new(3, vec![(1, 1)], f.clone(), 0).is_err());
        assert!(Graph::new(3, vec![(0, 3)], f.clone(), 0).is_err());
        assert!(Graph::new(3, vec![(0, 1), (0, 1)], f.clone(), 0).is_err());
        assert!(Graph::new(2, vec![], f, 0).is_err());
    }
}
