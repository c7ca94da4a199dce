//! Disjoint-union batching of (sub)graphs into one block graph.

use super::{Graph, GraphError, Subgraph};
use crate::tensor::Tensor;

/// Block-diagonal union of member graphs.
///
/// Only kept nodes and edges enter the batch; removed nodes have no row in
/// `features`, so nothing about them can reach a model.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchedGraph {
    pub num_graphs: usize,
    /// `[num_nodes × F]` features of kept nodes.
    pub features: Tensor,
    /// Canonical pairs over batched node ids.
    pub edges: Vec<(usize, usize)>,
    pub node_to_graph: Vec<usize>,
    pub edge_to_graph: Vec<usize>,
    pub labels: Vec<usize>,
    /// `node_offsets[g]..node_offsets[g + 1]` are the nodes of member `g`.
    pub node_offsets: Vec<usize>,
    pub edge_offsets: Vec<usize>,
    /// Parent-graph node id of each batched node.
    pub parent_node: Vec<usize>,
    /// Parent-graph edge index of each batched edge.
    pub parent_edge: Vec<usize>,
}

impl BatchedGraph {
    pub fn num_nodes(&self) -> usize {
        self.node_to_graph.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn num_features(&self) -> usize {
        self.features.cols()
    }

    /// Node count of every member.
    pub fn graph_sizes(&self) -> Vec<usize> {
        self.node_offsets.windows(2).map(|w| w[1] - w[0]).collect()
    }
}

/// Batches subgraphs. All members must share a feature dimension.
pub fn batch(members: &[Subgraph<'_>]) -> Result<BatchedGraph, GraphError> {
    let Some(first) = members.first() else {
        return Err(GraphError::Shape {
            what: "batch size",
            expected: 1,
            got: 0,
        });
    };
    let f = first.parent().num_features();
    let total_nodes: usize = members.iter().map(Subgraph::num_kept_nodes).sum();
    let mut features = Vec::with_capacity(total_nodes * f);
    let mut edges = Vec::new();
    let mut node_to_graph = Vec::with_capacity(total_nodes);
    let mut edge_to_graph = Vec::new();
    let mut labels = Vec::with_capacity(members.len());
    let mut node_offsets = vec![0];
    let mut edge_offsets = vec![0];
    let mut parent_node = Vec::with_capacity(total_nodes);
    let mut parent_edge = Vec::new();

    for (gi, sg) in members.iter().enumerate() {
        let g = sg.parent();
        if g.num_features() != f {
            return Err(GraphError::Shape {
                what: "node feature dimension",
                expected: f,
                got: g.num_features(),
            });
        }
        let offset = node_to_graph.len();
        let mut local = vec![usize::MAX; g.num_nodes()];
        for (v, &keep) in sg.kept_nodes().iter().enumerate() {
            if keep {
                local[v] = node_to_graph.len() - offset;
                features.extend_from_slice(g.node_features().row(v));
                node_to_graph.push(gi);
                parent_node.push(v);
            }
        }
        for (e, (&(u, v), &keep)) in g.edges().iter().zip(sg.kept_edges()).enumerate() {
            if keep {
                debug_assert!(local[u] != usize::MAX && local[v] != usize::MAX);
                edges.push((offset + local[u], offset + local[v]));
                edge_to_graph.push(gi);
                parent_edge.push(e);
            }
        }
        labels.push(g.label());
        node_offsets.push(node_to_graph.len());
        edge_offsets.push(edges.len());
    }

    let n = node_to_graph.len();
    Ok(BatchedGraph {
        num_graphs: members.len(),
        features: Tensor::new(vec![n, f], features).expect("row-major fill"),
        edges,
        node_to_graph,
        edge_to_graph,
        labels,
        node_offsets,
        edge_offsets,
        parent_node,
        parent_edge,
    })
}

/// Batches whole graphs.
pub fn batch_graphs(graphs: &[&Graph]) -> Result<BatchedGraph, GraphError> {
    let subs: Vec<Subgraph<'_>> = graphs.iter().map(|g| Subgraph::full(g)).collect();
    batch(&subs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{apply_action, Mode};

    fn pair(label: usize, feat: f64) -> Graph {
        Graph::new(2, vec![(0, 1)], Tensor::filled(&[2, 1], feat), label).unwrap()
    }

    #[test]
    fn two_graphs_form_block_graph() {
        let (a, b) = (pair(0, 1.0), pair(1, 2.0));
        let bg = batch_graphs(&[&a, &b]).unwrap();
        assert_eq!(bg.num_nodes(), 4);
        assert_eq!(bg.node_to_graph, vec![0, 0, 1, 1]);
        assert_eq!(bg.edges, vec![(0, 1), (2, 3)]);
        assert_eq!(bg.edge_to_graph, vec![0, 1]);
        assert_eq!(bg.labels, vec![0, 1]);
        assert_eq!(bg.node_offsets, vec![0, 2, 4]);
        assert_eq!(bg.features.data(), &[1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn single_graph_is_identity_embedding() {
        let g = Graph::new(
            3,
            vec![(0, 2), (1, 2)],
            Tensor::matrix(3, 2, vec![1., 2., 3., 4., 5., 6.]).unwrap(),
            1,
        )
        .unwrap();
        let bg = batch_graphs(&[&g]).unwrap();
        assert_eq!(bg.edges, g.edges());
        assert_eq!(&bg.features, g.node_features());
        assert_eq!(bg.parent_node, vec![0, 1, 2]);
    }

    #[test]
    fn edgeless_subgraph_batches() {
        let g = pair(0, 1.0);
        let s = apply_action(&g, Mode::Edge, &[true]).unwrap();
        let bg = batch(&[s]).unwrap();
        assert_eq!(bg.num_nodes(), 2);
        assert!(bg.edges.is_empty());
    }

    #[test]
    fn removed_nodes_are_remapped_out() {
        let g = Graph::new(
            3,
            vec![(0, 1), (1, 2), (0, 2)],
            Tensor::matrix(3, 1, vec![10., 20., 30.]).unwrap(),
            0,
        )
        .unwrap();
        let s = apply_action(&g, Mode::Node, &[true, false, false]).unwrap();
        let bg = batch(&[s]).unwrap();
        assert_eq!(bg.features.data(), &[20., 30.]);
        assert_eq!(bg.edges, vec![(0, 1)]);
        assert_eq!(bg.parent_edge, vec![1]);
    }

    #[test]
    fn mixed_feature_dims_rejected() {
        let a = pair(0, 1.0);
        let b = Graph::new(1, vec![], Tensor::zeros(&[1, 3]), 0).unwrap();
        assert!(matches!(
            batch_graphs(&[&a, &b]),
            Err(GraphError::Shape { .. })
        ));
        assert!(batch(&[]).is_err());
    }
}
