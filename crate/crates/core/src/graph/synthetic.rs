//! Barabási–Albert graphs with a planted house or cycle motif.
//!
//! Label 0 graphs carry a house, label 1 graphs a 5-cycle. The motif is
//! bridged to the base tree by a single edge, so the label is decided by
//! the motif alone.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, GraphError};
use crate::tensor::Tensor;

pub const MOTIF_NODES: usize = 5;

/// Square 0-1-2-3 with both floor diagonals and roof node 4 on corners 0, 1.
pub const HOUSE_EDGES: [(usize, usize); 8] = [
    (0, 1),
    (1, 2),
    (2, 3),
    (0, 3),
    (0, 2),
    (1, 3),
    (0, 4),
    (1, 4),
];

pub const CYCLE_EDGES: [(usize, usize); 5] = [(0, 1), (1, 2), (2, 3), (3, 4), (0, 4)];

/// Preferential-attachment tree with one edge per new node.
fn ba_tree(n: usize, rng: &mut impl Rng) -> Vec<(usize, usize)> {
    let mut edges = Vec::with_capacity(n.saturating_sub(1));
    // every edge endpoint once; uniform draws are degree-proportional
    let mut endpoints: Vec<usize> = Vec::with_capacity(2 * n);
    for v in 1..n {
        let target = if endpoints.is_empty() {
            0
        } else {
            endpoints[rng.gen_range(0..endpoints.len())]
        };
        edges.push((target.min(v), target.max(v)));
        endpoints.push(target);
        endpoints.push(v);
    }
    edges
}

/// Generates `num_graphs` graphs of `base_nodes + 5` nodes; labels alternate
/// 0, 1, 0, ... so the classes are balanced.
pub fn generate_ba_shapes(
    num_graphs: usize,
    base_nodes: usize,
    seed: u64,
) -> Result<Vec<Graph>, GraphError> {
    if base_nodes < 6 {
        return Err(GraphError::Parameter(format!(
            "base_nodes must be at least 6, got {base_nodes}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = base_nodes + MOTIF_NODES;
    let mut graphs = Vec::with_capacity(num_graphs);
    for i in 0..num_graphs {
        let label = i % 2;
        let mut edges = ba_tree(base_nodes, &mut rng);
        let template: &[(usize, usize)] = if label == 0 {
            &HOUSE_EDGES
        } else {
            &CYCLE_EDGES
        };
        edges.extend(template.iter().map(|&(u, v)| (base_nodes + u, base_nodes + v)));
        let anchor = rng.gen_range(0..base_nodes);
        let motif_end = base_nodes + rng.gen_range(0..MOTIF_NODES);
        edges.push((anchor, motif_end));
        edges.sort_unstable();

        let mut deg = vec![0usize; n];
        for &(u, v) in &edges {
            deg[u] += 1;
            deg[v] += 1;
        }
        let feats: Vec<f64> = deg.iter().flat_map(|&d| [1.0, d as f64]).collect();
        let motif = (0..n).map(|v| v >= base_nodes).collect();
        let graph = Graph::new(n, edges, Tensor::new(vec![n, 2], feats).expect("n×2"), label)?
            .with_motif_mask(motif)?;
        graphs.push(graph);
    }
    Ok(graphs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn motif_edge_count(g: &Graph) -> usize {
        let m = g.motif_mask().unwrap();
        g.edges().iter().filter(|&&(u, v)| m[u] && m[v]).count()
    }

    #[test]
    fn labels_are_balanced() {
        let gs = generate_ba_shapes(10, 8, 1).unwrap();
        assert_eq!(gs.iter().filter(|g| g.label() == 0).count(), 5);
        assert_eq!(gs.iter().filter(|g| g.label() == 1).count(), 5);
    }

    #[test]
    fn motif_templates() {
        let gs = generate_ba_shapes(2, 10, 3).unwrap();
        assert_eq!(gs[0].label(), 0);
        assert_eq!(motif_edge_count(&gs[0]), 8);
        assert_eq!(gs[1].label(), 1);
        assert_eq!(motif_edge_count(&gs[1]), 5);
        for g in &gs {
            assert_eq!(g.motif_mask().unwrap().iter().filter(|m| **m).count(), 5);
            // tree (base-1) + motif + bridge
            let motif = if g.label() == 0 { 8 } else { 5 };
            assert_eq!(g.num_edges(), 9 + motif + 1);
        }
    }

    #[test]
    fn features_are_constant_and_degree() {
        let gs = generate_ba_shapes(4, 12, 9).unwrap();
        for g in &gs {
            let deg = g.degrees();
            for v in 0..g.num_nodes() {
                assert_eq!(g.node_features().row(v), &[1.0, deg[v] as f64]);
            }
        }
    }

    #[test]
    fn small_base_rejected_and_seed_deterministic() {
        assert!(matches!(
            generate_ba_shapes(2, 5, 0),
            Err(GraphError::Parameter(_))
        ));
        assert_eq!(
            generate_ba_shapes(6, 10, 42).unwrap(),
            generate_ba_shapes(6, 10, 42).unwrap()
        );
    }
}
