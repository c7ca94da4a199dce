//! Train/validation/test splits for repeated-fold evaluation.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Graph, GraphError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub fold_index: usize,
    pub stratified: bool,
}

/// Split sizes for `n` items: floor each share, then hand the leftover
/// items to the largest fractional parts (earlier split wins ties).
pub fn split_sizes(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let exact: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut sizes = [0usize; 3];
    for i in 0..3 {
        // guard against 0.3 * 10 = 2.9999999999999996
        sizes[i] = (exact[i] + 1e-9).floor() as usize;
    }
    let assigned: usize = sizes.iter().sum();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let fa = exact[a] - sizes[a] as f64;
        let fb = exact[b] - sizes[b] as f64;
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        sizes[i] += 1;
    }
    sizes
}

/// Builds `num_folds` splits of `dataset`.
///
/// One shuffled order is fixed by `seed`; when every class has at least
/// `num_folds` members the order interleaves classes so any window of it is
/// close to label-stratified. Fold `f` rotates that order by `f·n/num_folds`
/// and cuts it into train, val and test.
pub fn split_folds(
    dataset: &[Graph],
    ratios: [f64; 3],
    num_folds: usize,
    seed: u64,
) -> Result<Vec<DatasetSplit>, GraphError> {
    if num_folds == 0 {
        return Err(GraphError::Parameter("num_folds must be at least 1".into()));
    }
    if ratios.iter().any(|r| *r < 0.0) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(GraphError::Parameter(format!(
            "split ratios {ratios:?} must be non-negative and sum to 1"
        )));
    }
    let n = dataset.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, g) in dataset.iter().enumerate() {
        by_class.entry(g.label()).or_default().push(i);
    }
    let stratified = by_class.values().all(|m| m.len() >= num_folds);
    let order: Vec<usize> = if stratified {
        let mut keyed: Vec<(f64, usize, usize)> = Vec::with_capacity(n);
        for (&class, members) in by_class.iter_mut() {
            members.shuffle(&mut rng);
            let c = members.len() as f64;
            for (rank, &id) in members.iter().enumerate() {
                keyed.push(((rank as f64 + 0.5) / c, class, id));
            }
        }
        keyed.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        keyed.into_iter().map(|(_, _, id)| id).collect()
    } else {
        log::warn!(
            "a class has fewer than {num_folds} members; falling back to unstratified folds"
        );
        let mut ids: Vec<usize> = (0..n).collect();
        ids.shuffle(&mut rng);
        ids
    };

    let [n_train, n_val, _] = split_sizes(n, ratios);
    Ok((0..num_folds)
        .map(|fold| {
            let mut rotated = order.clone();
            if n > 0 {
                rotated.rotate_left(fold * n / num_folds % n);
            }
            DatasetSplit {
                train: rotated[..n_train].to_vec(),
                val: rotated[n_train..n_train + n_val].to_vec(),
                test: rotated[n_train + n_val..].to_vec(),
                fold_index: fold,
                stratified,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn dataset(labels: &[usize]) -> Vec<Graph> {
        labels
            .iter()
            .map(|&l| Graph::new(1, vec![], Tensor::filled(&[1, 1], 1.0), l).unwrap())
            .collect()
    }

    #[test]
    fn sizes_floor_then_distribute() {
        assert_eq!(split_sizes(10, [0.6, 0.3, 0.1]), [6, 3, 1]);
        assert_eq!(split_sizes(100, [0.4, 0.5, 0.1]), [40, 50, 10]);
        assert_eq!(split_sizes(7, [0.5, 0.4, 0.1]), [3, 3, 1]);
        assert_eq!(split_sizes(188, [0.4, 0.5, 0.1]).iter().sum::<usize>(), 188);
    }

    #[test]
    fn folds_partition_the_dataset() {
        let ds = dataset(&(0..100).map(|i| i % 2).collect::<Vec<_>>());
        let splits = split_folds(&ds, [0.4, 0.5, 0.1], 5, 0).unwrap();
        assert_eq!(splits.len(), 5);
        for s in &splits {
            assert_eq!((s.train.len(), s.val.len(), s.test.len()), (40, 50, 10));
            let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..100).collect::<Vec<_>>());
            assert!(s.stratified);
            let pos = s.test.iter().filter(|&&i| ds[i].label() == 1).count();
            assert_eq!(pos, 5);
        }
        assert_ne!(splits[0].test, splits[1].test);
    }

    #[test]
    fn deterministic_given_seed() {
        let ds = dataset(&[0, 1, 0, 1, 1, 0, 0, 1, 1, 0]);
        let a = split_folds(&ds, [0.6, 0.3, 0.1], 3, 7).unwrap();
        let b = split_folds(&ds, [0.6, 0.3, 0.1], 3, 7).unwrap();
        assert_eq!(a, b);
        let c = split_folds(&ds, [0.6, 0.3, 0.1], 3, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn tiny_class_falls_back() {
        let ds = dataset(&[0, 0, 0, 0, 0, 0, 0, 0, 0, 1]);
        let s = split_folds(&ds, [0.6, 0.3, 0.1], 5, 0).unwrap();
        assert!(!s[0].stratified);
        assert_eq!(s[0].train.len() + s[0].val.len() + s[0].test.len(), 10);
    }

    #[test]
    fn bad_ratios_rejected() {
        let ds = dataset(&[0, 1]);
        assert!(split_folds(&ds, [0.5, 0.5, 0.1], 1, 0).is_err());
        assert!(split_folds(&ds, [0.5, 0.5, 0.0], 0, 0).is_err());
    }
}
