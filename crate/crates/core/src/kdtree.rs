//! Exact k-nearest-neighbour search over fixed-dimension `f32` vectors.
//!
//! Squared distances are accumulated in `f64`. Results are ordered by
//! `(distance, id)` so equal distances resolve the same way as a sorted
//! linear scan.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

const LEAF_SIZE: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub id: u64,
    pub squared_distance: f64,
}

impl Neighbor {
    pub fn distance(&self) -> f64 {
        self.squared_distance.sqrt()
    }

    fn key(&self) -> (f64, u64) {
        (self.squared_distance, self.id)
    }
}

impl Eq for Neighbor {}

impl PartialOrd for Neighbor {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Neighbor {
    fn cmp(&self, other: &Self) -> Ordering {
        let (a, b) = (self.key(), other.key());
        a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
    }
}

#[inline]
pub fn squared_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum()
}

#[derive(Debug, Clone)]
enum Node {
    Leaf { start: usize, end: usize },
    Split { dim: usize, value: f32, left: usize, right: usize },
}

#[derive(Debug, Clone)]
pub struct KdTree {
    dim: usize,
    points: Vec<f32>,
    ids: Vec<u64>,
    nodes: Vec<Node>,
}

impl KdTree {
    /// Builds the tree over `points` (row-major, `ids.len()` rows of `dim`).
    pub fn build(dim: usize, points: Vec<f32>, ids: Vec<u64>) -> Self {
        assert!(dim > 0);
        assert_eq!(points.len(), dim * ids.len());
        let n = ids.len();
        let mut order: Vec<usize> = (0..n).collect();
        let mut tree = Self {
            dim,
            points: Vec::with_capacity(points.len()),
            ids: Vec::with_capacity(n),
            nodes: Vec::new(),
        };
        if n > 0 {
            tree.build_node(&points, &ids, &mut order, 0, n);
        }
        for &i in &order {
            tree.points.extend_from_slice(&points[i * dim..(i + 1) * dim]);
            tree.ids.push(ids[i]);
        }
        tree
    }

    fn build_node(&mut self, points: &[f32], ids: &[u64], order: &mut [usize], start: usize, end: usize) -> usize {
        let slot = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return slot;
        }
        let dim = self.dim;
        let coord = |i: usize, d: usize| points[i * dim + d];
        let spread = |d: usize| {
            let (lo, hi) = order[start..end]
                .iter()
                .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &i| (lo.min(coord(i, d)), hi.max(coord(i, d))));
            hi - lo
        };
        let split_dim = (0..dim).max_by(|&a, &b| spread(a).total_cmp(&spread(b)).then(b.cmp(&a))).unwrap();
        if spread(split_dim) <= 0.0 {
            self.nodes.push(Node::Leaf { start, end });
            return slot;
        }
        let mid = (start + end) / 2;
        order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            coord(a, split_dim).total_cmp(&coord(b, split_dim)).then(ids[a].cmp(&ids[b]))
        });
        let value = coord(order[mid], split_dim);
        self.nodes.push(Node::Leaf { start, end });
        let left = self.build_node(points, ids, order, start, mid);
        let right = self.build_node(points, ids, order, mid, end);
        self.nodes[slot] = Node::Split {
            dim: split_dim,
            value,
            left,
            right,
        };
        slot
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// The `min(k, len)` nearest points, ascending by `(distance, id)`.
    pub fn knn(&self, query: &[f32], k: usize) -> Vec<Neighbor> {
        assert_eq!(query.len(), self.dim);
        if k == 0 || self.is_empty() {
            return Vec::new();
        }
        let mut heap = BinaryHeap::with_capacity(k + 1);
        self.search(0, query, k, &mut heap);
        heap.into_sorted_vec()
    }

    fn search(&self, node: usize, q: &[f32], k: usize, heap: &mut BinaryHeap<Neighbor>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for i in start..end {
                    let n = Neighbor {
                        id: self.ids[i],
                        squared_distance: squared_distance(q, &self.points[i * self.dim..(i + 1) * self.dim]),
                    };
                    if heap.len() < k {
                        heap.push(n);
                    } else if n < *heap.peek().unwrap() {
                        heap.pop();
                        heap.push(n);
                    }
                }
            }
            Node::Split { dim, value, left, right } => {
                let diff = f64::from(q[dim]) - f64::from(value);
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search(near, q, k, heap);
                // Keep equal-distance subtrees so id tie-breaks stay exact.
                if heap.len() < k || diff * diff <= heap.peek().unwrap().squared_distance {
                    self.search(far, q, k, heap);
                }
            }
        }
    }
}

/// Sorted linear scan; the reference for [`KdTree::knn`].
pub fn linear_knn(dim: usize, points: &[f32], ids: &[u64], query: &[f32], k: usize) -> Vec<Neighbor> {
    let mut all: Vec<Neighbor> = ids
        .iter()
        .enumerate()
        .map(|(i, &id)| Neighbor {
            id,
            squared_distance: squared_distance(query, &points[i * dim..(i + 1) * dim]),
        })
        .collect();
    all.sort();
    all.truncate(k);
    all
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn exact_against_scan_with_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dim = 4;
        // Coarse integer coordinates force many equal distances.
        let n = 500;
        let points: Vec<f32> = (0..n * dim).map(|_| rng.gen_range(0..4) as f32).collect();
        let ids: Vec<u64> = (0..n as u64).map(|i| i * 7 % 1009).collect();
        let tree = KdTree::build(dim, points.clone(), ids.clone());
        for _ in 0..50 {
            let q: Vec<f32> = (0..dim).map(|_| rng.gen_range(0..4) as f32).collect();
            for k in [1, 5, 64, 1000] {
                assert_eq!(tree.knn(&q, k), linear_knn(dim, &points, &ids, &q, k));
            }
        }
    }

    #[test]
    fn empty_and_zero_k() {
        let tree = KdTree::build(3, Vec::new(), Vec::new());
        assert!(tree.knn(&[0.0; 3], 4).is_empty());
        let tree = KdTree::build(3, vec![1.0; 3], vec![9]);
        assert!(tree.knn(&[0.0; 3], 0).is_empty());
        assert_eq!(tree.knn(&[1.0; 3], 3), vec![Neighbor { id: 9, squared_distance: 0.0 }]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn matches_linear_scan(seed in any::<u64>(), n in 1usize..600, k in 1usize..80) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dim = 8;
            let points: Vec<f32> = (0..n * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let ids: Vec<u64> = (0..n as u64).collect();
            let tree = KdTree::build(dim, points.clone(), ids.clone());
            let q: Vec<f32> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            prop_assert_eq!(tree.knn(&q, k), linear_knn(dim, &points, &ids, &q, k));
        }
    }
}
