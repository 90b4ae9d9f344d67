//! Exact nearest-neighbour search over standardized context parameters,
//! Gaussian kernel weights and the neighbour-average baseline recommender.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::domain::{N_COP, N_CXP};
use crate::error::{Error, Result};

pub const N_NEIGHBORS: usize = 15;
/// Lower bound applied to a degenerate kernel width.
pub const MIN_KERNEL_WIDTH: f64 = 1e-6;

pub type CxpPoint = [f64; N_CXP];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    /// Position of the point in the index (insertion order).
    pub index: usize,
    pub distance: f64,
}

fn squared_distance(a: &CxpPoint, b: &CxpPoint) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn distance(a: &CxpPoint, b: &CxpPoint) -> f64 {
    squared_distance(a, b).sqrt()
}

/// `exp(-d²/B²)` for the Euclidean distance `d` between `a` and `b`.
pub fn gaussian_weight(a: &CxpPoint, b: &CxpPoint, kernel_width: f64) -> f64 {
    weight_at(distance(a, b), kernel_width)
}

pub fn weight_at(d: f64, kernel_width: f64) -> f64 {
    (-(d * d) / (kernel_width * kernel_width)).exp()
}

// Max-heap key: the worst retained candidate sits on top.
#[derive(PartialEq)]
struct Candidate {
    d2: f64,
    index: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.d2.total_cmp(&other.d2).then(self.index.cmp(&other.index))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Immutable exact k-NN index with its kernel width.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborIndex {
    points: Vec<CxpPoint>,
    n_neighbors: usize,
    kernel_width: f64,
    degenerate: bool,
}

impl NeighborIndex {
    /// Builds the index with the default neighbourhood size of 15.
    pub fn build(points: Vec<CxpPoint>) -> Result<Self> {
        Self::with_neighbors(points, N_NEIGHBORS)
    }

    pub fn with_neighbors(points: Vec<CxpPoint>, n_neighbors: usize) -> Result<Self> {
        if n_neighbors == 0 {
            return Err(Error::InvalidConfig("n_neighbors must be >= 1".into()));
        }
        if points.len() <= n_neighbors {
            return Err(Error::TooFewPoints {
                needed: n_neighbors + 1,
                actual: points.len(),
            });
        }
        if let Some(bad) = points.iter().position(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite(format!("index point {bad}")));
        }
        let mut index = NeighborIndex {
            points,
            n_neighbors,
            kernel_width: 1.0,
            degenerate: false,
        };
        let b = index.mean_neighbor_distance_std();
        if b < MIN_KERNEL_WIDTH {
            log::warn!("degenerate kernel width {b}; using {MIN_KERNEL_WIDTH}");
            index.kernel_width = MIN_KERNEL_WIDTH;
            index.degenerate = true;
        } else {
            index.kernel_width = b;
        }
        Ok(index)
    }

    // Average over points of the std of distances to their k nearest others.
    fn mean_neighbor_distance_std(&self) -> f64 {
        let k = self.n_neighbors;
        let mut acc = 0.0;
        for (i, p) in self.points.iter().enumerate() {
            let nn = self.search(p, k, |j| j != i);
            let d: Vec<f64> = nn.iter().map(|n| n.distance).collect();
            acc += crate::stats::std_pop(&d);
        }
        acc / self.points.len() as f64
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, i: usize) -> &CxpPoint {
        &self.points[i]
    }

    pub fn n_neighbors(&self) -> usize {
        self.n_neighbors
    }

    pub fn kernel_width(&self) -> f64 {
        self.kernel_width
    }

    /// True when the kernel width had to be floored.
    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }

    pub fn weight(&self, d: f64) -> f64 {
        weight_at(d, self.kernel_width)
    }

    fn search(&self, q: &CxpPoint, k: usize, keep: impl Fn(usize) -> bool) -> Vec<Neighbor> {
        let mut heap: BinaryHeap<Candidate> = BinaryHeap::with_capacity(k + 1);
        for (index, p) in self.points.iter().enumerate() {
            if !keep(index) {
                continue;
            }
            let d2 = squared_distance(q, p);
            if heap.len() < k {
                heap.push(Candidate { d2, index });
            } else if let Some(top) = heap.peek() {
                // Strict: an equal distance keeps the earlier insertion.
                if d2 < top.d2 {
                    heap.pop();
                    heap.push(Candidate { d2, index });
                }
            }
        }
        heap.into_sorted_vec()
            .into_iter()
            .map(|c| Neighbor {
                index: c.index,
                distance: c.d2.sqrt(),
            })
            .collect()
    }

    /// The `k` nearest points, ascending by distance, ties by insertion order.
    pub fn query(&self, q: &CxpPoint, k: usize) -> Result<Vec<Neighbor>> {
        if k > self.len() {
            return Err(Error::KExceedsIndex { k, size: self.len() });
        }
        Ok(self.search(q, k, |_| true))
    }

    /// Like [`query`](Self::query) but only over points accepted by `eligible`;
    /// fails when fewer than `k` points qualify.
    pub fn query_filtered(&self, q: &CxpPoint, k: usize, eligible: impl Fn(usize) -> bool) -> Result<Vec<Neighbor>> {
        if k > self.len() {
            return Err(Error::KExceedsIndex { k, size: self.len() });
        }
        let found = self.search(q, k, eligible);
        if found.len() < k {
            return Err(Error::TooFewEligibleNeighbors {
                needed: k,
                actual: found.len(),
            });
        }
        Ok(found)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineRecommendation {
    /// Suggested CoP change in the units of the supplied CoP values.
    pub deltas: [f64; N_COP],
    /// Set when no neighbour scores strictly higher than the current sample.
    pub no_improvement: bool,
    /// Neighbours that survived the score filter.
    pub contributing: usize,
}

/// Gaussian-weighted average CoP offset towards the better-scoring
/// neighbours among the `n_neighbors` closest in context.
///
/// `cops[i]` and `scores[i]` belong to index point `i`. The sum is divided by
/// the full neighbourhood size even when the score filter drops terms.
pub fn baseline_recommend(
    index: &NeighborIndex,
    cxp: &CxpPoint,
    cop: &[f64; N_COP],
    score: f64,
    cops: &[[f64; N_COP]],
    scores: &[f64],
) -> Result<BaselineRecommendation> {
    if cops.len() != index.len() || scores.len() != index.len() {
        return Err(Error::DimensionMismatch {
            expected: index.len(),
            actual: cops.len().min(scores.len()),
        });
    }
    let n = index.n_neighbors();
    let neighbors = index.query(cxp, n)?;
    let mut deltas = [0.0; N_COP];
    let mut contributing = 0;
    for nb in neighbors {
        if scores[nb.index] > score {
            contributing += 1;
            let w = index.weight(nb.distance);
            for (d, (cj, ck)) in deltas.iter_mut().zip(cops[nb.index].iter().zip(cop)) {
                *d += w * (cj - ck);
            }
        }
    }
    deltas.iter_mut().for_each(|d| *d /= n as f64);
    Ok(BaselineRecommendation {
        deltas,
        no_improvement: contributing == 0,
        contributing,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn on_line(x: f64) -> CxpPoint {
        let mut p = [0.0; N_CXP];
        p[0] = x;
        p
    }

    fn brute_force(points: &[CxpPoint], q: &CxpPoint, k: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..points.len()).collect();
        idx.sort_by(|&a, &b| {
            squared_distance(q, &points[a])
                .total_cmp(&squared_distance(q, &points[b]))
                .then(a.cmp(&b))
        });
        idx.truncate(k);
        idx
    }

    #[test]
    fn identical_points_floor_the_kernel_width() {
        let index = NeighborIndex::build(vec![on_line(3.0); 16]).unwrap();
        assert_eq!(index.kernel_width(), MIN_KERNEL_WIDTH);
        assert!(index.is_degenerate());
    }

    #[test]
    fn too_few_points() {
        assert!(matches!(
            NeighborIndex::build(vec![on_line(0.0); 15]),
            Err(Error::TooFewPoints { needed: 16, actual: 15 })
        ));
    }

    #[test]
    fn kernel_width_on_unit_line() {
        let pts: Vec<CxpPoint> = (0..100).map(|i| on_line(i as f64)).collect();
        let index = NeighborIndex::build(pts.clone()).unwrap();
        // Oracle: full O(n^2) distance lists.
        let mut acc = 0.0;
        for i in 0..100 {
            let mut d: Vec<f64> = (0..100).filter(|&j| j != i).map(|j| (i as f64 - j as f64).abs()).collect();
            d.sort_by(f64::total_cmp);
            d.truncate(15);
            let m = d.iter().sum::<f64>() / 15.0;
            acc += (d.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 15.0).sqrt();
        }
        assert!((index.kernel_width() - acc / 100.0).abs() < 1e-12);
    }

    #[test]
    fn point_is_its_own_nearest() {
        let pts: Vec<CxpPoint> = (0..20).map(|i| on_line(i as f64 * 0.5)).collect();
        let index = NeighborIndex::build(pts.clone()).unwrap();
        let nn = index.query(&pts[7], 1).unwrap();
        assert_eq!(nn[0].index, 7);
        assert_eq!(nn[0].distance, 0.0);
    }

    #[test]
    fn k_one_on_small_index_and_k_too_large() {
        let mut pts: Vec<CxpPoint> = (0..16).map(|i| on_line(10.0 + i as f64)).collect();
        pts[3] = on_line(0.4);
        let index = NeighborIndex::build(pts).unwrap();
        assert_eq!(index.query(&on_line(0.0), 1).unwrap()[0].index, 3);
        assert!(matches!(index.query(&on_line(0.0), 17), Err(Error::KExceedsIndex { k: 17, size: 16 })));
    }

    #[test]
    fn duplicates_come_before_farther_points() {
        let mut pts: Vec<CxpPoint> = (0..20).map(|i| on_line(5.0 + i as f64)).collect();
        pts[4] = on_line(1.0);
        pts[11] = on_line(1.0);
        let index = NeighborIndex::build(pts).unwrap();
        let nn = index.query(&on_line(0.0), 3).unwrap();
        assert_eq!(nn.iter().map(|n| n.index).collect::<Vec<_>>(), vec![4, 11, 0]);
    }

    #[test]
    fn matches_brute_force_on_random_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let pts: Vec<CxpPoint> = (0..50).map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0))).collect();
        let index = NeighborIndex::build(pts.clone()).unwrap();
        for _ in 0..20 {
            let q: CxpPoint = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            let got: Vec<usize> = index.query(&q, 15).unwrap().iter().map(|n| n.index).collect();
            assert_eq!(got, brute_force(&pts, &q, 15));
        }
    }

    #[test]
    fn filtered_query_skips_and_counts() {
        let pts: Vec<CxpPoint> = (0..30).map(|i| on_line(i as f64)).collect();
        let index = NeighborIndex::build(pts).unwrap();
        let nn = index.query_filtered(&on_line(0.0), 3, |i| i % 2 == 1).unwrap();
        assert_eq!(nn.iter().map(|n| n.index).collect::<Vec<_>>(), vec![1, 3, 5]);
        assert!(matches!(
            index.query_filtered(&on_line(0.0), 16, |i| i < 10),
            Err(Error::TooFewEligibleNeighbors { needed: 16, actual: 10 })
        ));
    }

    #[test]
    fn gaussian_weight_values() {
        let a = on_line(0.0);
        assert_eq!(gaussian_weight(&a, &a, 2.0), 1.0);
        assert!((gaussian_weight(&a, &on_line(2.0), 2.0) - (-1.0f64).exp()).abs() < 1e-15);
        assert!((gaussian_weight(&a, &on_line(4.0), 2.0) - 0.018_315_638_888_734_18).abs() < 1e-15);
    }

    fn baseline_fixture() -> (NeighborIndex, Vec<[f64; N_COP]>, Vec<f64>) {
        let pts: Vec<CxpPoint> = (0..20).map(|i| on_line(i as f64)).collect();
        let index = NeighborIndex::build(pts).unwrap();
        let cops = vec![[1.0, 2.0, 3.0, 4.0, 5.0]; 20];
        (index, cops, vec![0.0; 20])
    }

    #[test]
    fn baseline_zero_when_cops_agree() {
        let (index, cops, mut scores) = baseline_fixture();
        scores.iter_mut().for_each(|s| *s = 1.0);
        let r = baseline_recommend(&index, &on_line(0.0), &[1.0, 2.0, 3.0, 4.0, 5.0], 0.0, &cops, &scores).unwrap();
        assert_eq!(r.deltas, [0.0; N_COP]);
        assert!(!r.no_improvement);
    }

    #[test]
    fn baseline_single_surviving_term() {
        let (index, mut cops, mut scores) = baseline_fixture();
        cops[0] = [2.0, 2.0, 3.0, 4.0, 5.0];
        scores[0] = 1.0;
        let r = baseline_recommend(&index, &on_line(0.0), &[1.0, 2.0, 3.0, 4.0, 5.0], 0.5, &cops, &scores).unwrap();
        assert_eq!(r.contributing, 1);
        assert!((r.deltas[0] - 1.0 / 15.0).abs() < 1e-15);
        assert_eq!(&r.deltas[1..], &[0.0; 4]);
    }

    #[test]
    fn baseline_no_improvement() {
        let (index, cops, scores) = baseline_fixture();
        let r = baseline_recommend(&index, &on_line(0.0), &[0.0; N_COP], 0.0, &cops, &scores).unwrap();
        assert!(r.no_improvement);
        assert_eq!(r.deltas, [0.0; N_COP]);
    }
}
