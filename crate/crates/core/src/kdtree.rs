//! Static 3D k-d tree.
//!
//! Results are ordered by ascending squared distance, ties broken by the
//! lower point index, so every query is deterministic and agrees exactly with
//! an exhaustive scan.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::error::{Error, Result};
use crate::se3::Vec3;

const LEAF_SIZE: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub dist2: f64,
}

impl Eq for Neighbor {}

impl Ord for Neighbor {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist2
            .total_cmp(&other.dist2)
            .then(self.index.cmp(&other.index))
    }
}

impl PartialOrd for Neighbor {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Clone)]
pub struct KdTree {
    points: Vec<Vec3>,
    // Implicit balanced tree: the median of every index range is its node.
    order: Vec<u32>,
}

impl KdTree {
    pub fn build(points: &[Vec3]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyCloud);
        }
        let mut order: Vec<u32> = (0..points.len() as u32).collect();
        build_range(points, &mut order, 0);
        Ok(KdTree {
            points: points.to_vec(),
            order,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    /// The `k` nearest points (fewer if the tree holds fewer).
    pub fn nearest(&self, query: &Vec3, k: usize) -> Vec<Neighbor> {
        if k == 0 {
            return Vec::new();
        }
        let mut heap = BinaryHeap::with_capacity(k + 1);
        self.knn_range(query, k, 0, self.order.len(), 0, &mut heap);
        heap.into_sorted_vec()
    }

    pub fn nearest_one(&self, query: &Vec3) -> Neighbor {
        self.nearest(query, 1)[0]
    }

    /// Every point with squared distance `<= radius²`, sorted.
    pub fn within_radius(&self, query: &Vec3, radius: f64) -> Vec<Neighbor> {
        let mut out = Vec::new();
        self.radius_range(query, radius * radius, 0, self.order.len(), 0, &mut out);
        out.sort_unstable();
        out
    }

    /// Whether any point lies within `radius` (inclusive).
    pub fn any_within(&self, query: &Vec3, radius: f64) -> bool {
        self.nearest_one(query).dist2 <= radius * radius
    }

    fn knn_range(
        &self,
        q: &Vec3,
        k: usize,
        lo: usize,
        hi: usize,
        depth: usize,
        heap: &mut BinaryHeap<Neighbor>,
    ) {
        if hi - lo <= LEAF_SIZE {
            for &i in &self.order[lo..hi] {
                self.offer(q, i as usize, k, heap);
            }
            return;
        }
        let mid = (lo + hi) / 2;
        let axis = depth % 3;
        let node = self.order[mid] as usize;
        let diff = q[axis] - self.points[node][axis];
        let (near, far) = if diff < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.knn_range(q, k, near.0, near.1, depth + 1, heap);
        self.offer(q, node, k, heap);
        // `<=` keeps equal-distance candidates with lower indices reachable.
        if heap.len() < k || diff * diff <= heap.peek().map_or(f64::INFINITY, |n| n.dist2) {
            self.knn_range(q, k, far.0, far.1, depth + 1, heap);
        }
    }

    fn offer(&self, q: &Vec3, index: usize, k: usize, heap: &mut BinaryHeap<Neighbor>) {
        let cand = Neighbor {
            index,
            dist2: (self.points[index] - q).norm_squared(),
        };
        if heap.len() < k {
            heap.push(cand);
        } else if let Some(worst) = heap.peek() {
            if cand < *worst {
                heap.pop();
                heap.push(cand);
            }
        }
    }

    fn radius_range(
        &self,
        q: &Vec3,
        r2: f64,
        lo: usize,
        hi: usize,
        depth: usize,
        out: &mut Vec<Neighbor>,
    ) {
        if hi - lo <= LEAF_SIZE {
            for &i in &self.order[lo..hi] {
                let d2 = (self.points[i as usize] - q).norm_squared();
                if d2 <= r2 {
                    out.push(Neighbor {
                        index: i as usize,
                        dist2: d2,
                    });
                }
            }
            return;
        }
        let mid = (lo + hi) / 2;
        let axis = depth % 3;
        let node = self.order[mid] as usize;
        let d2 = (self.points[node] - q).norm_squared();
        if d2 <= r2 {
            out.push(Neighbor { index: node, dist2: d2 });
        }
        let diff = q[axis] - self.points[node][axis];
        if diff <= 0.0 || diff * diff <= r2 {
            self.radius_range(q, r2, lo, mid, depth + 1, out);
        }
        if diff >= 0.0 || diff * diff <= r2 {
            self.radius_range(q, r2, mid + 1, hi, depth + 1, out);
        }
    }
}

fn build_range(points: &[Vec3], order: &mut [u32], depth: usize) {
    if order.len() <= LEAF_SIZE {
        return;
    }
    let axis = depth % 3;
    let mid = order.len() / 2;
    order.select_nth_unstable_by(mid, |&a, &b| {
        points[a as usize][axis]
            .total_cmp(&points[b as usize][axis])
            .then(a.cmp(&b))
    });
    let (left, rest) = order.split_at_mut(mid);
    build_range(points, left, depth + 1);
    build_range(points, &mut rest[1..], depth + 1);
}

/// Exhaustive k-NN with the same ordering contract as [`KdTree::nearest`].
pub fn brute_force_nearest(points: &[Vec3], query: &Vec3, k: usize) -> Vec<Neighbor> {
    let mut all: Vec<Neighbor> = points
        .iter()
        .enumerate()
        .map(|(index, p)| Neighbor {
            index,
            dist2: (p - query).norm_squared(),
        })
        .collect();
    all.sort_unstable();
    all.truncate(k);
    all
}
