//! 3D kd-tree for nearest-neighbor queries over point sets.

use crate::geom::{self, Vec3};

pub struct KdTree {
    points: Vec<Vec3>,
    // node i covers order[range]; flat recursion, median split
    order: Vec<u32>,
}

impl KdTree {
    pub fn build(points: &[Vec3]) -> Self {
        let mut order: Vec<u32> = (0..points.len() as u32).collect();
        let pts = points.to_vec();
        build_rec(&pts, &mut order, 0);
        KdTree { points: pts, order }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Returns `(index, squared distance)` of the nearest stored point.
    pub fn nearest(&self, q: Vec3) -> (usize, f64) {
        debug_assert!(!self.points.is_empty());
        let mut best = (usize::MAX, f64::INFINITY);
        self.nearest_rec(0, self.order.len(), 0, q, &mut best);
        best
    }

    fn nearest_rec(&self, lo: usize, hi: usize, depth: usize, q: Vec3, best: &mut (usize, f64)) {
        if lo >= hi {
            return;
        }
        let mid = (lo + hi) / 2;
        let axis = depth % 3;
        let pivot_idx = self.order[mid] as usize;
        let pivot = self.points[pivot_idx];
        let d2 = geom::dist2(q, pivot);
        if d2 < best.1 {
            *best = (pivot_idx, d2);
        }
        let delta = q[axis] - pivot[axis];
        let (near, far) = if delta < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.nearest_rec(near.0, near.1, depth + 1, q, best);
        if delta * delta < best.1 {
            self.nearest_rec(far.0, far.1, depth + 1, q, best);
        }
    }
}

fn build_rec(points: &[Vec3], order: &mut [u32], depth: usize) {
    if order.len() <= 1 {
        return;
    }
    let axis = depth % 3;
    let mid = order.len() / 2;
    order.select_nth_unstable_by(mid, |&a, &b| {
        points[a as usize][axis]
            .partial_cmp(&points[b as usize][axis])
            .unwrap()
            .then(a.cmp(&b))
    });
    let (l, rest) = order.split_at_mut(mid);
    build_rec(points, l, depth + 1);
    build_rec(points, &mut rest[1..], depth + 1);
}
