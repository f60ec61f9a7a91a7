//! K-d tree over 3D points with two query shapes: nearest neighbor to a
//! point, and minimum perpendicular distance from a ray to the point set.

use crate::geom::{Aabb, Vec3};

/// Perpendicular distance from `p` to the ray `(origin, dir)`, together with
/// the along-ray projection. Points at or behind the origin are excluded.
///
/// The exact expression is part of the contract: `u = p - origin`,
/// `t = u . dir`, distance `= |u - dir * t|`. Independent checks must use the
/// same expression to compare results exactly.
pub fn ray_point_distance(origin: Vec3, dir: Vec3, p: Vec3) -> Option<(f64, f64)> {
    let u = p - origin;
    let t = u.dot(dir);
    if t <= 0.0 {
        return None;
    }
    let perp = u - dir * t;
    Some((perp.norm(), t))
}

#[derive(Debug, Clone)]
struct Node {
    /// Index into `points` of the splitting point.
    idx: u32,
    axis: u8,
    bounds: Aabb,
    left: i32,
    right: i32,
}

/// Static k-d tree; build once, query from any thread.
#[derive(Debug, Clone)]
pub struct KdTree {
    points: Vec<Vec3>,
    nodes: Vec<Node>,
    root: i32,
}

impl KdTree {
    pub fn build(points: &[Vec3]) -> Self {
        let mut order: Vec<u32> = (0..points.len() as u32).collect();
        let mut tree = KdTree {
            points: points.to_vec(),
            nodes: Vec::with_capacity(points.len()),
            root: -1,
        };
        tree.root = tree.build_rec(&mut order);
        tree
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

    fn build_rec(&mut self, order: &mut [u32]) -> i32 {
        if order.is_empty() {
            return -1;
        }
        let bounds = Aabb::from_points(order.iter().map(|&i| &self.points[i as usize]))
            .expect("non-empty slice");
        let ext = bounds.extent();
        let axis = if ext.x >= ext.y && ext.x >= ext.z {
            0
        } else if ext.y >= ext.z {
            1
        } else {
            2
        };
        let mid = order.len() / 2;
        let points = &self.points;
        order.select_nth_unstable_by(mid, |&a, &b| {
            points[a as usize]
                .component(axis)
                .total_cmp(&points[b as usize].component(axis))
        });
        let idx = order[mid];
        let node_id = self.nodes.len() as i32;
        self.nodes.push(Node {
            idx,
            axis: axis as u8,
            bounds,
            left: -1,
            right: -1,
        });
        let (lo, hi) = order.split_at_mut(mid);
        let left = self.build_rec(lo);
        let right = self.build_rec(&mut hi[1..]);
        self.nodes[node_id as usize].left = left;
        self.nodes[node_id as usize].right = right;
        node_id
    }

    /// Index and distance of the point nearest to `p`. Ties resolve to the
    /// lowest index.
    pub fn nearest(&self, p: Vec3) -> Option<(usize, f64)> {
        if self.root < 0 {
            return None;
        }
        let mut best = (usize::MAX, f64::INFINITY);
        self.nearest_rec(self.root, p, &mut best);
        Some((best.0, best.1.sqrt()))
    }

    fn nearest_rec(&self, node_id: i32, p: Vec3, best: &mut (usize, f64)) {
        let node = &self.nodes[node_id as usize];
        if aabb_distance_squared(&node.bounds, p) > best.1 {
            return;
        }
        let idx = node.idx as usize;
        let d2 = (self.points[idx] - p).norm_squared();
        if d2 < best.1 || (d2 == best.1 && idx < best.0) {
            *best = (idx, d2);
        }
        let axis = node.axis as usize;
        let split = self.points[idx].component(axis);
        let (first, second) = if p.component(axis) < split {
            (node.left, node.right)
        } else {
            (node.right, node.left)
        };
        if first >= 0 {
            self.nearest_rec(first, p, best);
        }
        if second >= 0 {
            self.nearest_rec(second, p, best);
        }
    }

    /// Point with the minimum perpendicular distance to the ray, considering
    /// only points with a positive along-ray projection. Returns
    /// `(index, perpendicular distance, projection)`. Ties resolve to the
    /// lowest index. `dir` must be unit length.
    pub fn nearest_to_ray(&self, origin: Vec3, dir: Vec3) -> Option<(usize, f64, f64)> {
        if self.root < 0 {
            return None;
        }
        let mut best: Option<(usize, f64, f64)> = None;
        self.ray_rec(self.root, origin, dir, &mut best);
        best
    }

    fn ray_rec(&self, node_id: i32, origin: Vec3, dir: Vec3, best: &mut Option<(usize, f64, f64)>) {
        let node = &self.nodes[node_id as usize];
        if let Some((_, best_dist, _)) = best {
            // Lower bound: distance from the infinite line to the subtree's
            // bounding sphere. Dropping the positive-projection constraint
            // and using the sphere only loosens the bound, so pruning on it
            // is safe.
            let center = node.bounds.center();
            let radius = node.bounds.extent().norm() * 0.5;
            let u = center - origin;
            let line_dist = (u - dir * u.dot(dir)).norm();
            if line_dist - radius > *best_dist {
                return;
            }
        }
        let idx = node.idx as usize;
        if let Some((dist, t)) = ray_point_distance(origin, dir, self.points[idx]) {
            let better = match best {
                None => true,
                Some((bi, bd, _)) => dist < *bd || (dist == *bd && idx < *bi),
            };
            if better {
                *best = Some((idx, dist, t));
            }
        }
        if node.left >= 0 {
            self.ray_rec(node.left, origin, dir, best);
        }
        if node.right >= 0 {
            self.ray_rec(node.right, origin, dir, best);
        }
    }
}

fn aabb_distance_squared(bb: &Aabb, p: Vec3) -> f64 {
    let dx = (bb.min.x - p.x).max(0.0).max(p.x - bb.max.x);
    let dy = (bb.min.y - p.y).max(0.0).max(p.y - bb.max.y);
    let dz = (bb.min.z - p.z).max(0.0).max(p.z - bb.max.z);
    dx * dx + dy * dy + dz * dz
}

/// Centroid-per-voxel downsampling. Output order follows the first point
/// seen in each voxel, so the result is deterministic for a given input
/// order.
pub fn voxel_downsample(points: &[Vec3], voxel: f64) -> Vec<Vec3> {
    use std::collections::HashMap;
    assert!(voxel > 0.0, "voxel size must be positive");
    let mut slots: HashMap<(i64, i64, i64), usize> = HashMap::new();
    let mut sums: Vec<(Vec3, usize)> = Vec::new();
    for p in points {
        let key = (
            (p.x / voxel).floor() as i64,
            (p.y / voxel).floor() as i64,
            (p.z / voxel).floor() as i64,
        );
        match slots.get(&key) {
            Some(&slot) => {
                sums[slot].0 = sums[slot].0 + *p;
                sums[slot].1 += 1;
            }
            None => {
                slots.insert(key, sums.len());
                sums.push((*p, 1));
            }
        }
    }
    sums.into_iter()
        .map(|(sum, n)| sum * (1.0 / n as f64))
        .collect()
}
