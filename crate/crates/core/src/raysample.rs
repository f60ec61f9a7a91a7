//! Converts scans and completed vehicle clouds into labeled ray samples:
//! scan-to-ray conversion, per-field ray assignment, and multi-view ring
//! sampling around a vehicle with a distance-threshold hit rule.

use crate::decomp::{Frame, TrackId};
use crate::field::RaySample;
use crate::geom::{ray_box_intersect, OrientedBox, Ray, Vec3};
use crate::spatial::KdTree;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

/// Hit threshold on the minimum point-to-ray distance, meters.
pub const DEFAULT_HIT_THRESHOLD: f64 = 0.05;

#[derive(Debug, Error)]
pub enum RaySampleError {
    #[error("cannot sample rays against an empty cloud")]
    EmptyCloud,
}

/// Ring-shaped ray origin layout around a vehicle: one ring per
/// (radius, height) pair, origins at uniform azimuth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RingSpec {
    /// Ring radii, meters; must place origins outside the box.
    pub radii: Vec<f64>,
    /// Ring heights relative to the box center, meters.
    pub heights: Vec<f64>,
    pub origins_per_ring: usize,
    pub rays_per_origin: usize,
}

impl Default for RingSpec {
    fn default() -> Self {
        RingSpec {
            radii: vec![4.0, 7.0, 10.0],
            heights: vec![0.5, 2.0, 4.0, 7.0],
            origins_per_ring: 36,
            rays_per_origin: 256,
        }
    }
}

/// One hit ray sample per scan return: origin at the sensor, direction
/// toward the world-frame point, range the Euclidean distance. No drop
/// samples are emitted; background drop behavior is governed by the
/// occupancy constraint at render time.
pub fn scan_to_rays(frame: &Frame) -> Vec<RaySample> {
    let origin = frame.sensor_position();
    let mut out = Vec::with_capacity(frame.points.len());
    for i in 0..frame.points.len() {
        let world = frame.point_in_world(i);
        let diff = world - origin;
        let range = diff.norm();
        if range <= 0.0 {
            continue;
        }
        let Some(direction) = diff.normalized() else {
            continue;
        };
        out.push(RaySample::hit(origin, direction, range));
    }
    out
}

/// Ray-to-field assignment for one frame's rays and boxes.
#[derive(Debug, Clone, Default)]
pub struct RayAssignment {
    /// Rays whose segment crosses each track's box, relabeled per track:
    /// hit iff the scan endpoint lies inside that box, drop otherwise (the
    /// ray traversed the box without touching the vehicle surface).
    pub per_track: BTreeMap<TrackId, Vec<RaySample>>,
    /// Rays whose endpoint lies inside no box; they may still traverse
    /// boxes, which is exactly the overlap the per-track drop rays carry.
    pub background: Vec<RaySample>,
}

/// Assigns scan rays to vehicle fields and the background field.
///
/// A ray joins every track whose box its segment `[0, range]` intersects.
/// The background set keeps rays whose hit point is inside no box. Rays
/// without a range go to the background unchanged.
pub fn assign_rays(rays: &[RaySample], boxes: &[(TrackId, OrientedBox)]) -> RayAssignment {
    let mut out = RayAssignment::default();
    for sample in rays {
        let Some(range) = sample.range else {
            out.background.push(*sample);
            continue;
        };
        let segment = Ray {
            origin: sample.origin,
            direction: sample.direction,
            max_range: range,
        };
        let endpoint = sample.origin + sample.direction * range;
        let mut endpoint_in_any = false;
        for (tid, bbox) in boxes {
            if ray_box_intersect(&segment, bbox).is_some() {
                let inside = bbox.contains(endpoint, 0.0);
                endpoint_in_any |= inside;
                let relabeled = if inside {
                    *sample
                } else {
                    RaySample::drop(sample.origin, sample.direction)
                };
                out.per_track.entry(*tid).or_default().push(relabeled);
            }
        }
        if !endpoint_in_any {
            out.background.push(*sample);
        }
    }
    out
}

/// Ray origins on the rings: radii outermost, then heights, then azimuth,
/// with azimuth step `2 pi / origins_per_ring` starting at zero.
pub fn ring_ray_origins(bbox: &OrientedBox, spec: &RingSpec) -> Vec<Vec3> {
    let mut out = Vec::with_capacity(spec.radii.len() * spec.heights.len() * spec.origins_per_ring);
    for &radius in &spec.radii {
        for &height in &spec.heights {
            for k in 0..spec.origins_per_ring {
                let az = std::f64::consts::TAU * k as f64 / spec.origins_per_ring as f64;
                out.push(
                    bbox.center + Vec3::new(radius * az.cos(), radius * az.sin(), height),
                );
            }
        }
    }
    out
}

/// Labels rays from the ring origins against a completed canonical cloud.
///
/// Directions aim at stratified-jittered targets inside the box
/// (deterministic per seed and origin index). A ray is a hit iff the
/// minimum point-to-ray distance over cloud points with positive projection
/// is below `hit_threshold`; the range is the along-ray projection of that
/// nearest point. Everything else is a drop sample.
pub fn sample_vehicle_rays(
    cloud: &[Vec3],
    bbox: &OrientedBox,
    spec: &RingSpec,
    hit_threshold: f64,
    seed: u64,
) -> Result<Vec<RaySample>, RaySampleError> {
    if cloud.is_empty() {
        return Err(RaySampleError::EmptyCloud);
    }
    let tree = KdTree::build(cloud);
    let origins = ring_ray_origins(bbox, spec);
    let lattice = target_lattice(bbox.size, spec.rays_per_origin);
    let mut out = Vec::with_capacity(origins.len() * spec.rays_per_origin);

    for (origin_idx, origin) in origins.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(origin_idx as u64 + 1);
        let mut emitted = 0usize;
        'cells: for cz in 0..lattice[2] {
            for cy in 0..lattice[1] {
                for cx in 0..lattice[0] {
                    if emitted == spec.rays_per_origin {
                        break 'cells;
                    }
                    let cell = [cx, cy, cz];
                    let mut local = Vec3::ZERO;
                    for a in 0..3 {
                        let extent = bbox.size.component(a);
                        let step = extent / lattice[a] as f64;
                        let jitter: f64 = rng.gen_range(0.0..1.0);
                        let coord = -extent * 0.5 + (cell[a] as f64 + jitter) * step;
                        match a {
                            0 => local.x = coord,
                            1 => local.y = coord,
                            _ => local.z = coord,
                        }
                    }
                    let target = bbox.from_local(local);
                    let Some(direction) = (target - *origin).normalized() else {
                        continue;
                    };
                    emitted += 1;
                    match tree.nearest_to_ray(*origin, direction) {
                        Some((_, dist, t)) if dist < hit_threshold => {
                            out.push(RaySample::hit(*origin, direction, t));
                        }
                        _ => out.push(RaySample::drop(*origin, direction)),
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Lattice dimensions for stratified targets: cells roughly proportional to
/// the box extents with at least `n` cells total.
fn target_lattice(size: Vec3, n: usize) -> [usize; 3] {
    let volume = size.x * size.y * size.z;
    let cell = (volume / n as f64).cbrt().max(1e-6);
    let mut dims = [
        ((size.x / cell).round() as usize).max(1),
        ((size.y / cell).round() as usize).max(1),
        ((size.z / cell).round() as usize).max(1),
    ];
    while dims[0] * dims[1] * dims[2] < n {
        // Grow the axis with the coarsest cells first.
        let mut widest = 0;
        for a in 1..3 {
            if size.component(a) / dims[a] as f64 > size.component(widest) / dims[widest] as f64 {
                widest = a;
            }
        }
        dims[widest] += 1;
    }
    dims
}
