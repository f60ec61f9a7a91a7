//! Scene decomposition: split annotated scans into per-vehicle point sets in
//! canonical box coordinates and a clean static background, with the
//! completion-style preprocessing (best-frame selection, mirror symmetry
//! augmentation, ground filtering) and pairwise fragment alignment.

use crate::geom::{estimate_rigid_transform, OrientedBox, RigidTransform, Vec3};
use crate::spatial::{voxel_downsample, KdTree};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

pub type TrackId = u64;

#[derive(Debug, Error)]
pub enum DecompError {
    #[error("track has no frames")]
    EmptyTrack,
    #[error("fragment alignment found {found} correspondences within the gate, need {needed}")]
    NoOverlap { found: usize, needed: usize },
}

/// One annotated scan: points in the sensor frame plus the sensor pose and
/// world-frame boxes.
#[derive(Debug, Clone)]
pub struct Frame {
    pub frame_id: u64,
    pub timestamp: f64,
    /// Sensor-to-world pose.
    pub sensor_pose: RigidTransform,
    pub points: Vec<Vec3>,
    pub boxes: Vec<(TrackId, OrientedBox)>,
}

impl Frame {
    pub fn sensor_position(&self) -> Vec3 {
        self.sensor_pose.translation
    }

    pub fn point_in_world(&self, i: usize) -> Vec3 {
        self.sensor_pose.apply_point(self.points[i])
    }
}

/// Per-frame observation of one track.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrackObservation {
    pub frame_id: u64,
    /// World-frame annotation box at this frame.
    pub bbox: OrientedBox,
    /// Extracted points in canonical box coordinates (box-local frame).
    pub points: Vec<Vec3>,
}

/// One tracked vehicle across a fragment. The first observation's box
/// defines the canonical frame; extracted points are stored in box-local
/// coordinates, which are invariant across frames for a rigidly moving
/// vehicle.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrackedVehicle {
    pub track_id: TrackId,
    pub observations: Vec<TrackObservation>,
    pub reconstructable: bool,
}

impl TrackedVehicle {
    /// Canonical box: first-frame size, centered at the origin with zero
    /// yaw, since points are stored box-locally.
    pub fn canonical_box(&self) -> Option<OrientedBox> {
        let first = self.observations.first()?;
        Some(OrientedBox {
            center: Vec3::ZERO,
            size: first.bbox.size,
            yaw: 0.0,
        })
    }

    /// World-from-canonical pose at the given observation index.
    pub fn pose_at(&self, obs_idx: usize) -> RigidTransform {
        self.observations[obs_idx].bbox.pose()
    }
}

/// World-frame static background points with their source fragment ids.
#[derive(Debug, Clone, Default)]
pub struct BackgroundCloud {
    pub points: Vec<Vec3>,
    pub source_fragments: Vec<usize>,
}

impl BackgroundCloud {
    pub fn new(points: Vec<Vec3>, fragment: usize) -> Self {
        BackgroundCloud {
            points,
            source_fragments: vec![fragment],
        }
    }

    pub fn merge(&mut self, other: BackgroundCloud) {
        self.points.extend(other.points);
        for f in other.source_fragments {
            if !self.source_fragments.contains(&f) {
                self.source_fragments.push(f);
            }
        }
    }
}

/// Splits one frame into per-track point sets (canonical coordinates) and
/// residual background points (world frame).
///
/// Each point goes to the first box containing it, with boxes visited in
/// ascending track id as the declared priority order; boxes are inflated by
/// `inflation` meters per half extent to tolerate annotation jitter.
pub fn extract_vehicle_points(
    frame: &Frame,
    inflation: f64,
) -> (BTreeMap<TrackId, Vec<Vec3>>, Vec<Vec3>) {
    let mut boxes: Vec<&(TrackId, OrientedBox)> = frame.boxes.iter().collect();
    boxes.sort_by_key(|(tid, _)| *tid);

    let mut per_track: BTreeMap<TrackId, Vec<Vec3>> = BTreeMap::new();
    let mut background = Vec::new();
    for i in 0..frame.points.len() {
        let world = frame.point_in_world(i);
        let mut assigned = false;
        for (tid, bbox) in &boxes {
            if bbox.contains(world, inflation) {
                per_track.entry(*tid).or_default().push(bbox.to_local(world));
                assigned = true;
                break;
            }
        }
        if !assigned {
            background.push(world);
        }
    }
    (per_track, background)
}

/// Marks the vehicle reconstructable iff the best single frame observes at
/// least `min_points` points. Returns the kept flag.
pub fn filter_unreconstructable(vehicle: &mut TrackedVehicle, min_points: usize) -> bool {
    let best = vehicle
        .observations
        .iter()
        .map(|o| o.points.len())
        .max()
        .unwrap_or(0);
    vehicle.reconstructable = best >= min_points;
    vehicle.reconstructable
}

/// Index of the observation with the most points; ties break to the
/// earliest frame.
pub fn select_best_frame(vehicle: &TrackedVehicle) -> Result<usize, DecompError> {
    if vehicle.observations.is_empty() {
        return Err(DecompError::EmptyTrack);
    }
    let mut best = 0usize;
    for (i, obs) in vehicle.observations.iter().enumerate() {
        if obs.points.len() > vehicle.observations[best].points.len() {
            best = i;
        }
    }
    Ok(best)
}

/// Duplicate-merge tolerance for mirror augmentation, meters.
const MIRROR_DEDUP: f64 = 1e-3;

/// Reflects the cloud across the box's longitudinal vertical plane (lateral
/// coordinate negated) and unions it with the input. Reflections within
/// 1 mm of an existing point are dropped, so points on the symmetry plane do
/// not duplicate and the operation is idempotent.
pub fn mirror_augment(points: &[Vec3], _bbox: &OrientedBox) -> Vec<Vec3> {
    if points.is_empty() {
        return Vec::new();
    }
    let tree = KdTree::build(points);
    let mut out = points.to_vec();
    for p in points {
        let reflected = Vec3::new(p.x, -p.y, p.z);
        let (_, dist) = tree.nearest(reflected).expect("non-empty tree");
        if dist >= MIRROR_DEDUP {
            out.push(reflected);
        }
    }
    out
}

/// Removes points whose height above the box bottom face is below `band`
/// meters. Points are in canonical box coordinates, so the bottom face sits
/// at `-size.z / 2`.
pub fn filter_ground_points(points: &[Vec3], bbox: &OrientedBox, band: f64) -> Vec<Vec3> {
    let bottom = -bbox.size.z * 0.5;
    points
        .iter()
        .filter(|p| p.z - bottom >= band)
        .copied()
        .collect()
}

/// Removes every point inside any pseudo-label box inflated by `margin`
/// meters per half extent.
pub fn remove_dynamic_background(
    background: &BackgroundCloud,
    pseudo_boxes: &[OrientedBox],
    margin: f64,
) -> BackgroundCloud {
    let points = background
        .points
        .iter()
        .filter(|p| !pseudo_boxes.iter().any(|b| b.contains(**p, margin)))
        .copied()
        .collect();
    BackgroundCloud {
        points,
        source_fragments: background.source_fragments.clone(),
    }
}

/// Pairwise ICP settings for fragment alignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IcpParams {
    /// Downsampling voxel for both clouds, meters.
    pub voxel: f64,
    pub max_iterations: usize,
    /// Correspondence distance gate, meters.
    pub gate: f64,
    pub min_correspondences: usize,
    /// Stop when the per-iteration pose update moves points less than this.
    pub convergence: f64,
}

impl Default for IcpParams {
    fn default() -> Self {
        IcpParams {
            voxel: 0.2,
            max_iterations: 50,
            gate: 1.0,
            min_correspondences: 20,
            convergence: 1e-6,
        }
    }
}

/// Point-to-point ICP of `source` onto `target`. Returns the correction
/// transform mapping source coordinates into the target's frame.
pub fn icp_align(
    source: &[Vec3],
    target: &[Vec3],
    params: &IcpParams,
) -> Result<RigidTransform, DecompError> {
    let src = voxel_downsample(source, params.voxel);
    let dst = voxel_downsample(target, params.voxel);
    let tree = KdTree::build(&dst);

    let mut correction = RigidTransform::identity();
    let mut moved: Vec<Vec3> = src.clone();
    for _ in 0..params.max_iterations {
        let mut pairs_from = Vec::new();
        let mut pairs_to = Vec::new();
        for p in &moved {
            if let Some((idx, dist)) = tree.nearest(*p) {
                if dist <= params.gate {
                    pairs_from.push(*p);
                    pairs_to.push(dst[idx]);
                }
            }
        }
        if pairs_from.len() < params.min_correspondences {
            return Err(DecompError::NoOverlap {
                found: pairs_from.len(),
                needed: params.min_correspondences,
            });
        }
        let Some(step) = estimate_rigid_transform(&pairs_from, &pairs_to) else {
            return Err(DecompError::NoOverlap {
                found: pairs_from.len(),
                needed: params.min_correspondences,
            });
        };
        let mut max_shift = 0.0f64;
        for p in &mut moved {
            let q = step.apply_point(*p);
            max_shift = max_shift.max((q - *p).norm());
            *p = q;
        }
        correction = step.compose(&correction);
        if max_shift < params.convergence {
            break;
        }
    }
    Ok(correction)
}

/// Refines fragment placements by aligning every fragment onto the first
/// one, which stays fixed as the gauge. Returns one correction per fragment
/// (identity for the first).
pub fn align_fragments(
    fragments: &[BackgroundCloud],
    params: &IcpParams,
) -> Result<Vec<RigidTransform>, DecompError> {
    let mut out = Vec::with_capacity(fragments.len());
    for (i, frag) in fragments.iter().enumerate() {
        if i == 0 {
            out.push(RigidTransform::identity());
        } else {
            out.push(icp_align(&frag.points, &fragments[0].points, params)?);
        }
    }
    Ok(out)
}

/// Settings for the decomposition stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompConfig {
    /// A vehicle needs at least this many points in its best frame.
    pub min_points: usize,
    /// Ground band above the box bottom face, meters.
    pub ground_band: f64,
    /// Extraction box inflation per half extent, meters.
    pub box_inflation: f64,
    /// Pseudo-label box inflation for dynamic removal, meters.
    pub pseudo_margin: f64,
}

impl Default for DecompConfig {
    fn default() -> Self {
        DecompConfig {
            min_points: 50,
            ground_band: 0.15,
            box_inflation: 0.1,
            pseudo_margin: 0.1,
        }
    }
}

/// Decomposition of one fragment: all tracks (flagged reconstructable or
/// not) and the cleaned background.
#[derive(Debug, Clone)]
pub struct Decomposition {
    pub vehicles: Vec<TrackedVehicle>,
    pub background: BackgroundCloud,
}

/// Runs per-frame extraction over a fragment, assembles tracks, applies the
/// reconstructability filter, and removes pseudo-labeled dynamic points
/// from the background.
pub fn decompose_fragment(
    frames: &[Frame],
    pseudo_boxes: &BTreeMap<u64, Vec<OrientedBox>>,
    fragment_idx: usize,
    config: &DecompConfig,
) -> Decomposition {
    let mut tracks: BTreeMap<TrackId, TrackedVehicle> = BTreeMap::new();
    let mut background_points = Vec::new();

    for frame in frames {
        let (per_track, mut residual) = extract_vehicle_points(frame, config.box_inflation);
        let frame_boxes: BTreeMap<TrackId, OrientedBox> = frame.boxes.iter().copied().collect();
        // Every annotated box contributes an observation, with or without
        // points; the rendering timeline needs the box either way.
        for (tid, bbox) in &frame_boxes {
            let points = per_track.get(tid).cloned().unwrap_or_default();
            tracks
                .entry(*tid)
                .or_insert_with(|| TrackedVehicle {
                    track_id: *tid,
                    observations: Vec::new(),
                    reconstructable: false,
                })
                .observations
                .push(TrackObservation {
                    frame_id: frame.frame_id,
                    bbox: *bbox,
                    points,
                });
        }
        if let Some(pseudo) = pseudo_boxes.get(&frame.frame_id) {
            residual.retain(|p| !pseudo.iter().any(|b| b.contains(*p, config.pseudo_margin)));
        }
        background_points.extend(residual);
    }

    let mut vehicles: Vec<TrackedVehicle> = tracks.into_values().collect();
    for v in &mut vehicles {
        filter_unreconstructable(v, config.min_points);
    }
    Decomposition {
        vehicles,
        background: BackgroundCloud::new(background_points, fragment_idx),
    }
}

/// Completed canonical cloud for one reconstructable track.
#[derive(Debug, Clone)]
pub struct VehicleCloud {
    pub track_id: TrackId,
    /// Canonical box size (first observation).
    pub size: Vec3,
    pub points: Vec<Vec3>,
    pub best_frame_idx: usize,
}

/// Produces the completion cloud for one vehicle: either the externally
/// completed cloud verbatim, or the best frame run through mirror
/// augmentation and ground filtering. Returns `None` for unreconstructable
/// tracks.
pub fn complete_vehicle(
    vehicle: &TrackedVehicle,
    config: &DecompConfig,
    external: Option<Vec<Vec3>>,
) -> Result<Option<VehicleCloud>, DecompError> {
    if !vehicle.reconstructable {
        return Ok(None);
    }
    let best = select_best_frame(vehicle)?;
    let canonical = vehicle.canonical_box().ok_or(DecompError::EmptyTrack)?;
    let points = match external {
        Some(p) => p,
        None => {
            let raw = &vehicle.observations[best].points;
            let augmented = mirror_augment(raw, &canonical);
            filter_ground_points(&augmented, &canonical, config.ground_band)
        }
    };
    Ok(Some(VehicleCloud {
        track_id: vehicle.track_id,
        size: canonical.size,
        points,
        best_frame_idx: best,
    }))
}
