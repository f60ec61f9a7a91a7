//! Cross-view rendering: sphere-trace each field a ray can touch, gather
//! the k+1 candidates (k box-intersecting vehicles plus the background),
//! and composite them into one labeled LiDAR measurement per ray.

use crate::decomp::TrackId;
use crate::field::{SdfGridField, TraceOutcome, TraceParams};
use crate::geom::{ray_box_intersect, OrientedBox, Ray, RigidTransform, Vec3};
use crate::occupancy::OccupancyGrid;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

pub use crate::field::TraceOutcome as SphereTraceOutcome;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("no fitted vehicle fields available for donor substitution")]
    NoFields,
    #[error("track {0} has neither its own field nor a donor")]
    UnresolvedTrack(TrackId),
    #[error("sensor model invalid: {0}")]
    BadSensor(String),
}

/// Virtual spinning-LiDAR model: a uniform grid of elevation channels and
/// azimuth steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorModel {
    /// Sensor-to-world pose.
    pub pose: RigidTransform,
    pub channels: usize,
    /// Vertical field of view [min, max], degrees.
    pub vertical_fov_deg: (f64, f64),
    /// Horizontal field of view [min, max], degrees; a zero span yields no
    /// rays.
    pub horizontal_fov_deg: (f64, f64),
    /// Azimuth step, degrees.
    pub horizontal_resolution_deg: f64,
    pub max_range: f64,
}

impl SensorModel {
    pub fn validate(&self) -> Result<(), RenderError> {
        if self.channels < 1 {
            return Err(RenderError::BadSensor("channels must be >= 1".into()));
        }
        if self.vertical_fov_deg.0 > self.vertical_fov_deg.1
            || self.horizontal_fov_deg.0 > self.horizontal_fov_deg.1
        {
            return Err(RenderError::BadSensor("fov bounds out of order".into()));
        }
        if self.horizontal_resolution_deg <= 0.0 {
            return Err(RenderError::BadSensor("resolution must be positive".into()));
        }
        if self.max_range <= 0.0 {
            return Err(RenderError::BadSensor("max range must be positive".into()));
        }
        Ok(())
    }

    pub fn azimuth_steps(&self) -> usize {
        let span = self.horizontal_fov_deg.1 - self.horizontal_fov_deg.0;
        (span / self.horizontal_resolution_deg).floor() as usize
    }

    /// Channel elevations in degrees: endpoints inclusive for two or more
    /// channels, the lower bound for a single channel.
    pub fn elevations_deg(&self) -> Vec<f64> {
        let (lo, hi) = self.vertical_fov_deg;
        if self.channels == 1 {
            return vec![lo];
        }
        (0..self.channels)
            .map(|c| lo + (hi - lo) * c as f64 / (self.channels - 1) as f64)
            .collect()
    }

    /// Scan-pattern directions in the sensor frame, channel-major: ray
    /// index = channel * azimuth_steps + azimuth index.
    pub fn pattern_directions(&self) -> Vec<Vec3> {
        let steps = self.azimuth_steps();
        let mut out = Vec::with_capacity(self.channels * steps);
        for elevation in self.elevations_deg() {
            let el = elevation.to_radians();
            for k in 0..steps {
                let az = (self.horizontal_fov_deg.0
                    + k as f64 * self.horizontal_resolution_deg)
                    .to_radians();
                out.push(Vec3::new(
                    el.cos() * az.cos(),
                    el.cos() * az.sin(),
                    el.sin(),
                ));
            }
        }
        out
    }

    /// World-frame rays of the scan pattern.
    pub fn rays(&self) -> Vec<Ray> {
        self.pattern_directions()
            .into_iter()
            .map(|d| Ray {
                origin: self.pose.translation,
                direction: self.pose.apply_dir(d),
                max_range: self.max_range,
            })
            .collect()
    }
}

/// Where a rendered point came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PointSource {
    Background,
    Vehicle(TrackId),
}

/// One track's rendering state: its annotation boxes over the timeline and
/// the canonical box size the field was fitted in.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VehicleTrack {
    pub track_id: TrackId,
    /// Canonical box size (first observation).
    pub canonical_size: Vec3,
    /// World-frame annotation box per frame id.
    pub boxes: BTreeMap<u64, OrientedBox>,
}

/// Everything needed to render a frame: the background field with its
/// visibility grid, the vehicle timeline, fitted canonical fields, and the
/// donor substitution map for tracks without a field of their own.
#[derive(Debug)]
pub struct SceneGraph {
    pub background: SdfGridField,
    pub occupancy: OccupancyGrid,
    pub tracks: BTreeMap<TrackId, VehicleTrack>,
    pub fields: BTreeMap<TrackId, SdfGridField>,
    pub substitutions: BTreeMap<TrackId, TrackId>,
}

impl SceneGraph {
    /// Checks that every track resolves to exactly one field, own or donor.
    pub fn validate(&self) -> Result<(), RenderError> {
        for tid in self.tracks.keys() {
            let own = self.fields.contains_key(tid);
            let donated = self.substitutions.contains_key(tid);
            if !own && !donated {
                return Err(RenderError::UnresolvedTrack(*tid));
            }
        }
        Ok(())
    }

    /// Field and per-axis canonical scale for a track. Own fields use unit
    /// scale; donor fields are queried at coordinates scaled by
    /// donor_size / recipient_size so the recipient's box maps onto the
    /// donor's.
    pub fn resolve_field(&self, track_id: TrackId) -> Result<(&SdfGridField, Vec3), RenderError> {
        if let Some(field) = self.fields.get(&track_id) {
            return Ok((field, Vec3::new(1.0, 1.0, 1.0)));
        }
        let donor = self
            .substitutions
            .get(&track_id)
            .ok_or(RenderError::UnresolvedTrack(track_id))?;
        let field = self
            .fields
            .get(donor)
            .ok_or(RenderError::UnresolvedTrack(track_id))?;
        let donor_size = self.tracks[donor].canonical_size;
        let recipient_size = self.tracks[&track_id].canonical_size;
        let scale = Vec3::new(
            donor_size.x / recipient_size.x,
            donor_size.y / recipient_size.y,
            donor_size.z / recipient_size.z,
        );
        Ok((field, scale))
    }
}

/// Labeled frame in the sensor frame. Points are stored in scan-pattern ray
/// order; together with the drop mask this recovers each point's ray index.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedFrame {
    pub points: Vec<Vec3>,
    /// Parallel to `points`.
    pub labels: Vec<PointSource>,
    /// One entry per pattern ray; true means no return.
    pub drop_mask: Vec<bool>,
    /// Annotation boxes re-expressed in the sensor frame: centers exactly
    /// transformed, yaw adjusted by the sensor heading (boxes stay
    /// gravity-aligned).
    pub boxes: Vec<(TrackId, OrientedBox)>,
}

/// One field's answer for a ray: a candidate measurement with its drop
/// probability. A missing range always carries `drop_prob = 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub range: Option<f64>,
    pub drop_prob: f64,
    pub source: PointSource,
}

impl Candidate {
    pub fn dropped(source: PointSource) -> Self {
        Candidate {
            range: None,
            drop_prob: 1.0,
            source,
        }
    }
}

/// Sphere trace against a bare field (no visibility constraint). Converges
/// when |s| < eps; misses when the ray leaves the field bounds or exhausts
/// its steps.
pub fn sphere_trace(
    field: &SdfGridField,
    ray: &Ray,
    params: &TraceParams,
) -> Option<f64> {
    match field.trace(ray, None, params) {
        TraceOutcome::Hit { range } => Some(range),
        _ => None,
    }
}

/// Background candidate: sphere trace where every step point passes the
/// occupancy constraint. A convergence point outside the observed region is
/// a forced drop and contributes no surface.
pub fn render_candidate_background(
    field: &SdfGridField,
    occupancy: &OccupancyGrid,
    ray: &Ray,
    params: &TraceParams,
) -> Candidate {
    match field.trace_constrained(ray, None, params, |p| occupancy.is_observed(p)) {
        TraceOutcome::Hit { range } => Candidate {
            range: Some(range),
            drop_prob: field.query_drop(ray.point_at(range)),
            source: PointSource::Background,
        },
        _ => Candidate::dropped(PointSource::Background),
    }
}

/// Vehicle candidate: traces the canonically transformed ray restricted to
/// the box interval. No convergence inside the box means the ray traverses
/// the box without touching the surface, which is a drop for this field.
pub fn render_candidate_vehicle(
    field: &SdfGridField,
    to_canonical: &RigidTransform,
    ray: &Ray,
    box_interval: (f64, f64),
    scale: Vec3,
    source: PointSource,
    params: &TraceParams,
) -> Candidate {
    let canonical_ray = ray.transformed(to_canonical);
    let unit_scale = (scale - Vec3::new(1.0, 1.0, 1.0)).norm() < 1e-12;
    let outcome = if unit_scale {
        field.trace(&canonical_ray, Some(box_interval), params)
    } else {
        field.trace_scaled(&canonical_ray, Some(box_interval), params, scale)
    };
    match outcome {
        TraceOutcome::Hit { range } => {
            let p = canonical_ray.point_at(range);
            let q = Vec3::new(p.x * scale.x, p.y * scale.y, p.z * scale.z);
            Candidate {
                range: Some(range),
                drop_prob: field.query_drop(q),
                source,
            }
        }
        _ => Candidate::dropped(source),
    }
}

/// Composites the per-ray candidates: the ray drops iff every candidate has
/// a drop probability above 0.5; otherwise the smallest distance among
/// candidates at or below 0.5 wins.
pub fn composite(candidates: &[Candidate]) -> Option<(f64, PointSource)> {
    let mut best: Option<(f64, PointSource)> = None;
    for c in candidates {
        if c.drop_prob > 0.5 {
            continue;
        }
        let Some(range) = c.range else { continue };
        if best.map(|(r, _)| range < r).unwrap_or(true) {
            best = Some((range, c.source));
        }
    }
    best
}

/// Assigns a donor field to every track without one, sampling uniformly
/// among the fitted fields. Deterministic for a given seed.
pub fn substitute_missing(
    tracks: &BTreeMap<TrackId, VehicleTrack>,
    fields: &BTreeMap<TrackId, SdfGridField>,
    seed: u64,
) -> Result<BTreeMap<TrackId, TrackId>, RenderError> {
    let donors: Vec<TrackId> = fields.keys().copied().collect();
    let missing: Vec<TrackId> = tracks
        .keys()
        .filter(|tid| !fields.contains_key(tid))
        .copied()
        .collect();
    if missing.is_empty() {
        return Ok(BTreeMap::new());
    }
    if donors.is_empty() {
        return Err(RenderError::NoFields);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = BTreeMap::new();
    for tid in missing {
        out.insert(tid, donors[rng.gen_range(0..donors.len())]);
    }
    Ok(out)
}

/// Per-frame rendering context: the tracks active at one frame with their
/// canonicalizing transforms resolved. Lets callers inspect the raw
/// candidate set per ray, which the acceptance checks recomposite
/// independently.
pub struct FrameContext<'a> {
    scene: &'a SceneGraph,
    active: Vec<ActiveTrack<'a>>,
}

struct ActiveTrack<'a> {
    bbox: OrientedBox,
    to_canonical: RigidTransform,
    field: &'a SdfGridField,
    scale: Vec3,
    source: PointSource,
}

impl<'a> FrameContext<'a> {
    pub fn new(scene: &'a SceneGraph, frame_id: u64) -> Result<Self, RenderError> {
        scene.validate()?;
        let mut active = Vec::new();
        for (tid, track) in &scene.tracks {
            let Some(bbox) = track.boxes.get(&frame_id) else {
                continue;
            };
            let (field, scale) = scene.resolve_field(*tid)?;
            active.push(ActiveTrack {
                bbox: *bbox,
                // World ray to this frame's box-local frame, which is the
                // canonical field frame for a rigid vehicle.
                to_canonical: bbox.pose().invert(),
                field,
                scale,
                source: PointSource::Vehicle(*tid),
            });
        }
        Ok(FrameContext { scene, active })
    }

    /// The k+1 candidates for one world-frame ray: one per track whose box
    /// the ray segment crosses, plus the background (always last).
    pub fn candidates(&self, ray: &Ray, params: &TraceParams) -> Vec<Candidate> {
        let mut out = Vec::with_capacity(self.active.len() + 1);
        for track in &self.active {
            if let Some(interval) = ray_box_intersect(ray, &track.bbox) {
                out.push(render_candidate_vehicle(
                    track.field,
                    &track.to_canonical,
                    ray,
                    interval,
                    track.scale,
                    track.source,
                    params,
                ));
            }
        }
        out.push(render_candidate_background(
            &self.scene.background,
            &self.scene.occupancy,
            ray,
            params,
        ));
        out
    }
}

/// Renders one frame of the scene timeline from the sensor's scan pattern.
///
/// Per ray: finds the tracks whose frame-`t` box the ray crosses, gathers
/// their candidates plus the background candidate, composites, and emits
/// the winning point in the sensor frame with its source label. Rays are
/// processed in parallel but assembled in pattern order, so the output is
/// identical regardless of thread count.
pub fn render_frame(
    scene: &SceneGraph,
    sensor: &SensorModel,
    frame_id: u64,
    params: &TraceParams,
) -> Result<RenderedFrame, RenderError> {
    sensor.validate()?;
    let ctx = FrameContext::new(scene, frame_id)?;

    let rays = sensor.rays();
    let results: Vec<Option<(f64, PointSource, Vec3)>> = rays
        .par_iter()
        .map(|ray| {
            let candidates = ctx.candidates(ray, params);
            composite(&candidates).map(|(range, source)| (range, source, ray.point_at(range)))
        })
        .collect();

    let world_to_sensor = sensor.pose.invert();
    let mut points = Vec::new();
    let mut labels = Vec::new();
    let mut drop_mask = Vec::with_capacity(results.len());
    for r in &results {
        match r {
            Some((_, source, world_point)) => {
                points.push(world_to_sensor.apply_point(*world_point));
                labels.push(*source);
                drop_mask.push(false);
            }
            None => drop_mask.push(true),
        }
    }

    let sensor_heading = sensor.pose.yaw();
    let mut boxes = Vec::new();
    for (tid, track) in &scene.tracks {
        if let Some(bbox) = track.boxes.get(&frame_id) {
            boxes.push((
                *tid,
                OrientedBox {
                    center: world_to_sensor.apply_point(bbox.center),
                    size: bbox.size,
                    yaw: bbox.yaw - sensor_heading,
                },
            ));
        }
    }

    Ok(RenderedFrame {
        points,
        labels,
        drop_mask,
        boxes,
    })
}
