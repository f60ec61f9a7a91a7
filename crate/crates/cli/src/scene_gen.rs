//! Synthetic drive generator: a flat ground plane plus box-shaped cars on
//! straight (optionally yawing) trajectories, scanned by a vehicle-mounted
//! sensor moving along +x. Everything is raycast analytically, so the same
//! functions double as the ground-truth oracle in tests.

use relidar_core::decomp::{Frame, TrackId};
use relidar_core::geom::{ray_box_intersect, OrientedBox, Ray, RigidTransform, Vec3};
use relidar_core::io;
use relidar_core::render::SensorModel;
use std::path::Path;

/// One scripted car: a rigid box translating at constant velocity with a
/// constant yaw rate.
#[derive(Debug, Clone)]
pub struct CarSpec {
    pub track_id: TrackId,
    /// Box center at frame 0.
    pub start: Vec3,
    /// Center displacement per frame, meters.
    pub velocity: Vec3,
    pub yaw0: f64,
    /// Yaw change per frame, radians.
    pub yaw_rate: f64,
    pub size: Vec3,
}

impl CarSpec {
    pub fn box_at(&self, frame: usize) -> OrientedBox {
        OrientedBox {
            center: self.start + self.velocity * frame as f64,
            size: self.size,
            yaw: self.yaw0 + self.yaw_rate * frame as f64,
        }
    }
}

/// Scene script: ego path, scan pattern, and cars.
#[derive(Debug, Clone)]
pub struct SceneSpec {
    pub n_frames: usize,
    /// Ego displacement per frame along +x, meters.
    pub ego_step: f64,
    pub sensor_height: f64,
    pub cars: Vec<CarSpec>,
    pub channels: usize,
    pub vertical_fov_deg: (f64, f64),
    pub horizontal_resolution_deg: f64,
    pub max_range: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            n_frames: 20,
            ego_step: 1.5,
            sensor_height: 2.2,
            cars: vec![
                CarSpec {
                    track_id: 1,
                    start: Vec3::new(12.0, 3.5, 0.8),
                    velocity: Vec3::new(1.2, 0.0, 0.0),
                    yaw0: 0.0,
                    yaw_rate: 0.0,
                    size: Vec3::new(4.4, 1.9, 1.6),
                },
                CarSpec {
                    track_id: 2,
                    start: Vec3::new(30.0, -4.0, 0.9),
                    velocity: Vec3::new(-0.8, 0.05, 0.0),
                    yaw0: std::f64::consts::PI,
                    yaw_rate: 0.01,
                    size: Vec3::new(4.8, 2.1, 1.8),
                },
            ],
            channels: 24,
            vertical_fov_deg: (-25.0, -3.0),
            horizontal_resolution_deg: 1.0,
            max_range: 40.0,
        }
    }
}

impl SceneSpec {
    pub fn sensor_pose(&self, frame: usize) -> RigidTransform {
        RigidTransform::from_translation(Vec3::new(
            self.ego_step * frame as f64,
            0.0,
            self.sensor_height,
        ))
    }

    pub fn vehicle_sensor(&self, frame: usize) -> SensorModel {
        SensorModel {
            pose: self.sensor_pose(frame),
            channels: self.channels,
            vertical_fov_deg: self.vertical_fov_deg,
            horizontal_fov_deg: (-180.0, 180.0),
            horizontal_resolution_deg: self.horizontal_resolution_deg,
            max_range: self.max_range,
        }
    }

    pub fn boxes_at(&self, frame: usize) -> Vec<(TrackId, OrientedBox)> {
        self.cars
            .iter()
            .map(|c| (c.track_id, c.box_at(frame)))
            .collect()
    }
}

/// What an analytic ray hits first.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Surface {
    Ground,
    Car(TrackId),
}

/// Closest analytic intersection of a world ray with the ground plane
/// (z = 0) and the car boxes, within the ray's max range.
pub fn analytic_raycast(ray: &Ray, boxes: &[(TrackId, OrientedBox)]) -> Option<(f64, Surface)> {
    let mut best: Option<(f64, Surface)> = None;
    if ray.direction.z < 0.0 {
        let t = -ray.origin.z / ray.direction.z;
        if t > 0.0 && t <= ray.max_range {
            best = Some((t, Surface::Ground));
        }
    }
    for (tid, bbox) in boxes {
        if let Some((t0, _)) = ray_box_intersect(ray, bbox) {
            if t0 > 0.0 && best.map(|(t, _)| t0 < t).unwrap_or(true) {
                best = Some((t0, Surface::Car(*tid)));
            }
        }
    }
    best
}

/// Simulates every frame of the scene: analytic raycast per pattern ray,
/// points stored in the sensor frame.
pub fn simulate(spec: &SceneSpec) -> Vec<Frame> {
    let mut frames = Vec::with_capacity(spec.n_frames);
    for f in 0..spec.n_frames {
        let sensor = spec.vehicle_sensor(f);
        let boxes = spec.boxes_at(f);
        let world_to_sensor = sensor.pose.invert();
        let mut points = Vec::new();
        for ray in sensor.rays() {
            if let Some((t, _)) = analytic_raycast(&ray, &boxes) {
                points.push(world_to_sensor.apply_point(ray.point_at(t)));
            }
        }
        frames.push(Frame {
            frame_id: f as u64,
            timestamp: f as f64 * 0.1,
            sensor_pose: sensor.pose,
            points,
            boxes,
        });
    }
    frames
}

/// Writes the simulated scene as a one-fragment dataset under `root`.
pub fn write_demo_dataset(root: &Path, spec: &SceneSpec) -> anyhow::Result<()> {
    let frames = simulate(spec);
    let dir = root.join("seq00");
    io::write_fragment(&dir, &frames)?;
    Ok(())
}
