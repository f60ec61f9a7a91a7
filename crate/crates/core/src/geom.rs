//! Core 3D geometry: vectors, SE(3) rigid transforms, yaw-oriented boxes,
//! ray-box intersection, and rigid transform estimation between box
//! observations.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeomError {
    #[error("box has a zero or negative dimension: {0:?}")]
    DegenerateBox([f64; 3]),
    #[error("rotation matrix is not orthonormal within tolerance")]
    InvalidRotation,
}

/// 3D vector in meters, or unitless when used as a direction.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3 { x: 0.0, y: 0.0, z: 0.0 };

    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3 { x, y, z }
    }

    pub fn dot(self, other: Vec3) -> f64 {
        self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn cross(self, other: Vec3) -> Vec3 {
        Vec3 {
            x: self.y * other.z - self.z * other.y,
            y: self.z * other.x - self.x * other.z,
            z: self.x * other.y - self.y * other.x,
        }
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn norm_squared(self) -> f64 {
        self.dot(self)
    }

    /// Unit vector in the same direction. Returns `None` for near-zero input.
    pub fn normalized(self) -> Option<Vec3> {
        let n = self.norm();
        if n < 1e-12 {
            None
        } else {
            Some(self * (1.0 / n))
        }
    }

    pub fn component(self, axis: usize) -> f64 {
        match axis {
            0 => self.x,
            1 => self.y,
            _ => self.z,
        }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Vec3::new(a[0], a[1], a[2])
    }
}

impl std::ops::Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl std::ops::Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl std::ops::Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl std::ops::Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

/// Row-major 3x3 matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mat3 {
    pub rows: [[f64; 3]; 3],
}

impl Mat3 {
    pub const IDENTITY: Mat3 = Mat3 {
        rows: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
    };

    pub fn from_rows(rows: [[f64; 3]; 3]) -> Self {
        Mat3 { rows }
    }

    /// Rotation by `yaw` radians about the +z axis.
    pub fn rot_z(yaw: f64) -> Self {
        let (s, c) = yaw.sin_cos();
        Mat3 {
            rows: [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]],
        }
    }

    /// Rotation about the +y axis.
    pub fn rot_y(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Mat3 {
            rows: [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]],
        }
    }

    pub fn transpose(self) -> Mat3 {
        let r = self.rows;
        Mat3 {
            rows: [
                [r[0][0], r[1][0], r[2][0]],
                [r[0][1], r[1][1], r[2][1]],
                [r[0][2], r[1][2], r[2][2]],
            ],
        }
    }

    pub fn det(self) -> f64 {
        let r = self.rows;
        r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0])
    }

    pub fn mul_vec(self, v: Vec3) -> Vec3 {
        let r = self.rows;
        Vec3::new(
            r[0][0] * v.x + r[0][1] * v.y + r[0][2] * v.z,
            r[1][0] * v.x + r[1][1] * v.y + r[1][2] * v.z,
            r[2][0] * v.x + r[2][1] * v.y + r[2][2] * v.z,
        )
    }

    pub fn mul_mat(self, o: Mat3) -> Mat3 {
        let mut out = [[0.0; 3]; 3];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                *cell = (0..3).map(|k| self.rows[i][k] * o.rows[k][j]).sum();
            }
        }
        Mat3 { rows: out }
    }

    /// Max absolute deviation of `R Rᵀ` from identity.
    fn orthonormality_error(self) -> f64 {
        let p = self.mul_mat(self.transpose());
        let mut err = 0.0f64;
        for i in 0..3 {
            for j in 0..3 {
                let target = if i == j { 1.0 } else { 0.0 };
                err = err.max((p.rows[i][j] - target).abs());
            }
        }
        err
    }
}

/// SE(3) pose: `p ↦ R p + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform {
            rotation: Mat3::IDENTITY,
            translation: Vec3::ZERO,
        }
    }

    /// Validates that `rotation` is a proper rotation (orthonormal, det +1
    /// within 1e-9).
    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self, GeomError> {
        if rotation.orthonormality_error() > 1e-9 || (rotation.det() - 1.0).abs() > 1e-9 {
            return Err(GeomError::InvalidRotation);
        }
        Ok(RigidTransform { rotation, translation })
    }

    pub fn from_translation(t: Vec3) -> Self {
        RigidTransform {
            rotation: Mat3::IDENTITY,
            translation: t,
        }
    }

    pub fn from_yaw_translation(yaw: f64, t: Vec3) -> Self {
        RigidTransform {
            rotation: Mat3::rot_z(yaw),
            translation: t,
        }
    }

    pub fn apply_point(&self, p: Vec3) -> Vec3 {
        self.rotation.mul_vec(p) + self.translation
    }

    /// Rotates a direction; translation does not apply.
    pub fn apply_dir(&self, d: Vec3) -> Vec3 {
        self.rotation.mul_vec(d)
    }

    /// `(a ∘ b)(p) = a(b(p))`.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation.mul_mat(other.rotation),
            translation: self.rotation.mul_vec(other.translation) + self.translation,
        }
    }

    pub fn invert(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -rt.mul_vec(self.translation),
        }
    }

    /// Heading of the transformed +x axis in the world xy plane.
    pub fn yaw(&self) -> f64 {
        let x_axis = self.rotation.mul_vec(Vec3::new(1.0, 0.0, 0.0));
        x_axis.y.atan2(x_axis.x)
    }
}

/// Yaw-oriented box stored parametrically; corners are derived.
///
/// Corner ordering is frozen: corner `i` carries local offsets
/// `(±l/2, ±w/2, ±h/2)` with the sign of axis `a` positive iff bit `a` of
/// `i` is set (x = bit 0, y = bit 1, z = bit 2). So corner 0 is
/// `(-l/2, -w/2, -h/2)` and corner 7 is `(+l/2, +w/2, +h/2)`, both expressed
/// in the box frame before yaw/center are applied.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrientedBox {
    pub center: Vec3,
    /// (length, width, height) along the box-local x, y, z axes; all > 0.
    pub size: Vec3,
    /// Rotation about world +z, radians.
    pub yaw: f64,
}

impl OrientedBox {
    pub fn new(center: Vec3, size: Vec3, yaw: f64) -> Result<Self, GeomError> {
        if size.x <= 0.0 || size.y <= 0.0 || size.z <= 0.0 {
            return Err(GeomError::DegenerateBox(size.to_array()));
        }
        Ok(OrientedBox { center, size, yaw })
    }

    pub fn half_size(&self) -> Vec3 {
        self.size * 0.5
    }

    /// The 8 corners in world coordinates, in the frozen ordering above.
    pub fn corners(&self) -> [Vec3; 8] {
        let h = self.half_size();
        let rot = Mat3::rot_z(self.yaw);
        let mut out = [Vec3::ZERO; 8];
        for (i, c) in out.iter_mut().enumerate() {
            let local = Vec3::new(
                if i & 1 != 0 { h.x } else { -h.x },
                if i & 2 != 0 { h.y } else { -h.y },
                if i & 4 != 0 { h.z } else { -h.z },
            );
            *c = rot.mul_vec(local) + self.center;
        }
        out
    }

    /// World point expressed in the box frame (center at origin, x along
    /// length).
    pub fn to_local(&self, p: Vec3) -> Vec3 {
        Mat3::rot_z(-self.yaw).mul_vec(p - self.center)
    }

    pub fn from_local(&self, p: Vec3) -> Vec3 {
        Mat3::rot_z(self.yaw).mul_vec(p) + self.center
    }

    /// Containment test; faces count as inside. `margin` inflates each half
    /// extent (meters, may be 0).
    pub fn contains(&self, p: Vec3, margin: f64) -> bool {
        let l = self.to_local(p);
        let h = self.half_size();
        l.x.abs() <= h.x + margin && l.y.abs() <= h.y + margin && l.z.abs() <= h.z + margin
    }

    /// Same box grown by `margin` on every half extent.
    pub fn inflated(&self, margin: f64) -> OrientedBox {
        OrientedBox {
            center: self.center,
            size: self.size + Vec3::new(2.0 * margin, 2.0 * margin, 2.0 * margin),
            yaw: self.yaw,
        }
    }

    /// World-from-box-frame pose of this box.
    pub fn pose(&self) -> RigidTransform {
        RigidTransform::from_yaw_translation(self.yaw, self.center)
    }

    /// Applies a rigid transform, keeping the parametric form. The rotation
    /// must be a yaw-only rotation for the result to be exact; a general
    /// rotation is projected onto its heading.
    pub fn transformed(&self, t: &RigidTransform) -> OrientedBox {
        OrientedBox {
            center: t.apply_point(self.center),
            size: self.size,
            yaw: self.yaw + t.yaw(),
        }
    }
}

/// Ray with unit direction and a finite maximum range in meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    pub max_range: f64,
}

impl Ray {
    /// Normalizes the direction. Returns `None` for a near-zero direction or
    /// non-positive range.
    pub fn new(origin: Vec3, direction: Vec3, max_range: f64) -> Option<Self> {
        if max_range <= 0.0 {
            return None;
        }
        direction.normalized().map(|direction| Ray {
            origin,
            direction,
            max_range,
        })
    }

    pub fn point_at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }

    pub fn transformed(&self, t: &RigidTransform) -> Ray {
        Ray {
            origin: t.apply_point(self.origin),
            direction: t.apply_dir(self.direction),
            max_range: self.max_range,
        }
    }
}

/// Axis-aligned box, used for field and grid bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Self {
        Aabb { min, max }
    }

    pub fn from_points<'a>(points: impl IntoIterator<Item = &'a Vec3>) -> Option<Self> {
        let mut iter = points.into_iter();
        let first = *iter.next()?;
        let mut bb = Aabb { min: first, max: first };
        for p in iter {
            bb.min.x = bb.min.x.min(p.x);
            bb.min.y = bb.min.y.min(p.y);
            bb.min.z = bb.min.z.min(p.z);
            bb.max.x = bb.max.x.max(p.x);
            bb.max.y = bb.max.y.max(p.y);
            bb.max.z = bb.max.z.max(p.z);
        }
        Some(bb)
    }

    pub fn padded(&self, pad: f64) -> Aabb {
        let p = Vec3::new(pad, pad, pad);
        Aabb {
            min: self.min - p,
            max: self.max + p,
        }
    }

    pub fn contains(&self, p: Vec3) -> bool {
        p.x >= self.min.x
            && p.x <= self.max.x
            && p.y >= self.min.y
            && p.y <= self.max.y
            && p.z >= self.min.z
            && p.z <= self.max.z
    }

    pub fn extent(&self) -> Vec3 {
        self.max - self.min
    }

    pub fn center(&self) -> Vec3 {
        (self.min + self.max) * 0.5
    }

    /// Parametric interval where the ray is inside the box, clipped to
    /// `[0, max_range]`. Uses the slab method; a grazing touch
    /// (`t_near == t_far`) counts as a zero-length hit.
    pub fn ray_interval(&self, ray: &Ray) -> Option<(f64, f64)> {
        let mut t_near = 0.0f64;
        let mut t_far = ray.max_range;
        for axis in 0..3 {
            let o = ray.origin.component(axis);
            let d = ray.direction.component(axis);
            let lo = self.min.component(axis);
            let hi = self.max.component(axis);
            if d.abs() < 1e-15 {
                if o < lo || o > hi {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / d;
            let (mut t0, mut t1) = ((lo - o) * inv, (hi - o) * inv);
            if t0 > t1 {
                std::mem::swap(&mut t0, &mut t1);
            }
            t_near = t_near.max(t0);
            t_far = t_far.min(t1);
            if t_near > t_far {
                return None;
            }
        }
        Some((t_near, t_far))
    }
}

/// Parametric entry/exit distances where the ray is inside the oriented box,
/// clipped to `[0, ray.max_range]`. A miss returns `None`; a grazing touch
/// where entry equals exit counts as a zero-length hit.
pub fn ray_box_intersect(ray: &Ray, bbox: &OrientedBox) -> Option<(f64, f64)> {
    // Slab test in the box-local frame, where the box is axis-aligned.
    let inv = Mat3::rot_z(-bbox.yaw);
    let local_ray = Ray {
        origin: inv.mul_vec(ray.origin - bbox.center),
        direction: inv.mul_vec(ray.direction),
        max_range: ray.max_range,
    };
    let h = bbox.half_size();
    Aabb::new(-h, h).ray_interval(&local_ray)
}

/// Least-squares rigid fit (Kabsch): the transform `T` minimizing
/// `Σ ‖to_i − T(from_i)‖²` over corresponding point pairs. Returns `None`
/// for fewer than 3 pairs.
pub fn estimate_rigid_transform(from: &[Vec3], to: &[Vec3]) -> Option<RigidTransform> {
    assert_eq!(from.len(), to.len());
    if from.len() < 3 {
        return None;
    }
    let n = from.len() as f64;
    let from_bar = from.iter().fold(Vec3::ZERO, |acc, p| acc + *p) * (1.0 / n);
    let to_bar = to.iter().fold(Vec3::ZERO, |acc, p| acc + *p) * (1.0 / n);
    let mut h = nalgebra::Matrix3::<f64>::zeros();
    for (q, p) in from.iter().zip(to.iter()) {
        let dq = *q - from_bar;
        let dp = *p - to_bar;
        h += nalgebra::Vector3::new(dq.x, dq.y, dq.z)
            * nalgebra::Vector3::new(dp.x, dp.y, dp.z).transpose();
    }
    let svd = h.svd(true, true);
    let u = svd.u.expect("svd of 3x3 always yields U");
    let v_t = svd.v_t.expect("svd of 3x3 always yields Vᵀ");
    let v = v_t.transpose();
    let d = (v * u.transpose()).determinant();
    let correction = nalgebra::Matrix3::from_diagonal(&nalgebra::Vector3::new(1.0, 1.0, d.signum()));
    let r = v * correction * u.transpose();
    let rotation = Mat3::from_rows([
        [r[(0, 0)], r[(0, 1)], r[(0, 2)]],
        [r[(1, 0)], r[(1, 1)], r[(1, 2)]],
        [r[(2, 0)], r[(2, 1)], r[(2, 2)]],
    ]);
    let translation = to_bar - rotation.mul_vec(from_bar);
    Some(RigidTransform { rotation, translation })
}

/// Least-squares rigid transform `T` minimizing
/// `‖canonical.corners − T · observed.corners‖_F` over the 8 corresponding
/// corners. Both boxes must come from the same track, so their sizes match
/// up to annotation jitter.
pub fn estimate_box_transform(
    canonical: &OrientedBox,
    observed: &OrientedBox,
) -> Result<RigidTransform, GeomError> {
    for b in [canonical, observed] {
        if b.size.x <= 0.0 || b.size.y <= 0.0 || b.size.z <= 0.0 {
            return Err(GeomError::DegenerateBox(b.size.to_array()));
        }
    }
    Ok(estimate_rigid_transform(&observed.corners(), &canonical.corners())
        .expect("8 corners always suffice"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn assert_vec_close(a: Vec3, b: Vec3, eps: f64) {
        assert_abs_diff_eq!(a.x, b.x, epsilon = eps);
        assert_abs_diff_eq!(a.y, b.y, epsilon = eps);
        assert_abs_diff_eq!(a.z, b.z, epsilon = eps);
    }

    fn assert_transform_close(a: &RigidTransform, b: &RigidTransform, eps: f64) {
        for i in 0..3 {
            for j in 0..3 {
                assert_abs_diff_eq!(a.rotation.rows[i][j], b.rotation.rows[i][j], epsilon = eps);
            }
        }
        assert_vec_close(a.translation, b.translation, eps);
    }

    #[test]
    fn compose_identity_is_neutral() {
        let t = RigidTransform::from_yaw_translation(0.7, Vec3::new(1.0, -2.0, 3.0));
        let id = RigidTransform::identity();
        assert_transform_close(&id.compose(&t), &t, 1e-15);
        assert_transform_close(&t.compose(&id), &t, 1e-15);
    }

    #[test]
    fn compose_translations_adds() {
        let a = RigidTransform::from_translation(Vec3::new(1.0, 0.0, 0.0));
        let b = RigidTransform::from_translation(Vec3::new(0.0, 2.0, 0.0));
        let ab = a.compose(&b);
        assert_vec_close(ab.translation, Vec3::new(1.0, 2.0, 0.0), 1e-15);
    }

    #[test]
    fn compose_rotations_adds_angles() {
        let quarter = RigidTransform::from_yaw_translation(PI / 2.0, Vec3::ZERO);
        let half = quarter.compose(&quarter);
        let expected = RigidTransform::from_yaw_translation(PI, Vec3::ZERO);
        assert_transform_close(&half, &expected, 1e-12);
    }

    #[test]
    fn invert_translation() {
        let t = RigidTransform::from_translation(Vec3::new(1.0, 2.0, 3.0));
        assert_vec_close(t.invert().translation, Vec3::new(-1.0, -2.0, -3.0), 1e-15);
        let id = RigidTransform::identity();
        assert_transform_close(&id.invert(), &id, 1e-15);
    }

    #[test]
    fn invert_roundtrip_is_identity() {
        let t = RigidTransform::from_yaw_translation(1.1, Vec3::new(4.0, -1.0, 0.5));
        let round = t.compose(&t.invert());
        assert_transform_close(&round, &RigidTransform::identity(), 1e-9);
    }

    #[test]
    fn ray_hits_axis_aligned_cube() {
        let ray = Ray::new(Vec3::ZERO, Vec3::new(1.0, 0.0, 0.0), 100.0).unwrap();
        let bbox = OrientedBox::new(Vec3::new(5.0, 0.0, 0.0), Vec3::new(1.0, 1.0, 1.0), 0.0).unwrap();
        let (t0, t1) = ray_box_intersect(&ray, &bbox).unwrap();
        assert_abs_diff_eq!(t0, 4.5, epsilon = 1e-12);
        assert_abs_diff_eq!(t1, 5.5, epsilon = 1e-12);
    }

    #[test]
    fn ray_misses_offset_cube() {
        let ray = Ray::new(Vec3::ZERO, Vec3::new(1.0, 0.0, 0.0), 100.0).unwrap();
        let bbox = OrientedBox::new(Vec3::new(0.0, 5.0, 0.0), Vec3::new(1.0, 1.0, 1.0), 0.0).unwrap();
        assert!(ray_box_intersect(&ray, &bbox).is_none());
    }

    #[test]
    fn ray_interval_matches_containment_march_on_yawed_box() {
        // Oracle: dense containment sampling along the ray at 1 mm steps.
        let ray = Ray::new(Vec3::ZERO, Vec3::new(1.0, 0.0, 0.0), 100.0).unwrap();
        let bbox =
            OrientedBox::new(Vec3::new(5.0, 0.0, 0.0), Vec3::new(2.0, 1.0, 1.0), PI / 4.0).unwrap();

        let step = 1e-3;
        let mut first = None;
        let mut last = None;
        let mut t = 3.0;
        while t <= 7.0 {
            if bbox.contains(ray.point_at(t), 0.0) {
                if first.is_none() {
                    first = Some(t);
                }
                last = Some(t);
            }
            t += step;
        }
        let (oracle_near, oracle_far) = (first.unwrap(), last.unwrap());
        let (t0, t1) = ray_box_intersect(&ray, &bbox).unwrap();
        assert_abs_diff_eq!(t0, oracle_near, epsilon = 2.0 * step);
        assert_abs_diff_eq!(t1, oracle_far, epsilon = 2.0 * step);
    }

    #[test]
    fn ray_interval_clips_to_max_range() {
        let ray = Ray::new(Vec3::ZERO, Vec3::new(1.0, 0.0, 0.0), 5.0).unwrap();
        let bbox = OrientedBox::new(Vec3::new(5.0, 0.0, 0.0), Vec3::new(1.0, 1.0, 1.0), 0.0).unwrap();
        let (t0, t1) = ray_box_intersect(&ray, &bbox).unwrap();
        assert_abs_diff_eq!(t0, 4.5, epsilon = 1e-12);
        assert_abs_diff_eq!(t1, 5.0, epsilon = 1e-12);
    }

    #[test]
    fn estimate_recovers_pure_translation() {
        let canonical =
            OrientedBox::new(Vec3::new(0.0, 0.0, 0.0), Vec3::new(4.0, 2.0, 1.5), 0.3).unwrap();
        let observed = OrientedBox {
            center: canonical.center + Vec3::new(1.0, 2.0, 0.0),
            ..canonical
        };
        let t = estimate_box_transform(&canonical, &observed).unwrap();
        let expected = RigidTransform::from_translation(Vec3::new(-1.0, -2.0, 0.0));
        assert_transform_close(&t, &expected, 1e-9);
    }

    #[test]
    fn estimate_recovers_pure_rotation_about_center() {
        let center = Vec3::new(3.0, -1.0, 0.5);
        let canonical = OrientedBox::new(center, Vec3::new(4.0, 2.0, 1.5), 0.0).unwrap();
        let observed = OrientedBox {
            yaw: PI / 6.0,
            ..canonical
        };
        let t = estimate_box_transform(&canonical, &observed).unwrap();
        // Rotation by -30 degrees about the shared center.
        let rot = RigidTransform::from_yaw_translation(-PI / 6.0, Vec3::ZERO);
        let expected = RigidTransform::from_translation(center)
            .compose(&rot)
            .compose(&RigidTransform::from_translation(-center));
        assert_transform_close(&t, &expected, 1e-9);
    }

    #[test]
    fn estimate_matches_grid_search_under_corner_noise() {
        // Oracle: brute-force search over (x, y, yaw) at 1 mm / 0.1 deg
        // resolution, scoring the same corner Frobenius objective.
        let canonical =
            OrientedBox::new(Vec3::new(0.0, 0.0, 0.0), Vec3::new(4.2, 1.9, 1.6), 0.0).unwrap();
        let truth = RigidTransform::from_yaw_translation(0.02, Vec3::new(0.013, -0.02, 0.0));
        let observed_box =
            OrientedBox::new(Vec3::new(-0.013, 0.0202, 0.0), Vec3::new(4.2, 1.9, 1.6), -0.02)
                .unwrap();

        // Perturb observed corners by deterministic +-1 cm noise and re-fit a
        // parametric box through the Kabsch path under test. The grid search
        // works on raw corners, so build both from the same perturbed set.
        let mut rng_state = 0x9e3779b97f4a7c15u64;
        let mut noise = || {
            // xorshift; enough for test jitter
            rng_state ^= rng_state << 13;
            rng_state ^= rng_state >> 7;
            rng_state ^= rng_state << 17;
            (rng_state as f64 / u64::MAX as f64 - 0.5) * 0.02
        };
        let observed_corners: Vec<Vec3> = observed_box
            .corners()
            .iter()
            .map(|c| *c + Vec3::new(noise(), noise(), noise()))
            .collect();
        let canonical_corners = canonical.corners();

        let score = |dx: f64, dy: f64, yaw: f64| -> f64 {
            let t = RigidTransform::from_yaw_translation(yaw, Vec3::new(dx, dy, 0.0));
            observed_corners
                .iter()
                .zip(canonical_corners.iter())
                .map(|(q, p)| (*p - t.apply_point(*q)).norm_squared())
                .sum()
        };

        let mut best = (f64::INFINITY, 0.0, 0.0, 0.0);
        let yaw_step = 0.1f64.to_radians();
        for ix in -60..=60 {
            for iy in -60..=60 {
                for iw in -40..=40 {
                    let (dx, dy, yaw) = (ix as f64 * 1e-3, iy as f64 * 1e-3, iw as f64 * yaw_step);
                    let s = score(dx, dy, yaw);
                    if s < best.0 {
                        best = (s, dx, dy, yaw);
                    }
                }
            }
        }

        // Kabsch path needs an OrientedBox; fit one through the perturbed
        // corners by estimating against the unperturbed parametric box and
        // composing. Instead, run Kabsch directly on the corner sets here.
        let estimated = {
            let p_bar = canonical.center;
            let q_bar = observed_corners
                .iter()
                .fold(Vec3::ZERO, |acc, c| acc + *c)
                * (1.0 / 8.0);
            let mut h = nalgebra::Matrix3::<f64>::zeros();
            for i in 0..8 {
                let dq = observed_corners[i] - q_bar;
                let dp = canonical_corners[i] - p_bar;
                h += nalgebra::Vector3::new(dq.x, dq.y, dq.z)
                    * nalgebra::Vector3::new(dp.x, dp.y, dp.z).transpose();
            }
            let svd = h.svd(true, true);
            let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
            let v = v_t.transpose();
            let d = (v * u.transpose()).determinant();
            let corr =
                nalgebra::Matrix3::from_diagonal(&nalgebra::Vector3::new(1.0, 1.0, d.signum()));
            let r = v * corr * u.transpose();
            let rotation = Mat3::from_rows([
                [r[(0, 0)], r[(0, 1)], r[(0, 2)]],
                [r[(1, 0)], r[(1, 1)], r[(1, 2)]],
                [r[(2, 0)], r[(2, 1)], r[(2, 2)]],
            ]);
            RigidTransform {
                rotation,
                translation: p_bar - rotation.mul_vec(q_bar),
            }
        };

        assert_abs_diff_eq!(estimated.translation.x, best.1, epsilon = 1e-2);
        assert_abs_diff_eq!(estimated.translation.y, best.2, epsilon = 1e-2);
        assert_abs_diff_eq!(estimated.yaw(), best.3, epsilon = 1e-2);
        // Sanity: both should be near the ground truth used to generate data.
        assert_abs_diff_eq!(estimated.yaw(), truth.yaw(), epsilon = 2e-2);
    }

    #[test]
    fn degenerate_box_is_rejected() {
        assert!(OrientedBox::new(Vec3::ZERO, Vec3::new(0.0, 1.0, 1.0), 0.0).is_err());
        let good = OrientedBox::new(Vec3::ZERO, Vec3::new(1.0, 1.0, 1.0), 0.0).unwrap();
        let bad = OrientedBox { size: Vec3::new(1.0, 0.0, 1.0), ..good };
        assert!(estimate_box_transform(&good, &bad).is_err());
    }

    proptest! {
        #[test]
        fn estimate_is_exact_without_noise(
            yaw in -PI..PI,
            dx in -20.0..20.0f64,
            dy in -20.0..20.0f64,
            dz in -2.0..2.0f64,
            box_yaw in -PI..PI,
        ) {
            let base = OrientedBox::new(
                Vec3::new(1.0, 2.0, 0.5), Vec3::new(4.5, 1.9, 1.7), box_yaw).unwrap();
            let t = RigidTransform::from_yaw_translation(yaw, Vec3::new(dx, dy, dz));
            let moved = base.transformed(&t);
            let est = estimate_box_transform(&moved, &base).unwrap();
            for (a, b) in moved.corners().iter().zip(base.corners().iter()) {
                let mapped = est.apply_point(*b);
                prop_assert!((mapped - *a).norm() < 1e-9);
            }
        }

        #[test]
        fn ray_box_interval_is_rigid_invariant(
            yaw in -PI..PI,
            dx in -5.0..5.0f64,
            dy in -5.0..5.0f64,
            oy in -0.4..0.4f64,
            oz in -0.4..0.4f64,
        ) {
            let ray = Ray::new(Vec3::new(-4.0, oy, oz), Vec3::new(1.0, 0.12, -0.05), 50.0).unwrap();
            let bbox = OrientedBox::new(
                Vec3::new(1.0, 0.0, 0.0), Vec3::new(2.0, 1.2, 0.9), 0.4).unwrap();
            let t = RigidTransform::from_yaw_translation(yaw, Vec3::new(dx, dy, 0.0));
            let hit_a = ray_box_intersect(&ray, &bbox);
            let hit_b = ray_box_intersect(&ray.transformed(&t), &bbox.transformed(&t));
            match (hit_a, hit_b) {
                (None, None) => {}
                (Some((a0, a1)), Some((b0, b1))) => {
                    prop_assert!((a0 - b0).abs() < 1e-9);
                    prop_assert!((a1 - b1).abs() < 1e-9);
                }
                other => prop_assert!(false, "hit/miss mismatch: {:?}", other),
            }
        }

        #[test]
        fn corners_commute_with_transform(
            yaw in -PI..PI,
            dx in -10.0..10.0f64,
            dz in -1.0..1.0f64,
        ) {
            let bbox = OrientedBox::new(
                Vec3::new(0.5, -1.0, 0.2), Vec3::new(3.0, 1.5, 1.2), 0.7).unwrap();
            let t = RigidTransform::from_yaw_translation(yaw, Vec3::new(dx, 0.0, dz));
            let direct: Vec<Vec3> = bbox.corners().iter().map(|c| t.apply_point(*c)).collect();
            let derived = bbox.transformed(&t).corners();
            for (a, b) in direct.iter().zip(derived.iter()) {
                prop_assert!((*a - *b).norm() < 1e-9);
            }
        }
    }
}
