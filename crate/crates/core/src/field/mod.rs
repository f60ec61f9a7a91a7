//! Explicit trilinear-grid SDF + ray-drop field.
//!
//! One instance models the static background, and one per reconstructed
//! vehicle in its canonical box frame. The grid stores a signed distance
//! value and a ray-drop logit at every node; queries interpolate
//! trilinearly, so the model is linear in its parameters and all loss
//! gradients are derived by hand in [`loss`].

mod fit;
mod loss;

pub use fit::{fit_field, initialize_from_endpoints, GridSpec};
pub use loss::{loss_total, loss_total_at, LossBreakdown, ParamGradient};

use crate::geom::{Aabb, Ray, RigidTransform, Vec3};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use thiserror::Error;

/// Drop logits are clamped to this magnitude; `sigmoid(16)` is within 1e-7
/// of saturation.
pub const LOGIT_CLAMP: f64 = 16.0;

/// Sentinel max range for training rays, which carry no sensor range limit.
pub const TRAINING_RAY_RANGE: f64 = 1e6;

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("resolution must be at least 2 nodes per axis, got {0:?}")]
    BadResolution([usize; 3]),
    #[error("bounds have non-positive extent")]
    BadBounds,
    #[error("loss weights must be nonnegative and not all zero")]
    BadWeights,
    #[error("sphere tracing failed for every hit ray in the batch")]
    NoConvergedRays,
    #[error("batch contains no samples")]
    EmptyBatch,
    #[error("fit requires at least one hit sample")]
    NoHitSamples,
    #[error("loss became non-finite at iteration {0}")]
    Diverged(usize),
    #[error("field file i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic in field file")]
    BadMagic,
    #[error("unsupported field file version {0}")]
    BadVersion(u32),
}

/// One labeled training ray: a hit carries the measured range, a drop does
/// not.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RaySample {
    pub origin: Vec3,
    /// Unit direction.
    pub direction: Vec3,
    /// Present iff the ray produced a return.
    pub range: Option<f64>,
}

impl RaySample {
    pub fn hit(origin: Vec3, direction: Vec3, range: f64) -> Self {
        debug_assert!(range > 0.0);
        RaySample {
            origin,
            direction,
            range: Some(range),
        }
    }

    pub fn drop(origin: Vec3, direction: Vec3) -> Self {
        RaySample {
            origin,
            direction,
            range: None,
        }
    }

    pub fn is_drop(&self) -> bool {
        self.range.is_none()
    }

    /// Hit endpoint in the sample's frame; `None` for drops.
    pub fn endpoint(&self) -> Option<Vec3> {
        self.range.map(|r| self.origin + self.direction * r)
    }

    pub fn as_ray(&self) -> Ray {
        Ray {
            origin: self.origin,
            direction: self.direction,
            max_range: TRAINING_RAY_RANGE,
        }
    }
}

/// Weights of the four loss terms.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    /// L1 range loss on sphere-traced vs measured distance.
    pub range: f64,
    /// |s| penalty at measured surface points.
    pub surface: f64,
    /// (|grad s| - 1)^2 penalty at uniform points in bounds.
    pub eikonal: f64,
    /// BCE + Lovasz hinge on per-ray drop predictions.
    pub drop: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            range: 1.0,
            surface: 1.0,
            eikonal: 0.1,
            drop: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), FieldError> {
        let all = [self.range, self.surface, self.eikonal, self.drop];
        if all.iter().any(|w| *w < 0.0) || all.iter().all(|w| *w == 0.0) {
            return Err(FieldError::BadWeights);
        }
        Ok(())
    }
}

/// Gradient-descent settings for [`fit_field`].
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FitConfig {
    /// Mini-batch iterations; 0 returns the initialization unchanged.
    pub iterations: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Uniform points drawn per batch for the eikonal term.
    pub eikonal_samples: usize,
    pub seed: u64,
    pub trace: TraceParams,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            iterations: 2000,
            learning_rate: 0.02,
            batch_size: 1024,
            eikonal_samples: 256,
            seed: 0,
            trace: TraceParams::default(),
        }
    }
}

/// Sphere-tracing settings.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TraceParams {
    /// Convergence threshold on |s|, meters.
    pub eps: f64,
    pub max_steps: usize,
}

impl Default for TraceParams {
    fn default() -> Self {
        TraceParams {
            eps: 1e-3,
            max_steps: 128,
        }
    }
}

/// Outcome of marching one ray through one field.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TraceOutcome {
    /// Converged on the zero level set at this parametric distance.
    Hit { range: f64 },
    /// Converged, but the visibility constraint rejected the point.
    ForcedDrop,
    /// Exited the traced interval or ran out of steps.
    Miss,
}

/// Interpolation cell for a query point: base node, per-axis fractions, and
/// whether each coordinate was clamped to the border.
#[derive(Debug, Clone, Copy)]
pub struct Cell {
    base: [usize; 3],
    frac: [f64; 3],
    clamped: [bool; 3],
}

/// Trilinear grid of SDF values and drop logits over an axis-aligned box.
///
/// Nodes are stored x-fastest: `index = x + nx * (y + ny * z)`. Resolution
/// counts nodes per axis (at least 2). Queries outside the bounds clamp to
/// the border nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct SdfGridField {
    pub bounds: Aabb,
    pub resolution: [usize; 3],
    pub truncation: f64,
    sdf: Vec<f64>,
    drop_logits: Vec<f64>,
}

impl SdfGridField {
    pub fn new(bounds: Aabb, resolution: [usize; 3], truncation: f64) -> Result<Self, FieldError> {
        if resolution.iter().any(|&n| n < 2) {
            return Err(FieldError::BadResolution(resolution));
        }
        let ext = bounds.extent();
        if ext.x <= 0.0 || ext.y <= 0.0 || ext.z <= 0.0 || truncation <= 0.0 {
            return Err(FieldError::BadBounds);
        }
        let n = resolution[0] * resolution[1] * resolution[2];
        Ok(SdfGridField {
            bounds,
            resolution,
            truncation,
            sdf: vec![truncation; n],
            drop_logits: vec![0.0; n],
        })
    }

    /// Grid with roughly `voxel`-sized cells covering `bounds`, truncation
    /// fixed at 4 voxels.
    pub fn with_voxel_size(bounds: Aabb, voxel: f64) -> Result<Self, FieldError> {
        if voxel <= 0.0 {
            return Err(FieldError::BadBounds);
        }
        let ext = bounds.extent();
        let res = [
            ((ext.x / voxel).ceil() as usize + 1).max(2),
            ((ext.y / voxel).ceil() as usize + 1).max(2),
            ((ext.z / voxel).ceil() as usize + 1).max(2),
        ];
        SdfGridField::new(bounds, res, 4.0 * voxel)
    }

    pub fn node_count(&self) -> usize {
        self.sdf.len()
    }

    /// Cell edge lengths per axis.
    pub fn spacing(&self) -> Vec3 {
        let ext = self.bounds.extent();
        Vec3::new(
            ext.x / (self.resolution[0] - 1) as f64,
            ext.y / (self.resolution[1] - 1) as f64,
            ext.z / (self.resolution[2] - 1) as f64,
        )
    }

    /// Largest cell edge, used as "the voxel size" in error budgets.
    pub fn voxel_size(&self) -> f64 {
        let s = self.spacing();
        s.x.max(s.y).max(s.z)
    }

    pub fn node_index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        ix + self.resolution[0] * (iy + self.resolution[1] * iz)
    }

    pub fn node_position(&self, ix: usize, iy: usize, iz: usize) -> Vec3 {
        let h = self.spacing();
        self.bounds.min + Vec3::new(ix as f64 * h.x, iy as f64 * h.y, iz as f64 * h.z)
    }

    pub fn sdf_values(&self) -> &[f64] {
        &self.sdf
    }

    pub fn drop_logits(&self) -> &[f64] {
        &self.drop_logits
    }

    pub fn sdf_values_mut(&mut self) -> &mut [f64] {
        &mut self.sdf
    }

    pub fn drop_logits_mut(&mut self) -> &mut [f64] {
        &mut self.drop_logits
    }

    pub fn set_node(&mut self, ix: usize, iy: usize, iz: usize, sdf: f64, logit: f64) {
        let i = self.node_index(ix, iy, iz);
        self.sdf[i] = sdf;
        self.drop_logits[i] = logit;
    }

    /// Clamps parameters to their admissible ranges.
    pub fn clamp_params(&mut self) {
        let t = self.truncation;
        for v in &mut self.sdf {
            *v = v.clamp(-t, t);
        }
        for v in &mut self.drop_logits {
            *v = v.clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
        }
    }

    /// Locates the interpolation cell for `p`, clamping to the border.
    pub fn locate(&self, p: Vec3) -> Cell {
        let h = self.spacing();
        let mut base = [0usize; 3];
        let mut frac = [0.0f64; 3];
        let mut clamped = [false; 3];
        let coords = [
            (p.x, self.bounds.min.x, h.x, self.resolution[0]),
            (p.y, self.bounds.min.y, h.y, self.resolution[1]),
            (p.z, self.bounds.min.z, h.z, self.resolution[2]),
        ];
        for (a, (x, lo, step, n)) in coords.into_iter().enumerate() {
            let u = (x - lo) / step;
            let max_u = (n - 1) as f64;
            let uc = u.clamp(0.0, max_u);
            clamped[a] = uc != u;
            let i = (uc.floor() as usize).min(n - 2);
            base[a] = i;
            frac[a] = uc - i as f64;
        }
        Cell { base, frac, clamped }
    }

    /// Calls `f(node_index, weight)` for the 8 nodes of the cell.
    pub fn for_each_node_weight(&self, cell: &Cell, mut f: impl FnMut(usize, f64)) {
        let [fx, fy, fz] = cell.frac;
        let wx = [1.0 - fx, fx];
        let wy = [1.0 - fy, fy];
        let wz = [1.0 - fz, fz];
        for dz in 0..2 {
            for dy in 0..2 {
                for dx in 0..2 {
                    let idx = self.node_index(
                        cell.base[0] + dx,
                        cell.base[1] + dy,
                        cell.base[2] + dz,
                    );
                    f(idx, wx[dx] * wy[dy] * wz[dz]);
                }
            }
        }
    }

    /// Calls `f(node_index, grad of that node's weight w.r.t. position)`.
    /// Along a clamped axis the interpolant is constant, so that component
    /// is zero.
    pub fn for_each_node_weight_gradient(&self, cell: &Cell, mut f: impl FnMut(usize, Vec3)) {
        let h = self.spacing();
        let [fx, fy, fz] = cell.frac;
        let wx = [1.0 - fx, fx];
        let wy = [1.0 - fy, fy];
        let wz = [1.0 - fz, fz];
        let sx = [-1.0 / h.x, 1.0 / h.x];
        let sy = [-1.0 / h.y, 1.0 / h.y];
        let sz = [-1.0 / h.z, 1.0 / h.z];
        for dz in 0..2 {
            for dy in 0..2 {
                for dx in 0..2 {
                    let idx = self.node_index(
                        cell.base[0] + dx,
                        cell.base[1] + dy,
                        cell.base[2] + dz,
                    );
                    let g = Vec3::new(
                        if cell.clamped[0] { 0.0 } else { sx[dx] * wy[dy] * wz[dz] },
                        if cell.clamped[1] { 0.0 } else { wx[dx] * sy[dy] * wz[dz] },
                        if cell.clamped[2] { 0.0 } else { wx[dx] * wy[dy] * sz[dz] },
                    );
                    f(idx, g);
                }
            }
        }
    }

    fn interp(&self, values: &[f64], cell: &Cell) -> f64 {
        let mut acc = 0.0;
        self.for_each_node_weight(cell, |idx, w| acc += w * values[idx]);
        acc
    }

    /// Trilinearly interpolated signed distance at `p` (border-clamped).
    pub fn query_sdf(&self, p: Vec3) -> f64 {
        let cell = self.locate(p);
        self.interp(&self.sdf, &cell)
    }

    /// Analytic gradient of the trilinear interpolant; piecewise linear per
    /// axis, discontinuous across cell faces.
    pub fn query_sdf_gradient(&self, p: Vec3) -> Vec3 {
        let cell = self.locate(p);
        let mut acc = Vec3::ZERO;
        self.for_each_node_weight_gradient(&cell, |idx, g| acc = acc + g * self.sdf[idx]);
        acc
    }

    /// Interpolated drop logit at `p`.
    pub fn query_drop_logit(&self, p: Vec3) -> f64 {
        let cell = self.locate(p);
        self.interp(&self.drop_logits, &cell)
    }

    /// Ray drop probability in [0, 1]: sigmoid of the interpolated logit.
    pub fn query_drop(&self, p: Vec3) -> f64 {
        sigmoid(self.query_drop_logit(p))
    }

    /// Sphere trace within the field bounds (optionally clipped to a
    /// parametric interval).
    pub fn trace(&self, ray: &Ray, clip: Option<(f64, f64)>, params: &TraceParams) -> TraceOutcome {
        self.trace_impl(ray, clip, params, None, |_| true)
    }

    /// Sphere trace where a converged point is accepted as surface only if
    /// `observed` holds there; otherwise the ray is a forced drop.
    pub fn trace_constrained(
        &self,
        ray: &Ray,
        clip: Option<(f64, f64)>,
        params: &TraceParams,
        observed: impl Fn(Vec3) -> bool,
    ) -> TraceOutcome {
        self.trace_impl(ray, clip, params, None, observed)
    }

    /// Sphere trace evaluating the field at per-axis scaled coordinates
    /// (`query = p * scale` componentwise). Used to render a donor field
    /// inside a differently sized recipient box; steps shrink by the largest
    /// scale factor so the march never tunnels.
    pub fn trace_scaled(
        &self,
        ray: &Ray,
        clip: Option<(f64, f64)>,
        params: &TraceParams,
        scale: Vec3,
    ) -> TraceOutcome {
        self.trace_impl(ray, clip, params, Some(scale), |_| true)
    }

    fn trace_impl(
        &self,
        ray: &Ray,
        clip: Option<(f64, f64)>,
        params: &TraceParams,
        scale: Option<Vec3>,
        observed: impl Fn(Vec3) -> bool,
    ) -> TraceOutcome {
        let sample_point = |t: f64| -> Vec3 {
            let p = ray.point_at(t);
            match scale {
                Some(s) => Vec3::new(p.x * s.x, p.y * s.y, p.z * s.z),
                None => p,
            }
        };
        // Interval where the (scaled) ray is inside bounds.
        let probe = match scale {
            Some(s) => Ray {
                origin: Vec3::new(ray.origin.x * s.x, ray.origin.y * s.y, ray.origin.z * s.z),
                direction: Vec3::new(
                    ray.direction.x * s.x,
                    ray.direction.y * s.y,
                    ray.direction.z * s.z,
                ),
                max_range: ray.max_range,
            },
            None => *ray,
        };
        let Some((mut t0, mut t1)) = self.bounds.ray_interval(&probe) else {
            return TraceOutcome::Miss;
        };
        if let Some((c0, c1)) = clip {
            t0 = t0.max(c0);
            t1 = t1.min(c1);
            if t0 > t1 {
                return TraceOutcome::Miss;
            }
        }
        let step_shrink = match scale {
            Some(s) => 1.0 / s.x.abs().max(s.y.abs()).max(s.z.abs()),
            None => 1.0,
        };

        let mut t = t0;
        let mut prev: Option<(f64, f64)> = None;
        for _ in 0..params.max_steps {
            let q = sample_point(t);
            let s = self.interp(&self.sdf, &self.locate(q));
            if s.abs() <= params.eps {
                return self.finish_hit(ray, t, t0, t1, params, scale, &observed);
            }
            if s < 0.0 {
                // Overshot a thin surface: bracket between the last positive
                // sample and here, then refine. With no bracket we started
                // inside matter at the interval entry.
                let t_hit = match prev {
                    Some((tp, sp)) => self.bisect(ray, tp, sp, t, s, params, scale),
                    None => t0,
                };
                return self.finish_hit(ray, t_hit, t0, t1, params, scale, &observed);
            }
            prev = Some((t, s));
            t += s * step_shrink;
            if t > t1 {
                return TraceOutcome::Miss;
            }
        }
        TraceOutcome::Miss
    }

    fn bisect(
        &self,
        ray: &Ray,
        mut t_lo: f64,
        mut s_lo: f64,
        mut t_hi: f64,
        mut s_hi: f64,
        params: &TraceParams,
        scale: Option<Vec3>,
    ) -> f64 {
        // s_lo > 0 > s_hi; shrink by regula falsi until within eps.
        for _ in 0..32 {
            let t = t_lo + (t_hi - t_lo) * s_lo / (s_lo - s_hi);
            let q = match scale {
                Some(sc) => {
                    let p = ray.point_at(t);
                    Vec3::new(p.x * sc.x, p.y * sc.y, p.z * sc.z)
                }
                None => ray.point_at(t),
            };
            let s = self.interp(&self.sdf, &self.locate(q));
            if s.abs() <= params.eps {
                return t;
            }
            if s > 0.0 {
                t_lo = t;
                s_lo = s;
            } else {
                t_hi = t;
                s_hi = s;
            }
        }
        0.5 * (t_lo + t_hi)
    }

    #[allow(clippy::too_many_arguments)]
    fn finish_hit(
        &self,
        ray: &Ray,
        t: f64,
        t0: f64,
        t1: f64,
        params: &TraceParams,
        scale: Option<Vec3>,
        observed: &impl Fn(Vec3) -> bool,
    ) -> TraceOutcome {
        let refined = self.newton_polish(ray, t, t0, t1, scale);
        let q = match scale {
            Some(s) => {
                let p = ray.point_at(refined);
                Vec3::new(p.x * s.x, p.y * s.y, p.z * s.z)
            }
            None => ray.point_at(refined),
        };
        // Keep the polished point only if it still satisfies convergence.
        let s = self.interp(&self.sdf, &self.locate(q));
        let (t_final, p_final) = if s.abs() <= params.eps {
            (refined, q)
        } else {
            let q0 = match scale {
                Some(sc) => {
                    let p = ray.point_at(t);
                    Vec3::new(p.x * sc.x, p.y * sc.y, p.z * sc.z)
                }
                None => ray.point_at(t),
            };
            (t, q0)
        };
        if observed(p_final) {
            TraceOutcome::Hit { range: t_final }
        } else {
            TraceOutcome::ForcedDrop
        }
    }

    /// Newton refinement of the convergence point; tightens |s| far below
    /// eps so the implicit range gradient is evaluated at a true root.
    fn newton_polish(&self, ray: &Ray, mut t: f64, t0: f64, t1: f64, scale: Option<Vec3>) -> f64 {
        let max_step = self.spacing().x.min(self.spacing().y).min(self.spacing().z);
        for _ in 0..8 {
            let q = match scale {
                Some(s) => {
                    let p = ray.point_at(t);
                    Vec3::new(p.x * s.x, p.y * s.y, p.z * s.z)
                }
                None => ray.point_at(t),
            };
            let cell = self.locate(q);
            let s = self.interp(&self.sdf, &cell);
            if s.abs() < 1e-12 {
                break;
            }
            let mut grad = Vec3::ZERO;
            self.for_each_node_weight_gradient(&cell, |idx, g| grad = grad + g * self.sdf[idx]);
            let dir_q = match scale {
                Some(sc) => Vec3::new(
                    ray.direction.x * sc.x,
                    ray.direction.y * sc.y,
                    ray.direction.z * sc.z,
                ),
                None => ray.direction,
            };
            let slope = grad.dot(dir_q);
            if slope.abs() < 1e-9 {
                break;
            }
            let dt = (-s / slope).clamp(-max_step, max_step);
            t = (t + dt).clamp(t0, t1);
        }
        t
    }

    /// Bytes of a serialized field: magic, version, bounds (6 LE f64),
    /// resolution (3 LE u32), truncation (LE f64), then node SDF values and
    /// drop logits as LE f32 in x-fastest order.
    pub fn write_to<W: std::io::Write>(&self, w: &mut W) -> Result<(), FieldError> {
        w.write_all(FIELD_MAGIC)?;
        w.write_u32::<LittleEndian>(FIELD_VERSION)?;
        for v in [
            self.bounds.min.x,
            self.bounds.min.y,
            self.bounds.min.z,
            self.bounds.max.x,
            self.bounds.max.y,
            self.bounds.max.z,
        ] {
            w.write_f64::<LittleEndian>(v)?;
        }
        for n in self.resolution {
            w.write_u32::<LittleEndian>(n as u32)?;
        }
        w.write_f64::<LittleEndian>(self.truncation)?;
        for v in &self.sdf {
            w.write_f32::<LittleEndian>(*v as f32)?;
        }
        for v in &self.drop_logits {
            w.write_f32::<LittleEndian>(*v as f32)?;
        }
        Ok(())
    }

    pub fn read_from<R: std::io::Read>(r: &mut R) -> Result<Self, FieldError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != FIELD_MAGIC {
            return Err(FieldError::BadMagic);
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != FIELD_VERSION {
            return Err(FieldError::BadVersion(version));
        }
        let mut b = [0.0f64; 6];
        for v in &mut b {
            *v = r.read_f64::<LittleEndian>()?;
        }
        let bounds = Aabb::new(Vec3::new(b[0], b[1], b[2]), Vec3::new(b[3], b[4], b[5]));
        let mut resolution = [0usize; 3];
        for n in &mut resolution {
            *n = r.read_u32::<LittleEndian>()? as usize;
        }
        let truncation = r.read_f64::<LittleEndian>()?;
        let mut field = SdfGridField::new(bounds, resolution, truncation)?;
        for v in &mut field.sdf {
            *v = r.read_f32::<LittleEndian>()? as f64;
        }
        for v in &mut field.drop_logits {
            *v = r.read_f32::<LittleEndian>()? as f64;
        }
        Ok(field)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), FieldError> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, FieldError> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        SdfGridField::read_from(&mut r)
    }
}

const FIELD_MAGIC: &[u8; 8] = b"SDFGRID\0";
const FIELD_VERSION: u32 = 1;

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Evaluates a canonical-space field for a ray given in another frame:
/// transforms the ray by `to_canonical`, traces, and reports the hit range
/// (invariant under the rigid map) and the drop probability at the hit.
pub fn canonical_query(
    field: &SdfGridField,
    to_canonical: &RigidTransform,
    ray: &Ray,
    params: &TraceParams,
) -> Option<(f64, f64)> {
    let canonical_ray = ray.transformed(to_canonical);
    match field.trace(&canonical_ray, None, params) {
        TraceOutcome::Hit { range } => {
            let p = canonical_ray.point_at(range);
            Some((range, field.query_drop(p)))
        }
        _ => None,
    }
}
