//! Binary occupancy grid of observed space, with morphological dilation.
//!
//! Background rendering consults this grid: field samples in voxels never
//! covered by the source scans are forced to drop instead of being trusted
//! as surface, which keeps extrapolated geometry out of the output.

use crate::geom::{Aabb, Vec3};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OccupancyError {
    #[error("cannot build an occupancy grid from an empty cloud")]
    EmptyCloud,
    #[error("voxel size must be positive, got {0}")]
    BadVoxelSize(f64),
    #[error("occupancy file i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic in occupancy file")]
    BadMagic,
    #[error("unsupported occupancy file version {0}")]
    BadVersion(u32),
}

/// Bit-packed voxel grid. Voxels follow the half-open convention
/// `[lo, hi)` per axis; a point exactly on the upper boundary of the grid is
/// outside.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGrid {
    pub bounds: Aabb,
    pub voxel_size: f64,
    pub dims: [usize; 3],
    bits: Vec<u64>,
}

impl OccupancyGrid {
    /// Builds the grid from a world-frame cloud: a voxel is occupied iff at
    /// least one point falls inside it. Bounds are the tight cloud bounds
    /// padded by one voxel.
    pub fn build(points: &[Vec3], voxel_size: f64) -> Result<Self, OccupancyError> {
        if voxel_size <= 0.0 {
            return Err(OccupancyError::BadVoxelSize(voxel_size));
        }
        let tight = Aabb::from_points(points.iter()).ok_or(OccupancyError::EmptyCloud)?;
        let bounds = tight.padded(voxel_size);
        let ext = bounds.extent();
        let dims = [
            (ext.x / voxel_size).ceil().max(1.0) as usize,
            (ext.y / voxel_size).ceil().max(1.0) as usize,
            (ext.z / voxel_size).ceil().max(1.0) as usize,
        ];
        let mut grid = OccupancyGrid::empty(bounds, voxel_size, dims);
        for p in points {
            if let Some(idx) = grid.voxel_of(*p) {
                grid.set(idx, true);
            }
        }
        Ok(grid)
    }

    pub fn empty(bounds: Aabb, voxel_size: f64, dims: [usize; 3]) -> Self {
        let n = dims[0] * dims[1] * dims[2];
        OccupancyGrid {
            bounds,
            voxel_size,
            dims,
            bits: vec![0; n.div_ceil(64)],
        }
    }

    /// Voxel indices of `p`, or `None` outside the grid.
    pub fn voxel_of(&self, p: Vec3) -> Option<[usize; 3]> {
        let rel = p - self.bounds.min;
        let coords = [rel.x, rel.y, rel.z];
        let mut out = [0usize; 3];
        for a in 0..3 {
            let i = (coords[a] / self.voxel_size).floor();
            if i < 0.0 || i >= self.dims[a] as f64 {
                return None;
            }
            out[a] = i as usize;
        }
        Some(out)
    }

    fn linear(&self, v: [usize; 3]) -> usize {
        v[0] + self.dims[0] * (v[1] + self.dims[1] * v[2])
    }

    pub fn get(&self, v: [usize; 3]) -> bool {
        let i = self.linear(v);
        self.bits[i / 64] >> (i % 64) & 1 == 1
    }

    pub fn set(&mut self, v: [usize; 3], value: bool) {
        let i = self.linear(v);
        if value {
            self.bits[i / 64] |= 1 << (i % 64);
        } else {
            self.bits[i / 64] &= !(1 << (i % 64));
        }
    }

    pub fn occupied_count(&self) -> usize {
        self.bits.iter().map(|w| w.count_ones() as usize).sum()
    }

    /// Morphological dilation with a cube structuring element: a voxel is
    /// occupied iff any voxel within Chebyshev distance `radius_voxels` was
    /// occupied. Radius 0 is the identity. Separable per axis, so radii add
    /// under composition.
    pub fn dilate(&self, radius_voxels: usize) -> OccupancyGrid {
        if radius_voxels == 0 {
            return self.clone();
        }
        let mut current = self.clone();
        for axis in 0..3 {
            let mut next = OccupancyGrid::empty(self.bounds, self.voxel_size, self.dims);
            let dims = self.dims;
            for z in 0..dims[2] {
                for y in 0..dims[1] {
                    for x in 0..dims[0] {
                        if !current.get([x, y, z]) {
                            continue;
                        }
                        let coord = [x, y, z];
                        let lo = coord[axis].saturating_sub(radius_voxels);
                        let hi = (coord[axis] + radius_voxels).min(dims[axis] - 1);
                        for i in lo..=hi {
                            let mut v = coord;
                            v[axis] = i;
                            next.set(v, true);
                        }
                    }
                }
            }
            current = next;
        }
        current
    }

    /// True iff `p` lies inside the grid bounds and its voxel is occupied.
    /// Points outside the grid are unobserved by definition.
    pub fn is_observed(&self, p: Vec3) -> bool {
        match self.voxel_of(p) {
            Some(v) => self.get(v),
            None => false,
        }
    }

    /// Serialized layout: magic, version, bounds (6 LE f64), voxel size
    /// (LE f64), dims (3 LE u32), then the bit-packed payload as LE u64
    /// words (bit `i` of the grid at word `i / 64`, bit `i % 64`).
    pub fn write_to<W: std::io::Write>(&self, w: &mut W) -> Result<(), OccupancyError> {
        w.write_all(GRID_MAGIC)?;
        w.write_u32::<LittleEndian>(GRID_VERSION)?;
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
        w.write_f64::<LittleEndian>(self.voxel_size)?;
        for d in self.dims {
            w.write_u32::<LittleEndian>(d as u32)?;
        }
        for word in &self.bits {
            w.write_u64::<LittleEndian>(*word)?;
        }
        Ok(())
    }

    pub fn read_from<R: std::io::Read>(r: &mut R) -> Result<Self, OccupancyError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != GRID_MAGIC {
            return Err(OccupancyError::BadMagic);
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != GRID_VERSION {
            return Err(OccupancyError::BadVersion(version));
        }
        let mut b = [0.0f64; 6];
        for v in &mut b {
            *v = r.read_f64::<LittleEndian>()?;
        }
        let bounds = Aabb::new(Vec3::new(b[0], b[1], b[2]), Vec3::new(b[3], b[4], b[5]));
        let voxel_size = r.read_f64::<LittleEndian>()?;
        let mut dims = [0usize; 3];
        for d in &mut dims {
            *d = r.read_u32::<LittleEndian>()? as usize;
        }
        let mut grid = OccupancyGrid::empty(bounds, voxel_size, dims);
        for word in &mut grid.bits {
            *word = r.read_u64::<LittleEndian>()?;
        }
        Ok(grid)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), OccupancyError> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, OccupancyError> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        OccupancyGrid::read_from(&mut r)
    }
}

const GRID_MAGIC: &[u8; 8] = b"OCCGRID\0";
const GRID_VERSION: u32 = 1;

/// Visibility constraint for one background field sample: observed points
/// pass through unchanged, unobserved points become a forced drop
/// (`p_d = 1`) with no surface (`s = None`).
pub fn constrain_background_sample(
    grid: &OccupancyGrid,
    p: Vec3,
    field_eval: (f64, f64),
) -> (Option<f64>, f64) {
    if grid.is_observed(p) {
        (Some(field_eval.0), field_eval.1)
    } else {
        (None, 1.0)
    }
}
