//! Core library for cross-view LiDAR synthesis: reconstructs a driving scene
//! from vehicle-mounted scans (one static background field plus per-vehicle
//! canonical fields) and re-renders labeled point clouds from arbitrary
//! elevated sensor poses.
//!
//! Module map:
//! - [`geom`]: vectors, SE(3) transforms, oriented boxes, ray-box tests.
//! - [`spatial`]: k-d tree for nearest-point and point-to-ray queries.
//! - [`decomp`]: splits annotated sequences into per-vehicle point sets and a
//!   clean static background.
//! - [`field`]: trilinear grid SDF + ray-drop field with a four-term loss and
//!   an Adam fitter.
//! - [`raysample`]: scan-to-ray conversion, per-field ray assignment, and
//!   multi-view ring sampling around vehicles.
//! - [`occupancy`]: dilated binary voxel map implementing the visibility
//!   constraint for background rendering.
//! - [`render`]: sphere tracing and k+1-candidate compositing into labeled
//!   frames.
//! - [`eval`]: Chamfer / range / drop metrics between rendered frames.
//! - [`io`]: dataset and artifact file formats.

pub mod decomp;
pub mod eval;
pub mod field;
pub mod geom;
pub mod io;
pub mod occupancy;
pub mod raysample;
pub mod render;
pub mod spatial;

pub use geom::{OrientedBox, Ray, RigidTransform, Vec3};
