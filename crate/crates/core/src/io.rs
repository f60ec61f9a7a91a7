//! Dataset and artifact file formats.
//!
//! Dataset layout (one directory per fragment under the dataset root):
//!
//! ```text
//! root/
//!   <fragment>/
//!     frames/000000.bin ...   point clouds, LE f32 x,y,z,intensity per point
//!     poses.jsonl             {"frame_id", "timestamp", "pose": [16 f64 row-major]}
//!     labels.jsonl            {"frame_id", "boxes": [{"track_id", "type",
//!                              "center": [3], "size": [3], "yaw"}]}
//! ```
//!
//! Rendered output uses the same point format, the same label schema (boxes
//! in sensor frame), and a bit-packed drop mask sidecar.

use crate::decomp::{Frame, TrackId};
use crate::geom::{Mat3, OrientedBox, RigidTransform, Vec3};
use crate::render::{PointSource, RenderedFrame};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("missing file: {0}")]
    MissingFile(PathBuf),
    #[error("{path}:{offset}: {msg}")]
    Format {
        path: PathBuf,
        offset: u64,
        msg: String,
    },
    #[error("i/o on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

fn io_err(path: &Path, source: std::io::Error) -> IoError {
    if source.kind() == std::io::ErrorKind::NotFound {
        IoError::MissingFile(path.to_path_buf())
    } else {
        IoError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

fn format_err(path: &Path, offset: u64, msg: impl Into<String>) -> IoError {
    IoError::Format {
        path: path.to_path_buf(),
        offset,
        msg: msg.into(),
    }
}

/// Bytes per point record: four LE f32 (x, y, z, intensity).
const POINT_RECORD: u64 = 16;

/// Reads a point cloud; the intensity channel is parsed and discarded.
pub fn read_points_bin(path: &Path) -> Result<Vec<Vec3>, IoError> {
    let data = std::fs::read(path).map_err(|e| io_err(path, e))?;
    if data.len() as u64 % POINT_RECORD != 0 {
        return Err(format_err(
            path,
            data.len() as u64 - data.len() as u64 % POINT_RECORD,
            format!(
                "byte count {} is not divisible by the {}-byte point record",
                data.len(),
                POINT_RECORD
            ),
        ));
    }
    let mut out = Vec::with_capacity(data.len() / POINT_RECORD as usize);
    let mut cursor = &data[..];
    while !cursor.is_empty() {
        let x = cursor.read_f32::<LittleEndian>().expect("length checked");
        let y = cursor.read_f32::<LittleEndian>().expect("length checked");
        let z = cursor.read_f32::<LittleEndian>().expect("length checked");
        let _intensity = cursor.read_f32::<LittleEndian>().expect("length checked");
        out.push(Vec3::new(x as f64, y as f64, z as f64));
    }
    Ok(out)
}

/// Writes a point cloud with zero intensity. Coordinates quantize to f32.
pub fn write_points_bin(path: &Path, points: &[Vec3]) -> Result<(), IoError> {
    let mut buf = Vec::with_capacity(points.len() * POINT_RECORD as usize);
    for p in points {
        buf.write_f32::<LittleEndian>(p.x as f32).expect("vec write");
        buf.write_f32::<LittleEndian>(p.y as f32).expect("vec write");
        buf.write_f32::<LittleEndian>(p.z as f32).expect("vec write");
        buf.write_f32::<LittleEndian>(0.0).expect("vec write");
    }
    std::fs::write(path, buf).map_err(|e| io_err(path, e))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PoseRecord {
    pub frame_id: u64,
    pub timestamp: f64,
    /// Row-major 4x4 rigid transform, sensor to world.
    pub pose: [f64; 16],
}

impl PoseRecord {
    pub fn from_transform(frame_id: u64, timestamp: f64, t: &RigidTransform) -> Self {
        let r = t.rotation.rows;
        PoseRecord {
            frame_id,
            timestamp,
            pose: [
                r[0][0], r[0][1], r[0][2], t.translation.x,
                r[1][0], r[1][1], r[1][2], t.translation.y,
                r[2][0], r[2][1], r[2][2], t.translation.z,
                0.0, 0.0, 0.0, 1.0,
            ],
        }
    }

    pub fn to_transform(&self) -> Result<RigidTransform, String> {
        let p = &self.pose;
        if p[12] != 0.0 || p[13] != 0.0 || p[14] != 0.0 || p[15] != 1.0 {
            return Err("bottom row of the pose must be [0, 0, 0, 1]".into());
        }
        let rotation = Mat3::from_rows([
            [p[0], p[1], p[2]],
            [p[4], p[5], p[6]],
            [p[8], p[9], p[10]],
        ]);
        let translation = Vec3::new(p[3], p[7], p[11]);
        RigidTransform::new(rotation, translation).map_err(|e| e.to_string())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoxRecord {
    pub track_id: TrackId,
    #[serde(rename = "type")]
    pub kind: String,
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub yaw: f64,
}

impl BoxRecord {
    pub fn from_box(track_id: TrackId, bbox: &OrientedBox) -> Self {
        BoxRecord {
            track_id,
            kind: "car".to_string(),
            center: bbox.center.to_array(),
            size: bbox.size.to_array(),
            yaw: bbox.yaw,
        }
    }

    pub fn to_box(&self) -> Result<OrientedBox, String> {
        OrientedBox::new(
            Vec3::from_array(self.center),
            Vec3::from_array(self.size),
            self.yaw,
        )
        .map_err(|e| e.to_string())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabelRecord {
    pub frame_id: u64,
    pub boxes: Vec<BoxRecord>,
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, IoError> {
    let file = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    let reader = std::io::BufReader::new(file);
    let mut out = Vec::new();
    for (line_no, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line)
            .map_err(|e| format_err(path, line_no as u64 + 1, e.to_string()))?;
        out.push(record);
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), IoError> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r).map_err(|e| format_err(path, 0, e.to_string()))?;
        buf.push(b'\n');
    }
    std::fs::write(path, buf).map_err(|e| io_err(path, e))
}

pub fn read_poses(path: &Path) -> Result<Vec<PoseRecord>, IoError> {
    read_jsonl(path)
}

pub fn write_poses(path: &Path, poses: &[PoseRecord]) -> Result<(), IoError> {
    write_jsonl(path, poses)
}

pub fn read_labels(path: &Path) -> Result<Vec<LabelRecord>, IoError> {
    read_jsonl(path)
}

pub fn write_labels(path: &Path, labels: &[LabelRecord]) -> Result<(), IoError> {
    write_jsonl(path, labels)
}

/// One recording: a named directory of consecutive frames.
#[derive(Debug, Clone)]
pub struct Fragment {
    pub name: String,
    pub frames: Vec<Frame>,
}

/// Reads every fragment under the dataset root, sorted by directory name.
pub fn read_dataset(root: &Path) -> Result<Vec<Fragment>, IoError> {
    let mut fragment_dirs = Vec::new();
    let entries = std::fs::read_dir(root).map_err(|e| io_err(root, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| io_err(root, e))?;
        if entry.path().is_dir() {
            fragment_dirs.push(entry.path());
        }
    }
    fragment_dirs.sort();
    if fragment_dirs.is_empty() {
        return Err(IoError::MissingFile(root.join("<fragment>")));
    }
    fragment_dirs.iter().map(|dir| read_fragment(dir)).collect()
}

/// Reads one fragment directory: `frames/*.bin` + `poses.jsonl` +
/// `labels.jsonl`. Every frame with a points file must have a pose; labels
/// are optional per frame.
pub fn read_fragment(dir: &Path) -> Result<Fragment, IoError> {
    use std::collections::BTreeMap;
    let poses_path = dir.join("poses.jsonl");
    let labels_path = dir.join("labels.jsonl");
    let poses = read_poses(&poses_path)?;
    let labels = if labels_path.exists() {
        read_labels(&labels_path)?
    } else {
        Vec::new()
    };

    let mut pose_by_frame = BTreeMap::new();
    for (i, p) in poses.iter().enumerate() {
        let t = p
            .to_transform()
            .map_err(|msg| format_err(&poses_path, i as u64 + 1, msg))?;
        pose_by_frame.insert(p.frame_id, (p.timestamp, t));
    }
    let mut boxes_by_frame: BTreeMap<u64, Vec<(TrackId, OrientedBox)>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        let mut frame_boxes = Vec::with_capacity(l.boxes.len());
        for b in &l.boxes {
            let bbox = b
                .to_box()
                .map_err(|msg| format_err(&labels_path, i as u64 + 1, msg))?;
            frame_boxes.push((b.track_id, bbox));
        }
        boxes_by_frame.insert(l.frame_id, frame_boxes);
    }

    let frames_dir = dir.join("frames");
    let mut bin_paths = Vec::new();
    let entries = std::fs::read_dir(&frames_dir).map_err(|e| io_err(&frames_dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| io_err(&frames_dir, e))?;
        let path = entry.path();
        if path.extension().map(|e| e == "bin").unwrap_or(false) {
            bin_paths.push(path);
        }
    }
    bin_paths.sort();

    let mut frames = Vec::with_capacity(bin_paths.len());
    for path in bin_paths {
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| format_err(&path, 0, "unreadable file name"))?;
        let frame_id: u64 = stem
            .parse()
            .map_err(|_| format_err(&path, 0, "file name must be a numeric frame id"))?;
        let points = read_points_bin(&path)?;
        let (timestamp, sensor_pose) = *pose_by_frame
            .get(&frame_id)
            .ok_or_else(|| format_err(&poses_path, 0, format!("no pose for frame {frame_id}")))?;
        frames.push(Frame {
            frame_id,
            timestamp,
            sensor_pose,
            points,
            boxes: boxes_by_frame.get(&frame_id).cloned().unwrap_or_default(),
        });
    }
    let name = dir
        .file_name()
        .and_then(|s| s.to_str())
        .unwrap_or("fragment")
        .to_string();
    Ok(Fragment { name, frames })
}

/// Writes one fragment in the dataset layout. Point coordinates quantize to
/// f32; poses and labels keep full precision.
pub fn write_fragment(dir: &Path, frames: &[Frame]) -> Result<(), IoError> {
    let frames_dir = dir.join("frames");
    std::fs::create_dir_all(&frames_dir).map_err(|e| io_err(&frames_dir, e))?;
    let mut poses = Vec::with_capacity(frames.len());
    let mut labels = Vec::with_capacity(frames.len());
    for f in frames {
        write_points_bin(&frames_dir.join(format!("{:06}.bin", f.frame_id)), &f.points)?;
        poses.push(PoseRecord::from_transform(
            f.frame_id,
            f.timestamp,
            &f.sensor_pose,
        ));
        labels.push(LabelRecord {
            frame_id: f.frame_id,
            boxes: f
                .boxes
                .iter()
                .map(|(tid, b)| BoxRecord::from_box(*tid, b))
                .collect(),
        });
    }
    write_poses(&dir.join("poses.jsonl"), &poses)?;
    write_labels(&dir.join("labels.jsonl"), &labels)
}

const MASK_MAGIC: &[u8; 8] = b"DROPMSK\0";
const MASK_VERSION: u32 = 1;

/// Drop mask sidecar: magic, version, bit count (LE u32), then bits packed
/// LSB-first.
pub fn write_drop_mask(path: &Path, mask: &[bool]) -> Result<(), IoError> {
    let mut buf = Vec::with_capacity(16 + mask.len() / 8);
    buf.write_all(MASK_MAGIC).expect("vec write");
    buf.write_u32::<LittleEndian>(MASK_VERSION).expect("vec write");
    buf.write_u32::<LittleEndian>(mask.len() as u32).expect("vec write");
    let mut byte = 0u8;
    for (i, &bit) in mask.iter().enumerate() {
        if bit {
            byte |= 1 << (i % 8);
        }
        if i % 8 == 7 {
            buf.push(byte);
            byte = 0;
        }
    }
    if mask.len() % 8 != 0 {
        buf.push(byte);
    }
    std::fs::write(path, buf).map_err(|e| io_err(path, e))
}

pub fn read_drop_mask(path: &Path) -> Result<Vec<bool>, IoError> {
    let data = std::fs::read(path).map_err(|e| io_err(path, e))?;
    let mut cursor = &data[..];
    let mut magic = [0u8; 8];
    cursor
        .read_exact(&mut magic)
        .map_err(|_| format_err(path, 0, "truncated header"))?;
    if &magic != MASK_MAGIC {
        return Err(format_err(path, 0, "bad magic"));
    }
    let version = cursor
        .read_u32::<LittleEndian>()
        .map_err(|_| format_err(path, 8, "truncated header"))?;
    if version != MASK_VERSION {
        return Err(format_err(path, 8, format!("unsupported version {version}")));
    }
    let n = cursor
        .read_u32::<LittleEndian>()
        .map_err(|_| format_err(path, 12, "truncated header"))? as usize;
    if cursor.len() < n.div_ceil(8) {
        return Err(format_err(path, 16, "payload shorter than bit count"));
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        out.push(cursor[i / 8] >> (i % 8) & 1 == 1);
    }
    Ok(out)
}

use std::io::Read;

/// Writes one rendered frame into a sensor directory: points, sensor-frame
/// boxes in the dataset label schema, and the drop mask sidecar.
pub fn write_rendered_frame(
    dir: &Path,
    frame_id: u64,
    frame: &RenderedFrame,
) -> Result<(), IoError> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    write_points_bin(&dir.join(format!("{frame_id:06}.bin")), &frame.points)?;
    let label = LabelRecord {
        frame_id,
        boxes: frame
            .boxes
            .iter()
            .map(|(tid, b)| BoxRecord::from_box(*tid, b))
            .collect(),
    };
    write_labels(&dir.join(format!("{frame_id:06}.jsonl")), &[label])?;
    write_drop_mask(&dir.join(format!("{frame_id:06}.mask")), &frame.drop_mask)
}

/// Reads a rendered frame back. Per-point source labels are not persisted,
/// so every point reads back as background.
pub fn read_rendered_frame(dir: &Path, frame_id: u64) -> Result<RenderedFrame, IoError> {
    let points = read_points_bin(&dir.join(format!("{frame_id:06}.bin")))?;
    let labels_path = dir.join(format!("{frame_id:06}.jsonl"));
    let boxes = if labels_path.exists() {
        let records: Vec<LabelRecord> = read_jsonl(&labels_path)?;
        let mut out = Vec::new();
        for r in &records {
            for b in &r.boxes {
                out.push((
                    b.track_id,
                    b.to_box().map_err(|msg| format_err(&labels_path, 0, msg))?,
                ));
            }
        }
        out
    } else {
        Vec::new()
    };
    let drop_mask = read_drop_mask(&dir.join(format!("{frame_id:06}.mask")))?;
    let labels = vec![PointSource::Background; points.len()];
    Ok(RenderedFrame {
        points,
        labels,
        drop_mask,
        boxes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use tempfile::tempdir;

    fn f32_cloud(n: usize, seed: u64) -> Vec<Vec3> {
        // Coordinates representable in f32 so the round trip is exact.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                Vec3::new(
                    rng.gen_range(-50.0f32..50.0) as f64,
                    rng.gen_range(-50.0f32..50.0) as f64,
                    rng.gen_range(-5.0f32..5.0) as f64,
                )
            })
            .collect()
    }

    #[test]
    fn points_roundtrip_bit_identical() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("cloud.bin");
        let cloud = f32_cloud(500, 1);
        write_points_bin(&path, &cloud).unwrap();
        let loaded = read_points_bin(&path).unwrap();
        assert_eq!(cloud, loaded);

        // Writer -> reader -> writer reproduces the bytes.
        let path2 = dir.path().join("cloud2.bin");
        write_points_bin(&path2, &loaded).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn truncated_bin_is_a_format_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        std::fs::write(&path, [0u8; 37]).unwrap();
        let err = read_points_bin(&path).unwrap_err();
        assert!(matches!(err, IoError::Format { .. }), "{err}");
    }

    #[test]
    fn missing_file_is_reported() {
        let err = read_points_bin(Path::new("/nonexistent/die.bin")).unwrap_err();
        assert!(matches!(err, IoError::MissingFile(_)));
    }

    #[test]
    fn fragment_roundtrip() {
        let dir = tempdir().unwrap();
        let bbox = OrientedBox::new(
            Vec3::new(10.0, 0.0, 0.75),
            Vec3::new(4.25, 1.875, 1.5),
            0.25,
        )
        .unwrap();
        let frames = vec![Frame {
            frame_id: 0,
            timestamp: 0.0,
            sensor_pose: RigidTransform::from_yaw_translation(
                0.5,
                Vec3::new(1.0, 2.0, 1.75),
            ),
            points: f32_cloud(100, 2),
            boxes: vec![(4, bbox)],
        }];
        write_fragment(dir.path(), &frames).unwrap();
        let loaded = read_fragment(dir.path()).unwrap();
        assert_eq!(loaded.frames.len(), 1);
        let f = &loaded.frames[0];
        assert_eq!(f.points, frames[0].points);
        assert_eq!(f.boxes.len(), 1);
        assert_eq!(f.boxes[0].0, 4);
        assert!((f.boxes[0].1.center - bbox.center).norm() < 1e-12);
        assert!((f.sensor_pose.translation - frames[0].sensor_pose.translation).norm() < 1e-12);
    }

    #[test]
    fn dataset_reader_sorts_fragments() {
        let dir = tempdir().unwrap();
        for name in ["seq02", "seq00", "seq01"] {
            let frag = dir.path().join(name);
            write_fragment(
                &frag,
                &[Frame {
                    frame_id: 0,
                    timestamp: 0.0,
                    sensor_pose: RigidTransform::identity(),
                    points: vec![Vec3::new(1.0, 2.0, 3.0)],
                    boxes: vec![],
                }],
            )
            .unwrap();
        }
        let fragments = read_dataset(dir.path()).unwrap();
        let names: Vec<&str> = fragments.iter().map(|f| f.name.as_str()).collect();
        assert_eq!(names, vec!["seq00", "seq01", "seq02"]);
    }

    #[test]
    fn drop_mask_roundtrip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("frame.mask");
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mask: Vec<bool> = (0..1003).map(|_| rng.gen_bool(0.3)).collect();
        write_drop_mask(&path, &mask).unwrap();
        assert_eq!(read_drop_mask(&path).unwrap(), mask);
    }

    #[test]
    fn invalid_pose_rotation_is_a_format_error() {
        let dir = tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("frames")).unwrap();
        write_points_bin(&dir.path().join("frames/000000.bin"), &[Vec3::ZERO]).unwrap();
        let mut pose = PoseRecord::from_transform(0, 0.0, &RigidTransform::identity());
        pose.pose[0] = 2.0; // not orthonormal
        write_poses(&dir.path().join("poses.jsonl"), &[pose]).unwrap();
        write_labels(&dir.path().join("labels.jsonl"), &[]).unwrap();
        let err = read_fragment(dir.path()).unwrap_err();
        assert!(matches!(err, IoError::Format { .. }), "{err}");
    }
}
