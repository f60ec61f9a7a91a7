//! Stage orchestration: decompose -> fit-background -> fit-vehicles ->
//! occupancy -> render -> eval, with per-stage resume markers, a stage
//! directory lock, and an output tree hash for reproducibility checks.

use crate::config::PipelineConfig;
use anyhow::{bail, Context, Result};
use relidar_core::decomp::{
    align_fragments, complete_vehicle, decompose_fragment, BackgroundCloud, TrackedVehicle,
};
use relidar_core::eval::MetricsReport;
use relidar_core::field::{fit_field, GridSpec, RaySample, SdfGridField};
use relidar_core::geom::{Aabb, OrientedBox, RigidTransform, Vec3};
use relidar_core::io;
use relidar_core::occupancy::OccupancyGrid;
use relidar_core::raysample::{assign_rays, sample_vehicle_rays, scan_to_rays};
use relidar_core::render::{
    render_frame, substitute_missing, SceneGraph, SensorModel, VehicleTrack,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

pub const STAGES: [&str; 6] = [
    "decompose",
    "fit-background",
    "fit-vehicles",
    "occupancy",
    "render",
    "eval",
];

#[derive(Debug, Serialize)]
pub struct StageReport {
    pub name: String,
    pub status: String,
    pub duration_s: f64,
}

#[derive(Debug, Serialize)]
pub struct PipelineReport {
    pub status: String,
    pub seed: u64,
    pub stages: Vec<StageReport>,
    pub output_tree_hash: Option<String>,
    pub failure: Option<String>,
}

/// Exclusive ownership of a stage directory via a lock file; released on
/// drop.
pub struct StageLock {
    path: PathBuf,
}

impl StageLock {
    pub fn acquire(output_root: &Path) -> Result<Self> {
        std::fs::create_dir_all(output_root)
            .with_context(|| format!("creating {}", output_root.display()))?;
        let path = output_root.join(".lock");
        match std::fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(_) => Ok(StageLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => bail!(
                "stage directory {} is locked by another process (remove {} if stale)",
                output_root.display(),
                path.display()
            ),
            Err(e) => Err(e).with_context(|| format!("locking {}", output_root.display())),
        }
    }
}

impl Drop for StageLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Independent deterministic seed per (stage, fragment, track) triple.
fn derive_seed(base: u64, salt1: u64, salt2: u64) -> u64 {
    splitmix64(base ^ splitmix64(salt1 ^ splitmix64(salt2)))
}

fn done_marker(output_root: &Path, stage: &str) -> PathBuf {
    output_root.join(format!(".stage-{stage}.done"))
}

fn mark_done(output_root: &Path, stage: &str) -> Result<()> {
    std::fs::write(done_marker(output_root, stage), b"").context("writing stage marker")
}

pub fn stage_is_done(output_root: &Path, stage: &str) -> bool {
    done_marker(output_root, stage).exists()
}

#[derive(Debug, Serialize, Deserialize)]
struct FragmentMeta {
    name: String,
    correction: RigidTransform,
}

#[derive(Debug, Serialize, Deserialize)]
struct VehicleCloudMeta {
    track_id: u64,
    size: Vec3,
    best_frame_idx: usize,
    imported: bool,
    point_count: usize,
}

/// Dataset fragments with alignment corrections applied to poses, boxes,
/// and pseudo-label boxes.
pub struct CorrectedFragment {
    pub name: String,
    pub frames: Vec<relidar_core::decomp::Frame>,
    pub pseudo: BTreeMap<u64, Vec<OrientedBox>>,
}

fn read_pseudo_labels(
    config: &PipelineConfig,
    fragment_name: &str,
) -> Result<BTreeMap<u64, Vec<OrientedBox>>> {
    let Some(dir) = &config.dataset.pseudo_labels else {
        return Ok(BTreeMap::new());
    };
    let path = dir.join(format!("{fragment_name}.jsonl"));
    if !path.exists() {
        return Ok(BTreeMap::new());
    }
    let records = io::read_labels(&path)?;
    let mut out = BTreeMap::new();
    for r in records {
        let mut boxes = Vec::with_capacity(r.boxes.len());
        for b in &r.boxes {
            boxes.push(b.to_box().map_err(|m| anyhow::anyhow!(m))?);
        }
        out.insert(r.frame_id, boxes);
    }
    Ok(out)
}

fn corrections_path(output_root: &Path) -> PathBuf {
    output_root.join("decomp/fragments.json")
}

fn read_corrections(output_root: &Path) -> Result<Vec<FragmentMeta>> {
    let path = corrections_path(output_root);
    let text = std::fs::read_to_string(&path)
        .with_context(|| format!("reading {} (run decompose first)", path.display()))?;
    serde_json::from_str(&text).context("parsing fragment corrections")
}

/// Loads the dataset and applies stored alignment corrections to every
/// frame pose, annotation box, and pseudo-label box.
pub fn load_corrected_fragments(
    config: &PipelineConfig,
    output_root: &Path,
) -> Result<Vec<CorrectedFragment>> {
    let fragments = io::read_dataset(&config.dataset.root)?;
    let metas = read_corrections(output_root)?;
    if metas.len() != fragments.len() {
        bail!(
            "dataset has {} fragments but decompose recorded {}",
            fragments.len(),
            metas.len()
        );
    }
    let mut out = Vec::with_capacity(fragments.len());
    for (fragment, meta) in fragments.into_iter().zip(metas.iter()) {
        if fragment.name != meta.name {
            bail!("fragment order mismatch: {} vs {}", fragment.name, meta.name);
        }
        let correction = meta.correction;
        let mut pseudo = read_pseudo_labels(config, &fragment.name)?;
        for boxes in pseudo.values_mut() {
            for b in boxes.iter_mut() {
                *b = b.transformed(&correction);
            }
        }
        let frames = fragment
            .frames
            .into_iter()
            .map(|mut f| {
                f.sensor_pose = correction.compose(&f.sensor_pose);
                for (_, b) in f.boxes.iter_mut() {
                    *b = b.transformed(&correction);
                }
                f
            })
            .collect();
        out.push(CorrectedFragment {
            name: meta.name.clone(),
            frames,
            pseudo,
        });
    }
    Ok(out)
}

/// Decompose stage: per-fragment vehicle extraction and background
/// assembly, pairwise alignment onto the first fragment, completion-style
/// preprocessing of each reconstructable track.
pub fn stage_decompose(config: &PipelineConfig, output_root: &Path) -> Result<()> {
    let dir = output_root.join("decomp");
    std::fs::create_dir_all(&dir)?;
    let decomp_config = config.decomp.to_core();

    let fragments = io::read_dataset(&config.dataset.root)?;
    let mut decomps = Vec::new();
    for (idx, fragment) in fragments.iter().enumerate() {
        let pseudo = read_pseudo_labels(config, &fragment.name)?;
        decomps.push(decompose_fragment(
            &fragment.frames,
            &pseudo,
            idx,
            &decomp_config,
        ));
    }

    // Alignment: every fragment onto the first, identity when disabled.
    let corrections: Vec<RigidTransform> = if config.align.enabled && fragments.len() > 1 {
        let backgrounds: Vec<BackgroundCloud> =
            decomps.iter().map(|d| d.background.clone()).collect();
        align_fragments(&backgrounds, &config.align.to_core())?
    } else {
        vec![RigidTransform::identity(); fragments.len()]
    };

    let mut merged_background = Vec::new();
    let metas: Vec<FragmentMeta> = fragments
        .iter()
        .zip(corrections.iter())
        .map(|(f, c)| FragmentMeta {
            name: f.name.clone(),
            correction: *c,
        })
        .collect();

    for ((fragment, decomp), correction) in
        fragments.iter().zip(decomps.iter_mut()).zip(corrections.iter())
    {
        for p in &decomp.background.points {
            merged_background.push(correction.apply_point(*p));
        }
        // Track boxes move with the correction; canonical points are
        // box-local and unaffected.
        for vehicle in &mut decomp.vehicles {
            for obs in &mut vehicle.observations {
                obs.bbox = obs.bbox.transformed(correction);
            }
        }

        let frag_dir = dir.join(&fragment.name);
        let vehicles_dir = frag_dir.join("vehicles");
        std::fs::create_dir_all(&vehicles_dir)?;
        std::fs::write(
            frag_dir.join("tracks.json"),
            serde_json::to_string(&decomp.vehicles)?,
        )?;

        let mut cloud_metas = Vec::new();
        for vehicle in &decomp.vehicles {
            let external = read_external_cloud(config, &fragment.name, vehicle.track_id)?;
            let imported = external.is_some();
            if let Some(cloud) = complete_vehicle(vehicle, &decomp_config, external)? {
                io::write_points_bin(
                    &vehicles_dir.join(format!("track_{:06}.bin", cloud.track_id)),
                    &cloud.points,
                )?;
                cloud_metas.push(VehicleCloudMeta {
                    track_id: cloud.track_id,
                    size: cloud.size,
                    best_frame_idx: cloud.best_frame_idx,
                    imported,
                    point_count: cloud.points.len(),
                });
            }
        }
        std::fs::write(
            frag_dir.join("vehicles.json"),
            serde_json::to_string(&cloud_metas)?,
        )?;
    }

    io::write_points_bin(&dir.join("background.bin"), &merged_background)?;
    std::fs::write(corrections_path(output_root), serde_json::to_string(&metas)?)
        .context("writing fragment corrections")
}

fn read_external_cloud(
    config: &PipelineConfig,
    fragment: &str,
    track_id: u64,
) -> Result<Option<Vec<Vec3>>> {
    let Some(dir) = &config.dataset.completed_dir else {
        return Ok(None);
    };
    let path = dir.join(fragment).join(format!("track_{track_id:06}.bin"));
    if !path.exists() {
        return Ok(None);
    }
    Ok(Some(io::read_points_bin(&path)?))
}

fn read_tracks(output_root: &Path, fragment: &str) -> Result<Vec<TrackedVehicle>> {
    let path = output_root.join("decomp").join(fragment).join("tracks.json");
    let text = std::fs::read_to_string(&path)
        .with_context(|| format!("reading {} (run decompose first)", path.display()))?;
    serde_json::from_str(&text).context("parsing tracks")
}

/// Background fit stage: rebuilds the labeled background ray set from the
/// corrected scans (rays whose endpoint is inside no inflated annotation
/// box and no pseudo-label box) and fits the background field over the
/// cleaned cloud's bounds.
pub fn stage_fit_background(config: &PipelineConfig, output_root: &Path) -> Result<()> {
    let dir = output_root.join("fields");
    std::fs::create_dir_all(&dir)?;

    let background_cloud =
        io::read_points_bin(&output_root.join("decomp/background.bin"))?;
    if background_cloud.is_empty() {
        bail!("decomposed background is empty");
    }
    let fragments = load_corrected_fragments(config, output_root)?;

    let inflation = config.decomp.box_inflation;
    let mut rays: Vec<RaySample> = Vec::new();
    for fragment in &fragments {
        for frame in &fragment.frames {
            let frame_rays = scan_to_rays(frame);
            let inflated: Vec<(u64, OrientedBox)> = frame
                .boxes
                .iter()
                .map(|(tid, b)| (*tid, b.inflated(inflation)))
                .collect();
            let assignment = assign_rays(&frame_rays, &inflated);
            let pseudo = fragment.pseudo.get(&frame.frame_id);
            for sample in assignment.background {
                if let Some(endpoint) = sample.endpoint() {
                    if let Some(pseudo_boxes) = pseudo {
                        if pseudo_boxes
                            .iter()
                            .any(|b| b.contains(endpoint, config.decomp.pseudo_margin))
                        {
                            continue;
                        }
                    }
                    rays.push(sample);
                }
            }
        }
    }
    if rays.is_empty() {
        bail!("no background rays survived decomposition");
    }

    let bounds = Aabb::from_points(background_cloud.iter())
        .expect("non-empty cloud")
        .padded(4.0 * config.background.voxel);
    let spec = GridSpec::from_voxel_size(bounds, config.background.voxel);
    log::info!(
        "fitting background field: {} rays, grid {:?}",
        rays.len(),
        spec.resolution
    );
    let fit_config = config
        .background
        .fit
        .to_core(derive_seed(config.seed, 0xBAC0, 0), config.trace);
    let field = fit_field(&spec, &rays, &fit_config, &config.weights)?;
    field.save(&dir.join("background.sdf"))?;
    Ok(())
}

/// Vehicle fit stage: ring-samples each completed cloud and fits one
/// canonical field per reconstructable track.
pub fn stage_fit_vehicles(config: &PipelineConfig, output_root: &Path) -> Result<()> {
    let dir = output_root.join("fields");
    std::fs::create_dir_all(&dir)?;
    let metas = read_corrections(output_root)?;

    for (frag_idx, meta) in metas.iter().enumerate() {
        let frag_fields = dir.join(&meta.name);
        std::fs::create_dir_all(&frag_fields)?;
        let vehicles_dir = output_root.join("decomp").join(&meta.name).join("vehicles");
        let cloud_metas: Vec<VehicleCloudMeta> = serde_json::from_str(
            &std::fs::read_to_string(
                output_root.join("decomp").join(&meta.name).join("vehicles.json"),
            )
            .context("reading vehicle cloud metadata (run decompose first)")?,
        )?;

        for cloud_meta in &cloud_metas {
            let cloud = io::read_points_bin(
                &vehicles_dir.join(format!("track_{:06}.bin", cloud_meta.track_id)),
            )?;
            let canonical = OrientedBox::new(Vec3::ZERO, cloud_meta.size, 0.0)
                .map_err(|e| anyhow::anyhow!("track {}: {e}", cloud_meta.track_id))?;
            let ray_seed = derive_seed(config.seed, frag_idx as u64, cloud_meta.track_id);
            let rays = sample_vehicle_rays(
                &cloud,
                &canonical,
                &config.vehicles.rings,
                config.vehicles.hit_threshold,
                ray_seed,
            )?;
            let pad = 4.0 * config.vehicles.voxel;
            let half = cloud_meta.size * 0.5;
            let bounds = Aabb::new(
                -(half + Vec3::new(pad, pad, pad)),
                half + Vec3::new(pad, pad, pad),
            );
            let spec = GridSpec::from_voxel_size(bounds, config.vehicles.voxel);
            let fit_config = config.vehicles.fit.to_core(
                derive_seed(config.seed, 0xF17 + frag_idx as u64, cloud_meta.track_id),
                config.trace,
            );
            log::info!(
                "fitting vehicle field {}/track {}: {} rays, grid {:?}",
                meta.name,
                cloud_meta.track_id,
                rays.len(),
                spec.resolution
            );
            let field = fit_field(&spec, &rays, &fit_config, &config.weights)?;
            field.save(&frag_fields.join(format!("track_{:06}.sdf", cloud_meta.track_id)))?;
        }
    }
    Ok(())
}

/// Occupancy stage: voxelize the cleaned background and dilate.
pub fn stage_occupancy(config: &PipelineConfig, output_root: &Path) -> Result<()> {
    let dir = output_root.join("occupancy");
    std::fs::create_dir_all(&dir)?;
    let cloud = io::read_points_bin(&output_root.join("decomp/background.bin"))?;
    let grid = OccupancyGrid::build(&cloud, config.occupancy.voxel)?
        .dilate(config.occupancy.dilation_radius);
    grid.save(&dir.join("grid.occ"))?;
    Ok(())
}

/// Builds the scene graph for one fragment from persisted artifacts.
pub fn load_scene_graph(
    config: &PipelineConfig,
    output_root: &Path,
    fragment: &str,
    fragment_idx: usize,
) -> Result<SceneGraph> {
    let background = SdfGridField::load(&output_root.join("fields/background.sdf"))?;
    let occupancy = OccupancyGrid::load(&output_root.join("occupancy/grid.occ"))?;
    let vehicles = read_tracks(output_root, fragment)?;

    let mut tracks = BTreeMap::new();
    let mut fields = BTreeMap::new();
    for v in &vehicles {
        let Some(canonical) = v.canonical_box() else {
            continue;
        };
        let boxes: BTreeMap<u64, OrientedBox> = v
            .observations
            .iter()
            .map(|o| (o.frame_id, o.bbox))
            .collect();
        tracks.insert(
            v.track_id,
            VehicleTrack {
                track_id: v.track_id,
                canonical_size: canonical.size,
                boxes,
            },
        );
        let field_path = output_root
            .join("fields")
            .join(fragment)
            .join(format!("track_{:06}.sdf", v.track_id));
        if field_path.exists() {
            fields.insert(v.track_id, SdfGridField::load(&field_path)?);
        }
    }
    let substitutions = substitute_missing(
        &tracks,
        &fields,
        derive_seed(config.seed, 0x5B5, fragment_idx as u64),
    )
    .or_else(|e| {
        // A fragment with no vehicles at all has nothing to substitute.
        if tracks.is_empty() {
            Ok(BTreeMap::new())
        } else {
            Err(e)
        }
    })?;
    Ok(SceneGraph {
        background,
        occupancy,
        tracks,
        fields,
        substitutions,
    })
}

/// Render stage: every configured sensor over the frame timeline of each
/// fragment.
pub fn stage_render(config: &PipelineConfig, output_root: &Path) -> Result<()> {
    let dir = output_root.join("render");
    std::fs::create_dir_all(&dir)?;
    let fragments = load_corrected_fragments(config, output_root)?;

    for (frag_idx, fragment) in fragments.iter().enumerate() {
        let scene = load_scene_graph(config, output_root, &fragment.name, frag_idx)?;
        let frag_dir = dir.join(&fragment.name);
        std::fs::create_dir_all(&frag_dir)?;
        std::fs::write(
            frag_dir.join("substitutions.json"),
            serde_json::to_string(&scene.substitutions)?,
        )?;
        let frame_ids: Vec<u64> = if config.render.frames.is_empty() {
            fragment.frames.iter().map(|f| f.frame_id).collect()
        } else {
            config.render.frames.clone()
        };
        for sensor_config in &config.sensors {
            let sensor = sensor_config.to_model();
            let sensor_dir = frag_dir.join(&sensor_config.name);
            for &frame_id in &frame_ids {
                let rendered = render_frame(&scene, &sensor, frame_id, &config.trace)?;
                io::write_rendered_frame(&sensor_dir, frame_id, &rendered)?;
                log::info!(
                    "rendered {}/{} frame {frame_id}: {} points, {} drops",
                    fragment.name,
                    sensor_config.name,
                    rendered.points.len(),
                    rendered.drop_mask.iter().filter(|d| **d).count()
                );
            }
        }
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EvalFrameReport {
    pub fragment: String,
    pub frame_id: u64,
    pub chamfer: f64,
    pub rendered_points: usize,
    pub recorded_points: usize,
}

/// Eval stage: re-render selected input viewpoints and compare against the
/// recorded clouds by symmetric Chamfer distance.
pub fn stage_eval(config: &PipelineConfig, output_root: &Path) -> Result<()> {
    let dir = output_root.join("eval");
    std::fs::create_dir_all(&dir)?;
    let fragments = load_corrected_fragments(config, output_root)?;
    let mut reports = Vec::new();
    for (frag_idx, fragment) in fragments.iter().enumerate() {
        let scene = load_scene_graph(config, output_root, &fragment.name, frag_idx)?;
        for frame in fragment.frames.iter().step_by(config.eval.every.max(1)) {
            let sensor = SensorModel {
                pose: frame.sensor_pose,
                channels: config.eval.channels,
                vertical_fov_deg: config.eval.vertical_fov_deg,
                horizontal_fov_deg: (-180.0, 180.0),
                horizontal_resolution_deg: config.eval.horizontal_resolution_deg,
                max_range: config.eval.max_range,
            };
            let rendered = render_frame(&scene, &sensor, frame.frame_id, &config.trace)?;
            if rendered.points.is_empty() || frame.points.is_empty() {
                continue;
            }
            let chamfer =
                relidar_core::eval::chamfer_distance(&rendered.points, &frame.points)?;
            reports.push(EvalFrameReport {
                fragment: fragment.name.clone(),
                frame_id: frame.frame_id,
                chamfer,
                rendered_points: rendered.points.len(),
                recorded_points: frame.points.len(),
            });
        }
    }
    std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(&reports)?)?;
    Ok(())
}

/// Compares two rendered directories frame by frame.
pub fn evaluate_directories(rendered: &Path, reference: &Path) -> Result<Vec<(u64, MetricsReport)>> {
    let mut frame_ids = Vec::new();
    for entry in std::fs::read_dir(rendered)? {
        let path = entry?.path();
        if path.extension().map(|e| e == "bin").unwrap_or(false) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                if let Ok(id) = stem.parse::<u64>() {
                    frame_ids.push(id);
                }
            }
        }
    }
    frame_ids.sort_unstable();
    let mut out = Vec::new();
    for id in frame_ids {
        let a = io::read_rendered_frame(rendered, id)?;
        let b = io::read_rendered_frame(reference, id)?;
        out.push((id, relidar_core::eval::evaluate(&a, &b)?));
    }
    Ok(out)
}

/// SHA-256 over the output tree: sorted relative paths, each hashed with
/// its byte length and content. Lock and marker files are excluded so the
/// hash reflects artifacts only.
pub fn hash_output_tree(output_root: &Path) -> Result<String> {
    let mut files = Vec::new();
    for entry in walkdir::WalkDir::new(output_root).sort_by_file_name() {
        let entry = entry?;
        if !entry.file_type().is_file() {
            continue;
        }
        let name = entry.file_name().to_string_lossy();
        if name.starts_with('.') {
            continue;
        }
        files.push(entry.path().to_path_buf());
    }
    files.sort();
    let mut hasher = Sha256::new();
    for path in files {
        let rel = path.strip_prefix(output_root).unwrap_or(&path);
        let bytes = std::fs::read(&path)?;
        hasher.update(rel.to_string_lossy().as_bytes());
        hasher.update((bytes.len() as u64).to_le_bytes());
        hasher.update(&bytes);
    }
    Ok(format!("{:x}", hasher.finalize()))
}

/// Runs all stages in order, skipping stages whose marker exists, under an
/// exclusive lock on the output root.
pub fn run_pipeline(config: &PipelineConfig, output_root: &Path) -> Result<PipelineReport> {
    let _lock = StageLock::acquire(output_root)?;
    let mut report = PipelineReport {
        status: "ok".to_string(),
        seed: config.seed,
        stages: Vec::new(),
        output_tree_hash: None,
        failure: None,
    };

    for stage in STAGES {
        if stage == "eval" && !config.eval.enabled {
            report.stages.push(StageReport {
                name: stage.to_string(),
                status: "disabled".to_string(),
                duration_s: 0.0,
            });
            continue;
        }
        if stage_is_done(output_root, stage) {
            report.stages.push(StageReport {
                name: stage.to_string(),
                status: "skipped".to_string(),
                duration_s: 0.0,
            });
            continue;
        }
        let start = Instant::now();
        let result = run_stage(stage, config, output_root);
        let duration_s = start.elapsed().as_secs_f64();
        match result {
            Ok(()) => report.stages.push(StageReport {
                name: stage.to_string(),
                status: "ran".to_string(),
                duration_s,
            }),
            Err(e) => {
                report.status = "failed".to_string();
                report.failure = Some(format!("stage {stage}: {e:#}"));
                report.stages.push(StageReport {
                    name: stage.to_string(),
                    status: "failed".to_string(),
                    duration_s,
                });
                return Ok(report);
            }
        }
    }
    report.output_tree_hash = Some(hash_output_tree(output_root)?);
    Ok(report)
}

/// Runs one stage and writes its resume marker on success.
pub fn run_stage(stage: &str, config: &PipelineConfig, output_root: &Path) -> Result<()> {
    let result = match stage {
        "decompose" => stage_decompose(config, output_root),
        "fit-background" => stage_fit_background(config, output_root),
        "fit-vehicles" => stage_fit_vehicles(config, output_root),
        "occupancy" => stage_occupancy(config, output_root),
        "render" => stage_render(config, output_root),
        "eval" => stage_eval(config, output_root),
        other => bail!("unknown stage {other}"),
    };
    result?;
    mark_done(output_root, stage)
}
