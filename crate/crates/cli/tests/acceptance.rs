//! Acceptance suite: one test per criterion, each printing a PASS line.
//! Criteria 1-3 share a single synthetic-scene pipeline run; the rest use
//! dedicated fixtures.

use relidar::config::PipelineConfig;
use relidar::pipeline::{load_scene_graph, run_pipeline};
use relidar::scene_gen::{analytic_raycast, write_demo_dataset, SceneSpec, Surface};
use relidar_core::field::{
    fit_field, loss_total_at, FitConfig, GridSpec, LossWeights, RaySample, SdfGridField,
    TraceOutcome, TraceParams, LOGIT_CLAMP,
};
use relidar_core::geom::{estimate_box_transform, Aabb, OrientedBox, Ray, RigidTransform, Vec3};
use relidar_core::occupancy::OccupancyGrid;
use relidar_core::raysample::{sample_vehicle_rays, RingSpec};
use relidar_core::render::{render_frame, FrameContext, PointSource, RenderedFrame, SensorModel};
use std::path::Path;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// ---------------------------------------------------------------------------
// Shared synthetic-scene fixture for criteria 1-3.

struct SceneFixture {
    _dir: tempfile::TempDir,
    spec: SceneSpec,
    pipeline_duration: Duration,
    render_duration: Duration,
    rendered: RenderedFrame,
    sensor: SensorModel,
    rays: Vec<Ray>,
    occupancy: OccupancyGrid,
    scene_frame: u64,
    /// Per-ray independently recomposited result, captured from the same
    /// candidate sets the renderer saw.
    recomposited: Vec<Option<(f64, PointSource)>>,
    background_voxel: f64,
}

fn toy_config(dataset: &Path, output: &Path) -> PipelineConfig {
    let text = format!(
        r#"
seed = 11

[dataset]
root = {dataset:?}

[output]
root = {output:?}

[background]
voxel = 0.35
[background.fit]
iterations = 1500
batch_size = 1024
eikonal_samples = 256

[vehicles]
voxel = 0.08
[vehicles.fit]
iterations = 1200
batch_size = 1024
eikonal_samples = 256
[vehicles.rings]
radii = [4.0, 6.5, 9.0]
heights = [0.5, 2.0, 4.0, 6.0]
origins_per_ring = 24
rays_per_origin = 192

[occupancy]
voxel = 0.4
dilation_radius = 2

[trace]
eps = 0.001
max_steps = 512

[[sensors]]
name = "pole"
position = [15.0, -12.0, 6.0]
yaw_deg = 53.0
pitch_deg = -20.0
channels = 64
vertical_fov_deg = [-40.0, 30.0]
horizontal_fov_deg = [-70.0, 70.0]
horizontal_resolution_deg = 0.4
max_range = 80.0

[render]
frames = [10]

[eval]
enabled = true
every = 10
channels = 24
vertical_fov_deg = [-25.0, -3.0]
horizontal_resolution_deg = 1.0
max_range = 40.0
"#,
        dataset = dataset.display().to_string(),
        output = output.display().to_string(),
    );
    toml::from_str(&text).expect("fixture config parses")
}

fn scene_fixture() -> &'static SceneFixture {
    static FIXTURE: OnceLock<SceneFixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let dir = tempfile::tempdir().expect("tempdir");
        let dataset = dir.path().join("data");
        let output = dir.path().join("out");
        let spec = SceneSpec::default();
        write_demo_dataset(&dataset, &spec).expect("demo dataset");
        let config = toy_config(&dataset, &output);

        let start = Instant::now();
        let report = run_pipeline(&config, &output).expect("pipeline runs");
        assert_eq!(report.status, "ok", "pipeline failed: {:?}", report.failure);
        let pipeline_duration = start.elapsed();

        let scene_frame = 10u64;
        let scene = load_scene_graph(&config, &output, "seq00", 0).expect("scene graph");
        let sensor = config.sensors[0].to_model();
        let render_start = Instant::now();
        let rendered =
            render_frame(&scene, &sensor, scene_frame, &config.trace).expect("render");
        let render_duration = render_start.elapsed();

        let rays = sensor.rays();
        let ctx = FrameContext::new(&scene, scene_frame).expect("frame context");
        // Independent recomposite: apply the 0.5-threshold and min-distance
        // rules by hand over the candidate sets.
        let recomposited: Vec<Option<(f64, PointSource)>> = rays
            .iter()
            .map(|ray| {
                let candidates = ctx.candidates(ray, &config.trace);
                let mut best: Option<(f64, PointSource)> = None;
                for c in &candidates {
                    if c.drop_prob > 0.5 {
                        continue;
                    }
                    let Some(range) = c.range else { continue };
                    match best {
                        Some((r, _)) if range >= r => {}
                        _ => best = Some((range, c.source)),
                    }
                }
                best
            })
            .collect();

        let occupancy = scene.occupancy.clone();
        SceneFixture {
            _dir: dir,
            background_voxel: config.background.voxel,
            spec,
            pipeline_duration,
            render_duration,
            rendered,
            sensor,
            rays,
            occupancy,
            scene_frame,
            recomposited,
        }
    })
}

/// Analytic oracle for the toy scene at the rendered frame, honoring the
/// sensor max range and the occupancy constraint on ground hits.
fn oracle_hit(fx: &SceneFixture, ray: &Ray) -> Option<(f64, Surface)> {
    let boxes = fx.spec.boxes_at(fx.scene_frame as usize);
    let (t, surface) = analytic_raycast(ray, &boxes)?;
    if let Surface::Ground = surface {
        if !fx.occupancy.is_observed(ray.point_at(t)) {
            return None;
        }
    }
    Some((t, surface))
}

/// Ranges per pattern ray, recovered from point order and the drop mask.
fn ranges_by_ray(frame: &RenderedFrame) -> Vec<Option<(f64, PointSource)>> {
    let mut out = Vec::with_capacity(frame.drop_mask.len());
    let mut next = 0usize;
    for &dropped in &frame.drop_mask {
        if dropped {
            out.push(None);
        } else {
            out.push(Some((frame.points[next].norm(), frame.labels[next])));
            next += 1;
        }
    }
    out
}

#[test]
fn criterion_01_analytic_cross_view_render() {
    let fx = scene_fixture();
    let rendered = ranges_by_ray(&fx.rendered);

    let mut errors = Vec::new();
    let mut render_only = 0usize;
    let mut oracle_only = 0usize;
    for (i, ray) in fx.rays.iter().enumerate() {
        let oracle = oracle_hit(fx, ray);
        match (&rendered[i], oracle) {
            (Some((range, _)), Some((t, _))) => errors.push((range - t).abs()),
            (Some(_), None) => render_only += 1,
            (None, Some(_)) => oracle_only += 1,
            (None, None) => {}
        }
    }
    assert!(errors.len() > 1000, "too few mutually hit rays: {}", errors.len());
    errors.sort_by(|a, b| a.total_cmp(b));
    let median = errors[errors.len() / 2];
    let voxel = fx.background_voxel;
    let within_3 = errors.iter().filter(|e| **e < 3.0 * voxel).count() as f64
        / errors.len() as f64;
    let total_runtime = fx.pipeline_duration + fx.render_duration;

    println!(
        "criterion 1 detail: {} hit rays, median error {:.3} m (limit {:.3}), \
         95th within 3 voxels: {:.4}, render-only {render_only}, oracle-only {oracle_only}, \
         runtime {:.1}s",
        errors.len(),
        median,
        2.0 * voxel,
        within_3,
        total_runtime.as_secs_f64()
    );
    assert!(median < 2.0 * voxel, "median range error {median}");
    assert!(within_3 >= 0.95, "only {within_3} of hit rays within 3 voxels");
    assert!(
        total_runtime < Duration::from_secs(600),
        "pipeline + render took {total_runtime:?}"
    );
    println!("acceptance 01 analytic-cross-view-render: PASS");
}

#[test]
fn criterion_02_occlusion_exactness() {
    // The composited output must equal an independent brute-force
    // recomposite of the per-ray candidates (hit identity and distance),
    // honoring the 0.5 drop threshold and the minimum-distance rule.
    let fx = scene_fixture();
    let rendered = ranges_by_ray(&fx.rendered);
    assert_eq!(rendered.len(), fx.recomposited.len());

    let mut analytic_agree = 0usize;
    let mut analytic_total = 0usize;
    for (i, ray) in fx.rays.iter().enumerate() {
        match (&rendered[i], &fx.recomposited[i]) {
            (None, None) => {}
            (Some((range, label)), Some((expected_range, expected_label))) => {
                assert_eq!(
                    label, expected_label,
                    "ray {i}: rendered label differs from recomposite"
                );
                assert!(
                    (range - expected_range).abs() < 1e-9,
                    "ray {i}: range {range} vs recomposite {expected_range}"
                );
            }
            other => panic!("ray {i}: hit/drop mismatch vs recomposite: {other:?}"),
        }

        // Diagnostic: identity agreement against the pure analytic scene.
        analytic_total += 1;
        let oracle = oracle_hit(fx, ray);
        let same = matches!(
            (&rendered[i], &oracle),
            (None, None)
                | (Some((_, PointSource::Background)), Some((_, Surface::Ground)))
        ) || matches!((&rendered[i], &oracle),
            (Some((_, PointSource::Vehicle(a))), Some((_, Surface::Car(b)))) if a == b);
        if same {
            analytic_agree += 1;
        }
    }
    println!(
        "criterion 2 detail: analytic identity agreement {:.4} ({} / {})",
        analytic_agree as f64 / analytic_total as f64,
        analytic_agree,
        analytic_total
    );
    println!("acceptance 02 occlusion-exactness: PASS");
}

#[test]
fn criterion_03_occupancy_constraint() {
    let fx = scene_fixture();
    let rendered = ranges_by_ray(&fx.rendered);

    // Sky rays: world direction pointing upward can touch neither the
    // ground nor any car box in this scene.
    let mut sky = 0usize;
    let mut sky_dropped = 0usize;
    for (i, ray) in fx.rays.iter().enumerate() {
        if ray.direction.z > 0.0 {
            sky += 1;
            if rendered[i].is_none() {
                sky_dropped += 1;
            }
        }
    }
    assert!(sky > 1000, "scene needs sky rays, got {sky}");
    let rate = sky_dropped as f64 / sky as f64;
    println!("criterion 3 detail: {sky} sky rays, drop rate {rate:.5}");
    assert!(rate >= 0.999, "sky drop rate {rate}");

    // No rendered background point may fall outside the dilated grid.
    let mut outside = 0usize;
    for (point, label) in fx.rendered.points.iter().zip(fx.rendered.labels.iter()) {
        if *label == PointSource::Background {
            let world = fx.sensor.pose.apply_point(*point);
            if !fx.occupancy.is_observed(world) {
                outside += 1;
            }
        }
    }
    assert_eq!(outside, 0, "{outside} background points outside the dilated grid");
    println!("acceptance 03 occupancy-constraint: PASS");
}

// ---------------------------------------------------------------------------
// Criterion 4: eikonal property after fitting the analytic sphere.

fn sphere_rays(n: usize, seed: u64) -> Vec<RaySample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let corners: Vec<Vec3> = (0..8)
        .map(|i| {
            Vec3::new(
                if i & 1 != 0 { 2.0 } else { -2.0 },
                if i & 2 != 0 { 2.0 } else { -2.0 },
                if i & 4 != 0 { 2.0 } else { -2.0 },
            )
        })
        .collect();
    (0..n)
        .map(|k| {
            let origin = corners[k % 8];
            let target = Vec3::new(
                rng.gen_range(-1.2..1.2),
                rng.gen_range(-1.2..1.2),
                rng.gen_range(-1.2..1.2),
            );
            let dir = (target - origin).normalized().unwrap();
            let b = origin.dot(dir);
            let c = origin.norm_squared() - 1.0;
            let disc = b * b - c;
            if disc > 0.0 {
                let t = -b - disc.sqrt();
                if t > 0.0 {
                    return RaySample::hit(origin, dir, t);
                }
            }
            RaySample::drop(origin, dir)
        })
        .collect()
}

fn fitted_sphere() -> &'static (SdfGridField, f64) {
    static FIELD: OnceLock<(SdfGridField, f64)> = OnceLock::new();
    FIELD.get_or_init(|| {
        let voxel = 0.05;
        let bounds = Aabb::new(Vec3::new(-1.6, -1.6, -1.6), Vec3::new(1.6, 1.6, 1.6));
        let spec = GridSpec::from_voxel_size(bounds, voxel);
        let samples = sphere_rays(10_000, 42);
        let config = FitConfig {
            iterations: 2000,
            learning_rate: 0.02,
            batch_size: 1024,
            eikonal_samples: 256,
            seed: 5,
            trace: TraceParams::default(),
        };
        let field = fit_field(&spec, &samples, &config, &LossWeights::default())
            .expect("sphere fit");
        (field, voxel)
    })
}

#[test]
fn criterion_04_eikonal_property() {
    let (field, voxel) = fitted_sphere();
    let truncation = field.truncation;
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let mut total = 0.0;
    let mut count = 0usize;
    while count < 10_000 {
        let p = Vec3::new(
            rng.gen_range(-1.5..1.5),
            rng.gen_range(-1.5..1.5),
            rng.gen_range(-1.5..1.5),
        );
        // Near-surface shell of width 2x truncation around the sphere.
        if (p.norm() - 1.0).abs() > truncation {
            continue;
        }
        total += (field.query_sdf_gradient(p).norm() - 1.0).abs();
        count += 1;
    }
    let mean = total / count as f64;
    println!("criterion 4 detail: mean |grad norm - 1| = {mean:.4} over {count} shell samples");
    assert!(mean < 0.1, "eikonal deviation {mean}");

    // Rendered range quality on the same fit, against analytic ranges.
    let mut errors: Vec<f64> = Vec::new();
    let params = TraceParams::default();
    for s in sphere_rays(2000, 77) {
        let Some(gt) = s.range else { continue };
        let ray = Ray {
            origin: s.origin,
            direction: s.direction,
            max_range: 100.0,
        };
        if let TraceOutcome::Hit { range } = field.trace(&ray, None, &params) {
            errors.push((range - gt).abs());
        }
    }
    errors.sort_by(|a, b| a.total_cmp(b));
    let median = errors[errors.len() / 2];
    println!("criterion 4 detail: median sphere range error {median:.4} m");
    assert!(median < 2.0 * voxel, "sphere render median error {median}");
    println!("acceptance 04 eikonal-property: PASS");
}

// ---------------------------------------------------------------------------
// Criterion 5: implicit range gradient vs central finite differences.

#[test]
fn criterion_05_gradient_check() {
    let bounds = Aabb::new(Vec3::new(-1.0, -1.0, -1.0), Vec3::new(1.0, 1.0, 1.0));
    let mut field = SdfGridField::new(bounds, [16, 16, 16], 100.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(500);
    let res = field.resolution;
    for iz in 0..res[2] {
        for iy in 0..res[1] {
            for ix in 0..res[0] {
                let p = field.node_position(ix, iy, iz);
                let bump: f64 = rng.gen_range(-0.02..0.02);
                field.set_node(ix, iy, iz, p.norm() - 0.7 + bump, 0.0);
            }
        }
    }
    let params = TraceParams {
        eps: 1e-9,
        max_steps: 512,
    };

    let mut checked = 0usize;
    let mut attempts = 0usize;
    while checked < 20 && attempts < 200 {
        attempts += 1;
        let az = rng.gen_range(0.0..std::f64::consts::TAU);
        let origin = Vec3::new(
            0.97 * az.cos(),
            0.97 * az.sin(),
            rng.gen_range(-0.2..0.2),
        );
        let target = Vec3::new(
            rng.gen_range(-0.3..0.3),
            rng.gen_range(-0.3..0.3),
            rng.gen_range(-0.3..0.3),
        );
        let Some(ray) = Ray::new(origin, target - origin, 100.0) else {
            continue;
        };
        let TraceOutcome::Hit { range } = field.trace(&ray, None, &params) else {
            continue;
        };
        let hit = ray.point_at(range);
        let slope = field.query_sdf_gradient(hit).dot(ray.direction);
        if slope.abs() < 0.3 {
            continue; // grazing; the criterion uses well-conditioned rays
        }

        // Implicit gradient: d(range)/d(node) = -w(node at hit) / slope.
        let cell = field.locate(hit);
        let mut nodes = Vec::new();
        field.for_each_node_weight(&cell, |idx, w| nodes.push((idx, -w / slope)));

        let h = 1e-5;
        let mut implicit = Vec::new();
        let mut fd = Vec::new();
        for (idx, analytic) in &nodes {
            let old = field.sdf_values()[*idx];
            field.sdf_values_mut()[*idx] = old + h;
            let TraceOutcome::Hit { range: rp } = field.trace(&ray, None, &params) else {
                field.sdf_values_mut()[*idx] = old;
                continue;
            };
            field.sdf_values_mut()[*idx] = old - h;
            let TraceOutcome::Hit { range: rm } = field.trace(&ray, None, &params) else {
                field.sdf_values_mut()[*idx] = old;
                continue;
            };
            field.sdf_values_mut()[*idx] = old;
            implicit.push(*analytic);
            fd.push((rp - rm) / (2.0 * h));
        }
        if implicit.len() < 8 {
            continue;
        }
        let diff: f64 = implicit
            .iter()
            .zip(fd.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let norm: f64 = fd.iter().map(|b| b * b).sum::<f64>().sqrt();
        let rel = diff / norm.max(1e-12);
        assert!(rel < 1e-3, "ray {checked}: relative gradient error {rel}");
        checked += 1;
    }
    assert_eq!(checked, 20, "needed 20 well-conditioned rays, got {checked}");
    println!("acceptance 05 gradient-check: PASS");
}

// ---------------------------------------------------------------------------
// Criterion 6: hit/drop labels vs the brute-force point-to-ray oracle.

#[test]
fn criterion_06_hit_drop_labeling() {
    let mut rng = ChaCha8Rng::seed_from_u64(600);
    let bbox = OrientedBox::new(Vec3::ZERO, Vec3::new(4.4, 1.9, 1.6), 0.0).unwrap();
    let cloud: Vec<Vec3> = (0..1000)
        .map(|_| {
            Vec3::new(
                rng.gen_range(-2.2..2.2),
                rng.gen_range(-0.95..0.95),
                rng.gen_range(-0.8..0.8),
            )
        })
        .collect();
    // 10k rays: 2 rings x 13 origins x 400 rays = 10400.
    let spec = RingSpec {
        radii: vec![5.0, 8.0],
        heights: vec![1.0],
        origins_per_ring: 13,
        rays_per_origin: 400,
    };
    let threshold = 0.05;
    let rays = sample_vehicle_rays(&cloud, &bbox, &spec, threshold, 9).unwrap();
    assert!(rays.len() >= 10_000, "got {} rays", rays.len());

    let mut mismatches = 0usize;
    for sample in &rays {
        // Independent brute force over every point, same distance formula
        // as the documented contract: u = p - o, t = u.d, dist = |u - d t|.
        let mut best: Option<f64> = None;
        for p in &cloud {
            let u = *p - sample.origin;
            let t = u.dot(sample.direction);
            if t <= 0.0 {
                continue;
            }
            let dist = (u - sample.direction * t).norm();
            best = Some(best.map(|b: f64| b.min(dist)).unwrap_or(dist));
        }
        let oracle_hit = best.map(|d| d < threshold).unwrap_or(false);
        if oracle_hit == sample.is_drop() {
            mismatches += 1;
        }
    }
    println!(
        "criterion 6 detail: {} rays, {} label mismatches",
        rays.len(),
        mismatches
    );
    assert_eq!(mismatches, 0, "labels must agree exactly");
    println!("acceptance 06 hit-drop-labeling: PASS");
}

// ---------------------------------------------------------------------------
// Criterion 7: canonicalization and canonical-query invariance.

#[test]
fn criterion_07_canonicalization() {
    // Rigid trajectory: translation plus yaw rate.
    let canonical_world =
        OrientedBox::new(Vec3::new(3.0, -2.0, 0.8), Vec3::new(4.4, 1.9, 1.6), 0.3).unwrap();
    let mut frames = Vec::new();
    for t in 0..30 {
        let motion = RigidTransform::from_yaw_translation(
            0.04 * t as f64,
            Vec3::new(1.1 * t as f64, 0.35 * t as f64, 0.0),
        );
        frames.push(canonical_world.transformed(&motion));
    }
    for (t, observed) in frames.iter().enumerate() {
        let transform = estimate_box_transform(&canonical_world, observed).unwrap();
        let mut frobenius = 0.0;
        for (a, b) in canonical_world
            .corners()
            .iter()
            .zip(observed.corners().iter())
        {
            frobenius += (*a - transform.apply_point(*b)).norm_squared();
        }
        let frobenius = frobenius.sqrt();
        assert!(frobenius < 1e-6, "frame {t}: corner residual {frobenius}");
    }

    // Canonical-query range invariance on a sphere field.
    let bounds = Aabb::new(Vec3::new(-2.0, -2.0, -2.0), Vec3::new(2.0, 2.0, 2.0));
    let mut field = SdfGridField::with_voxel_size(bounds, 0.05).unwrap();
    field.truncation = 100.0;
    let res = field.resolution;
    for iz in 0..res[2] {
        for iy in 0..res[1] {
            for ix in 0..res[0] {
                let p = field.node_position(ix, iy, iz);
                field.set_node(ix, iy, iz, p.norm() - 1.0, 0.0);
            }
        }
    }
    let params = TraceParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(700);
    for _ in 0..50 {
        let az = rng.gen_range(0.0..std::f64::consts::TAU);
        let origin = Vec3::new(1.8 * az.cos(), 1.8 * az.sin(), rng.gen_range(-0.2..0.2));
        let target = Vec3::new(
            rng.gen_range(-0.3..0.3),
            rng.gen_range(-0.3..0.3),
            rng.gen_range(-0.3..0.3),
        );
        let canonical_ray = Ray::new(origin, target - origin, 100.0).unwrap();
        let Some((direct, _)) = relidar_core::field::canonical_query(
            &field,
            &RigidTransform::identity(),
            &canonical_ray,
            &params,
        ) else {
            continue;
        };
        for t in [3usize, 17, 29] {
            let motion = RigidTransform::from_yaw_translation(
                0.04 * t as f64,
                Vec3::new(1.1 * t as f64, 0.35 * t as f64, 0.0),
            );
            // The same ray expressed in the moved frame, queried through
            // the canonicalizing transform.
            let observed_ray = canonical_ray.transformed(&motion);
            let (range, _) = relidar_core::field::canonical_query(
                &field,
                &motion.invert(),
                &observed_ray,
                &params,
            )
            .expect("moved query hits");
            assert!(
                (range - direct).abs() < 1e-6,
                "frame {t}: range {range} vs direct {direct}"
            );
        }
    }
    println!("acceptance 07 canonicalization: PASS");
}

// ---------------------------------------------------------------------------
// Criterion 8: dilation algebra.

#[test]
fn criterion_08_dilation_algebra() {
    let mut rng = ChaCha8Rng::seed_from_u64(800);
    for case in 0..100 {
        let dims = [
            rng.gen_range(6..14),
            rng.gen_range(6..14),
            rng.gen_range(6..14),
        ];
        let bounds = Aabb::new(
            Vec3::ZERO,
            Vec3::new(dims[0] as f64, dims[1] as f64, dims[2] as f64),
        );
        let mut grid = OccupancyGrid::empty(bounds, 1.0, dims);
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    if rng.gen_bool(0.08) {
                        grid.set([x, y, z], true);
                    }
                }
            }
        }
        let r1 = rng.gen_range(0..3usize);
        let r2 = rng.gen_range(0..3usize);
        assert_eq!(
            grid.dilate(r1).dilate(r2),
            grid.dilate(r1 + r2),
            "case {case}: dilate({r1}) then dilate({r2}) != dilate({})",
            r1 + r2
        );
    }

    let mut singleton = OccupancyGrid::empty(
        Aabb::new(Vec3::ZERO, Vec3::new(9.0, 9.0, 9.0)),
        1.0,
        [9, 9, 9],
    );
    singleton.set([4, 4, 4], true);
    assert_eq!(singleton.dilate(1).occupied_count(), 27);
    println!("acceptance 08 dilation-algebra: PASS");
}

// ---------------------------------------------------------------------------
// Criterion 9: loss sanity.

#[test]
fn criterion_09_loss_sanity() {
    // (a) Loss at the analytic optimum: field = exact sphere SDF, logits
    // saturated toward hit, batch of exact hit rays.
    let bounds = Aabb::new(Vec3::new(-1.6, -1.6, -1.6), Vec3::new(1.6, 1.6, 1.6));
    let mut field = SdfGridField::with_voxel_size(bounds, 0.05).unwrap();
    field.truncation = 100.0;
    let res = field.resolution;
    for iz in 0..res[2] {
        for iy in 0..res[1] {
            for ix in 0..res[0] {
                let p = field.node_position(ix, iy, iz);
                field.set_node(ix, iy, iz, p.norm() - 1.0, -LOGIT_CLAMP);
            }
        }
    }
    let batch: Vec<RaySample> = sphere_rays(256, 900)
        .into_iter()
        .filter(|s| !s.is_drop())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(901);
    let eik: Vec<Vec3> = std::iter::from_fn(|| {
        loop {
            let p = Vec3::new(
                rng.gen_range(-1.5..1.5),
                rng.gen_range(-1.5..1.5),
                rng.gen_range(-1.5..1.5),
            );
            if (p.norm() - 1.0).abs() < 0.4 {
                return Some(p);
            }
        }
    })
    .take(500)
    .collect();
    let weights = LossWeights::default();
    let trace = TraceParams::default();
    let (loss, _) = loss_total_at(&field, &batch, &weights, &trace, &eik).unwrap();
    println!(
        "criterion 9 detail: optimum loss {:.5} (range {:.5}, surface {:.5}, eikonal {:.5}, drop {:.6})",
        loss.total, loss.range, loss.surface, loss.eikonal, loss.drop
    );
    assert!(loss.total < 1e-2, "loss at optimum {}", loss.total);

    // (b) One Adam step from a perturbed field strictly decreases the loss
    // on a fixed batch.
    let mut perturbed = field.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(902);
    for v in perturbed.sdf_values_mut() {
        *v += rng.gen_range(-0.05..0.05);
    }
    for v in perturbed.drop_logits_mut() {
        *v += rng.gen_range(-1.0..1.0);
    }
    let (before, grad) = loss_total_at(&perturbed, &batch, &weights, &trace, &eik).unwrap();
    // First Adam step with zero moments: theta -= lr * g / (|g| + eps).
    let lr = 1e-3;
    for (v, g) in perturbed.sdf_values_mut().iter_mut().zip(grad.sdf.iter()) {
        *v -= lr * g / (g.abs() + 1e-8);
    }
    for (v, g) in perturbed
        .drop_logits_mut()
        .iter_mut()
        .zip(grad.drop_logits.iter())
    {
        *v -= lr * g / (g.abs() + 1e-8);
    }
    let (after, _) = loss_total_at(&perturbed, &batch, &weights, &trace, &eik).unwrap();
    println!(
        "criterion 9 detail: Adam step loss {:.5} -> {:.5}",
        before.total, after.total
    );
    assert!(after.total < before.total, "loss did not decrease");

    // (c) Lovasz + BCE on a single-ray batch vs hand enumeration: a drop
    // ray predicted at p_d = 0.5 contributes BCE = ln 2 and a Lovasz hinge
    // of exactly 1 (error 1 - logit*sign = 1, Jaccard grad of a singleton
    // positive = 1).
    let mut flat = field.clone();
    for v in flat.drop_logits_mut() {
        *v = 0.0;
    }
    let single = vec![RaySample::drop(
        Vec3::new(-1.5, 1.3, 0.0),
        Vec3::new(1.0, 0.0, 0.0),
    )];
    let drop_only = LossWeights {
        range: 1.0,
        surface: 1.0,
        eikonal: 0.0,
        drop: 1.0,
    };
    let (loss, _) = loss_total_at(&flat, &single, &drop_only, &trace, &[]).unwrap();
    let expected = std::f64::consts::LN_2 + 1.0;
    assert!(
        (loss.drop - expected).abs() < 1e-12,
        "single-ray drop loss {} vs enumeration {expected}",
        loss.drop
    );
    println!("acceptance 09 loss-sanity: PASS");
}

// ---------------------------------------------------------------------------
// Criterion 10: byte-identical pipeline reruns.

#[test]
fn criterion_10_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let dataset = dir.path().join("data");
    let spec = SceneSpec {
        n_frames: 6,
        ..SceneSpec::default()
    };
    write_demo_dataset(&dataset, &spec).unwrap();

    let mut hashes = Vec::new();
    for run in 0..2 {
        let output = dir.path().join(format!("out{run}"));
        let mut config = toy_config(&dataset, &output);
        config.seed = 3;
        config.background.fit.iterations = 150;
        config.vehicles.fit.iterations = 150;
        config.vehicles.rings = RingSpec {
            radii: vec![4.0, 6.0],
            heights: vec![0.5, 2.0],
            origins_per_ring: 8,
            rays_per_origin: 64,
        };
        config.render.frames = vec![2];
        let report = run_pipeline(&config, &output).unwrap();
        assert_eq!(report.status, "ok", "{:?}", report.failure);
        hashes.push(report.output_tree_hash.unwrap());
    }
    assert_eq!(hashes[0], hashes[1], "output trees differ between reruns");
    println!(
        "criterion 10 detail: tree hash {} identical across reruns",
        &hashes[0][..16]
    );
    println!("acceptance 10 determinism: PASS");
}
