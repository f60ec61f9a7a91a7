// scratch probe: shell gradient deviation at init vs after short fits
use relidar_core::field::*;
use relidar_core::geom::{Aabb, Vec3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn sphere_rays(n: usize, seed: u64) -> Vec<RaySample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let corners: Vec<Vec3> = (0..8).map(|i| Vec3::new(
        if i & 1 != 0 { 2.0 } else { -2.0 },
        if i & 2 != 0 { 2.0 } else { -2.0 },
        if i & 4 != 0 { 2.0 } else { -2.0 })).collect();
    (0..n).map(|k| {
        let origin = corners[k % 8];
        let target = Vec3::new(rng.gen_range(-1.2..1.2), rng.gen_range(-1.2..1.2), rng.gen_range(-1.2..1.2));
        let dir = (target - origin).normalized().unwrap();
        let b = origin.dot(dir);
        let c = origin.norm_squared() - 1.0;
        let disc = b * b - c;
        if disc > 0.0 { let t = -b - disc.sqrt(); if t > 0.0 { return RaySample::hit(origin, dir, t); } }
        RaySample::drop(origin, dir)
    }).collect()
}

fn shell_dev(field: &SdfGridField, trunc: f64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let mut total = 0.0; let mut count = 0; let mut clamp_zone = 0.0; let mut clamp_n = 0;
    while count < 10000 {
        let p = Vec3::new(rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5));
        let d = (p.norm() - 1.0).abs();
        if d > trunc { continue; }
        let dev = (field.query_sdf_gradient(p).norm() - 1.0).abs();
        total += dev; count += 1;
        if d > trunc - 0.06 { clamp_zone += dev; clamp_n += 1; }
    }
    (total / count as f64, clamp_zone / clamp_n.max(1) as f64)
}

fn ideal_field(voxel: f64, trunc_mult: f64) -> SdfGridField {
    let bounds = Aabb::new(Vec3::new(-1.6,-1.6,-1.6), Vec3::new(1.6,1.6,1.6));
    let mut f = SdfGridField::with_voxel_size(bounds, voxel).unwrap();
    f.truncation = trunc_mult * voxel;
    let res = f.resolution;
    for iz in 0..res[2] { for iy in 0..res[1] { for ix in 0..res[0] {
        let p = f.node_position(ix, iy, iz);
        let s = (p.norm() - 1.0).clamp(-f.truncation, f.truncation);
        f.set_node(ix, iy, iz, s, 0.0);
    }}}
    f
}

fn main() {
    for mult in [4.0, 6.0, 8.0] {
        let f = ideal_field(0.05, mult);
        let (m, c) = shell_dev(&f, f.truncation);
        println!("ideal truncated sphere, trunc {}x voxel: mean {:.4} near-clamp {:.4}", mult, m, c);
    }
    let voxel = 0.05;
    let bounds = Aabb::new(Vec3::new(-1.6,-1.6,-1.6), Vec3::new(1.6,1.6,1.6));
    let spec = GridSpec::from_voxel_size(bounds, voxel);
    let samples = sphere_rays(10_000, 42);

    // init only
    let cfg0 = FitConfig { iterations: 0, ..FitConfig::default() };
    let f0 = fit_field(&spec, &samples, &cfg0, &LossWeights::default()).unwrap();
    let (m, c) = shell_dev(&f0, f0.truncation);
    println!("init only:        mean {:.4}  near-clamp-zone {:.4}", m, c);

    for (iters, lr, eik, w_eik) in [
        (2000usize, 0.02, 256usize, 0.1),
        (2000, 0.02, 1024, 0.1),
        (2000, 0.01, 2048, 0.1),
        (2000, 0.005, 2048, 0.5),
    ] {
        let cfg = FitConfig { iterations: iters, learning_rate: lr, batch_size: 1024, eikonal_samples: eik, seed: 5, trace: TraceParams::default() };
        let weights = LossWeights { eikonal: w_eik, ..LossWeights::default() };
        let f = fit_field(&spec, &samples, &cfg, &weights).unwrap();
        let (m, c) = shell_dev(&f, f.truncation);
        // profile by |d| bins
        let mut rng = ChaCha8Rng::seed_from_u64(100);
        let mut bins = [0.0f64; 4]; let mut bn = [0usize; 4];
        let trunc = f.truncation;
        let mut count = 0;
        while count < 20000 {
            let p = Vec3::new(rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5));
            let d = (p.norm() - 1.0).abs();
            if d > trunc { continue; }
            count += 1;
            let b = ((d / trunc) * 4.0).min(3.0) as usize;
            bins[b] += (f.query_sdf_gradient(p).norm() - 1.0).abs();
            bn[b] += 1;
        }
        let prof: Vec<String> = (0..4).map(|i| format!("{:.3}", bins[i]/bn[i].max(1) as f64)).collect();
        println!("iters {:5} lr {:.3} eik {:4} w {:.1}: mean {:.4} clampzone {:.4} profile {:?}", iters, lr, eik, w_eik, m, c, prof);
    }
}
