//! Acceptance suite. Each test prints one `PASS`/`FAIL` line for its
//! criterion before asserting.
//!
//! cargo test --release --test acceptance -- --nocapture --test-threads 1

use std::collections::HashMap;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use nalgebra::{Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use objslam::assoc::{associate, iou, update_feature, AssocCandidate};
use objslam::bench::{
    ate_from_points, evaluate_ate, format_report, generate_synthetic, load_tum_sequence, object_quality, read_trajectory,
    run_pipeline, write_trajectory, AteResult, CameraPath, ObjectQuality, PipelineConfig, PipelineOutput, SceneSpec,
    SegmentationMode, SensorNoise, Sequence, StampedPose, SyntheticScene,
};
use objslam::geom::{ominus, Image, Intrinsics, Mask, ObjectId, Pose, RenderMaps, RgbdFrame, SurfaceLabel, Twist};
use objslam::graph::{simulate_loop, GraphConfig};
use objslam::odometry::{residuals_and_jacobian, OdometryConfig, ResidualKind, ResidualRow};
use objslam::render::{compose_layers, render_composed, ObjectView, RenderLayer, RenderOptions};
use objslam::segment::{fill_holes, l1, InstanceDetection};
use objslam::volume::{IntegrateMode, ScalableTsdfVolume, TsdfConfig};

/// Criteria run one at a time so that their timings are not shared.
fn serial() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

/// Prints the verdict line and returns whether it passed.
fn verdict(criterion: u32, name: &str, failures: &[String], detail: &str) -> bool {
    let ok = failures.is_empty();
    println!(
        "criterion {criterion} {}: {name}; {detail}{}",
        if ok { "PASS" } else { "FAIL" },
        if ok { String::new() } else { format!("; failed: {}", failures.join(", ")) }
    );
    ok
}

fn rand_twist(rng: &mut ChaCha8Rng, rot: f64, trans: f64) -> Twist {
    Twist::new(
        Vector3::from_fn(|_, _| rng.random_range(-rot..rot)),
        Vector3::from_fn(|_, _| rng.random_range(-trans..trans)),
    )
}

fn frame_from(scene: &SyntheticScene, cam_to_world: &Pose, k: &Intrinsics) -> RgbdFrame {
    let r = scene.render(cam_to_world, k);
    RgbdFrame::new(0, 0.0, r.color, r.depth).unwrap()
}

// ---------------------------------------------------------------------------
// 1. property suite

fn se3_round_trips(rng: &mut ChaCha8Rng) -> Result<String, String> {
    let mut worst: f64 = 0.0;
    for _ in 0..2000 {
        let axis = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)).normalize();
        let angle = rng.random_range(0.0..3.1);
        let xi = Twist::new(axis * angle, Vector3::from_fn(|_, _| rng.random_range(-3.0..3.0)));
        let p = Pose::exp(&xi);
        worst = worst.max((p.log().0 - xi.0).amax());
        let q = Pose::exp(&rand_twist(rng, 1.0, 2.0));
        worst = worst.max(ominus(&p.compose(&q).compose(&q.inverse()), &p).norm());
        worst = worst.max(p.compose(&p.inverse()).log().norm());
        worst = worst.max(p.orthonormality_error());
    }
    if worst < 1e-9 {
        Ok(format!("se3 {worst:.1e}"))
    } else {
        Err(format!("se3 round trip error {worst:.1e}"))
    }
}

fn odometry_jacobian(rng: &mut ChaCha8Rng) -> Result<String, String> {
    let scene = SyntheticScene::new(SceneSpec::three_boxes(200), SensorNoise::none()).unwrap();
    let k = Intrinsics::new(75.0, 75.0, 39.5, 29.5, 80, 60).unwrap();
    let cfg = OdometryConfig::default();
    let h = 1e-6;
    let (mut configs, mut rows_checked, mut worst) = (0, 0usize, 0.0f64);
    for _ in 0..100 {
        let src = scene.poses()[rng.random_range(0..200)].compose(&Pose::exp(&rand_twist(rng, 0.05, 0.05)));
        let dst = src.compose(&Pose::exp(&rand_twist(rng, 0.03, 0.03)));
        let model = RenderMaps::from_frame(&frame_from(&scene, &src, &k), &k);
        let target = frame_from(&scene, &dst, &k);
        let at = dst.inverse().compose(&src).compose(&Pose::exp(&rand_twist(rng, 0.01, 0.01)));
        let rows = residuals_and_jacobian(&model, &target, &k, &at, &cfg).map_err(|e| e.to_string())?;
        let key = |r: &ResidualRow| (r.pixel, r.kind == ResidualKind::Geometric, r.cell);
        let shifted: Vec<[HashMap<_, f64>; 2]> = (0..6)
            .map(|i| {
                [h, -h].map(|s| {
                    let mut e = Vector6::zeros();
                    e[i] = s;
                    residuals_and_jacobian(&model, &target, &k, &Pose::exp(&Twist(e)).compose(&at), &cfg)
                        .unwrap()
                        .iter()
                        .map(|r| (key(r), r.residual))
                        .collect()
                })
            })
            .collect();
        let mut checked = 0;
        for row in &rows {
            let at_shift = |m: &HashMap<_, f64>| m.get(&key(row)).copied();
            let Some(fd) = (0..6)
                .map(|i| Some((at_shift(&shifted[i][0])? - at_shift(&shifted[i][1])?) / (2.0 * h)))
                .collect::<Option<Vec<f64>>>()
            else {
                // the correspondence changed cell between the two probes
                continue;
            };
            let fd = Vector6::from_vec(fd);
            let err = (fd - row.jacobian).amax() / row.jacobian.amax().max(1e-3);
            worst = worst.max(err);
            checked += 1;
        }
        rows_checked += checked;
        configs += (checked >= 100) as usize;
    }
    if configs >= 100 && worst < 1e-4 {
        Ok(format!("jacobian {configs} configs / {rows_checked} rows, max rel err {worst:.1e}"))
    } else {
        Err(format!("jacobian: {configs} usable configs, max rel err {worst:.1e}"))
    }
}

/// Depth along each pixel ray of the first hit of `surface`.
fn analytic_depth(k: &Intrinsics, surface: impl Fn(&Vector3<f64>) -> Option<f64>) -> Image<f64> {
    Image::from_fn(k.width, k.height, |x, y| surface(&k.ray(x as f64, y as f64)).unwrap_or(0.0))
}

fn sphere(center: Vector3<f64>, radius: f64) -> impl Fn(&Vector3<f64>) -> Option<f64> {
    move |r| {
        let (a, b, c) = (r.dot(r), -2.0 * r.dot(&center), center.dot(&center) - radius * radius);
        let disc = b * b - 4.0 * a * c;
        (disc >= 0.0).then(|| (-b - disc.sqrt()) / (2.0 * a))
    }
}

fn tsdf_round_trip() -> Result<String, String> {
    let k = Intrinsics::new(160.0, 160.0, 79.5, 59.5, 160, 120).unwrap();
    let n = Vector3::new(0.25, -0.1, 1.0).normalize();
    let plane = move |r: &Vector3<f64>| Some(1.6 / n.dot(r));
    let cases: [(&str, Box<dyn Fn(&Vector3<f64>) -> Option<f64>>, f64); 3] = [
        ("sphere", Box::new(sphere(Vector3::new(0.05, -0.02, 1.5), 0.5)), 0.01),
        ("small sphere", Box::new(sphere(Vector3::new(0.0, 0.0, 1.0), 0.2)), 0.005),
        ("plane", Box::new(plane), 0.01),
    ];
    let mut out = Vec::new();
    for (name, surface, l) in cases {
        let depth = analytic_depth(&k, &surface);
        let color = Image::filled(k.width, k.height, [0.5; 3]);
        let frame = RgbdFrame::new(0, 0.0, color, depth.clone()).unwrap();
        let mut vol = ScalableTsdfVolume::new(TsdfConfig::with_voxel_length(l));
        vol.integrate(&frame, None, &Pose::identity(), &k, IntegrateMode::Plain).map_err(|e| e.to_string())?;
        let maps = vol.raycast(&Pose::identity(), &k).map_err(|e| e.to_string())?;
        let errs: Vec<f64> = maps
            .label
            .enumerate()
            .filter(|(x, y, l)| l.is_valid() && depth[(*x, *y)] > 0.0)
            .map(|(x, y, _)| maps.vertex[(x, y)].z - depth[(x, y)])
            .collect();
        let rms = (errs.iter().map(|e| e * e).sum::<f64>() / errs.len().max(1) as f64).sqrt();
        if errs.len() < 1000 || rms >= l {
            return Err(format!("tsdf {name}: rms {rms:.2e} over {} px (voxel {l})", errs.len()));
        }
        out.push(format!("{name} {:.2}", rms / l));
    }
    Ok(format!("tsdf rms/voxel {}", out.join(" ")))
}

fn brute_force_labels(layers: &[RenderLayer], w: usize, h: usize) -> Image<SurfaceLabel> {
    Image::from_fn(w, h, |x, y| {
        let mut best: Option<(f64, SurfaceLabel)> = None;
        for l in layers {
            if l.maps.label[(x, y)].is_valid() {
                let z = l.maps.vertex[(x, y)].z;
                if best.is_none_or(|(bz, _)| z < bz) {
                    best = Some((z, l.label));
                }
            }
        }
        best.map_or(SurfaceLabel::Invalid, |b| b.1)
    })
}

fn label_map(rng: &mut ChaCha8Rng) -> Result<String, String> {
    let (w, h) = (40, 30);
    for trial in 0..200 {
        let n = rng.random_range(0..6);
        let layers: Vec<RenderLayer> = (0..=n)
            .map(|i| {
                let label = if i == n { SurfaceLabel::Background } else { SurfaceLabel::Object(ObjectId(i as u32)) };
                let mut maps = RenderMaps::invalid(w, h);
                for y in 0..h {
                    for x in 0..w {
                        if rng.random::<f64>() < 0.6 {
                            // coarse depths so that ties occur
                            maps.vertex[(x, y)] = Vector3::new(0.0, 0.0, rng.random_range(1..8) as f64 * 0.5);
                            maps.normal[(x, y)] = -Vector3::z();
                            maps.label[(x, y)] = label;
                        }
                    }
                }
                RenderLayer { label, maps }
            })
            .collect();
        let expected = brute_force_labels(&layers, w, h);
        if compose_layers(layers, w, h).maps.label != expected {
            return Err(format!("label map: random layers trial {trial}"));
        }
    }
    // three fused spheres rendered together
    let k = Intrinsics::new(100.0, 100.0, 39.5, 29.5, 80, 60).unwrap();
    let gray = Image::filled(k.width, k.height, [0.5; 3]);
    let centers = [Vector3::new(-0.15, 0.0, 1.0), Vector3::new(0.1, 0.05, 1.3), Vector3::new(0.0, -0.05, 1.6)];
    let vols: Vec<(ScalableTsdfVolume, Pose)> = centers
        .iter()
        .map(|&c| {
            let frame = RgbdFrame::new(0, 0.0, gray.clone(), analytic_depth(&k, sphere(c, 0.25))).unwrap();
            let obj_to_world = Pose::from_translation(c);
            let mut vol = ScalableTsdfVolume::new(TsdfConfig::with_voxel_length(0.01));
            vol.integrate(&frame, None, &obj_to_world.inverse(), &k, IntegrateMode::Foreground).unwrap();
            (vol, obj_to_world)
        })
        .collect();
    let views: Vec<ObjectView> = vols
        .iter()
        .enumerate()
        .map(|(i, (v, p))| ObjectView { id: ObjectId(i as u32), volume: v, obj_to_world: *p })
        .collect();
    let r = render_composed(&views, None, &Pose::identity(), &k, &RenderOptions::default()).map_err(|e| e.to_string())?;
    if r.maps.label != brute_force_labels(&r.layers, k.width, k.height) {
        return Err("label map: composed spheres".into());
    }
    Ok("label map 201 cases".into())
}

/// Most matches, then least total L1, over all partial injections.
fn exhaustive(gated: &[Vec<Option<f64>>], objects: usize) -> (usize, f64) {
    fn go(d: usize, gated: &[Vec<Option<f64>>], used: &mut [bool], n: usize, cost: f64, best: &mut (usize, f64)) {
        if d == gated.len() {
            if n > best.0 || (n == best.0 && cost < best.1) {
                *best = (n, cost);
            }
            return;
        }
        go(d + 1, gated, used, n, cost, best);
        for o in 0..used.len() {
            if let (false, Some(c)) = (used[o], gated[d][o]) {
                used[o] = true;
                go(d + 1, gated, used, n + 1, cost + c, best);
                used[o] = false;
            }
        }
    }
    let mut best = (0, 0.0);
    go(0, gated, &mut vec![false; objects], 0, 0.0, &mut best);
    best
}

fn association(rng: &mut ChaCha8Rng) -> Result<String, String> {
    let trials = 500;
    for trial in 0..trials {
        let (nd, no) = (rng.random_range(0..=6), rng.random_range(0..=6));
        let rand_mask = |rng: &mut ChaCha8Rng| {
            let (x0, y0) = (rng.random_range(0..24u32), rng.random_range(0..24u32));
            Mask::from_box(32, 32, [x0, y0, x0 + rng.random_range(2..8), y0 + rng.random_range(2..8)])
        };
        let rand_feat = |rng: &mut ChaCha8Rng| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        let dets: Vec<InstanceDetection> = (0..nd)
            .map(|_| InstanceDetection::new(1, 0.9, rand_mask(rng), rand_feat(rng)).unwrap())
            .collect();
        let masks: Vec<Mask> = (0..no).map(|_| rand_mask(rng)).collect();
        let feats: Vec<Vec<f64>> = (0..no).map(|_| rand_feat(rng)).collect();
        let objs: Vec<AssocCandidate> = (0..no)
            .map(|i| AssocCandidate { id: ObjectId(i as u32), feature: &feats[i], virtual_mask: &masks[i] })
            .collect();
        let gated: Vec<Vec<Option<f64>>> = dets
            .iter()
            .map(|d| {
                objs.iter()
                    .map(|o| (iou(&d.mask, o.virtual_mask).unwrap() > 0.2).then(|| l1(&d.feature, o.feature)))
                    .collect()
            })
            .collect();
        let out = associate(&dets, &objs, 0.2).map_err(|e| e.to_string())?;
        let (n, cost) = exhaustive(&gated, no);
        if out.matches.len() != n || (out.total_distance(&dets, &objs) - cost).abs() > 1e-9 {
            return Err(format!("associate trial {trial}: {} matches vs {n}", out.matches.len()));
        }
    }
    Ok(format!("associate {trials} cases"))
}

fn feature_gate(rng: &mut ChaCha8Rng) -> Result<String, String> {
    let mut closed = 0;
    for _ in 0..2000 {
        let dim = rng.random_range(1..16);
        let f: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        let g: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        let w = rng.random_range(1.0..50.0);
        let lambda = rng.random_range(0.1..4.0);
        let (f2, w2) = update_feature(&f, w, &g, lambda);
        if l1(&f, &g) > lambda {
            closed += 1;
            if f2 != f || w2 != w {
                return Err("feature gate: closed gate changed the feature".into());
            }
        } else if w2 != w + 1.0 {
            return Err("feature gate: open gate did not add weight".into());
        }
    }
    Ok(format!("gate {closed} closed"))
}

fn visible_ratio(rng: &mut ChaCha8Rng) -> Result<String, String> {
    let k = Intrinsics::new(80.0, 80.0, 39.5, 29.5, 80, 60).unwrap();
    let frame = RgbdFrame::new(
        0,
        0.0,
        Image::filled(k.width, k.height, [0.5; 3]),
        Image::from_fn(k.width, k.height, |x, y| 1.0 + 0.02 * x as f64 + 0.01 * y as f64),
    )
    .unwrap();
    let mut vol = ScalableTsdfVolume::new(TsdfConfig::with_voxel_length(0.02));
    vol.integrate(&frame, None, &Pose::identity(), &k, IntegrateMode::Plain).unwrap();
    let side = 16.0 * 0.02;
    let range = TsdfConfig::with_voxel_length(0.02).depth_range;
    let mut partial = 0;
    for trial in 0..300 {
        let pose = Pose::exp(&rand_twist(rng, 0.8, 1.0));
        let coords: Vec<_> = vol.block_coords().collect();
        let inside = coords
            .iter()
            .filter(|c| {
                let center = Vector3::new(c[0] as f64 + 0.5, c[1] as f64 + 0.5, c[2] as f64 + 0.5) * side;
                let p = pose.transform_point(&center);
                if p.z < range.min || p.z > range.max {
                    return false;
                }
                let (u, v) = (k.fx * p.x / p.z + k.cx, k.fy * p.y / p.z + k.cy);
                (-0.5..k.width as f64 - 0.5).contains(&u) && (-0.5..k.height as f64 - 0.5).contains(&v)
            })
            .count();
        let expected = inside as f64 / coords.len() as f64;
        let got = vol.visible_ratio(&pose, &k).map_err(|e| e.to_string())?;
        if (got - expected).abs() > 1e-12 {
            return Err(format!("visible ratio trial {trial}: {got} vs {expected}"));
        }
        partial += (expected > 0.0 && expected < 1.0) as usize;
    }
    Ok(format!("visible ratio 300 poses ({partial} partial)"))
}

/// Union-find over 4-connected background pixels; components that touch
/// the border stay background, all others become mask.
fn components_oracle(mask: &Mask) -> Mask {
    let (w, h) = (mask.width(), mask.height());
    let mut parent: Vec<usize> = (0..w * h).collect();
    fn root(p: &mut [usize], mut i: usize) -> usize {
        while p[i] != i {
            p[i] = p[p[i]];
            i = p[i];
        }
        i
    }
    for y in 0..h {
        for x in 0..w {
            if mask[(x, y)] {
                continue;
            }
            for (nx, ny) in [(x + 1, y), (x, y + 1)] {
                if nx < w && ny < h && !mask[(nx, ny)] {
                    let (a, b) = (root(&mut parent, y * w + x), root(&mut parent, ny * w + nx));
                    parent[a] = b;
                }
            }
        }
    }
    let mut border = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            if !mask[(x, y)] && (x == 0 || y == 0 || x + 1 == w || y + 1 == h) {
                let r = root(&mut parent, y * w + x);
                border[r] = true;
            }
        }
    }
    Image::from_fn(w, h, |x, y| mask[(x, y)] || !border[root(&mut parent, y * w + x)])
}

fn flood_fill(rng: &mut ChaCha8Rng) -> Result<String, String> {
    let mut filled = 0;
    for trial in 0..400 {
        let (w, h) = (rng.random_range(1..=64), rng.random_range(1..=64));
        let density = rng.random_range(0.2..0.7);
        let mask = Image::from_fn(w, h, |_, _| rng.random::<f64>() < density);
        let got = fill_holes(&mask);
        if got != components_oracle(&mask) {
            return Err(format!("flood fill trial {trial} ({w}x{h})"));
        }
        filled += got.count() - mask.count();
    }
    Ok(format!("flood fill 400 grids ({filled} px filled)"))
}

#[test]
fn criterion_1_property_suite() {
    let _serial = serial();
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut timed = |check: &mut dyn FnMut(&mut ChaCha8Rng) -> Result<String, String>| {
        let t = Instant::now();
        check(&mut rng).map(|ok| format!("{ok} [{:.1} s]", t.elapsed().as_secs_f64()))
    };
    let checks = [
        timed(&mut se3_round_trips),
        timed(&mut odometry_jacobian),
        timed(&mut |_| tsdf_round_trip()),
        timed(&mut label_map),
        timed(&mut association),
        timed(&mut feature_gate),
        timed(&mut visible_ratio),
        timed(&mut flood_fill),
    ];
    let elapsed = started.elapsed();
    let mut failures: Vec<String> = checks.iter().filter_map(|c| c.clone().err()).collect();
    if elapsed > Duration::from_secs(60) {
        failures.push(format!("took {:.1} s", elapsed.as_secs_f64()));
    }
    let passed: Vec<String> = checks.into_iter().filter_map(Result::ok).collect();
    let detail = format!("{}; {:.1} s", passed.join("; "), elapsed.as_secs_f64());
    assert!(verdict(1, "property suite", &failures, &detail));
}

// ---------------------------------------------------------------------------
// 2 and 3. synthetic three-box orbit

struct Run {
    seq: Sequence,
    out: PipelineOutput,
    ate: AteResult,
    elapsed: Duration,
}

fn orbit_run(noise: SensorNoise) -> Run {
    let seq = generate_synthetic(SceneSpec::three_boxes(200), noise).unwrap();
    let started = Instant::now();
    let out = run_pipeline(&seq, &PipelineConfig::default()).unwrap();
    let elapsed = started.elapsed();
    let ate = evaluate_ate(&out.estimate.poses, seq.ground_truth.as_ref().unwrap(), 1e-3).unwrap();
    Run { seq, out, ate, elapsed }
}

fn noisy_run() -> &'static Run {
    static RUN: OnceLock<Run> = OnceLock::new();
    RUN.get_or_init(|| orbit_run(SensorNoise::default()))
}

#[test]
fn criterion_2_synthetic_tracking() {
    let _serial = serial();
    let clean = orbit_run(SensorNoise::none());
    let noisy = noisy_run();
    let mut failures = Vec::new();
    for (name, run, limit) in [("noise-free", &clean, 0.01), ("noisy", noisy, 0.03)] {
        if run.out.estimate.len() != 200 || run.ate.rmse >= limit {
            failures.push(format!("{name} ATE {:.4} m over {} frames", run.ate.rmse, run.out.estimate.len()));
        }
        if run.elapsed > Duration::from_secs(600) {
            failures.push(format!("{name} took {:.0} s", run.elapsed.as_secs_f64()));
        }
    }
    let detail = format!(
        "ATE noise-free {:.2} mm ({:.0} s), noisy {:.2} mm ({:.0} s)",
        clean.ate.rmse * 1e3,
        clean.elapsed.as_secs_f64(),
        noisy.ate.rmse * 1e3,
        noisy.elapsed.as_secs_f64()
    );
    assert!(verdict(2, "synthetic tracking", &failures, &detail));
}

#[test]
fn criterion_3_object_quality() {
    let _serial = serial();
    let run = noisy_run();
    let scene = run.seq.scene().unwrap();
    let objects = run.out.objects.objects();
    let threshold = run.out.objects.config.fg_ratio_threshold;
    let quality: Vec<ObjectQuality> = object_quality(objects, scene, &run.ate.alignment, threshold).unwrap();
    let mut failures = Vec::new();
    let mut labels: Vec<u32> = objects.iter().map(|o| o.label).collect();
    labels.sort();
    let mut expected: Vec<u32> = scene.spec().objects.iter().map(|o| o.label).collect();
    expected.sort();
    if run.out.stats.objects_created != 3 || labels != expected {
        failures.push(format!("{} objects created, labels {labels:?}", run.out.stats.objects_created));
    }
    let mut instances: Vec<Option<u32>> = quality.iter().map(|q| q.instance).collect();
    instances.sort();
    instances.dedup();
    if instances.len() != quality.len() || instances.contains(&None) {
        failures.push(format!("instances {instances:?}"));
    }
    for q in &quality {
        if !(q.foreground_rms < 2.0 * q.voxel_length) {
            failures.push(format!("object {} rms {:.2} voxels", q.object, q.foreground_rms / q.voxel_length));
        }
        if q.spill_removal() < 0.95 {
            failures.push(format!("object {} spill removal {:.3}", q.object, q.spill_removal()));
        }
    }
    let detail = quality
        .iter()
        .map(|q| {
            format!(
                "label {} rms {:.2} vx, spill {}/{} removed ({:.1}%)",
                q.label,
                q.foreground_rms / q.voxel_length,
                q.spill_points - q.spill_kept,
                q.spill_points,
                100.0 * q.spill_removal()
            )
        })
        .collect::<Vec<_>>()
        .join("; ");
    assert!(verdict(3, "object quality", &failures, &detail));
}

// ---------------------------------------------------------------------------
// 4. pose graph

fn camera_ate(graph: &objslam::graph::GraphState, truth: &[Pose]) -> f64 {
    let est: Vec<Vector3<f64>> = (0..truth.len()).map(|i| *graph.cameras[&i].translation()).collect();
    let gt: Vec<Vector3<f64>> = truth.iter().map(|p| *p.translation()).collect();
    ate_from_points(&est, &gt).rmse
}

#[test]
fn criterion_4_pose_graph() {
    let _serial = serial();
    let cfg = GraphConfig::default();
    let mut failures = Vec::new();
    let mut ratios = Vec::new();
    let mut monotone = true;
    for seed in 0..10 {
        let mut sim = simulate_loop(10, 3, 1f64.to_radians(), 0.01, seed, &cfg);
        let before = camera_ate(&sim.graph, &sim.cameras);
        let stats = sim.graph.optimize(&cfg).unwrap();
        let ratio = camera_ate(&sim.graph, &sim.cameras) / before;
        monotone &= stats.chi2_history.windows(2).all(|w| w[1] <= w[0]);
        if !(ratio <= 0.3) {
            failures.push(format!("seed {seed} ratio {ratio:.3}"));
        }
        ratios.push(ratio);
    }

    let mut sim = simulate_loop(10, 3, 0.0, 0.0, 99, &cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for p in sim.graph.cameras.values_mut().skip(1).chain(sim.graph.objects.values_mut()) {
        *p = p.compose(&Pose::exp(&rand_twist(&mut rng, 0.05, 0.1)));
    }
    let stats = sim.graph.optimize(&cfg).unwrap();
    monotone &= stats.chi2_history.windows(2).all(|w| w[1] <= w[0]);
    let recovery = sim
        .cameras
        .iter()
        .enumerate()
        .map(|(i, t)| ominus(&sim.graph.cameras[&i], t).norm())
        .chain(sim.objects.iter().enumerate().map(|(j, t)| ominus(&sim.graph.objects[&ObjectId(j as u32)], t).norm()))
        .fold(0.0, f64::max);
    if recovery > 1e-6 {
        failures.push(format!("zero-noise recovery {recovery:.1e}"));
    }
    if !monotone {
        failures.push("chi2 increased".into());
    }
    let max = ratios.iter().cloned().fold(0.0, f64::max);
    let detail = format!(
        "ATE ratio per seed [{}] (max {max:.3}); zero-noise recovery {recovery:.1e}; chi2 monotone {monotone}",
        ratios.iter().map(|r| format!("{r:.3}")).collect::<Vec<_>>().join(" ")
    );
    assert!(verdict(4, "pose graph", &failures, &detail));
}

// ---------------------------------------------------------------------------
// 5. TUM fr1_xyz, when available

#[test]
fn criterion_5_real_data() {
    let _serial = serial();
    let Some(dir) = std::env::var_os("OBJSLAM_TUM_FR1_XYZ") else {
        println!("criterion 5 SKIP: real data; set OBJSLAM_TUM_FR1_XYZ to a rgbd_dataset_freiburg1_xyz directory");
        return;
    };
    let seq = load_tum_sequence(std::path::Path::new(&dir), 0.02).unwrap().downsampled(1);
    let cfg = PipelineConfig { segmentation: SegmentationMode::Disabled, ..Default::default() };
    let started = Instant::now();
    let out = run_pipeline(&seq, &cfg).unwrap();
    let elapsed = started.elapsed();
    let ate = evaluate_ate(&out.estimate.poses, seq.ground_truth.as_ref().expect("groundtruth.txt"), 0.02).unwrap();
    let mut failures = Vec::new();
    if ate.rmse >= 0.15 {
        failures.push(format!("ATE {:.3} m", ate.rmse));
    }
    if elapsed > Duration::from_secs(1200) {
        failures.push(format!("took {:.0} s", elapsed.as_secs_f64()));
    }
    let detail = format!("{} frames, ATE {:.2} cm, {:.0} s", out.estimate.len(), ate.rmse * 100.0, elapsed.as_secs_f64());
    assert!(verdict(5, "real data", &failures, &detail));
}

// ---------------------------------------------------------------------------
// 6. engineering contracts

/// Two boxes far enough apart that each leaves the view for a while.
fn offload_scene() -> Sequence {
    let mut spec = SceneSpec::three_boxes(60);
    spec.objects.truncate(2);
    spec.objects[0].position = [0.0, 0.1, 0.0];
    spec.objects[1].position = [-1.8, 0.15, 0.0];
    if let CameraPath::Orbit { revolutions, .. } = &mut spec.trajectory.path {
        *revolutions = 0.3;
    }
    generate_synthetic(spec, SensorNoise::default()).unwrap()
}

fn checksums(out: &PipelineOutput) -> Vec<u64> {
    out.objects.objects().iter().map(|o| o.volume.payload_checksum()).collect()
}

fn same_run(a: &PipelineOutput, b: &PipelineOutput) -> bool {
    a.estimate.poses.len() == b.estimate.poses.len()
        && a.estimate.poses.iter().zip(&b.estimate.poses).all(|(x, y)| x.pose == y.pose)
        && checksums(a) == checksums(b)
        && a.background.payload_checksum() == b.background.payload_checksum()
        && a.objects.objects().iter().zip(b.objects.objects()).all(|(x, y)| x.pose == y.pose)
}

#[test]
fn criterion_6_engineering_contracts() {
    let _serial = serial();
    let mut failures = Vec::new();
    let mut notes = Vec::new();
    let dir = tempfile::tempdir().unwrap();

    // offload / reload of a fused volume
    let scene = SyntheticScene::new(SceneSpec::three_boxes(200), SensorNoise::default()).unwrap();
    let k = scene.intrinsics();
    let mut vol = ScalableTsdfVolume::new(TsdfConfig::with_voxel_length(0.02));
    for i in (0..200).step_by(20) {
        vol.integrate(&scene.frame(i), None, &scene.poses()[i].inverse(), &k, IntegrateMode::Plain).unwrap();
    }
    let blocks = vol.blocks().to_vec();
    let sum = vol.payload_checksum();
    vol.offload(dir.path().join("volume.bin")).unwrap();
    vol.reload().unwrap();
    if vol.blocks() != blocks.as_slice() || vol.payload_checksum() != sum {
        failures.push("offload/reload changed voxels".into());
    }
    notes.push(format!("offload {} blocks identical", blocks.len()));

    // trajectory files
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let poses: Vec<StampedPose> = (0..500)
        .map(|i| {
            let axis = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let p = Pose::exp(&Twist::new(axis * 3.0, Vector3::from_fn(|_, _| rng.random_range(-20.0..20.0))));
            StampedPose::new(1_305_031_102.0 + i as f64 * 0.0333, p)
        })
        .collect();
    let path = dir.path().join("trajectory.txt");
    write_trajectory(&poses, &path).unwrap();
    let back = read_trajectory(&path).unwrap();
    let worst = poses
        .iter()
        .zip(&back)
        .map(|(a, b)| {
            let dt = (a.timestamp - b.timestamp).abs();
            let dr = (a.pose.rotation() - b.pose.rotation()).amax();
            let dp = (a.pose.translation() - b.pose.translation()).amax();
            dt.max(dr).max(dp)
        })
        .fold(0.0, f64::max);
    if back.len() != poses.len() || worst > 1e-6 {
        failures.push(format!("trajectory round trip error {worst:.1e}"));
    }
    notes.push(format!("trajectory round trip {worst:.1e}"));

    // deterministic reruns, with and without offloading
    let seq = offload_scene();
    let cfg = PipelineConfig { deterministic: true, ..Default::default() };
    let mut a = run_pipeline(&seq, &cfg).unwrap();
    let b = run_pipeline(&seq, &cfg).unwrap();
    let offloaded = PipelineConfig { offload_dir: Some(dir.path().join("parked")), ..cfg.clone() };
    std::fs::create_dir_all(dir.path().join("parked")).unwrap();
    let c = run_pipeline(&seq, &offloaded).unwrap();
    if !same_run(&a, &b) {
        failures.push("deterministic reruns differ".into());
    }
    if !same_run(&a, &c) {
        failures.push("run with offloading differs".into());
    }
    if c.stats.offloads == 0 {
        failures.push("offload scene never offloaded".into());
    }
    notes.push(format!("reruns identical, {} offloads / {} reloads", c.stats.offloads, c.stats.reloads));

    // write_back moves object poses only
    let before = checksums(&a);
    let mut graph = a.graph.clone();
    let shift = Pose::exp(&Twist::new(Vector3::new(0.0, 0.2, 0.0), Vector3::new(0.1, 0.0, -0.05)));
    for p in graph.objects.values_mut() {
        *p = shift.compose(p);
    }
    let moved = graph.write_back(&mut a.objects);
    let poses_ok = a.objects.objects().iter().all(|o| graph.objects.get(&o.id) == Some(&o.pose));
    if moved != a.objects.len() || moved == 0 || !poses_ok || checksums(&a) != before {
        failures.push("write_back".into());
    }
    notes.push(format!("write_back {moved} objects, checksums unchanged"));

    // timing report
    let report = format_report(&a.estimate, None);
    let missing: Vec<&str> = ["Tracking", "Segmentation", "Association", "Rendering"]
        .into_iter()
        .filter(|s| !report.lines().any(|l| l.starts_with(&format!("{s},"))))
        .collect();
    if !missing.is_empty() {
        failures.push(format!("report lacks {missing:?}"));
    }
    notes.push("report has all four stages".into());

    assert!(verdict(6, "engineering contracts", &failures, &notes.join("; ")));
}
