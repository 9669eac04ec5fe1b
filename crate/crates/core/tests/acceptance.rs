//! Acceptance checks, one line per criterion. Tolerances are fixed here.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use chrono::NaiveDate;
use nalgebra::{Matrix3, Rotation3, Unit, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use signmap::change::{
    promote, ChangeEvent, ChangeKind, Evidence, PendingChange, PermanenceConfig, TemporaryLayer,
};
use signmap::config::PipelineConfig;
use signmap::geodesy::{ecef_to_geodetic, estimate_similarity, geodetic_to_ecef, EnuFrame, GeodeticCoord};
use signmap::metadata::{self, cluster_candidates, Candidate, MetadataEntry, MetadataGenConfig, MetadataStore};
use signmap::metrics::{pixel_errors, pose_error_vs_trace};
use signmap::pose::{rotation_angle_between, GpsSample, PoseConfig, PoseEstimate, PoseSource, PoseTracker, ReferenceImage, ReferenceIndex};
use signmap::realtime::{generate_sparse_labels, pixel_to_wcs, DistanceMap};
use signmap::sfm::{
    parse_model_str, write_model_strings, CameraIntrinsics, CameraPose, ImageRecord, Keypoint, Reconstruction, ScenePoint,
    SfmError, TrackEntry,
};
use signmap::synth::{self, preset_basic, preset_campus, preset_residential, render_scene, SyntheticScene};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn gauss(r: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(r)
}

fn random_rotation(r: &mut ChaCha8Rng) -> Matrix3<f64> {
    let q = nalgebra::Quaternion::new(gauss(r), gauss(r), gauss(r), gauss(r));
    *UnitQuaternion::from_quaternion(q).to_rotation_matrix().matrix()
}

fn small_rotation(r: &mut ChaCha8Rng, angle_deg: f64) -> Matrix3<f64> {
    let axis = Unit::new_normalize(Vector3::new(gauss(r), gauss(r), gauss(r)));
    *Rotation3::from_axis_angle(&axis, angle_deg.to_radians()).matrix()
}

fn date(s: &str) -> NaiveDate {
    s.parse().expect("date literal")
}

// 1 ------------------------------------------------------------------------

fn geodesy() -> Check {
    let start = Instant::now();
    let mut r = rng(1);
    // closed-form anchors on the WGS84 ellipsoid
    let a = geodetic_to_ecef(&GeodeticCoord::new(0.0, 0.0, 0.0).unwrap()).unwrap();
    ensure((a.x - 6_378_137.0).abs() < 1e-6 && a.y.abs() < 1e-6 && a.z.abs() < 1e-6, || format!("equator anchor {a:?}"))?;
    let b = 6_378_137.0 * (1.0 - 1.0 / 298.257_223_563);
    let p = geodetic_to_ecef(&GeodeticCoord::new(90.0, 0.0, 0.0).unwrap()).unwrap();
    ensure((p.z - b).abs() < 1e-6 && p.x.abs() < 1e-6, || format!("pole anchor {p:?}"))?;

    let (mut worst_deg, mut worst_m) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let g = GeodeticCoord::new(r.random_range(-90.0..=90.0), r.random_range(-180.0..180.0), r.random_range(-500.0..9000.0))
            .unwrap();
        let back = ecef_to_geodetic(&geodetic_to_ecef(&g).unwrap()).unwrap();
        let dlon = ((back.lon_deg - g.lon_deg + 540.0) % 360.0 - 180.0).abs();
        // longitude is meaningless at the poles themselves
        let dlon = if g.lat_deg.abs() > 90.0 - 1e-9 { 0.0 } else { dlon };
        worst_deg = worst_deg.max((back.lat_deg - g.lat_deg).abs()).max(dlon);
        worst_m = worst_m.max((back.alt_m - g.alt_m).abs());
    }
    ensure(worst_deg < 1e-9 && worst_m < 1e-6, || format!("round trip error {worst_deg:e} deg, {worst_m:e} m"))?;

    let mut worst_rel = 0.0f64;
    for _ in 0..100 {
        let s = r.random_range(-2.0f64..2.0).exp();
        let rot = random_rotation(&mut r);
        let t = Vector3::from_fn(|_, _| r.random_range(-1000.0..1000.0));
        let src: Vec<Vector3<f64>> = (0..10).map(|_| Vector3::from_fn(|_, _| r.random_range(-100.0..100.0))).collect();
        let dst: Vec<Vector3<f64>> = src.iter().map(|p| s * rot * p + t).collect();
        let est = estimate_similarity(&src, &dst).map_err(|e| e.to_string())?;
        let rel = [
            (est.scale - s).abs() / s,
            (est.rotation - rot).norm(),
            (est.translation - t).norm() / t.norm().max(1.0),
        ];
        worst_rel = rel.iter().fold(worst_rel, |m, v| m.max(*v));
    }
    ensure(worst_rel < 1e-9, || format!("similarity recovery error {worst_rel:e}"))?;
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(1), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "round trip {worst_deg:.1e} deg / {worst_m:.1e} m, similarity {worst_rel:.1e} rel, {elapsed:.2?}"
    ))
}

// 2 ------------------------------------------------------------------------

fn random_model(r: &mut ChaCha8Rng, n_points: usize) -> Reconstruction {
    let mut m = Reconstruction::default();
    let n_cams = r.random_range(1..=3u32);
    for id in 1..=n_cams {
        let w = r.random_range(100..2000u32);
        let h = r.random_range(100..2000u32);
        let f = r.random_range(100.0..3000.0);
        m.cameras.insert(id, CameraIntrinsics::pinhole(id, w, h, f, f * r.random_range(0.9..1.1), w as f64 / 2.0, h as f64 / 2.0));
    }
    let n_images = r.random_range(2..=40u32);
    for id in 1..=n_images {
        let pose = CameraPose::from_rotation_center(&random_rotation(r), &Vector3::from_fn(|_, _| r.random_range(-50.0..50.0)));
        m.images.insert(
            id,
            ImageRecord {
                image_id: id,
                name: format!("frame_{id:04}.jpg"),
                pose,
                camera_id: r.random_range(1..=n_cams),
                keypoints: Vec::new(),
            },
        );
    }
    for pid in 0..n_points as u64 {
        let pid = pid * 3 + 7;
        let k = r.random_range(2..=4usize.min(n_images as usize));
        let mut ids: BTreeSet<u32> = BTreeSet::new();
        while ids.len() < k {
            ids.insert(r.random_range(1..=n_images));
        }
        let mut track = Vec::new();
        for id in ids {
            let im = m.images.get_mut(&id).unwrap();
            im.keypoints.push(Keypoint {
                x: r.random_range(0.0..1000.0),
                y: r.random_range(0.0..1000.0),
                point3d_id: Some(pid),
            });
            track.push(TrackEntry {
                image_id: id,
                keypoint_index: im.keypoints.len() - 1,
            });
        }
        m.points.insert(
            pid,
            ScenePoint {
                point3d_id: pid,
                xyz: Vector3::from_fn(|_, _| r.random_range(-100.0..100.0)),
                rgb: [r.random(), r.random(), r.random()],
                reproj_error: r.random_range(0.0..2.0),
                track,
            },
        );
    }
    for im in m.images.values_mut() {
        for _ in 0..r.random_range(0..5) {
            im.keypoints.push(Keypoint {
                x: r.random_range(0.0..1000.0),
                y: r.random_range(0.0..1000.0),
                point3d_id: None,
            });
        }
    }
    m
}

fn parser() -> Check {
    let start = Instant::now();
    let mut r = rng(2);
    let mut total_points = 0;
    for i in 0..50 {
        let n = if i == 49 { 10_000 } else { r.random_range(0..4000) };
        total_points += n;
        let model = random_model(&mut r, n);
        let text = write_model_strings(&model);
        let (first, _) = parse_model_str(&text).map_err(|e| format!("model {i}: {e}"))?;
        let (second, _) = parse_model_str(&write_model_strings(&first)).map_err(|e| format!("model {i}: {e}"))?;
        ensure(first == second, || format!("model {i}: parse∘write∘parse differs"))?;
        ensure(write_model_strings(&first) == write_model_strings(&second), || format!("model {i}: text differs"))?;

        // referential integrity
        let mut bad = first.clone();
        let (&img_id, im) = bad.images.iter_mut().find(|(_, im)| !im.keypoints.is_empty()).unwrap();
        let kp = im.keypoints.iter().position(|k| k.point3d_id.is_some());
        if let Some(kp) = kp {
            im.keypoints[kp].point3d_id = Some(1);
            match parse_model_str(&write_model_strings(&bad)) {
                Err(SfmError::DanglingPoint {
                    image_id,
                    keypoint_index,
                    point3d_id: 1,
                }) if image_id == img_id && keypoint_index == kp => {}
                other => return Err(format!("model {i}: dangling point not located: {other:?}")),
            }
        }
        let mut bad = first.clone();
        bad.images.get_mut(&img_id).unwrap().camera_id = 99;
        match parse_model_str(&write_model_strings(&bad)) {
            Err(SfmError::DanglingCamera { image_id, camera_id: 99 }) if image_id == img_id => {}
            other => return Err(format!("model {i}: dangling camera not located: {other:?}")),
        }
        if let Some((&pid, _)) = first.points.iter().next() {
            let mut bad = first.clone();
            bad.points.get_mut(&pid).unwrap().track.push(TrackEntry {
                image_id: 9999,
                keypoint_index: 0,
            });
            match parse_model_str(&write_model_strings(&bad)) {
                Err(SfmError::DanglingTrack { point3d_id, image_id: 9999, .. }) if point3d_id == pid => {}
                other => return Err(format!("model {i}: dangling track not located: {other:?}")),
            }
            let mut text = write_model_strings(&first);
            let lines: Vec<&str> = text.points.lines().collect();
            let target = lines.iter().position(|l| !l.starts_with('#')).unwrap();
            let mut edited: Vec<String> = lines.iter().map(|s| s.to_string()).collect();
            let mut fields: Vec<&str> = lines[target].split(' ').collect();
            fields[2] = "north";
            edited[target] = fields.join(" ");
            text.points = edited.join("\n") + "\n";
            match parse_model_str(&text) {
                Err(SfmError::Malformed { file, line, .. }) if file == "points3D.txt" && line == target + 1 => {}
                other => return Err(format!("model {i}: malformed line not located: {other:?}")),
            }
        }
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(5), || format!("took {elapsed:?}"))?;
    Ok(format!("50 models, {total_points} points, integrity violations located, {elapsed:.2?}"))
}

// 3 ------------------------------------------------------------------------

fn labels() -> Check {
    let mut r = rng(3);
    let mut worst = 0.0f64;
    for _ in 0..100_000 {
        let rot_wc = random_rotation(&mut r);
        let center = Vector3::from_fn(|_, _| r.random_range(-1000.0..1000.0));
        let est = PoseEstimate {
            image_name: String::new(),
            rotation_cw: rot_wc.transpose(),
            center,
            source: PoseSource::Propagated,
        };
        let b = Vector3::new(r.random_range(-50.0..50.0), r.random_range(-10.0..10.0), r.random_range(0.5..100.0));
        let p = pixel_to_wcs(&est, &b).map_err(|e| e.to_string())?;
        let decoded = rot_wc * (p - center);
        worst = worst.max((decoded - b).norm());
    }
    ensure(worst < 1e-9, || format!("encode/decode error {worst:e}"))?;

    let bundle = render_scene(&preset_basic(3)).map_err(|e| e.to_string())?;
    let model = bundle.registered_model();
    let mut compared = 0usize;
    let mut cross = 0.0f64;
    for (i, im) in model.images.values().enumerate() {
        let sparse = generate_sparse_labels(&model, im).map_err(|e| e.to_string())?;
        let dense = bundle.mapping_distance(i);
        ensure(dense.image_name == im.name, || format!("frame order differs at {}", im.name))?;
        for (x, y, b) in sparse.labeled() {
            let d = dense.get(x, y).filter(|v| v.iter().all(|c| c.is_finite()));
            let d = d.ok_or_else(|| format!("{} ({x},{y}): keypoint pixel unlabeled in distance map", im.name))?;
            cross = cross.max((d - b).norm());
            compared += 1;
        }
    }
    ensure(compared > 1000, || format!("only {compared} keypoints compared"))?;
    ensure(cross < 1e-6, || format!("cross-path disagreement {cross:e} m"))?;
    Ok(format!("1e5 pairs within {worst:.1e} m; {compared} keypoints agree within {cross:.1e} m"))
}

// 4 ------------------------------------------------------------------------

struct Chain {
    truth: Vec<Matrix3<f64>>,
    index: ReferenceIndex,
    centers: Vec<Vector3<f64>>,
}

/// A camera rigidly offset from the reference cameras by `q`, so its true
/// world→camera rotation is `q·R'_t`. References may carry accumulated jitter.
fn chain(seed: u64, jitter_deg: f64) -> Chain {
    let mut r = rng(seed);
    let q = random_rotation(&mut r);
    let mut truth = Vec::new();
    let mut refs = Vec::new();
    let mut centers = Vec::new();
    let mut drift = Matrix3::identity();
    let mut heading = Matrix3::identity();
    for t in 0..=100u32 {
        heading = small_rotation(&mut r, 3.0) * heading;
        let true_ref = heading;
        if jitter_deg > 0.0 {
            drift = small_rotation(&mut r, jitter_deg) * drift;
        }
        let center = Vector3::new(4.0 * t as f64, 0.0, 0.0);
        refs.push(ReferenceImage {
            image_id: t + 1,
            name: format!("ref_{t}"),
            center,
            rotation_wc: drift * true_ref,
        });
        truth.push(q * true_ref);
        centers.push(center);
    }
    Chain {
        truth,
        index: ReferenceIndex::new(refs),
        centers,
    }
}

fn run_chain(c: &Chain, anchors: &[usize]) -> Result<Vec<f64>, String> {
    let mut tracker = PoseTracker::new(&c.index, PoseConfig::default());
    let mut errors = Vec::new();
    for k in 0..c.truth.len() {
        let registered = (k == 0 || anchors.contains(&k)).then(|| CameraPose::from_rotation_center(&c.truth[k], &c.centers[k]));
        let est = tracker
            .step(&format!("f{k}"), &c.centers[k], registered.as_ref())
            .map_err(|e| e.to_string())?;
        errors.push(rotation_angle_between(&est.rotation_wc(), &c.truth[k]));
    }
    Ok(errors)
}

fn orientation() -> Check {
    let mut exact = 0.0f64;
    for seed in 0..10 {
        let errs = run_chain(&chain(40 + seed, 0.0), &[])?;
        exact = errs.iter().fold(exact, |m, e| m.max(*e));
    }
    ensure(exact < 1e-9, || format!("oracle chain error {exact:e} rad"))?;

    let bound = 0.2f64.to_radians();
    let mut worst_ratio = 0.0f64;
    for seed in 0..10 {
        let errs = run_chain(&chain(60 + seed, 0.1), &[])?;
        for (k, e) in errs.iter().enumerate().skip(1) {
            ensure(*e <= bound * k as f64 + 1e-12, || format!("seed {seed} step {k}: {:.4}°", e.to_degrees()))?;
            worst_ratio = worst_ratio.max(e / (bound * k as f64));
        }
        let anchored = run_chain(&chain(60 + seed, 0.1), &[50])?;
        ensure(anchored[50] < 1e-9, || format!("seed {seed}: error after re-anchoring {:e}", anchored[50]))?;
        for (k, e) in anchored.iter().enumerate().skip(51) {
            ensure(*e <= bound * (k - 50) as f64 + 1e-12, || format!("seed {seed} step {k} after re-anchoring: {:.4}°", e.to_degrees()))?;
        }
    }
    Ok(format!(
        "exact chains within {exact:.1e} rad; jittered error at most {:.0}% of 0.2°·k; re-anchoring resets",
        worst_ratio * 100.0
    ))
}

// 5 ------------------------------------------------------------------------

fn horizontal_match(pred: &[MetadataEntry], truth: &[(String, GeodeticCoord)], frame: &EnuFrame) -> Result<f64, String> {
    let mut worst = 0.0f64;
    let mut used = vec![false; truth.len()];
    for e in pred {
        let p = frame.project_horizontal(e.lat_deg, e.lon_deg).map_err(|e| e.to_string())?;
        let best = truth
            .iter()
            .enumerate()
            .filter(|(j, (c, _))| !used[*j] && *c == e.class_name)
            .map(|(j, (_, g))| {
                let q = frame.project_horizontal(g.lat_deg, g.lon_deg).unwrap();
                (j, ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt())
            })
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .ok_or_else(|| format!("no truth left for {}", e.class_name))?;
        used[best.0] = true;
        worst = worst.max(best.1);
    }
    Ok(worst)
}

fn metadata_generation() -> Check {
    let run = common::run_scene(&preset_basic(5), &PipelineConfig::default());
    let truth: Vec<(String, GeodeticCoord)> = run.bundle.truth.iter().map(|t| (t.class_name.clone(), t.geodetic)).collect();
    ensure(run.semantic.len() == 20, || format!("{} entries", run.semantic.len()))?;
    let worst = horizontal_match(&run.semantic.entries, &truth, &run.bundle.frame)?;
    ensure(worst < 1e-6, || format!("in-memory error {worst:e} m"))?;

    let mut buf = Vec::new();
    metadata::write_metadata(&run.semantic.entries, &mut buf).map_err(|e| e.to_string())?;
    let reread = metadata::read_metadata_entries(buf.as_slice()).map_err(|e| e.to_string())?;
    let on_disk = horizontal_match(&reread, &truth, &run.bundle.frame)?;
    ensure(on_disk < 0.01, || format!("error through the CSV {on_disk:e} m"))?;

    let frame = run.bundle.frame;
    for t_d in [2.0, 5.0, 8.0] {
        let cfg = MetadataGenConfig { t_d, min_support: 2 };
        let pair = |gap: f64| {
            let cands: Vec<Candidate> = [0.0, gap]
                .iter()
                .map(|x| Candidate {
                    class_name: "warning--pedestrians-crossing--g4".into(),
                    enu: Vector3::new(100.0 + x, 40.0, 2.0),
                    rgb: [200.0, 200.0, 200.0],
                })
                .collect();
            cluster_candidates(&cands, &cfg, &frame, date("2024-05-06")).map(|v| v.len())
        };
        let (near, far) = (pair(0.5 * t_d).map_err(|e| e.to_string())?, pair(2.0 * t_d).map_err(|e| e.to_string())?);
        ensure(near == 1 && far == 2, || format!("T_D {t_d}: {near} entries at 0.5·T_D, {far} at 2·T_D"))?;
    }
    Ok(format!("20 entries within {worst:.1e} m ({on_disk:.1e} m via CSV); T_D pairs merge at 0.5× and split at 2×"))
}

// 6 ------------------------------------------------------------------------

fn residential() -> Check {
    let cfg = PipelineConfig::default();
    let run = common::run_scene(&preset_residential(0), &cfg);
    let m = common::confusion(&run, cfg.match_radius_r);
    ensure((m.tp, m.fp, m.fn_, m.tn) == (4, 0, 0, 6), || format!("zero-noise confusion {m:?}"))?;
    let promoted = promote(&run.layer, &PermanenceConfig::new(2, 2).unwrap(), &run.semantic, cfg.match_radius_r)
        .map_err(|e| e.to_string())?;
    ensure(promoted.semantic.len() == 6, || format!("{} entries after promotion", promoted.semantic.len()))?;

    let (mut correct, mut total) = (0usize, 0usize);
    let mut slowest = Duration::ZERO;
    for seed in 0..100 {
        let start = Instant::now();
        let mut scene = preset_residential(1000 + seed);
        scene.noise.gps_sigma = 3.0;
        let run = common::run_scene(&scene, &cfg);
        let m = common::confusion(&run, 20.0);
        slowest = slowest.max(start.elapsed());
        correct += m.tp + m.tn;
        total += m.total();
    }
    let accuracy = correct as f64 / total as f64;
    ensure(accuracy >= 0.95, || format!("noisy accuracy {accuracy:.4}"))?;
    ensure(slowest < Duration::from_secs(10), || format!("slowest trial {slowest:?}"))?;
    Ok(format!(
        "zero noise tp 4 fp 0 fn 0 tn 6, 6 entries after promotion; 3 m noise accuracy {accuracy:.4} over 100 trials, slowest {slowest:.2?}"
    ))
}

// 7 ------------------------------------------------------------------------

fn campus() -> Check {
    let cfg = PipelineConfig::default();
    let run = common::run_scene(&preset_campus(0), &cfg);
    let m = common::confusion(&run, cfg.match_radius_r);
    ensure(m.total() == 20, || format!("{} items", m.total()))?;
    ensure(m.accuracy() == 0.85, || format!("accuracy {} from {m:?}", m.accuracy()))?;
    Ok(format!("tp {} fp {} fn {} tn {}: accuracy {}", m.tp, m.fp, m.fn_, m.tn, m.accuracy()))
}

// 8 ------------------------------------------------------------------------

fn map_of(pixels: &[[f64; 3]]) -> DistanceMap {
    let mut m = DistanceMap::unlabeled("x", pixels.len() as u32, 1);
    for (i, p) in pixels.iter().enumerate() {
        m.set(i as u32, 0, &Vector3::from(*p));
    }
    m
}

fn brute_force(est: &[Vector3<f64>], refs: &[Vector3<f64>]) -> (f64, f64, f64) {
    let mut d: Vec<f64> = est
        .iter()
        .map(|e| refs.iter().map(|r| (e - r).norm()).fold(f64::INFINITY, f64::min))
        .collect();
    d.sort_by(f64::total_cmp);
    let n = d.len();
    let median = if n % 2 == 1 { d[n / 2] } else { (d[n / 2 - 1] + d[n / 2]) / 2.0 };
    let mean = d.iter().sum::<f64>() / n as f64;
    let std = (d.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64).sqrt();
    (median, std, mean)
}

fn metrics() -> Check {
    let one = pixel_errors(&[(&map_of(&[[1.0, 1.5, 12.0]]), &map_of(&[[1.0, 1.5, 10.0]]))]).map_err(|e| e.to_string())?;
    ensure((one.depth.abs_error - 2.0).abs() < 1e-12 && (one.depth.rel_error - 0.2).abs() < 1e-12, || format!("{one:?}"))?;
    let two = pixel_errors(&[(&map_of(&[[1.0, 1.5, 12.0], [1.0, 1.5, 18.0]]), &map_of(&[[1.0, 1.5, 10.0], [1.0, 1.5, 20.0]]))])
        .map_err(|e| e.to_string())?;
    ensure((two.depth.abs_error - 2.0).abs() < 1e-12 && (two.depth.rel_error - 0.15).abs() < 1e-12, || format!("{two:?}"))?;

    let frame = EnuFrame::new(GeodeticCoord::new(60.18, 24.83, 10.0).unwrap()).unwrap();
    let sample = |t: f64, p: &Vector3<f64>| GpsSample {
        t,
        coord: frame.unproject(p).unwrap(),
    };
    let mut r = rng(8);
    let mut worst = 0.0f64;
    for n in [1usize, 2, 17, 200, 1000] {
        let refs: Vec<Vector3<f64>> = (0..n).map(|_| Vector3::from_fn(|_, _| r.random_range(-500.0..500.0))).collect();
        let est: Vec<Vector3<f64>> = (0..n).map(|_| Vector3::from_fn(|_, _| r.random_range(-500.0..500.0))).collect();
        let samples: Vec<GpsSample> = refs.iter().enumerate().map(|(i, p)| sample(i as f64, p)).collect();
        // the oracle works on the same frame round trip as the function
        let refs_enu: Vec<Vector3<f64>> = samples.iter().map(|s| frame.project(&s.coord).unwrap()).collect();
        let estimates: Vec<PoseEstimate> = est
            .iter()
            .map(|c| PoseEstimate {
                image_name: String::new(),
                rotation_cw: Matrix3::identity(),
                center: *c,
                source: PoseSource::Propagated,
            })
            .collect();
        let stats = pose_error_vs_trace(&estimates, &samples, &frame).map_err(|e| e.to_string())?;
        let (median, std, mean) = brute_force(&est, &refs_enu);
        for (a, b) in [(stats.median, median), (stats.std_dev, std), (stats.mean, mean)] {
            worst = worst.max((a - b).abs());
        }
    }
    ensure(worst < 1e-9, || format!("brute-force disagreement {worst:e}"))?;

    let sigma = 2.0;
    let mut samples = Vec::new();
    let mut estimates = Vec::new();
    for i in 0..100 {
        for j in 0..100 {
            let p = Vector3::new(i as f64 * 100.0 - 5000.0, j as f64 * 100.0 - 5000.0, 0.0);
            samples.push(sample((i * 100 + j) as f64, &p));
            let c = frame.project(&samples.last().unwrap().coord).unwrap();
            estimates.push(PoseEstimate {
                image_name: String::new(),
                rotation_cw: Matrix3::identity(),
                center: c + Vector3::from_fn(|_, _| sigma * gauss(&mut r)),
                source: PoseSource::Propagated,
            });
        }
    }
    let stats = pose_error_vs_trace(&estimates, &samples, &frame).map_err(|e| e.to_string())?;
    let ratio = stats.median / sigma;
    ensure((ratio / 1.538 - 1.0).abs() < 0.10, || format!("median/σ = {ratio:.4}"))?;
    Ok(format!("hand cases exact; brute force within {worst:.1e}; median/σ {ratio:.4} at n = 10⁴"))
}

// 9 ------------------------------------------------------------------------

fn permanence() -> Check {
    let frame = EnuFrame::new(GeodeticCoord::new(60.2, 24.9, 0.0).unwrap()).unwrap();
    let classes = ["regulatory--stop--g1", "regulatory--yield--g1", "information--parking--g1"];
    let vehicles = ["v1", "v2", "v3", "v4"];
    let days = [date("2024-09-01"), date("2024-09-02"), date("2024-09-03"), date("2024-09-04")];
    let mut r = rng(9);
    let mut promoted_total = 0;
    for trial in 0..1000 {
        let geo = |x: f64, y: f64| frame.unproject(&Vector3::new(x, y, 0.0)).unwrap();
        let entries: Vec<MetadataEntry> = (0..r.random_range(0..12))
            .map(|i| {
                let g = geo(i as f64 * 100.0, 0.0);
                MetadataEntry {
                    lat_deg: g.lat_deg,
                    lon_deg: g.lon_deg,
                    class_name: classes[i % 3].to_string(),
                    color: [1, 2, 3],
                    date_detected: date("2024-05-06"),
                }
            })
            .collect();
        let semantic = MetadataStore::new(entries.clone(), frame);
        let mut layer = TemporaryLayer::new(&semantic);
        for k in 0..r.random_range(0..8) {
            let removal = !entries.is_empty() && r.random_bool(0.5);
            let (kind, class, pos) = if removal {
                let i = r.random_range(0..entries.len());
                let absent = r.random_bool(0.2);
                let class = if absent { "warning--t-roads--g1" } else { classes[i % 3] };
                (ChangeKind::Removed, class, geo(i as f64 * 100.0 + r.random_range(-3.0..3.0), r.random_range(-3.0..3.0)))
            } else {
                (ChangeKind::Appeared, classes[k % 3], geo(r.random_range(0.0..1200.0), 50.0 + 60.0 * k as f64))
            };
            let mut log = BTreeSet::new();
            for _ in 0..r.random_range(1..6) {
                log.insert((vehicles[r.random_range(0..4)].to_string(), days[r.random_range(0..4)]));
            }
            let first = log.iter().next().unwrap().clone();
            layer.pending.push(PendingChange {
                event: ChangeEvent {
                    kind,
                    class_name: class.to_string(),
                    position: pos,
                    evidence: Evidence {
                        vehicle_id: first.0,
                        date: first.1,
                        observations: 2,
                    },
                    distance_to_nearest_same_class: None,
                },
                log,
            });
        }
        let pcfg = PermanenceConfig::new(r.random_range(1..=3), r.random_range(1..=3)).unwrap();
        let out = promote(&layer, &pcfg, &semantic, 20.0).map_err(|e| format!("trial {trial}: {e}"))?;
        let mut eligible = BTreeMap::new();
        for p in &layer.pending {
            let meets = p.vehicle_count() >= pcfg.min_vehicles && p.day_count() >= pcfg.min_days;
            let still_pending = out.layer.pending.contains(p);
            ensure(meets != still_pending, || format!("trial {trial}: promotion of {p:?} under {pcfg:?}"))?;
            if meets {
                *eligible.entry(p.event.kind).or_insert(0usize) += 1;
            }
        }
        let appeared = eligible.get(&ChangeKind::Appeared).copied().unwrap_or(0);
        let removals = eligible.get(&ChangeKind::Removed).copied().unwrap_or(0);
        ensure(out.appeared == appeared && out.removed + out.dropped == removals, || {
            format!("trial {trial}: {} appeared, {} removed, {} dropped of {appeared}/{removals}", out.appeared, out.removed, out.dropped)
        })?;
        ensure(out.semantic.len() == semantic.len() + out.appeared - out.removed, || {
            format!("trial {trial}: {} entries from {} +{} -{}", out.semantic.len(), semantic.len(), out.appeared, out.removed)
        })?;
        ensure(out.layer.pending.len() + appeared + removals == layer.pending.len(), || format!("trial {trial}: pending not conserved"))?;
        promoted_total += appeared + removals;
    }
    Ok(format!("1000 random logs, {promoted_total} promotions, thresholds and entry counts hold"))
}

// 10 -----------------------------------------------------------------------

fn tiny_scene() -> SyntheticScene {
    let mut s = preset_residential(17);
    s.intrinsics = CameraIntrinsics::pinhole(1, 160, 120, 125.0, 125.0, 80.0, 60.0);
    s.visibility.max_range = 35.0;
    s.trajectory = synth::trajectory_from_polyline(&[[0.0, 0.0], [200.0, 0.0]], 4.0);
    s.signs.truncate(4);
    s.changes.retain(|c| match c {
        synth::SceneEdit::Remove { position, .. } | synth::SceneEdit::Add { position, .. } => position[0] < 200.0,
    });
    s.noise.gps_sigma = 1.0;
    s
}

fn signmap(dir: &Path, args: &[&str]) -> Result<Vec<u8>, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_signmap"))
        .current_dir(dir)
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("signmap {}: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)));
    }
    Ok(out.stdout)
}

fn run_all_subcommands(dir: &Path, scene: &str) -> Result<Vec<u8>, String> {
    fs::write(dir.join("scene.json"), scene).map_err(|e| e.to_string())?;
    let mut log = Vec::new();
    let mut run = |args: &[&str]| -> Result<(), String> {
        log.extend(signmap(dir, args)?);
        Ok(())
    };
    run(&["simulate", "--scene", "scene.json", "--seed", "21", "--with-mapping-distance", "--out", "bundle"])?;
    run(&["georegister", "bundle/mapping/model", "bundle/mapping/georef.csv", "--out", "reg"])?;
    run(&["segment", "reg", "bundle/mapping/masks", "bundle/mapping/palette.txt", "--out", "seg"])?;
    run(&[
        "metadata-gen",
        "reg",
        "bundle/mapping/masks",
        "bundle/mapping/palette.txt",
        "bundle/mapping/detections.jsonl",
        "--date",
        "2024-05-06",
        "--out",
        "map",
    ])?;
    run(&["labels-gen", "reg", "--out", "labels"])?;
    run(&[
        "detect-changes",
        "reg",
        "map/metadata.csv",
        "bundle/drives/veh-1_2024-09-02",
        "--vehicle",
        "veh-1",
        "--date",
        "2024-09-02",
        "--out",
        "d1",
    ])?;
    run(&[
        "detect-changes",
        "reg",
        "d1/layer",
        "bundle/drives/veh-2_2024-09-03",
        "--vehicle",
        "veh-2",
        "--date",
        "2024-09-03",
        "--out",
        "d2",
    ])?;
    run(&["promote", "d2/layer", "map/metadata.csv", "--min-vehicles", "2", "--min-days", "2", "--out", "promoted"])?;
    run(&["eval", "--kind", "pose", "d1/poses.csv", "bundle/truth/rtk.csv", "--out", "eval"])?;
    run(&["eval", "--kind", "pixel", "labels", "bundle/mapping/distance", "--out", "eval"])?;
    run(&["eval", "--kind", "localization", "map/metadata.csv", "bundle/truth/metadata.csv", "--out", "eval"])?;
    run(&["eval", "--kind", "change", "d2/layer", "bundle/truth/signs.csv", "--out", "eval"])?;
    Ok(log)
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn determinism() -> Check {
    let scene = tiny_scene().to_json();
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let log_a = run_all_subcommands(a.path(), &scene)?;
    let log_b = run_all_subcommands(b.path(), &scene)?;
    ensure(log_a == log_b, || "standard output differs between runs".into())?;
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    ensure(ta.keys().eq(tb.keys()), || "file sets differ between runs".into())?;
    let differing: Vec<_> = ta.iter().filter(|(k, v)| tb[*k] != **v).map(|(k, _)| k.display().to_string()).collect();
    ensure(differing.is_empty(), || format!("differing files: {differing:?}"))?;
    let stats: serde_json::Value =
        serde_json::from_slice(&ta[Path::new("eval/change_stats.json")]).map_err(|e| e.to_string())?;
    Ok(format!("{} files byte-identical across 8 subcommands; change accuracy {}", ta.len(), stats["accuracy"]))
}

fn main() {
    let criteria: [(&str, fn() -> Check); 10] = [
        ("geodesy round trip and similarity recovery", geodesy),
        ("model parser identity and integrity", parser),
        ("distance-map encoding and label cross-check", labels),
        ("orientation propagation", orientation),
        ("metadata generation", metadata_generation),
        ("residential change detection", residential),
        ("campus fault injection", campus),
        ("evaluation metrics", metrics),
        ("permanence promotion", permanence),
        ("command-line determinism", determinism),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        match result {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail} [{elapsed:.2?}]", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {why} [{elapsed:.2?}]", i + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} of {} criteria failed", criteria.len());
        std::process::exit(1);
    }
    println!("all {} criteria passed", criteria.len());
}
