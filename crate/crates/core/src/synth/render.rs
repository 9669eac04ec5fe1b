use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use chrono::NaiveDate;
use log::warn;
use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::{mutate_scene, rng_for, FaultKind, Result, SyntheticScene, SynthError, SIGN_HALF_SIZE};
use crate::geodesy::{EnuFrame, GeodeticCoord, SimilarityTransform};
use crate::metadata::{self, MetadataEntry};
use crate::pose::{self, GpsSample, GpsTrace};
use crate::realtime::DistanceMap;
use crate::semantics::{self, io as sem_io, BoundingBox, ClassPalette, Detection, DetectionSet, SegmentationMask};
use crate::sfm::{self, CameraPose, Correspondence, ImageRecord, Keypoint, Reconstruction, ScenePoint, TrackEntry, POINT_KEY_PREFIX};

pub const PALETTE_BUILDING: (u16, &str) = (1, "construction--building");
pub const PALETTE_SIGN: (u16, &str) = (2, "object--traffic-sign--front");

const STREAM_SIMILARITY: u64 = 1;
const STREAM_GPS: u64 = 2;
const STREAM_JITTER: u64 = 3;
const STREAM_MAP_KEYPOINTS: u64 = 4;
const STREAM_MAP_DROPOUT: u64 = 5;
const STREAM_MAP_DISTANCE: u64 = 6;
const STREAM_DRIVE_DROPOUT: u64 = 7;
const STREAM_DRIVE_DISTANCE: u64 = 8;

const BACKGROUND_ID_BASE: u64 = 1_000_000_000;
const BACKGROUND_RANGE: f64 = 80.0;
const BACKGROUND_RGB: [u8; 3] = [150, 148, 140];

#[derive(Debug, Clone)]
struct SignGeom {
    id: u32,
    class_name: String,
    center: Vector3<f64>,
    normal: Vector3<f64>,
    axis: Vector3<f64>,
    /// Face grid, row-major from top-left; the middle point is the center.
    points: Vec<Vector3<f64>>,
    rgb: [u8; 3],
}

impl SignGeom {
    fn center_index(&self) -> usize {
        self.points.len() / 2
    }

    fn point_id(&self, j: usize) -> u64 {
        self.id as u64 * 1000 + j as u64 + 1
    }
}

fn class_color(class: &str) -> [u8; 3] {
    // FNV-1a, only to give each class a stable color
    let mut h: u32 = 0x811c_9dc5;
    for b in class.bytes() {
        h ^= b as u32;
        h = h.wrapping_mul(0x0100_0193);
    }
    [(h >> 16) as u8, (h >> 8) as u8, h as u8]
}

fn sign_geometry(scene: &SyntheticScene) -> Vec<SignGeom> {
    scene
        .signs
        .iter()
        .map(|s| {
            let center = Vector3::from(s.position);
            let normal = match s.normal_deg {
                Some(deg) => {
                    let (sn, cs) = deg.to_radians().sin_cos();
                    Vector3::new(cs, sn, 0.0)
                }
                None => {
                    let nearest = scene
                        .trajectory
                        .iter()
                        .min_by(|a, b| {
                            let da = (Vector3::from(a.position) - center).xy().norm();
                            let db = (Vector3::from(b.position) - center).xy().norm();
                            da.total_cmp(&db)
                        })
                        .expect("trajectory validated non-empty");
                    Vector3::new(-nearest.heading[0], -nearest.heading[1], 0.0)
                }
            };
            let axis = Vector3::new(-normal.y, normal.x, 0.0);
            let g = (s.face_points as f64).sqrt().round() as usize;
            let half = (g / 2) as f64;
            let step = SIGN_HALF_SIZE / half;
            let mut points = Vec::with_capacity(g * g);
            for r in 0..g {
                for c in 0..g {
                    let v = (half - r as f64) * step;
                    let a = (c as f64 - half) * step;
                    points.push(center + axis * a + Vector3::z() * v);
                }
            }
            SignGeom {
                id: s.id,
                class_name: s.class_name.clone(),
                center,
                normal,
                axis,
                points,
                rgb: class_color(&s.class_name),
            }
        })
        .collect()
}

fn background_points(scene: &SyntheticScene) -> Vec<Vector3<f64>> {
    let Some(bg) = scene.background else { return Vec::new() };
    let mut out = Vec::new();
    let mut since = f64::INFINITY;
    let mut prev: Option<Vector3<f64>> = None;
    for t in &scene.trajectory {
        let p = Vector3::from(t.position);
        if let Some(q) = prev {
            since += (p - q).norm();
        }
        prev = Some(p);
        if since < bg.spacing_m {
            continue;
        }
        since = 0.0;
        let left = Vector3::new(-t.heading[1], t.heading[0], 0.0);
        for side in [1.0, -1.0] {
            for h in bg.heights {
                out.push(p + left * (side * bg.offset_m) + Vector3::z() * h);
            }
        }
    }
    out
}

/// Camera pose at a trajectory point, in ENU.
fn camera_pose(scene: &SyntheticScene, i: usize) -> CameraPose {
    let t = &scene.trajectory[i];
    let h = Vector3::new(t.heading[0], t.heading[1], 0.0);
    let left = Vector3::new(-t.heading[1], t.heading[0], 0.0);
    let r_vw = Matrix3::from_columns(&[h, left, Vector3::z()]);
    let r_cw = r_vw * scene.mount_matrix();
    let center = Vector3::from(t.position) + Vector3::z() * scene.camera_height;
    CameraPose::from_rotation_center(&r_cw.transpose(), &center)
}

fn frame_time(scene: &SyntheticScene, i: usize) -> f64 {
    i as f64 * scene.frame_dt
}

/// Everything one camera sees at one trajectory point.
#[derive(Debug, Clone)]
pub struct FrameRender {
    pub image_name: String,
    /// `(x, y, point id)`; at most one per pixel.
    pub keypoints: Vec<(f64, f64, u64)>,
    pub detections: Vec<Detection>,
    /// Signs visible and unoccluded, whether or not detected.
    pub observed: Vec<u32>,
    pub mask: SegmentationMask,
    pub distance: Option<DistanceMap>,
}

struct Visible<'a> {
    sign: &'a SignGeom,
    distance: f64,
    bbox: BoundingBox,
    rect: [u32; 4],
    uv: Vec<(f64, f64)>,
}

fn visible_signs<'a>(scene: &SyntheticScene, signs: &'a [SignGeom], pose: &CameraPose) -> Vec<Visible<'a>> {
    let k = &scene.intrinsics;
    let vis = &scene.visibility;
    let c = pose.center();
    let (w, h) = (k.width as f64, k.height as f64);
    let mut cands = Vec::new();
    'sign: for s in signs {
        let distance = (s.center - c).norm();
        if distance < vis.min_range || distance > vis.max_range || s.normal.dot(&(c - s.center)) <= 0.0 {
            continue;
        }
        let mut uv = Vec::with_capacity(s.points.len());
        for p in &s.points {
            match sfm::project_point(k, pose, p) {
                Some(q) => uv.push(q),
                None => continue 'sign,
            }
        }
        for i in 0..uv.len() {
            for j in i + 1..uv.len() {
                let sep = (uv[i].0 - uv[j].0).abs().max((uv[i].1 - uv[j].1).abs());
                if sep < vis.min_point_spacing_px {
                    continue 'sign;
                }
            }
        }
        let (uc, vc) = uv[s.center_index()];
        let hw = uv.iter().map(|q| (q.0 - uc).abs()).fold(0.0, f64::max);
        let hh = uv.iter().map(|q| (q.1 - vc).abs()).fold(0.0, f64::max);
        let bbox = BoundingBox {
            xmin: uc - hw,
            ymin: vc - hh,
            xmax: uc + hw,
            ymax: vc + hh,
        };
        if bbox.xmin < 0.0 || bbox.ymin < 0.0 || bbox.xmax >= w - 0.5 || bbox.ymax >= h - 0.5 {
            continue;
        }
        let rect = [
            bbox.xmin.round() as u32,
            bbox.ymin.round() as u32,
            bbox.xmax.round() as u32,
            bbox.ymax.round() as u32,
        ];
        cands.push(Visible {
            sign: s,
            distance,
            bbox,
            rect,
            uv,
        });
    }
    cands.sort_by(|a, b| a.distance.total_cmp(&b.distance).then(a.sign.id.cmp(&b.sign.id)));
    let mut kept: Vec<Visible> = Vec::new();
    for v in cands {
        if kept.iter().all(|k| !k.bbox.intersects(&v.bbox)) {
            kept.push(v);
        }
    }
    kept.sort_by_key(|v| v.sign.id);
    kept
}

fn in_rect(rect: &[u32; 4], px: u32, py: u32) -> bool {
    px >= rect[0] && px <= rect[2] && py >= rect[1] && py <= rect[3]
}

struct FrameInputs<'a> {
    scene: &'a SyntheticScene,
    signs: &'a [SignGeom],
    background: &'a [Vector3<f64>],
    pose: CameraPose,
    image_name: String,
    mapping: bool,
    /// Detector suppressed for these sign ids.
    suppressed: &'a dyn Fn(u32) -> bool,
    keypoint_rng: Option<ChaCha8Rng>,
    dropout_rng: ChaCha8Rng,
    distance_rng: Option<ChaCha8Rng>,
}

fn render_frame(mut f: FrameInputs<'_>) -> FrameRender {
    let scene = f.scene;
    let k = &scene.intrinsics;
    let (w, h) = (k.width, k.height);
    let visible = visible_signs(scene, f.signs, &f.pose);

    struct Kp {
        x: f64,
        y: f64,
        px: (u32, u32),
        id: u64,
        world: Vector3<f64>,
        priority: u8,
        depth: f64,
    }
    let mut kps: Vec<Kp> = Vec::new();
    let sigma = if f.mapping { scene.noise.keypoint_sigma } else { 0.0 };
    let mut jitter = |x: f64, y: f64| -> (f64, f64) {
        match f.keypoint_rng.as_mut() {
            Some(rng) if sigma > 0.0 => {
                let n = Normal::new(0.0, sigma).expect("sigma validated");
                (x + n.sample(rng), y + n.sample(rng))
            }
            _ => (x, y),
        }
    };
    for v in &visible {
        for (j, (p, &(u, vv))) in v.sign.points.iter().zip(&v.uv).enumerate() {
            let (x, y) = jitter(u, vv);
            let Some(px) = semantics::nearest_pixel(x, y, w, h) else { continue };
            kps.push(Kp {
                x,
                y,
                px,
                id: v.sign.point_id(j),
                world: *p,
                priority: u8::from(j != v.sign.center_index()),
                depth: f.pose.world_to_camera(p).z,
            });
        }
    }
    if f.mapping {
        let c = f.pose.center();
        for (i, p) in f.background.iter().enumerate() {
            if (p - c).norm() > BACKGROUND_RANGE {
                continue;
            }
            let Some((u, vv)) = sfm::project_point(k, &f.pose, p) else { continue };
            let (x, y) = jitter(u, vv);
            let Some(px) = semantics::nearest_pixel(x, y, w, h) else { continue };
            if visible.iter().any(|v| in_rect(&v.rect, px.0, px.1)) {
                continue;
            }
            kps.push(Kp {
                x,
                y,
                px,
                id: BACKGROUND_ID_BASE + i as u64,
                world: *p,
                priority: 2,
                depth: f.pose.world_to_camera(p).z,
            });
        }
    }
    // one keypoint per pixel: sign centers first, then the nearest point
    let mut best: HashMap<(u32, u32), usize> = HashMap::new();
    for (i, kp) in kps.iter().enumerate() {
        match best.get(&kp.px) {
            Some(&j) if (kps[j].priority, kps[j].depth, kps[j].id) <= (kp.priority, kp.depth, kp.id) => {}
            _ => {
                best.insert(kp.px, i);
            }
        }
    }
    let mut keep: Vec<usize> = best.into_values().collect();
    keep.sort_unstable();
    let kps: Vec<&Kp> = keep.iter().map(|&i| &kps[i]).collect();

    let mut mask = SegmentationMask::filled(&f.image_name, w, h, semantics::UNLABELED);
    for kp in &kps {
        if kp.priority == 2 {
            mask.set(kp.px.0, kp.px.1, PALETTE_BUILDING.0);
        }
    }
    for v in &visible {
        for py in v.rect[1]..=v.rect[3] {
            for px in v.rect[0]..=v.rect[2] {
                mask.set(px, py, PALETTE_SIGN.0);
            }
        }
    }

    let mut detections = Vec::new();
    for v in &visible {
        let drop = f.dropout_rng.random::<f64>() < scene.noise.detection_dropout;
        if drop || (f.suppressed)(v.sign.id) {
            continue;
        }
        detections.push(Detection {
            class_name: v.sign.class_name.clone(),
            score: 1.0,
            bbox: v.bbox,
        });
    }

    let distance = f.distance_rng.as_mut().map(|rng| {
        let mut map = DistanceMap::unlabeled(&f.image_name, w, h);
        let r_wc = f.pose.rotation_matrix();
        let c = f.pose.center();
        for v in &visible {
            let n_c = r_wc * v.sign.normal;
            let s_c = f.pose.world_to_camera(&v.sign.center);
            for py in v.rect[1]..=v.rect[3] {
                for px in v.rect[0]..=v.rect[2] {
                    let d = Vector3::new((px as f64 - k.cx) / k.fx, (py as f64 - k.cy) / k.fy, 1.0);
                    let denom = n_c.dot(&d);
                    if denom.abs() < 1e-12 {
                        continue;
                    }
                    let b = d * (n_c.dot(&s_c) / denom);
                    if b.z <= 0.0 {
                        continue;
                    }
                    let o = r_wc.transpose() * b + c - v.sign.center;
                    let lim = SIGN_HALF_SIZE * (1.0 + 1e-9);
                    if o.dot(&v.sign.axis).abs() <= lim && o.z.abs() <= lim {
                        map.set_nearer(px, py, &b);
                    }
                }
            }
        }
        for kp in &kps {
            map.set(kp.px.0, kp.px.1, &f.pose.world_to_camera(&kp.world));
        }
        let rel = scene.noise.distance_map_rel_sigma;
        if rel > 0.0 {
            let n = Normal::new(0.0, rel).expect("sigma validated");
            for b in map.pixels.iter_mut() {
                if !b[0].is_nan() {
                    let s = 1.0 + n.sample(rng);
                    *b = b.map(|c| c * s);
                }
            }
        }
        map
    });

    FrameRender {
        image_name: f.image_name,
        keypoints: kps.iter().map(|kp| (kp.x, kp.y, kp.id)).collect(),
        detections,
        observed: visible.iter().map(|v| v.sign.id).collect(),
        mask,
        distance,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum TruthStatus {
    Unchanged,
    Removed,
    Appeared,
}

impl TruthStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            TruthStatus::Unchanged => "unchanged",
            TruthStatus::Removed => "removed",
            TruthStatus::Appeared => "appeared",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TruthSign {
    pub id: u32,
    pub class_name: String,
    pub status: TruthStatus,
    pub enu: Vector3<f64>,
    pub geodetic: GeodeticCoord,
    /// Mapping frames in which the sign was visible.
    pub mapping_frames: usize,
    /// Drive frames (first drive) in which the sign was visible.
    pub drive_frames: usize,
}

#[derive(Debug, Clone)]
pub struct DriveBundle {
    pub vehicle_id: String,
    pub date: NaiveDate,
    pub frames: Vec<(String, f64)>,
    pub gps: GpsTrace,
    pub detections: Vec<DetectionSet>,
    /// Cameras plus the registered frames, posed in the raw model frame.
    pub registered: Reconstruction,
    /// True camera poses in ENU.
    pub true_poses: Vec<CameraPose>,
}

impl DriveBundle {
    pub fn dir_name(&self) -> String {
        format!("{}_{}", self.vehicle_id, self.date.format("%Y-%m-%d"))
    }
}

/// A rendered scene. Distance maps are rendered on demand.
#[derive(Debug, Clone)]
pub struct Bundle {
    pub scene: SyntheticScene,
    /// The scene the drives see.
    pub after: SyntheticScene,
    pub frame: EnuFrame,
    /// Maps the raw model frame onto ENU.
    pub model_to_enu: SimilarityTransform,
    /// Reconstruction in the raw (unregistered) model frame.
    pub model: Reconstruction,
    /// Mapping camera centers and triangulated sign centers with their
    /// geodetic coordinates.
    pub georef: Vec<Correspondence>,
    pub palette: ClassPalette,
    pub masks: BTreeMap<String, SegmentationMask>,
    pub mapping_detections: Vec<DetectionSet>,
    pub drives: Vec<DriveBundle>,
    pub truth: Vec<TruthSign>,
    /// Exact camera centers at the frame times.
    pub rtk: GpsTrace,
    pub warnings: Vec<String>,
    before_signs: Vec<SignGeom>,
    after_signs: Vec<SignGeom>,
    background: Vec<Vector3<f64>>,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn random_similarity(seed: u64) -> SimilarityTransform {
    let mut rng = rng_for(seed, STREAM_SIMILARITY, 0);
    let scale = (rng.random_range(-1.5f64..1.5)).exp();
    let q: [f64; 4] = std::array::from_fn(|_| normal(&mut rng));
    let rotation = *UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(q[0], q[1], q[2], q[3]))
        .to_rotation_matrix()
        .matrix();
    let translation = Vector3::from_fn(|_, _| rng.random_range(-200.0..200.0));
    SimilarityTransform {
        scale,
        rotation,
        translation,
    }
}

/// Gauss–Markov error sequence with stationary deviation `sigma`.
fn gps_errors(seed: u64, drive: usize, n: usize, dt: f64, sigma: f64, tau: f64) -> Vec<Vector3<f64>> {
    if sigma == 0.0 {
        return vec![Vector3::zeros(); n];
    }
    let mut rng = rng_for(seed, STREAM_GPS, drive as u64);
    let phi = if tau > 0.0 { (-dt / tau).exp() } else { 0.0 };
    let innov = sigma * (1.0 - phi * phi).sqrt();
    let mut e: Vector3<f64> = Vector3::from_fn(|_, _| sigma * normal(&mut rng));
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(e);
        let w: Vector3<f64> = Vector3::from_fn(|_, _| normal(&mut rng));
        e = e * phi + w * innov;
    }
    out
}

fn jittered(pose: &CameraPose, seed: u64, drive: usize, frame: usize, deg: f64) -> CameraPose {
    if deg == 0.0 {
        return *pose;
    }
    let mut rng = rng_for(seed, STREAM_JITTER, ((drive as u64) << 32) | frame as u64);
    let axis: Vector3<f64> = Vector3::from_fn(|_, _| normal(&mut rng));
    let angle = deg.to_radians() * normal(&mut rng);
    let rot = Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle);
    CameraPose::from_rotation_center(&(rot.matrix() * pose.rotation_matrix()), &pose.center())
}

pub fn mapping_image_name(i: usize) -> String {
    format!("map_{i:05}.jpg")
}

fn drive_image_name(vehicle: &str, i: usize) -> String {
    format!("{vehicle}_{i:05}.jpg")
}

impl Bundle {
    fn mapping_inputs<'a>(&'a self, i: usize, with_distance: bool, suppressed: &'a dyn Fn(u32) -> bool) -> FrameInputs<'a> {
        let seed = self.scene.seed;
        FrameInputs {
            scene: &self.scene,
            signs: &self.before_signs,
            background: &self.background,
            pose: camera_pose(&self.scene, i),
            image_name: mapping_image_name(i),
            mapping: true,
            suppressed,
            keypoint_rng: Some(rng_for(seed, STREAM_MAP_KEYPOINTS, i as u64)),
            dropout_rng: rng_for(seed, STREAM_MAP_DROPOUT, i as u64),
            distance_rng: with_distance.then(|| rng_for(seed, STREAM_MAP_DISTANCE, i as u64)),
        }
    }

    fn drive_inputs<'a>(&'a self, d: usize, i: usize, with_distance: bool, suppressed: &'a dyn Fn(u32) -> bool) -> FrameInputs<'a> {
        let seed = self.after.seed;
        let key = ((d as u64) << 32) | i as u64;
        FrameInputs {
            scene: &self.after,
            signs: &self.after_signs,
            background: &self.background,
            pose: camera_pose(&self.after, i),
            image_name: drive_image_name(&self.after.drives[d].vehicle_id, i),
            mapping: false,
            suppressed,
            keypoint_rng: None,
            dropout_rng: rng_for(seed, STREAM_DRIVE_DROPOUT, key),
            distance_rng: with_distance.then(|| rng_for(seed, STREAM_DRIVE_DISTANCE, key)),
        }
    }

    pub fn mapping_frame_count(&self) -> usize {
        self.scene.trajectory.len()
    }

    pub fn mapping_frame(&self, i: usize) -> FrameRender {
        let scene = &self.scene;
        let sup = |id: u32| scene.has_fault(id, FaultKind::SuppressMapping);
        render_frame(self.mapping_inputs(i, true, &sup))
    }

    /// Ground-truth distance map of mapping frame `i`.
    pub fn mapping_distance(&self, i: usize) -> DistanceMap {
        self.mapping_frame(i).distance.expect("rendered with distance")
    }

    pub fn drive_frame(&self, d: usize, i: usize) -> FrameRender {
        let scene = &self.after;
        let sup = |id: u32| scene.has_fault(id, FaultKind::SuppressDrive);
        render_frame(self.drive_inputs(d, i, true, &sup))
    }

    /// Distance map of drive `d`, frame `i`.
    pub fn drive_distance(&self, d: usize, i: usize) -> DistanceMap {
        self.drive_frame(d, i).distance.expect("rendered with distance")
    }

    /// Reconstruction moved into the scene's ENU frame with the exact
    /// registration attached.
    pub fn registered_model(&self) -> Reconstruction {
        let mut r = self.model.transformed(&self.model_to_enu);
        r.georef = Some(sfm::GeoRegistration::new(*self.frame.origin(), &self.model_to_enu));
        r
    }

    pub fn truth_metadata(&self, status: &[TruthStatus]) -> Vec<MetadataEntry> {
        self.truth
            .iter()
            .filter(|t| status.contains(&t.status))
            .map(|t| MetadataEntry {
                lat_deg: t.geodetic.lat_deg,
                lon_deg: t.geodetic.lon_deg,
                class_name: t.class_name.clone(),
                color: class_color(&t.class_name),
                date_detected: self.scene.mapping_date,
            })
            .collect()
    }
}

pub fn render_scene(scene: &SyntheticScene) -> Result<Bundle> {
    scene.validate()?;
    let frame = EnuFrame::new(scene.origin)?;
    let after = mutate_scene(scene, &scene.changes)?;
    let model_to_enu = random_similarity(scene.seed);
    let palette = ClassPalette::from_entries([PALETTE_BUILDING, PALETTE_SIGN]).expect("static palette");

    let mut bundle = Bundle {
        scene: scene.clone(),
        after: after.clone(),
        frame,
        model_to_enu,
        model: Reconstruction::default(),
        georef: Vec::new(),
        palette,
        masks: BTreeMap::new(),
        mapping_detections: Vec::new(),
        drives: Vec::new(),
        truth: Vec::new(),
        rtk: GpsTrace::default(),
        warnings: Vec::new(),
        before_signs: sign_geometry(scene),
        after_signs: sign_geometry(&after),
        background: background_points(scene),
    };

    // mapping pass
    let n = scene.trajectory.len();
    let mut enu = Reconstruction::default();
    let mut cam = scene.intrinsics.clone();
    cam.camera_id = 1;
    enu.cameras.insert(1, cam.clone());
    let mut tracks: BTreeMap<u64, Vec<TrackEntry>> = BTreeMap::new();
    let mut world: BTreeMap<u64, (Vector3<f64>, [u8; 3])> = BTreeMap::new();
    let mut mapping_seen: BTreeMap<u32, usize> = BTreeMap::new();
    for s in &bundle.before_signs {
        for (j, p) in s.points.iter().enumerate() {
            world.insert(s.point_id(j), (*p, s.rgb));
        }
    }
    for (i, p) in bundle.background.iter().enumerate() {
        world.insert(BACKGROUND_ID_BASE + i as u64, (*p, BACKGROUND_RGB));
    }
    for i in 0..n {
        let sup = |id: u32| scene.has_fault(id, FaultKind::SuppressMapping);
        let fr = render_frame(bundle.mapping_inputs(i, false, &sup));
        let image_id = i as u32 + 1;
        for id in &fr.observed {
            *mapping_seen.entry(*id).or_default() += 1;
        }
        let keypoints = fr
            .keypoints
            .iter()
            .enumerate()
            .map(|(k, &(x, y, pid))| {
                tracks.entry(pid).or_default().push(TrackEntry {
                    image_id,
                    keypoint_index: k,
                });
                Keypoint {
                    x,
                    y,
                    point3d_id: Some(pid),
                }
            })
            .collect();
        enu.images.insert(
            image_id,
            ImageRecord {
                image_id,
                name: fr.image_name.clone(),
                pose: camera_pose(scene, i),
                camera_id: 1,
                keypoints,
            },
        );
        bundle.mapping_detections.push(DetectionSet {
            image_name: fr.image_name.clone(),
            detections: fr.detections,
        });
        bundle.masks.insert(fr.image_name, fr.mask);
    }
    // points need two observations to be triangulated
    for (pid, track) in tracks {
        if track.len() < 2 {
            for t in &track {
                let im = enu.images.get_mut(&t.image_id).expect("image exists");
                im.keypoints[t.keypoint_index].point3d_id = None;
            }
            continue;
        }
        let (xyz, rgb) = world[&pid];
        enu.points.insert(
            pid,
            ScenePoint {
                point3d_id: pid,
                xyz,
                rgb,
                reproj_error: 0.0,
                track,
            },
        );
    }
    enu.validate()?;
    let to_model = model_to_enu.inverse();
    bundle.model = enu.transformed(&to_model);

    // a straight route leaves the camera centers collinear, so the sign
    // centers are added as well
    for i in 0..n {
        bundle.georef.push(Correspondence {
            key: mapping_image_name(i),
            coord: frame.unproject(&camera_pose(scene, i).center())?,
        });
    }
    for s in &bundle.before_signs {
        let pid = s.point_id(s.center_index());
        if bundle.model.points.contains_key(&pid) {
            bundle.georef.push(Correspondence {
                key: format!("{POINT_KEY_PREFIX}{pid}"),
                coord: frame.unproject(&s.center)?,
            });
        }
    }

    // drives
    let mut drive_seen: BTreeMap<u32, usize> = BTreeMap::new();
    let mut rtk = Vec::with_capacity(n);
    for i in 0..n {
        rtk.push(GpsSample {
            t: frame_time(scene, i),
            coord: frame.unproject(&camera_pose(scene, i).center())?,
        });
    }
    bundle.rtk = GpsTrace::new(rtk).map_err(|e| SynthError::Invalid(e.to_string()))?;
    for (d, spec) in after.drives.iter().enumerate() {
        let errs = gps_errors(after.seed, d, n, after.frame_dt, after.noise.gps_sigma, after.noise.gps_tau_s);
        let mut frames = Vec::with_capacity(n);
        let mut gps = Vec::with_capacity(n);
        let mut detections = Vec::with_capacity(n);
        let mut registered = Reconstruction::default();
        registered.cameras.insert(1, cam.clone());
        let mut true_poses = Vec::with_capacity(n);
        for i in 0..n {
            let pose = camera_pose(&after, i);
            let name = drive_image_name(&spec.vehicle_id, i);
            let t = frame_time(&after, i);
            frames.push((name.clone(), t));
            gps.push(GpsSample {
                t,
                coord: frame.unproject(&(pose.center() + errs[i]))?,
            });
            let sup = |id: u32| after.has_fault(id, FaultKind::SuppressDrive);
            let fr = render_frame(bundle.drive_inputs(d, i, false, &sup));
            if d == 0 {
                for id in &fr.observed {
                    *drive_seen.entry(*id).or_default() += 1;
                }
            }
            detections.push(DetectionSet {
                image_name: name.clone(),
                detections: fr.detections,
            });
            if i % after.register_every == 0 {
                let j = jittered(&pose, after.seed, d, i, after.noise.pose_jitter_deg);
                let r_wc = j.rotation_matrix() * model_to_enu.rotation;
                let c = to_model.apply(&j.center());
                registered.images.insert(
                    i as u32 + 1,
                    ImageRecord {
                        image_id: i as u32 + 1,
                        name,
                        pose: CameraPose::from_rotation_center(&r_wc, &c),
                        camera_id: 1,
                        keypoints: Vec::new(),
                    },
                );
            }
            true_poses.push(pose);
        }
        bundle.drives.push(DriveBundle {
            vehicle_id: spec.vehicle_id.clone(),
            date: spec.date,
            frames,
            gps: GpsTrace::new(gps).map_err(|e| SynthError::Invalid(e.to_string()))?,
            detections,
            registered,
            true_poses,
        });
    }

    // truth
    let before_ids: Vec<u32> = scene.signs.iter().map(|s| s.id).collect();
    let after_ids: Vec<u32> = after.signs.iter().map(|s| s.id).collect();
    let mut all: Vec<&SignGeom> = bundle.before_signs.iter().collect();
    all.extend(bundle.after_signs.iter().filter(|s| !before_ids.contains(&s.id)));
    all.sort_by_key(|s| s.id);
    for s in all {
        let status = match (before_ids.contains(&s.id), after_ids.contains(&s.id)) {
            (true, true) => TruthStatus::Unchanged,
            (true, false) => TruthStatus::Removed,
            _ => TruthStatus::Appeared,
        };
        let t = TruthSign {
            id: s.id,
            class_name: s.class_name.clone(),
            status,
            enu: s.center,
            geodetic: frame.unproject(&s.center)?,
            mapping_frames: mapping_seen.get(&s.id).copied().unwrap_or(0),
            drive_frames: drive_seen.get(&s.id).copied().unwrap_or(0),
        };
        let never = match status {
            TruthStatus::Unchanged => t.mapping_frames == 0 && t.drive_frames == 0,
            TruthStatus::Removed => t.mapping_frames == 0,
            TruthStatus::Appeared => t.drive_frames == 0 && !after.drives.is_empty(),
        };
        if never {
            let msg = format!("sign {} ({}) is never visible", s.id, s.class_name);
            warn!("{msg}");
            bundle.warnings.push(msg);
        }
        bundle.truth.push(t);
    }
    Ok(bundle)
}

fn io_err(path: &Path, source: std::io::Error) -> SynthError {
    SynthError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Writes via a temporary sibling and a rename.
fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes).map_err(|e| io_err(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

#[derive(Debug, Clone, Copy, Default)]
pub struct WriteOptions {
    /// Also write the ground-truth distance map of every mapping frame.
    pub mapping_distance: bool,
}

/// Directory layout:
///
/// ```text
/// scene.json
/// mapping/model/{cameras,images,points3D}.txt   raw model frame
/// mapping/georef.csv                           image_name,lat_deg,lon_deg,alt_m
/// mapping/palette.txt  mapping/masks/*.pgm  mapping/detections.jsonl
/// mapping/distance/*.b3dm                       only with mapping_distance
/// drives/<vehicle>_<date>/{drive.json,frames.csv,gps.csv,detections.jsonl}
/// drives/<vehicle>_<date>/registered/           cameras + registered frames
/// drives/<vehicle>_<date>/distance/*.b3dm
/// truth/{signs.csv,rtk.csv,metadata.csv}
/// ```
pub fn write_bundle(bundle: &Bundle, dir: &Path, opts: WriteOptions) -> Result<()> {
    write_file(&dir.join("scene.json"), bundle.scene.to_json().as_bytes())?;
    let mapping = dir.join("mapping");
    let model_dir = mapping.join("model");
    fs::create_dir_all(&model_dir).map_err(|e| io_err(&model_dir, e))?;
    sfm::text::write_model(&bundle.model, &model_dir)?;

    let mut gcp = String::from("image_name,lat_deg,lon_deg,alt_m\n");
    for c in &bundle.georef {
        gcp.push_str(&format!("{},{},{},{}\n", c.key, c.coord.lat_deg, c.coord.lon_deg, c.coord.alt_m));
    }
    write_file(&mapping.join("georef.csv"), gcp.as_bytes())?;
    write_file(&mapping.join("palette.txt"), sem_io::write_palette(&bundle.palette).as_bytes())?;
    for (name, mask) in &bundle.masks {
        write_file(&mapping.join("masks").join(format!("{name}.pgm")), &sem_io::write_mask_pgm(mask))?;
    }
    let mut buf = Vec::new();
    sem_io::write_detections(&bundle.mapping_detections, &mut buf).map_err(|e| io_err(&mapping, e))?;
    write_file(&mapping.join("detections.jsonl"), &buf)?;
    if opts.mapping_distance {
        for i in 0..bundle.mapping_frame_count() {
            let m = bundle.mapping_distance(i);
            write_file(&mapping.join("distance").join(format!("{}.b3dm", m.image_name)), &m.to_bytes())?;
        }
    }

    for (d, drive) in bundle.drives.iter().enumerate() {
        let ddir = dir.join("drives").join(drive.dir_name());
        let info = serde_json::json!({"vehicle_id": drive.vehicle_id, "date": drive.date});
        write_file(&ddir.join("drive.json"), format!("{info}\n").as_bytes())?;
        let mut buf = Vec::new();
        pose::write_frame_times(&drive.frames, &mut buf).map_err(|e| SynthError::Invalid(e.to_string()))?;
        write_file(&ddir.join("frames.csv"), &buf)?;
        let mut buf = Vec::new();
        pose::write_gps_trace(&drive.gps, &mut buf).map_err(|e| SynthError::Invalid(e.to_string()))?;
        write_file(&ddir.join("gps.csv"), &buf)?;
        let mut buf = Vec::new();
        sem_io::write_detections(&drive.detections, &mut buf).map_err(|e| io_err(&ddir, e))?;
        write_file(&ddir.join("detections.jsonl"), &buf)?;
        let reg = ddir.join("registered");
        fs::create_dir_all(&reg).map_err(|e| io_err(&reg, e))?;
        sfm::text::write_model(&drive.registered, &reg)?;
        for i in 0..drive.frames.len() {
            let m = bundle.drive_distance(d, i);
            write_file(&ddir.join("distance").join(format!("{}.b3dm", m.image_name)), &m.to_bytes())?;
        }
    }

    let truth = dir.join("truth");
    let mut wr = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| SynthError::Invalid(e.to_string());
    wr.write_record([
        "id",
        "class_name",
        "status",
        "e",
        "n",
        "u",
        "lat_deg",
        "lon_deg",
        "alt_m",
        "mapping_frames",
        "drive_frames",
    ])
    .map_err(csv_err)?;
    for t in &bundle.truth {
        wr.write_record([
            t.id.to_string(),
            t.class_name.clone(),
            t.status.as_str().to_string(),
            t.enu.x.to_string(),
            t.enu.y.to_string(),
            t.enu.z.to_string(),
            t.geodetic.lat_deg.to_string(),
            t.geodetic.lon_deg.to_string(),
            t.geodetic.alt_m.to_string(),
            t.mapping_frames.to_string(),
            t.drive_frames.to_string(),
        ])
        .map_err(csv_err)?;
    }
    let bytes = wr.into_inner().map_err(|e| SynthError::Invalid(e.to_string()))?;
    write_file(&truth.join("signs.csv"), &bytes)?;
    let mut buf = Vec::new();
    pose::write_gps_trace(&bundle.rtk, &mut buf).map_err(|e| SynthError::Invalid(e.to_string()))?;
    write_file(&truth.join("rtk.csv"), &buf)?;
    let mut buf = Vec::new();
    metadata::write_metadata(
        &bundle.truth_metadata(&[TruthStatus::Unchanged, TruthStatus::Removed]),
        &mut buf,
    )
    .map_err(|e| SynthError::Invalid(e.to_string()))?;
    write_file(&truth.join("metadata.csv"), &buf)?;
    Ok(())
}
