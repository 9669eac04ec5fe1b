//! Online sign localization from per-pixel camera-frame distance maps.

use std::fs;
use std::path::Path;

use chrono::NaiveDate;
use nalgebra::Vector3;
use thiserror::Error;

use crate::pose::PoseEstimate;
use crate::semantics::{nearest_pixel, Detection};
use crate::sfm::{ImageRecord, Reconstruction};

const MAGIC: &[u8; 4] = b"B3DM";

#[derive(Debug, Error)]
pub enum RealtimeError {
    #[error("pixel is unlabeled")]
    Unlabeled,
    #[error("depth must be positive, got {0}")]
    NonPositiveDepth(f64),
    #[error("image {0} is not in the reconstruction")]
    UnknownImage(String),
    #[error("invalid range gate [{0}, {1}]")]
    Gate(f64, f64),
    #[error("distance map {name}: {message}")]
    Format { name: String, message: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, RealtimeError>;

/// Per-pixel camera-frame offsets `B = (lateral, height, depth)`, i.e.
/// camera x (right), y (down) and z (forward). NaN marks unlabeled pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMap {
    pub image_name: String,
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<[f64; 3]>,
}

impl DistanceMap {
    pub fn unlabeled(image_name: impl Into<String>, width: u32, height: u32) -> Self {
        Self {
            image_name: image_name.into(),
            width,
            height,
            pixels: vec![[f64::NAN; 3]; width as usize * height as usize],
        }
    }

    fn offset(&self, px: u32, py: u32) -> usize {
        py as usize * self.width as usize + px as usize
    }

    /// `None` when out of bounds or unlabeled.
    pub fn get(&self, px: u32, py: u32) -> Option<Vector3<f64>> {
        if px >= self.width || py >= self.height {
            return None;
        }
        let b = self.pixels[self.offset(px, py)];
        if b.iter().any(|c| c.is_nan()) {
            None
        } else {
            Some(Vector3::from(b))
        }
    }

    pub fn set(&mut self, px: u32, py: u32, b: &Vector3<f64>) {
        let i = self.offset(px, py);
        self.pixels[i] = [b.x, b.y, b.z];
    }

    /// Keeps the existing value when it is nearer (smaller depth).
    pub fn set_nearer(&mut self, px: u32, py: u32, b: &Vector3<f64>) {
        match self.get(px, py) {
            Some(old) if old.z <= b.z => {}
            _ => self.set(px, py, b),
        }
    }

    pub fn labeled_count(&self) -> usize {
        self.pixels.iter().filter(|b| !b.iter().any(|c| c.is_nan())).count()
    }

    /// Labeled pixels in row-major order.
    pub fn labeled(&self) -> impl Iterator<Item = (u32, u32, Vector3<f64>)> + '_ {
        let w = self.width as usize;
        self.pixels.iter().enumerate().filter_map(move |(i, b)| {
            if b.iter().any(|c| c.is_nan()) {
                None
            } else {
                Some(((i % w) as u32, (i / w) as u32, Vector3::from(*b)))
            }
        })
    }

    /// `B3DM`, u32 LE width and height, then f32 LE triples.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + self.pixels.len() * 12);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.width.to_le_bytes());
        out.extend_from_slice(&self.height.to_le_bytes());
        for b in &self.pixels {
            for c in b {
                out.extend_from_slice(&(*c as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(image_name: &str, bytes: &[u8]) -> Result<Self> {
        let bad = |message: &str| RealtimeError::Format {
            name: image_name.to_string(),
            message: message.to_string(),
        };
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(bad("missing B3DM header"));
        }
        let width = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        let height = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        let n = width as usize * height as usize;
        let body = &bytes[12..];
        if body.len() != n * 12 {
            return Err(bad("payload length does not match dimensions"));
        }
        let mut pixels = Vec::with_capacity(n);
        for chunk in body.chunks_exact(12) {
            let f = |k: usize| f32::from_le_bytes(chunk[4 * k..4 * k + 4].try_into().expect("4 bytes")) as f64;
            let b = [f(0), f(1), f(2)];
            if b.iter().any(|c| c.is_nan()) {
                pixels.push([f64::NAN; 3]);
            } else {
                if b[2] <= 0.0 {
                    return Err(bad("labeled pixel with non-positive depth"));
                }
                pixels.push(b);
            }
        }
        Ok(Self {
            image_name: image_name.to_string(),
            width,
            height,
            pixels,
        })
    }

    pub fn read(path: &Path, image_name: &str) -> Result<Self> {
        let bytes = fs::read(path).map_err(|source| RealtimeError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(image_name, &bytes)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|source| RealtimeError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

/// Accepted camera-to-sign distance range in meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RangeGate {
    pub u_min: f64,
    pub u_max: f64,
}

impl Default for RangeGate {
    fn default() -> Self {
        Self { u_min: 3.0, u_max: 50.0 }
    }
}

impl RangeGate {
    pub fn new(u_min: f64, u_max: f64) -> Result<Self> {
        let g = Self { u_min, u_max };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.u_min >= 0.0 && self.u_min < self.u_max {
            Ok(())
        } else {
            Err(RealtimeError::Gate(self.u_min, self.u_max))
        }
    }

    pub fn contains(&self, distance: f64) -> bool {
        distance >= self.u_min && distance <= self.u_max
    }
}

/// `P = R_cw · B + C`.
pub fn pixel_to_wcs(pose: &PoseEstimate, b: &Vector3<f64>) -> Result<Vector3<f64>> {
    if b.iter().any(|c| c.is_nan()) {
        return Err(RealtimeError::Unlabeled);
    }
    if !(b.z > 0.0) {
        return Err(RealtimeError::NonPositiveDepth(b.z));
    }
    Ok(pose.rotation_cw * b + pose.center)
}

/// Camera-frame B of every resolved keypoint of `image`, written at its
/// rounded pixel.
pub fn generate_sparse_labels(r: &Reconstruction, image: &ImageRecord) -> Result<DistanceMap> {
    let cam = r
        .camera_of(image)
        .ok_or_else(|| RealtimeError::UnknownImage(image.name.clone()))?;
    let mut map = DistanceMap::unlabeled(&image.name, cam.width, cam.height);
    for (_, kp, pid) in image.registered_keypoints() {
        let Some(point) = r.points.get(&pid) else { continue };
        let Some((px, py)) = nearest_pixel(kp.x, kp.y, cam.width, cam.height) else { continue };
        let b = image.pose.world_to_camera(&point.xyz);
        if b.z > 0.0 {
            map.set_nearer(px, py, &b);
        }
    }
    Ok(map)
}

/// World position of a detection, or `None` when the bbox has no labeled
/// pixel or the distance falls outside the gate.
pub fn locate_detection(
    det: &Detection,
    dmap: &DistanceMap,
    pose: &PoseEstimate,
    gate: &RangeGate,
) -> Option<(String, Vector3<f64>)> {
    let b = detection_offset(det, dmap)?;
    if !gate.contains(b.norm()) {
        return None;
    }
    let p = pixel_to_wcs(pose, &b).ok()?;
    Some((det.class_name.clone(), p))
}

/// B at the bbox center pixel, or at the labeled bbox pixel nearest to it.
pub fn detection_offset(det: &Detection, dmap: &DistanceMap) -> Option<Vector3<f64>> {
    let (cx, cy) = det.bbox.center();
    if let Some((px, py)) = nearest_pixel(cx, cy, dmap.width, dmap.height) {
        if let Some(b) = dmap.get(px, py) {
            return Some(b);
        }
    }
    let bb = det.bbox.clamped(dmap.width, dmap.height);
    let x0 = bb.xmin.ceil().max(0.0) as u32;
    let y0 = bb.ymin.ceil().max(0.0) as u32;
    let x1 = (bb.xmax.floor() as i64).min(dmap.width as i64 - 1);
    let y1 = (bb.ymax.floor() as i64).min(dmap.height as i64 - 1);
    let mut best: Option<(f64, Vector3<f64>)> = None;
    for py in y0 as i64..=y1 {
        for px in x0 as i64..=x1 {
            let Some(b) = dmap.get(px as u32, py as u32) else { continue };
            let d2 = (px as f64 - cx).powi(2) + (py as f64 - cy).powi(2);
            if best.is_none_or(|(bd, _)| d2 < bd) {
                best = Some((d2, b));
            }
        }
    }
    best.map(|(_, b)| b)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObservationTrack {
    pub class_name: String,
    pub mean_enu: Vector3<f64>,
    pub count: usize,
    pub first_seen: NaiveDate,
    pub last_seen: NaiveDate,
}

pub const DEFAULT_ASSOCIATION_RADIUS: f64 = 10.0;

/// Folds one observation into the nearest same-class track within
/// `r_assoc` (ties go to the older track), or opens a new track.
/// Returns the index of the track that received it.
pub fn update_tracks(
    tracks: &mut Vec<ObservationTrack>,
    class_name: &str,
    position: &Vector3<f64>,
    date: NaiveDate,
    r_assoc: f64,
) -> usize {
    let mut best: Option<(usize, f64)> = None;
    for (i, t) in tracks.iter().enumerate() {
        if t.class_name != class_name {
            continue;
        }
        let d = (t.mean_enu - position).norm();
        if d <= r_assoc && best.is_none_or(|(_, bd)| d < bd) {
            best = Some((i, d));
        }
    }
    match best {
        Some((i, _)) => {
            let t = &mut tracks[i];
            t.mean_enu += (position - t.mean_enu) / (t.count + 1) as f64;
            t.count += 1;
            t.first_seen = t.first_seen.min(date);
            t.last_seen = t.last_seen.max(date);
            i
        }
        None => {
            tracks.push(ObservationTrack {
                class_name: class_name.to_string(),
                mean_enu: *position,
                count: 1,
                first_seen: date,
                last_seen: date,
            });
            tracks.len() - 1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pose::PoseSource;
    use crate::semantics::BoundingBox;
    use nalgebra::{Matrix3, Rotation3};

    fn pose(r_wc: Matrix3<f64>, c: Vector3<f64>) -> PoseEstimate {
        PoseEstimate {
            image_name: "f".into(),
            rotation_cw: r_wc.transpose(),
            center: c,
            source: PoseSource::Registered,
        }
    }

    fn day() -> NaiveDate {
        NaiveDate::from_ymd_opt(2024, 5, 1).unwrap()
    }

    #[test]
    fn projection_examples() {
        let p = pose(Matrix3::identity(), Vector3::zeros());
        assert_eq!(pixel_to_wcs(&p, &Vector3::new(1.0, 2.0, 3.0)).unwrap(), Vector3::new(1.0, 2.0, 3.0));
        let rz = *Rotation3::from_axis_angle(&Vector3::z_axis(), std::f64::consts::FRAC_PI_2).matrix();
        let p = pose(rz, Vector3::new(10.0, 0.0, 0.0));
        let out = pixel_to_wcs(&p, &Vector3::new(1.0, 0.0, 0.0));
        assert!(matches!(out, Err(RealtimeError::NonPositiveDepth(_))));
        let out = pixel_to_wcs(&p, &Vector3::new(1.0, 0.0, 1e-3)).unwrap();
        assert!((out - Vector3::new(10.0, -1.0, 1e-3)).norm() < 1e-12);
        assert!(matches!(
            pixel_to_wcs(&p, &Vector3::new(f64::NAN, 0.0, 1.0)),
            Err(RealtimeError::Unlabeled)
        ));
    }

    #[test]
    fn b3dm_round_trip() {
        let mut m = DistanceMap::unlabeled("a", 3, 2);
        m.set(1, 1, &Vector3::new(0.5, -1.25, 12.0));
        let bytes = m.to_bytes();
        assert_eq!(&bytes[..4], b"B3DM");
        assert_eq!(bytes.len(), 12 + 6 * 12);
        let back = DistanceMap::from_bytes("a", &bytes).unwrap();
        assert_eq!(back.labeled_count(), 1);
        assert_eq!(back.get(1, 1).unwrap(), Vector3::new(0.5, -1.25, 12.0));
        assert!(DistanceMap::from_bytes("a", &bytes[..20]).is_err());
    }

    fn det(b: BoundingBox) -> Detection {
        Detection {
            class_name: "stop".into(),
            score: 1.0,
            bbox: b,
        }
    }

    #[test]
    fn locate_with_gate_and_fallback() {
        let p = pose(Matrix3::identity(), Vector3::zeros());
        let gate = RangeGate::default();
        let mut m = DistanceMap::unlabeled("a", 20, 20);
        m.set(10, 10, &Vector3::new(0.0, 0.0, 30.0));
        let d = det(BoundingBox { xmin: 8.0, ymin: 8.0, xmax: 12.0, ymax: 12.0 });
        let (_, pos) = locate_detection(&d, &m, &p, &gate).unwrap();
        assert_eq!(pos, Vector3::new(0.0, 0.0, 30.0));

        m.set(10, 10, &Vector3::new(0.0, 0.0, 60.0));
        assert!(locate_detection(&d, &m, &p, &gate).is_none());

        let mut m = DistanceMap::unlabeled("a", 20, 20);
        assert!(locate_detection(&d, &m, &p, &gate).is_none());
        m.set(12, 9, &Vector3::new(1.0, 0.0, 20.0));
        m.set(8, 8, &Vector3::new(2.0, 0.0, 20.0));
        m.set(15, 10, &Vector3::new(3.0, 0.0, 20.0));
        let (_, pos) = locate_detection(&d, &m, &p, &gate).unwrap();
        assert_eq!(pos.x, 1.0);
    }

    #[test]
    fn running_mean_tracks() {
        let mut tracks = Vec::new();
        update_tracks(&mut tracks, "stop", &Vector3::new(0.0, 0.0, 0.0), day(), 10.0);
        assert_eq!(tracks.len(), 1);
        update_tracks(&mut tracks, "stop", &Vector3::new(2.0, 0.0, 0.0), day(), 10.0);
        assert_eq!(tracks.len(), 1);
        assert_eq!(tracks[0].mean_enu, Vector3::new(1.0, 0.0, 0.0));
        assert_eq!(tracks[0].count, 2);
        update_tracks(&mut tracks, "stop", &Vector3::new(31.0, 0.0, 0.0), day(), 10.0);
        update_tracks(&mut tracks, "yield", &Vector3::new(1.0, 0.0, 0.0), day(), 10.0);
        assert_eq!(tracks.len(), 3);
    }

    #[test]
    fn tie_goes_to_older_track() {
        let mut tracks = Vec::new();
        update_tracks(&mut tracks, "stop", &Vector3::new(-4.0, 0.0, 0.0), day(), 10.0);
        update_tracks(&mut tracks, "stop", &Vector3::new(4.0, 0.0, 0.0), day(), 5.0);
        assert_eq!(tracks.len(), 2);
        assert_eq!(update_tracks(&mut tracks, "stop", &Vector3::zeros(), day(), 10.0), 0);
    }
}
