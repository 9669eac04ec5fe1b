//! Camera pose estimation for new drive frames.
//!
//! A frame either comes with a pose registered into the reconstruction, or
//! takes its position from GPS and its orientation from the previous frame,
//! assuming the camera keeps the same rotation relative to the nearest
//! reference image as the previous frame did relative to its own:
//! `R_t = R_{t−1} · R'ᵀ_{t−1} · R'_t` (all world→camera).

use std::io::{Read, Write};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geodesy::{EnuFrame, GeodesyError, GeodeticCoord};
use crate::sfm::{CameraPose, Reconstruction};
use crate::spatial::KdTree;

/// Gate on `‖R·Rᵀ − I‖` (Frobenius) for rotation inputs.
pub const ORTHONORMAL_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum PoseError {
    #[error("{0} is not a rotation (‖RRᵀ−I‖ = {1:e})")]
    NotOrthonormal(&'static str, f64),
    #[error("frame {0}: no registered pose and no previous pose")]
    NoSource(String),
    #[error("frame {image}: nearest reference image is {distance:.1} m away (limit {limit} m)")]
    OffMap { image: String, distance: f64, limit: f64 },
    #[error("reference index is empty")]
    EmptyIndex,
    #[error("GPS trace: {0}")]
    Trace(String),
    #[error("{file} line {line}: {message}")]
    Csv { file: &'static str, line: usize, message: String },
    #[error(transparent)]
    Geodesy(#[from] GeodesyError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, PoseError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpsSample {
    pub t: f64,
    pub coord: GeodeticCoord,
}

/// Time-ordered GPS samples.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GpsTrace {
    samples: Vec<GpsSample>,
}

impl GpsTrace {
    pub fn new(samples: Vec<GpsSample>) -> Result<Self> {
        for (i, w) in samples.windows(2).enumerate() {
            if !(w[1].t >= w[0].t) {
                return Err(PoseError::Trace(format!("time decreases at sample {}", i + 1)));
            }
        }
        for s in &samples {
            if !s.t.is_finite() {
                return Err(PoseError::Trace("non-finite timestamp".into()));
            }
            s.coord.validate()?;
        }
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &[GpsSample] {
        &self.samples
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// ENU position at time `t`: linear interpolation between the
    /// bracketing samples, clamped to the first/last sample outside the
    /// trace.
    pub fn position_at(&self, t: f64, frame: &EnuFrame) -> Result<Vector3<f64>> {
        let s = &self.samples;
        if s.is_empty() {
            return Err(PoseError::Trace("empty trace".into()));
        }
        let after = s.partition_point(|x| x.t <= t);
        if after == 0 {
            return Ok(frame.project(&s[0].coord)?);
        }
        if after == s.len() {
            return Ok(frame.project(&s[s.len() - 1].coord)?);
        }
        let (a, b) = (&s[after - 1], &s[after]);
        let pa = frame.project(&a.coord)?;
        if b.t == a.t {
            return Ok(pa);
        }
        let pb = frame.project(&b.coord)?;
        let w = (t - a.t) / (b.t - a.t);
        Ok(pa + (pb - pa) * w)
    }
}

fn csv_err(file: &'static str, line: usize, message: impl Into<String>) -> PoseError {
    PoseError::Csv {
        file,
        line,
        message: message.into(),
    }
}

/// `t_s,lat_deg,lon_deg,alt_m`.
pub fn read_gps_trace(r: impl Read) -> Result<GpsTrace> {
    const FILE: &str = "GPS trace";
    let mut rd = csv::Reader::from_reader(r);
    let headers = rd.headers().map_err(|e| csv_err(FILE, 1, e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["t_s", "lat_deg", "lon_deg", "alt_m"] {
        return Err(csv_err(FILE, 1, "expected header t_s,lat_deg,lon_deg,alt_m"));
    }
    let mut samples = Vec::new();
    for (i, rec) in rd.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| csv_err(FILE, line, e.to_string()))?;
        let num = |k: usize| -> Result<f64> {
            rec.get(k)
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| csv_err(FILE, line, format!("invalid field {}", k + 1)))
        };
        let coord = GeodeticCoord::new(num(1)?, num(2)?, num(3)?).map_err(|e| csv_err(FILE, line, e.to_string()))?;
        samples.push(GpsSample { t: num(0)?, coord });
    }
    GpsTrace::new(samples)
}

pub fn write_gps_trace(trace: &GpsTrace, mut w: impl Write) -> Result<()> {
    writeln!(w, "t_s,lat_deg,lon_deg,alt_m")?;
    for s in trace.samples() {
        writeln!(w, "{},{},{},{}", s.t, s.coord.lat_deg, s.coord.lon_deg, s.coord.alt_m)?;
    }
    Ok(())
}

/// `image_name,t_s`, in capture order.
pub fn read_frame_times(r: impl Read) -> Result<Vec<(String, f64)>> {
    const FILE: &str = "frame times";
    let mut rd = csv::Reader::from_reader(r);
    let headers = rd.headers().map_err(|e| csv_err(FILE, 1, e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["image_name", "t_s"] {
        return Err(csv_err(FILE, 1, "expected header image_name,t_s"));
    }
    let mut out = Vec::new();
    for (i, rec) in rd.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| csv_err(FILE, line, e.to_string()))?;
        let t: f64 = rec
            .get(1)
            .and_then(|s| s.trim().parse().ok())
            .filter(|t: &f64| t.is_finite())
            .ok_or_else(|| csv_err(FILE, line, "invalid t_s"))?;
        out.push((rec[0].to_string(), t));
    }
    Ok(out)
}

pub fn write_frame_times(frames: &[(String, f64)], mut w: impl Write) -> Result<()> {
    writeln!(w, "image_name,t_s")?;
    for (name, t) in frames {
        writeln!(w, "{name},{t}")?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PoseSource {
    Registered,
    Propagated,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseEstimate {
    pub image_name: String,
    /// Camera→world rotation.
    pub rotation_cw: Matrix3<f64>,
    /// Camera center in the ENU frame.
    pub center: Vector3<f64>,
    pub source: PoseSource,
}

impl PoseEstimate {
    pub fn from_registered(image_name: impl Into<String>, pose: &CameraPose) -> Self {
        Self {
            image_name: image_name.into(),
            rotation_cw: pose.rotation_matrix().transpose(),
            center: pose.center(),
            source: PoseSource::Registered,
        }
    }

    pub fn rotation_wc(&self) -> Matrix3<f64> {
        self.rotation_cw.transpose()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceImage {
    pub image_id: u32,
    pub name: String,
    pub center: Vector3<f64>,
    pub rotation_wc: Matrix3<f64>,
}

/// Reconstruction images indexed by camera center.
#[derive(Debug, Clone)]
pub struct ReferenceIndex {
    images: Vec<ReferenceImage>,
    tree: KdTree<u32>,
}

impl ReferenceIndex {
    pub fn from_reconstruction(r: &Reconstruction) -> Self {
        Self::new(
            r.images
                .values()
                .map(|im| ReferenceImage {
                    image_id: im.image_id,
                    name: im.name.clone(),
                    center: im.pose.center(),
                    rotation_wc: im.pose.rotation_matrix(),
                })
                .collect(),
        )
    }

    pub fn new(images: Vec<ReferenceImage>) -> Self {
        let tree = KdTree::new(images.iter().map(|im| (im.image_id, im.center)));
        Self { images, tree }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Nearest reference by Euclidean center distance; ties go to the
    /// lowest image id.
    pub fn nearest(&self, position: &Vector3<f64>) -> Result<(&ReferenceImage, f64)> {
        let (i, d) = self.tree.nearest(position).ok_or(PoseError::EmptyIndex)?;
        Ok((&self.images[i], d))
    }
}

pub fn nearest_reference<'a>(index: &'a ReferenceIndex, position: &Vector3<f64>) -> Result<&'a ReferenceImage> {
    index.nearest(position).map(|(im, _)| im)
}

pub fn orthonormality_error(r: &Matrix3<f64>) -> f64 {
    (r * r.transpose() - Matrix3::identity()).norm()
}

/// Closest proper rotation to `m` (polar factor via SVD).
pub fn nearest_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("u requested");
    let v_t = svd.v_t.expect("v_t requested");
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        let smallest = svd.singular_values.imin();
        d[(smallest, smallest)] = -1.0;
    }
    u * d * v_t
}

/// World→camera orientation of the current frame from the previous
/// frame's orientation and the orientations of the reference images
/// nearest to the previous and current positions.
pub fn propagate_orientation(
    r_prev: &Matrix3<f64>,
    ref_prev: &Matrix3<f64>,
    ref_cur: &Matrix3<f64>,
) -> Result<Matrix3<f64>> {
    for (name, m) in [("previous orientation", r_prev), ("previous reference", ref_prev), ("current reference", ref_cur)] {
        let err = orthonormality_error(m);
        if !(err <= ORTHONORMAL_TOLERANCE) || m.determinant() < 0.0 {
            return Err(PoseError::NotOrthonormal(name, err));
        }
    }
    Ok(nearest_rotation(&(r_prev * ref_prev.transpose() * ref_cur)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseConfig {
    /// Frames farther than this from every reference image are off the map.
    pub max_ref_distance: f64,
    /// Propagated frames after which a registered pose is due.
    pub reanchor_every: usize,
}

impl Default for PoseConfig {
    fn default() -> Self {
        Self {
            max_ref_distance: 50.0,
            reanchor_every: 30,
        }
    }
}

/// Registered pose when given (method 1), otherwise GPS position plus
/// propagated orientation (method 2).
pub fn estimate_pose(
    image_name: &str,
    gps_position: &Vector3<f64>,
    index: &ReferenceIndex,
    prev: Option<&PoseEstimate>,
    registered: Option<&CameraPose>,
    cfg: &PoseConfig,
) -> Result<PoseEstimate> {
    if let Some(pose) = registered {
        return Ok(PoseEstimate::from_registered(image_name, pose));
    }
    let prev = prev.ok_or_else(|| PoseError::NoSource(image_name.to_string()))?;
    let lookup = |p: &Vector3<f64>| -> Result<&ReferenceImage> {
        let (im, d) = index.nearest(p)?;
        if d > cfg.max_ref_distance {
            return Err(PoseError::OffMap {
                image: image_name.to_string(),
                distance: d,
                limit: cfg.max_ref_distance,
            });
        }
        Ok(im)
    };
    let ref_prev = lookup(&prev.center)?;
    let ref_cur = lookup(gps_position)?;
    let r_wc = propagate_orientation(&prev.rotation_wc(), &ref_prev.rotation_wc, &ref_cur.rotation_wc)?;
    Ok(PoseEstimate {
        image_name: image_name.to_string(),
        rotation_cw: r_wc.transpose(),
        center: *gps_position,
        source: PoseSource::Propagated,
    })
}

/// Sequential pose estimation along one trace.
#[derive(Debug, Clone)]
pub struct PoseTracker<'a> {
    index: &'a ReferenceIndex,
    cfg: PoseConfig,
    prev: Option<PoseEstimate>,
    since_anchor: usize,
    overdue_frames: usize,
}

impl<'a> PoseTracker<'a> {
    pub fn new(index: &'a ReferenceIndex, cfg: PoseConfig) -> Self {
        Self {
            index,
            cfg,
            prev: None,
            since_anchor: 0,
            overdue_frames: 0,
        }
    }

    /// True when no pose exists yet or the propagation run has reached the
    /// re-anchoring cadence.
    pub fn registration_due(&self) -> bool {
        self.prev.is_none() || self.since_anchor >= self.cfg.reanchor_every
    }

    /// Frames propagated while a registration was already due.
    pub fn overdue_frames(&self) -> usize {
        self.overdue_frames
    }

    pub fn step(
        &mut self,
        image_name: &str,
        gps_position: &Vector3<f64>,
        registered: Option<&CameraPose>,
    ) -> Result<PoseEstimate> {
        if registered.is_none() && self.registration_due() && self.prev.is_some() {
            self.overdue_frames += 1;
        }
        let est = estimate_pose(image_name, gps_position, self.index, self.prev.as_ref(), registered, &self.cfg)?;
        self.since_anchor = match est.source {
            PoseSource::Registered => 0,
            PoseSource::Propagated => self.since_anchor + 1,
        };
        self.prev = Some(est.clone());
        Ok(est)
    }
}

/// Angle of the rotation taking `a` to `b`, in radians.
pub fn rotation_angle_between(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    let rel = a.transpose() * b;
    // atan2 keeps precision near zero where acos of the trace does not
    let skew = Vector3::new(rel[(2, 1)] - rel[(1, 2)], rel[(0, 2)] - rel[(2, 0)], rel[(1, 0)] - rel[(0, 1)]);
    (skew.norm() / 2.0).atan2((rel.trace() - 1.0) / 2.0)
}
