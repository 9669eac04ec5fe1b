//! Stage wiring shared by the command-line tool and the tests.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use log::{info, warn};
use thiserror::Error;

use crate::change::{self, ChangeError, ChangeEvent, ChangeKind, TemporaryLayer};
use crate::config::PipelineConfig;
use crate::geodesy::{estimate_similarity, EnuFrame, GeodesyError, GeodeticCoord, SimilarityTransform};
use crate::metadata::{self, MetadataError, MetadataStore};
use crate::metrics::{MetricsError, TruthItem};
use crate::pose::{self, GpsTrace, PoseError, PoseEstimate, PoseSource, PoseTracker, ReferenceIndex};
use crate::realtime::{self, DistanceMap, ObservationTrack, RealtimeError};
use crate::semantics::{filter_by_score, io as sem_io, ClassMatcher, ClassPalette, Detection, DetectionSet, MaskSource, SemanticsError};
use crate::sfm::{self, CameraIntrinsics, CameraPose, Correspondence, GeoRegistration, Reconstruction, SfmError};
use crate::synth::{Bundle, SynthError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Geodesy(#[from] GeodesyError),
    #[error(transparent)]
    Sfm(#[from] SfmError),
    #[error(transparent)]
    Semantics(#[from] SemanticsError),
    #[error(transparent)]
    Metadata(#[from] MetadataError),
    #[error(transparent)]
    Pose(#[from] PoseError),
    #[error(transparent)]
    Realtime(#[from] RealtimeError),
    #[error(transparent)]
    Change(#[from] ChangeError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

impl PipelineError {
    /// Whether the failure came from the file system rather than the
    /// content of the inputs.
    pub fn is_io(&self) -> bool {
        match self {
            PipelineError::Io { .. } => true,
            PipelineError::Sfm(SfmError::Io { .. }) => true,
            PipelineError::Semantics(SemanticsError::Io { .. }) => true,
            PipelineError::Metadata(MetadataError::Io(_)) => true,
            PipelineError::Pose(PoseError::Io(_)) => true,
            PipelineError::Realtime(RealtimeError::Io { .. }) => true,
            PipelineError::Change(ChangeError::Io { .. }) => true,
            PipelineError::Change(ChangeError::Metadata(MetadataError::Io(_))) => true,
            PipelineError::Synth(SynthError::Io { .. }) => true,
            PipelineError::Synth(SynthError::Sfm(SfmError::Io { .. })) => true,
            PipelineError::Metrics(MetricsError::Metadata(MetadataError::Io(_))) => true,
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, PipelineError>;

pub fn io_err(path: &Path, source: std::io::Error) -> PipelineError {
    PipelineError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| io_err(path, e))
}

pub fn open(path: &Path) -> Result<fs::File> {
    fs::File::open(path).map_err(|e| io_err(path, e))
}

/// Writes via a temporary sibling and a rename.
pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes).map_err(|e| io_err(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

pub const CORRESPONDENCE_HEADER: &str = "image_name,lat_deg,lon_deg,alt_m";

/// `image_name,lat_deg,lon_deg,alt_m`; see [`Correspondence`] for the key.
pub fn read_correspondences(r: impl Read) -> Result<Vec<Correspondence>> {
    let mut rd = csv::Reader::from_reader(r);
    let headers = rd.headers().map_err(|e| PipelineError::Invalid(e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>().join(",") != CORRESPONDENCE_HEADER {
        return Err(PipelineError::Invalid(format!(
            "correspondences line 1: expected header {CORRESPONDENCE_HEADER}"
        )));
    }
    let mut out = Vec::new();
    for (i, rec) in rd.records().enumerate() {
        let line = i + 2;
        let bad = |m: String| PipelineError::Invalid(format!("correspondences line {line}: {m}"));
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let num = |k: usize| rec[k].trim().parse::<f64>().map_err(|e| bad(format!("field {}: {e}", k + 1)));
        let coord = GeodeticCoord::new(num(1)?, num(2)?, num(3)?).map_err(|e| bad(e.to_string()))?;
        out.push(Correspondence {
            key: rec[0].trim().to_string(),
            coord,
        });
    }
    Ok(out)
}

pub fn write_correspondences(items: &[Correspondence], mut w: impl Write) -> Result<()> {
    let mut out = format!("{CORRESPONDENCE_HEADER}\n");
    for c in items {
        out.push_str(&format!("{},{},{},{}\n", c.key, c.coord.lat_deg, c.coord.lon_deg, c.coord.alt_m));
    }
    w.write_all(out.as_bytes()).map_err(|e| io_err(Path::new("correspondences"), e))
}

#[derive(Debug, Clone)]
pub struct Georegistered {
    pub model: Reconstruction,
    pub transform: SimilarityTransform,
    pub rms_residual: f64,
}

/// Aligns a raw model to ENU and attaches the registration. The frame is
/// anchored at `origin`, or at the first correspondence.
pub fn georegister(
    model: &Reconstruction,
    items: &[Correspondence],
    origin: Option<GeodeticCoord>,
) -> Result<Georegistered> {
    if model.is_geo_registered() {
        return Err(PipelineError::Invalid("model is already geo-registered".into()));
    }
    let origin = match (origin, items.first()) {
        (Some(o), _) => o,
        (None, Some(c)) => c.coord,
        (None, None) => return Err(PipelineError::Invalid("no correspondences".into())),
    };
    let frame = EnuFrame::new(origin)?;
    let mut src = Vec::with_capacity(items.len());
    let mut dst = Vec::with_capacity(items.len());
    for c in items {
        let p = model
            .locate_key(&c.key)
            .ok_or_else(|| PipelineError::Invalid(format!("correspondence {}: not in the model", c.key)))?;
        src.push(p);
        dst.push(frame.project(&c.coord)?);
    }
    let t = estimate_similarity(&src, &dst)?;
    let rms_residual = t.rms_residual(&src, &dst);
    let mut out = model.transformed(&t);
    out.georef = Some(GeoRegistration::new(origin, &t));
    Ok(Georegistered {
        model: out,
        transform: t,
        rms_residual,
    })
}

/// A raw-model-frame pose moved into the registered ENU frame.
pub fn pose_to_enu(pose: &CameraPose, t: &SimilarityTransform) -> CameraPose {
    let r_wc = pose.rotation_matrix() * t.rotation.transpose();
    CameraPose::from_rotation_center(&r_wc, &t.apply(&pose.center()))
}

pub trait DistanceSource {
    fn distance_map(&self, image_name: &str) -> Result<Option<DistanceMap>>;
}

/// `<dir>/<image name>.b3dm`.
pub struct DistanceDir(pub PathBuf);

impl DistanceSource for DistanceDir {
    fn distance_map(&self, image_name: &str) -> Result<Option<DistanceMap>> {
        let path = self.0.join(format!("{image_name}.b3dm"));
        match fs::read(&path) {
            Ok(bytes) => Ok(Some(DistanceMap::from_bytes(image_name, &bytes)?)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(io_err(&path, e)),
        }
    }
}

/// Distance maps rendered on demand from a synthetic bundle.
pub struct SynthDistances<'a> {
    bundle: &'a Bundle,
    drive: usize,
    index: BTreeMap<&'a str, usize>,
}

impl<'a> SynthDistances<'a> {
    pub fn new(bundle: &'a Bundle, drive: usize) -> Self {
        let index = bundle.drives[drive]
            .frames
            .iter()
            .enumerate()
            .map(|(i, (name, _))| (name.as_str(), i))
            .collect();
        Self { bundle, drive, index }
    }
}

impl DistanceSource for SynthDistances<'_> {
    fn distance_map(&self, image_name: &str) -> Result<Option<DistanceMap>> {
        Ok(self
            .index
            .get(image_name)
            .map(|&i| self.bundle.drive_distance(self.drive, i)))
    }
}

/// One traversal by one vehicle.
#[derive(Debug, Clone)]
pub struct DriveInput {
    pub vehicle_id: String,
    pub date: NaiveDate,
    pub intrinsics: CameraIntrinsics,
    /// Frame names and capture times, in capture order.
    pub frames: Vec<(String, f64)>,
    pub gps: GpsTrace,
    pub detections: BTreeMap<String, Vec<Detection>>,
    /// Poses registered into the reconstruction, in the raw model frame.
    pub registered: BTreeMap<String, CameraPose>,
}

fn detections_by_image(sets: &[DetectionSet]) -> BTreeMap<String, Vec<Detection>> {
    let mut out: BTreeMap<String, Vec<Detection>> = BTreeMap::new();
    for s in sets {
        out.entry(s.image_name.clone()).or_default().extend(s.detections.iter().cloned());
    }
    out
}

fn registered_poses(r: &Reconstruction) -> BTreeMap<String, CameraPose> {
    r.images.values().map(|im| (im.name.clone(), im.pose)).collect()
}

impl DriveInput {
    pub fn from_bundle(bundle: &Bundle, d: usize) -> Self {
        let drive = &bundle.drives[d];
        Self {
            vehicle_id: drive.vehicle_id.clone(),
            date: drive.date,
            intrinsics: drive.registered.cameras[&1].clone(),
            frames: drive.frames.clone(),
            gps: drive.gps.clone(),
            detections: detections_by_image(&drive.detections),
            registered: registered_poses(&drive.registered),
        }
    }

    /// Reads a drive directory: `frames.csv`, `gps.csv`, `detections.jsonl`
    /// and `registered/` (a model holding the camera and any registered
    /// frames). Distance maps are read separately from `distance/`.
    pub fn load(dir: &Path, vehicle_id: &str, date: NaiveDate) -> Result<Self> {
        let frames = pose::read_frame_times(open(&dir.join("frames.csv"))?)?;
        let gps = pose::read_gps_trace(open(&dir.join("gps.csv"))?)?;
        let dets = sem_io::read_detections(std::io::BufReader::new(open(&dir.join("detections.jsonl"))?))?;
        let registered = sfm::parse_model(&dir.join("registered"))?;
        let intrinsics = match registered.cameras.len() {
            1 => registered.cameras.values().next().expect("one camera").clone(),
            n => {
                return Err(PipelineError::Invalid(format!(
                    "{}: expected exactly one camera, found {n}",
                    dir.join("registered").display()
                )))
            }
        };
        Ok(Self {
            vehicle_id: vehicle_id.to_string(),
            date,
            intrinsics,
            frames,
            gps,
            detections: detections_by_image(&dets),
            registered: registered_poses(&registered),
        })
    }
}

#[derive(Debug, Clone)]
pub struct DriveOutcome {
    pub poses: Vec<PoseEstimate>,
    pub tracks: Vec<ObservationTrack>,
    pub events: Vec<ChangeEvent>,
    pub layer: TemporaryLayer,
    /// Frames without a pose, with the reason.
    pub skipped: Vec<(String, String)>,
    /// Detections turned into a world position.
    pub localized: usize,
}

/// Poses every frame, localizes its detections into tracks, then compares
/// the tracks with the layer and records the changes as pending.
///
/// `model` must be geo-registered; tracks and poses are in its ENU frame,
/// which is also used for the layer's metric queries.
pub fn process_drive(
    model: &Reconstruction,
    layer: &TemporaryLayer,
    drive: &DriveInput,
    distances: &dyn DistanceSource,
    cfg: &PipelineConfig,
) -> Result<DriveOutcome> {
    let georef = model
        .georef
        .as_ref()
        .ok_or_else(|| PipelineError::Invalid("reconstruction is not geo-registered".into()))?;
    let frame = georef.frame()?;
    let to_enu = georef.transform();
    let ccfg = cfg.change();
    ccfg.validate()?;
    let gate = cfg.gate();
    gate.validate()?;

    let mut layer_in = layer.clone();
    layer_in.base.enu_frame = frame;

    let index = ReferenceIndex::from_reconstruction(model);
    let mut tracker = PoseTracker::new(&index, cfg.pose());
    let mut poses = Vec::new();
    let mut tracks = Vec::new();
    let mut skipped = Vec::new();
    let mut localized = 0;
    for (name, t) in &drive.frames {
        let gps = drive.gps.position_at(*t, &frame)?;
        let registered = drive.registered.get(name).map(|p| pose_to_enu(p, &to_enu));
        let est = match tracker.step(name, &gps, registered.as_ref()) {
            Ok(e) => e,
            Err(e @ (PoseError::OffMap { .. } | PoseError::NoSource(_))) => {
                warn!("{e}");
                skipped.push((name.clone(), e.to_string()));
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        let dets = drive.detections.get(name).map(Vec::as_slice).unwrap_or(&[]);
        let set = filter_by_score(
            &DetectionSet {
                image_name: name.clone(),
                detections: dets.to_vec(),
            },
            ccfg.score_threshold,
        )?;
        if !set.detections.is_empty() {
            match distances.distance_map(name)? {
                Some(dmap) => {
                    for det in &set.detections {
                        if let Some((class, p)) = realtime::locate_detection(det, &dmap, &est, &gate) {
                            realtime::update_tracks(&mut tracks, &class, &p, drive.date, cfg.r_assoc);
                            localized += 1;
                        }
                    }
                }
                None => warn!("{name}: no distance map, detections ignored"),
            }
        }
        poses.push(est);
    }
    if tracker.overdue_frames() > 0 {
        info!(
            "{} frames were propagated past the re-anchoring cadence of {}",
            tracker.overdue_frames(),
            cfg.reanchor_every
        );
    }
    let mut events = change::detect_appearances(&tracks, &layer_in, &ccfg, &drive.vehicle_id, drive.date)?;
    events.extend(change::detect_removals(
        &tracks,
        &layer_in,
        &poses,
        &drive.intrinsics,
        &ccfg,
        &drive.vehicle_id,
        drive.date,
    )?);
    let updated = change::apply_to_temporary(&layer_in, &events, &drive.vehicle_id, drive.date, ccfg.match_radius_r)?;
    Ok(DriveOutcome {
        poses,
        tracks,
        events,
        layer: updated,
        skipped,
        localized,
    })
}

/// Drops detections below the score threshold, then localizes and
/// clusters the rest into a semantic layer.
pub fn build_metadata(
    model: &Reconstruction,
    detections: &[DetectionSet],
    masks: &impl MaskSource,
    palette: &ClassPalette,
    cfg: &PipelineConfig,
    date: NaiveDate,
) -> Result<MetadataStore> {
    let kept = detections
        .iter()
        .map(|d| filter_by_score(d, cfg.score_threshold))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let matcher = ClassMatcher::with_default_family(palette);
    Ok(metadata::generate_metadata(model, &kept, masks, &matcher, &cfg.metadata(), date)?)
}

/// Ground-truth signs (`id,class_name,status,...,lat_deg,lon_deg,alt_m,...`)
/// split into changes and unchanged signs, placed in `frame`.
pub fn read_truth_signs(r: impl Read, frame: &EnuFrame) -> Result<(Vec<TruthItem>, Vec<TruthItem>)> {
    let mut rd = csv::Reader::from_reader(r);
    let headers = rd.headers().map_err(|e| PipelineError::Invalid(e.to_string()))?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| PipelineError::Invalid(format!("truth signs: missing column {name}")))
    };
    let (ci, si, la, lo, al) = (col("class_name")?, col("status")?, col("lat_deg")?, col("lon_deg")?, col("alt_m")?);
    let mut changes = Vec::new();
    let mut unchanged = Vec::new();
    for (i, rec) in rd.records().enumerate() {
        let bad = |m: String| PipelineError::Invalid(format!("truth signs line {}: {m}", i + 2));
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let num = |k: usize| rec[k].trim().parse::<f64>().map_err(|e| bad(e.to_string()));
        let g = GeodeticCoord::new(num(la)?, num(lo)?, num(al)?).map_err(|e| bad(e.to_string()))?;
        let kind = match &rec[si] {
            "unchanged" => None,
            "removed" => Some(ChangeKind::Removed),
            "appeared" => Some(ChangeKind::Appeared),
            other => return Err(bad(format!("unknown status {other}"))),
        };
        let item = TruthItem {
            kind,
            class_name: rec[ci].to_string(),
            enu: frame.project(&g)?,
        };
        if kind.is_some() {
            changes.push(item);
        } else {
            unchanged.push(item);
        }
    }
    Ok((changes, unchanged))
}

pub const POSES_HEADER: &str = "image_name,source,e,n,u,lat_deg,lon_deg,alt_m,qw,qx,qy,qz";

/// Pose estimates with ENU and geodetic centers and the world→camera
/// quaternion.
pub fn write_poses(poses: &[PoseEstimate], frame: &EnuFrame, mut w: impl Write) -> Result<()> {
    let mut out = String::from(POSES_HEADER);
    out.push('\n');
    for p in poses {
        let g = frame.unproject(&p.center)?;
        let q = nalgebra::UnitQuaternion::from_matrix(&p.rotation_wc());
        let source = match p.source {
            PoseSource::Registered => "registered",
            PoseSource::Propagated => "propagated",
        };
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}\n",
            p.image_name, source, p.center.x, p.center.y, p.center.z, g.lat_deg, g.lon_deg, g.alt_m, q.w, q.i, q.j, q.k
        ));
    }
    w.write_all(out.as_bytes()).map_err(|e| io_err(Path::new("poses"), e))
}

/// Reads the `lat_deg,lon_deg,alt_m` columns of a poses file as
/// `(image name, position)`.
pub fn read_pose_positions(r: impl Read) -> Result<Vec<(String, GeodeticCoord)>> {
    let mut rd = csv::Reader::from_reader(r);
    let headers = rd.headers().map_err(|e| PipelineError::Invalid(e.to_string()))?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| PipelineError::Invalid(format!("poses: missing column {name}")))
    };
    let (ni, la, lo, al) = (col("image_name")?, col("lat_deg")?, col("lon_deg")?, col("alt_m")?);
    let mut out = Vec::new();
    for (i, rec) in rd.records().enumerate() {
        let bad = |m: String| PipelineError::Invalid(format!("poses line {}: {m}", i + 2));
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let num = |k: usize| rec[k].trim().parse::<f64>().map_err(|e| bad(e.to_string()));
        let g = GeodeticCoord::new(num(la)?, num(lo)?, num(al)?).map_err(|e| bad(e.to_string()))?;
        out.push((rec[ni].to_string(), g));
    }
    Ok(out)
}

pub fn write_tracks(tracks: &[ObservationTrack], frame: &EnuFrame, mut w: impl Write) -> Result<()> {
    let mut out = String::from("class_name,count,e,n,u,lat_deg,lon_deg,first_seen,last_seen\n");
    for t in tracks {
        let g = frame.unproject(&t.mean_enu)?;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            t.class_name, t.count, t.mean_enu.x, t.mean_enu.y, t.mean_enu.z, g.lat_deg, g.lon_deg, t.first_seen, t.last_seen
        ));
    }
    w.write_all(out.as_bytes()).map_err(|e| io_err(Path::new("tracks"), e))
}
