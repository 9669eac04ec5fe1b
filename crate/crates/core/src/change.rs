//! Change detection against the semantic layer, the temporary layer that
//! accumulates unconfirmed changes, and promotion of permanent ones.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, Write};
use std::path::Path;

use chrono::NaiveDate;
use log::warn;
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geodesy::{EnuFrame, GeodesyError, GeodeticCoord};
use crate::metadata::{self, MetadataEntry, MetadataError, MetadataStore};
use crate::pose::PoseEstimate;
use crate::realtime::{ObservationTrack, RangeGate};
use crate::sfm::CameraIntrinsics;

pub const METADATA_FILE: &str = "metadata.csv";
pub const PENDING_FILE: &str = "pending.jsonl";

/// Color given to promoted appearances, which carry no color evidence.
pub const UNKNOWN_COLOR: [u8; 3] = [128, 128, 128];

#[derive(Debug, Error)]
pub enum ChangeError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("pending events line {line}: {message}")]
    Pending { line: usize, message: String },
    #[error(transparent)]
    Metadata(#[from] MetadataError),
    #[error(transparent)]
    Geodesy(#[from] GeodesyError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, ChangeError>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChangeDetectConfig {
    pub match_radius_r: f64,
    pub gate: RangeGate,
    pub score_threshold: f64,
    pub min_track_count: usize,
    pub removal_min_visible_frames: usize,
    pub fov_margin_deg: f64,
}

impl Default for ChangeDetectConfig {
    fn default() -> Self {
        Self {
            match_radius_r: 20.0,
            gate: RangeGate::default(),
            score_threshold: 0.4,
            min_track_count: 2,
            removal_min_visible_frames: 5,
            fov_margin_deg: 5.0,
        }
    }
}

impl ChangeDetectConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.match_radius_r > 0.0 && self.match_radius_r.is_finite()) {
            return Err(ChangeError::Config(format!(
                "match radius must be positive, got {}",
                self.match_radius_r
            )));
        }
        self.gate.validate().map_err(|e| ChangeError::Config(e.to_string()))?;
        if !(0.0..=1.0).contains(&self.score_threshold) {
            return Err(ChangeError::Config(format!(
                "score threshold {} outside [0, 1]",
                self.score_threshold
            )));
        }
        if !(self.fov_margin_deg >= 0.0) {
            return Err(ChangeError::Config("fov margin must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChangeKind {
    Appeared,
    Removed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Evidence {
    pub vehicle_id: String,
    pub date: NaiveDate,
    pub observations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChangeEvent {
    pub kind: ChangeKind,
    pub class_name: String,
    pub position: GeodeticCoord,
    pub evidence: Evidence,
    pub distance_to_nearest_same_class: Option<f64>,
}

/// One unconfirmed change and every (vehicle, date) that reported it.
#[derive(Debug, Clone, PartialEq)]
pub struct PendingChange {
    pub event: ChangeEvent,
    pub log: BTreeSet<(String, NaiveDate)>,
}

impl PendingChange {
    pub fn vehicle_count(&self) -> usize {
        self.log.iter().map(|(v, _)| v).collect::<BTreeSet<_>>().len()
    }

    pub fn day_count(&self) -> usize {
        self.log.iter().map(|(_, d)| d).collect::<BTreeSet<_>>().len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemporaryLayer {
    pub base: MetadataStore,
    pub pending: Vec<PendingChange>,
}

impl TemporaryLayer {
    pub fn new(semantic: &MetadataStore) -> Self {
        Self {
            base: semantic.clone(),
            pending: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PermanenceConfig {
    pub min_vehicles: usize,
    pub min_days: usize,
}

impl PermanenceConfig {
    pub fn new(min_vehicles: usize, min_days: usize) -> Result<Self> {
        if min_vehicles < 1 || min_days < 1 {
            return Err(ChangeError::Config("permanence thresholds must be at least 1".into()));
        }
        Ok(Self { min_vehicles, min_days })
    }
}

fn horizontal_of_track(frame: &EnuFrame, t: &ObservationTrack) -> Result<[f64; 2]> {
    let g = frame.unproject(&t.mean_enu)?;
    Ok(frame.project_horizontal(g.lat_deg, g.lon_deg)?)
}

fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Greedy one-to-one matching of same-class (track, entry) pairs within
/// `radius`, shortest distance first. Returns the entry matched by each
/// track.
fn greedy_match(
    tracks: &[(usize, &ObservationTrack, [f64; 2])],
    entries: &[MetadataEntry],
    entry_pos: &[[f64; 2]],
    radius: f64,
) -> Vec<Option<usize>> {
    let mut pairs = Vec::new();
    for (ti, (_, t, tp)) in tracks.iter().enumerate() {
        for (ei, e) in entries.iter().enumerate() {
            if e.class_name != t.class_name {
                continue;
            }
            let d = dist2(*tp, entry_pos[ei]);
            if d <= radius {
                pairs.push((d, ti, ei));
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut track_match = vec![None; tracks.len()];
    let mut entry_taken = vec![false; entries.len()];
    for (_, ti, ei) in pairs {
        if track_match[ti].is_none() && !entry_taken[ei] {
            track_match[ti] = Some(ei);
            entry_taken[ei] = true;
        }
    }
    track_match
}

fn nearest_same_class(class: &str, p: [f64; 2], entries: &[MetadataEntry], pos: &[[f64; 2]]) -> Option<f64> {
    entries
        .iter()
        .zip(pos)
        .filter(|(e, _)| e.class_name == class)
        .map(|(_, q)| dist2(p, *q))
        .min_by(f64::total_cmp)
}

/// Tracks, in the base layer's frame, that match no base entry within R.
/// Only tracks with at least `min_track_count` observations are considered.
/// Repeat sightings of a not yet promoted change are merged later by
/// [`apply_to_temporary`], so matching is against the base entries.
pub fn detect_appearances(
    tracks: &[ObservationTrack],
    layer: &TemporaryLayer,
    cfg: &ChangeDetectConfig,
    vehicle_id: &str,
    date: NaiveDate,
) -> Result<Vec<ChangeEvent>> {
    cfg.validate()?;
    let frame = &layer.base.enu_frame;
    let entries = &layer.base.entries;
    let pos = layer.base.horizontal_positions()?;
    let eligible = tracks
        .iter()
        .enumerate()
        .filter(|(_, t)| t.count >= cfg.min_track_count)
        .map(|(i, t)| Ok((i, t, horizontal_of_track(frame, t)?)))
        .collect::<Result<Vec<_>>>()?;
    let matched = greedy_match(&eligible, entries, &pos, cfg.match_radius_r);
    let mut out = Vec::new();
    for ((_, t, tp), m) in eligible.iter().zip(matched) {
        if m.is_some() {
            continue;
        }
        let g = frame.unproject(&t.mean_enu)?;
        out.push(ChangeEvent {
            kind: ChangeKind::Appeared,
            class_name: t.class_name.clone(),
            position: g,
            evidence: Evidence {
                vehicle_id: vehicle_id.to_string(),
                date,
                observations: t.count,
            },
            distance_to_nearest_same_class: nearest_same_class(&t.class_name, *tp, entries, &pos),
        });
    }
    Ok(out)
}

/// Number of poses whose horizontal field of view (widened by the margin)
/// and range gate contain the horizontal point `p`.
pub fn visible_frame_count(
    p: [f64; 2],
    poses: &[PoseEstimate],
    intrinsics: &CameraIntrinsics,
    cfg: &ChangeDetectConfig,
) -> usize {
    let half = intrinsics.horizontal_half_fov() + cfg.fov_margin_deg.to_radians();
    poses
        .iter()
        .filter(|pose| {
            let fwd = pose.rotation_cw * Vector3::z();
            let f = [fwd.x, fwd.y];
            let fn_ = (f[0] * f[0] + f[1] * f[1]).sqrt();
            let d = [p[0] - pose.center.x, p[1] - pose.center.y];
            let dn = (d[0] * d[0] + d[1] * d[1]).sqrt();
            if fn_ == 0.0 || !cfg.gate.contains(dn) {
                return false;
            }
            let cos = (f[0] * d[0] + f[1] * d[1]) / (fn_ * dn);
            cos.clamp(-1.0, 1.0).acos() <= half
        })
        .count()
}

/// Base entries that the traversal should have seen in at least
/// `removal_min_visible_frames` frames but that no track matches.
/// Every track counts as a sighting here, whatever its observation count.
pub fn detect_removals(
    tracks: &[ObservationTrack],
    layer: &TemporaryLayer,
    poses: &[PoseEstimate],
    intrinsics: &CameraIntrinsics,
    cfg: &ChangeDetectConfig,
    vehicle_id: &str,
    date: NaiveDate,
) -> Result<Vec<ChangeEvent>> {
    cfg.validate()?;
    let frame = &layer.base.enu_frame;
    let entries = &layer.base.entries;
    let pos = layer.base.horizontal_positions()?;
    let all = tracks
        .iter()
        .enumerate()
        .map(|(i, t)| Ok((i, t, horizontal_of_track(frame, t)?)))
        .collect::<Result<Vec<_>>>()?;
    let mut matched = vec![false; entries.len()];
    for ei in greedy_match(&all, entries, &pos, cfg.match_radius_r).into_iter().flatten() {
        matched[ei] = true;
    }
    let mut out = Vec::new();
    for (ei, e) in entries.iter().enumerate() {
        if matched[ei] {
            continue;
        }
        let seen = visible_frame_count(pos[ei], poses, intrinsics, cfg);
        if seen < cfg.removal_min_visible_frames {
            continue;
        }
        let nearest_track = all
            .iter()
            .filter(|(_, t, _)| t.class_name == e.class_name)
            .map(|(_, _, tp)| dist2(*tp, pos[ei]))
            .min_by(f64::total_cmp);
        out.push(ChangeEvent {
            kind: ChangeKind::Removed,
            class_name: e.class_name.clone(),
            position: GeodeticCoord::new(e.lat_deg, e.lon_deg, frame.origin().alt_m)?,
            evidence: Evidence {
                vehicle_id: vehicle_id.to_string(),
                date,
                observations: seen,
            },
            distance_to_nearest_same_class: nearest_track,
        });
    }
    Ok(out)
}

fn event_horizontal(frame: &EnuFrame, e: &ChangeEvent) -> Result<[f64; 2]> {
    Ok(frame.project_horizontal(e.position.lat_deg, e.position.lon_deg)?)
}

/// Appends events to the pending list. An event equivalent to a pending
/// one (same kind and class, within R) only extends that one's log.
pub fn apply_to_temporary(
    layer: &TemporaryLayer,
    events: &[ChangeEvent],
    vehicle_id: &str,
    date: NaiveDate,
    match_radius_r: f64,
) -> Result<TemporaryLayer> {
    let frame = layer.base.enu_frame;
    let mut out = layer.clone();
    for ev in events {
        let p = event_horizontal(&frame, ev)?;
        let mut existing = None;
        let mut best = f64::INFINITY;
        for (i, pc) in out.pending.iter().enumerate() {
            if pc.event.kind != ev.kind || pc.event.class_name != ev.class_name {
                continue;
            }
            let d = dist2(p, event_horizontal(&frame, &pc.event)?);
            if d <= match_radius_r && d < best {
                best = d;
                existing = Some(i);
            }
        }
        let key = (vehicle_id.to_string(), date);
        match existing {
            Some(i) => {
                out.pending[i].log.insert(key);
            }
            None => out.pending.push(PendingChange {
                event: ev.clone(),
                log: BTreeSet::from([key]),
            }),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Promotion {
    pub semantic: MetadataStore,
    pub layer: TemporaryLayer,
    pub appeared: usize,
    pub removed: usize,
    /// Removals whose target entry no longer exists.
    pub dropped: usize,
}

/// Applies pending changes reported by enough vehicles over enough days.
/// The returned layer's base is a fresh copy of the updated semantic layer.
pub fn promote(layer: &TemporaryLayer, pcfg: &PermanenceConfig, semantic: &MetadataStore, match_radius_r: f64) -> Result<Promotion> {
    let frame = semantic.enu_frame;
    let mut entries = semantic.entries.clone();
    let mut pending = Vec::new();
    let (mut appeared, mut removed, mut dropped) = (0, 0, 0);
    for pc in &layer.pending {
        if pc.vehicle_count() < pcfg.min_vehicles || pc.day_count() < pcfg.min_days {
            pending.push(pc.clone());
            continue;
        }
        let ev = &pc.event;
        match ev.kind {
            ChangeKind::Appeared => {
                let first = pc.log.iter().map(|(_, d)| *d).min().unwrap_or(ev.evidence.date);
                entries.push(MetadataEntry {
                    lat_deg: ev.position.lat_deg,
                    lon_deg: ev.position.lon_deg,
                    class_name: ev.class_name.clone(),
                    color: UNKNOWN_COLOR,
                    date_detected: first,
                });
                appeared += 1;
            }
            ChangeKind::Removed => {
                let p = event_horizontal(&frame, ev)?;
                let mut target = None;
                let mut best = f64::INFINITY;
                for (i, e) in entries.iter().enumerate() {
                    if e.class_name != ev.class_name {
                        continue;
                    }
                    let d = dist2(p, frame.project_horizontal(e.lat_deg, e.lon_deg)?);
                    if d <= match_radius_r && d < best {
                        best = d;
                        target = Some(i);
                    }
                }
                match target {
                    Some(i) => {
                        entries.remove(i);
                        removed += 1;
                    }
                    None => {
                        warn!(
                            "dropping removal of {} at ({:.7}, {:.7}): no such entry",
                            ev.class_name, ev.position.lat_deg, ev.position.lon_deg
                        );
                        dropped += 1;
                    }
                }
            }
        }
    }
    let semantic = MetadataStore::new(entries, frame);
    Ok(Promotion {
        layer: TemporaryLayer {
            base: semantic.clone(),
            pending,
        },
        semantic,
        appeared,
        removed,
        dropped,
    })
}

pub fn promote_permanent(
    layer: &TemporaryLayer,
    pcfg: &PermanenceConfig,
    semantic: &MetadataStore,
    match_radius_r: f64,
) -> Result<(MetadataStore, TemporaryLayer)> {
    let p = promote(layer, pcfg, semantic, match_radius_r)?;
    Ok((p.semantic, p.layer))
}

#[derive(Debug, Serialize, Deserialize)]
struct EventRecord {
    kind: ChangeKind,
    class: String,
    lat_deg: f64,
    lon_deg: f64,
    vehicle_id: String,
    date: NaiveDate,
    nearest_same_class_m: Option<f64>,
}

impl EventRecord {
    fn from_event(e: &ChangeEvent) -> Self {
        Self {
            kind: e.kind,
            class: e.class_name.clone(),
            lat_deg: e.position.lat_deg,
            lon_deg: e.position.lon_deg,
            vehicle_id: e.evidence.vehicle_id.clone(),
            date: e.evidence.date,
            nearest_same_class_m: e.distance_to_nearest_same_class,
        }
    }
}

/// One JSON object per event.
pub fn write_change_report(events: &[ChangeEvent], mut w: impl Write) -> std::io::Result<()> {
    for e in events {
        serde_json::to_writer(&mut w, &EventRecord::from_event(e))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads a change report. Positions come back at zero height and the
/// observation count is not part of the report, so it reads as 1.
pub fn read_change_report(r: impl BufRead) -> Result<Vec<ChangeEvent>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let err = |message: String| ChangeError::Pending { line: i + 1, message };
        let line = line.map_err(|e| err(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: EventRecord = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        out.push(ChangeEvent {
            kind: rec.kind,
            class_name: rec.class,
            position: GeodeticCoord::new(rec.lat_deg, rec.lon_deg, 0.0).map_err(|e| err(e.to_string()))?,
            evidence: Evidence {
                vehicle_id: rec.vehicle_id,
                date: rec.date,
                observations: 1,
            },
            distance_to_nearest_same_class: rec.nearest_same_class_m,
        });
    }
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
struct LogRecord {
    vehicle_id: String,
    date: NaiveDate,
}

#[derive(Debug, Serialize, Deserialize)]
struct PendingRecord {
    kind: ChangeKind,
    class: String,
    lat_deg: f64,
    lon_deg: f64,
    alt_m: f64,
    nearest_same_class_m: Option<f64>,
    evidence: Evidence,
    log: Vec<LogRecord>,
}

pub fn write_pending(pending: &[PendingChange], mut w: impl Write) -> std::io::Result<()> {
    for pc in pending {
        let e = &pc.event;
        let rec = PendingRecord {
            kind: e.kind,
            class: e.class_name.clone(),
            lat_deg: e.position.lat_deg,
            lon_deg: e.position.lon_deg,
            alt_m: e.position.alt_m,
            nearest_same_class_m: e.distance_to_nearest_same_class,
            evidence: e.evidence.clone(),
            log: pc
                .log
                .iter()
                .map(|(v, d)| LogRecord {
                    vehicle_id: v.clone(),
                    date: *d,
                })
                .collect(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_pending(r: impl BufRead) -> Result<Vec<PendingChange>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let err = |message: String| ChangeError::Pending { line: i + 1, message };
        let line = line.map_err(|e| err(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PendingRecord = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        if rec.log.is_empty() {
            return Err(err("empty observation log".into()));
        }
        out.push(PendingChange {
            event: ChangeEvent {
                kind: rec.kind,
                class_name: rec.class,
                position: GeodeticCoord::new(rec.lat_deg, rec.lon_deg, rec.alt_m).map_err(|e| err(e.to_string()))?,
                evidence: rec.evidence,
                distance_to_nearest_same_class: rec.nearest_same_class_m,
            },
            log: rec.log.into_iter().map(|l| (l.vehicle_id, l.date)).collect(),
        });
    }
    Ok(out)
}

fn io_err(path: &Path, source: std::io::Error) -> ChangeError {
    ChangeError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Writes `metadata.csv` and `pending.jsonl` into `dir`.
pub fn write_temporary_layer(layer: &TemporaryLayer, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut csv = Vec::new();
    metadata::write_metadata(&layer.base.entries, &mut csv)?;
    let p = dir.join(METADATA_FILE);
    fs::write(&p, csv).map_err(|e| io_err(&p, e))?;
    let mut jl = Vec::new();
    write_pending(&layer.pending, &mut jl).map_err(|e| io_err(dir, e))?;
    let p = dir.join(PENDING_FILE);
    fs::write(&p, jl).map_err(|e| io_err(&p, e))?;
    Ok(())
}

/// Reads a layer directory. A missing `pending.jsonl` means no pending
/// changes.
pub fn read_temporary_layer(dir: &Path, frame: EnuFrame) -> Result<TemporaryLayer> {
    let p = dir.join(METADATA_FILE);
    let f = fs::File::open(&p).map_err(|e| io_err(&p, e))?;
    let base = metadata::read_metadata(f, frame)?;
    let p = dir.join(PENDING_FILE);
    let pending = match fs::read(&p) {
        Ok(bytes) => read_pending(bytes.as_slice())?,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
        Err(e) => return Err(io_err(&p, e)),
    };
    Ok(TemporaryLayer { base, pending })
}
