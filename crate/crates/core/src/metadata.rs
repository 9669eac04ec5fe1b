//! Initial semantic metadata: localize each detection from the 3D points
//! behind it, then merge same-class localizations closer than `t_d`.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use chrono::NaiveDate;
use nalgebra::Vector3;
use thiserror::Error;

use crate::geodesy::{EnuFrame, GeodesyError};
use crate::semantics::{keypoints_supporting, ClassMatcher, DetectionSet, MaskSource};
use crate::sfm::Reconstruction;

#[derive(Debug, Error)]
pub enum MetadataError {
    #[error("reconstruction is not geo-registered")]
    NotGeoRegistered,
    #[error("detections reference unknown image {0}")]
    UnknownImage(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("metadata CSV line {line}: {message}")]
    Csv { line: usize, message: String },
    #[error(transparent)]
    Geodesy(#[from] GeodesyError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, MetadataError>;

pub const CSV_HEADER: &str = "lat_deg,lon_deg,class_name,color,date_detected";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetadataGenConfig {
    /// Same-class localizations within this distance (m) become one entry.
    pub t_d: f64,
    /// Fewest supporting keypoints that still localize a detection.
    pub min_support: usize,
}

impl Default for MetadataGenConfig {
    fn default() -> Self {
        Self {
            t_d: 5.0,
            min_support: 3,
        }
    }
}

impl MetadataGenConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_d > 0.0 && self.t_d.is_finite()) {
            return Err(MetadataError::Config(format!("t_d must be positive, got {}", self.t_d)));
        }
        if self.min_support < 1 {
            return Err(MetadataError::Config("min_support must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetadataEntry {
    pub lat_deg: f64,
    pub lon_deg: f64,
    pub class_name: String,
    pub color: [u8; 3],
    pub date_detected: NaiveDate,
}

/// Semantic map layer: entries plus the frame used for metric queries.
///
/// Entries carry no height, so metric positions are east/north in the
/// frame, evaluated at the frame origin's height.
#[derive(Debug, Clone, PartialEq)]
pub struct MetadataStore {
    pub entries: Vec<MetadataEntry>,
    pub enu_frame: EnuFrame,
}

impl MetadataStore {
    pub fn new(entries: Vec<MetadataEntry>, enu_frame: EnuFrame) -> Self {
        Self { entries, enu_frame }
    }

    pub fn empty(enu_frame: EnuFrame) -> Self {
        Self::new(Vec::new(), enu_frame)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn horizontal(&self, e: &MetadataEntry) -> Result<[f64; 2]> {
        Ok(self.enu_frame.project_horizontal(e.lat_deg, e.lon_deg)?)
    }

    pub fn horizontal_positions(&self) -> Result<Vec<[f64; 2]>> {
        self.entries.iter().map(|e| self.horizontal(e)).collect()
    }
}

/// A single detection localized from its supporting 3D points.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub class_name: String,
    pub enu: Vector3<f64>,
    pub rgb: [f64; 3],
}

/// Localizes each detection as the centroid of the 3D points behind its
/// supporting keypoints. Detections with fewer than `min_support` such
/// points, or whose image has no mask, yield nothing.
pub fn candidate_points(
    r: &Reconstruction,
    detections: &[DetectionSet],
    masks: &impl MaskSource,
    matcher: &ClassMatcher<'_>,
    cfg: &MetadataGenConfig,
) -> Result<Vec<Candidate>> {
    cfg.validate()?;
    if !r.is_geo_registered() {
        return Err(MetadataError::NotGeoRegistered);
    }
    let mut out = Vec::new();
    for set in detections {
        let image = r
            .image_by_name(&set.image_name)
            .ok_or_else(|| MetadataError::UnknownImage(set.image_name.clone()))?;
        if set.detections.is_empty() {
            continue;
        }
        let Some(mask) = masks.mask(&image.name) else {
            log::warn!("no mask for {}; its detections cannot be localized", image.name);
            continue;
        };
        for det in &set.detections {
            let point_ids: BTreeSet<u64> = keypoints_supporting(image, det, mask, matcher)
                .into_iter()
                .filter_map(|i| image.keypoints[i].point3d_id)
                .collect();
            if point_ids.len() < cfg.min_support {
                log::debug!(
                    "{}: {} has {} supporting points, not localized",
                    image.name,
                    det.class_name,
                    point_ids.len()
                );
                continue;
            }
            let n = point_ids.len() as f64;
            let mut enu = Vector3::zeros();
            let mut rgb = [0.0; 3];
            for id in &point_ids {
                let p = &r.points[id];
                enu += p.xyz;
                for (acc, c) in rgb.iter_mut().zip(p.rgb) {
                    *acc += c as f64;
                }
            }
            out.push(Candidate {
                class_name: det.class_name.clone(),
                enu: enu / n,
                rgb: rgb.map(|c| c / n),
            });
        }
    }
    Ok(out)
}

struct DisjointSet {
    parent: Vec<usize>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        Self { parent: (0..n).collect() }
    }

    fn find(&mut self, mut i: usize) -> usize {
        while self.parent[i] != i {
            self.parent[i] = self.parent[self.parent[i]];
            i = self.parent[i];
        }
        i
    }

    /// Keeps the smaller index as root.
    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }

    fn groups(&mut self) -> BTreeMap<usize, Vec<usize>> {
        let mut g: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for i in 0..self.parent.len() {
            let r = self.find(i);
            g.entry(r).or_default().push(i);
        }
        g
    }
}

/// Groups candidate indices into clusters: single linkage at `t_d` within
/// each class, then clusters whose centroids still lie within `t_d` are
/// merged until none do. Clusters are ordered by their lowest member index.
pub fn cluster_indices(cands: &[Candidate], t_d: f64) -> Vec<Vec<usize>> {
    let n = cands.len();
    let mut ds = DisjointSet::new(n);
    for i in 0..n {
        for j in (i + 1)..n {
            if cands[i].class_name == cands[j].class_name && (cands[i].enu - cands[j].enu).norm() <= t_d {
                ds.union(i, j);
            }
        }
    }
    let mut clusters: Vec<Vec<usize>> = ds.groups().into_values().collect();

    loop {
        let centroids: Vec<Vector3<f64>> = clusters
            .iter()
            .map(|c| c.iter().map(|&i| cands[i].enu).sum::<Vector3<f64>>() / c.len() as f64)
            .collect();
        let mut merge = DisjointSet::new(clusters.len());
        let mut merged = false;
        for a in 0..clusters.len() {
            for b in (a + 1)..clusters.len() {
                let same_class = cands[clusters[a][0]].class_name == cands[clusters[b][0]].class_name;
                if same_class && (centroids[a] - centroids[b]).norm() <= t_d {
                    merge.union(a, b);
                    merged = true;
                }
            }
        }
        if !merged {
            break;
        }
        clusters = merge
            .groups()
            .into_values()
            .map(|group| {
                let mut members: Vec<usize> = group.into_iter().flat_map(|g| clusters[g].clone()).collect();
                members.sort_unstable();
                members
            })
            .collect();
        clusters.sort_by_key(|c| c[0]);
    }
    clusters
}

/// Merges candidates into metadata entries at the cluster centroids.
pub fn cluster_candidates(
    cands: &[Candidate],
    cfg: &MetadataGenConfig,
    frame: &EnuFrame,
    date: NaiveDate,
) -> Result<Vec<MetadataEntry>> {
    cfg.validate()?;
    cluster_indices(cands, cfg.t_d)
        .into_iter()
        .map(|members| {
            let n = members.len() as f64;
            let centroid = members.iter().map(|&i| cands[i].enu).sum::<Vector3<f64>>() / n;
            let mut rgb = [0.0; 3];
            for &i in &members {
                for (acc, c) in rgb.iter_mut().zip(cands[i].rgb) {
                    *acc += c;
                }
            }
            let g = frame.unproject(&centroid)?;
            Ok(MetadataEntry {
                lat_deg: g.lat_deg,
                lon_deg: g.lon_deg,
                class_name: cands[members[0]].class_name.clone(),
                color: rgb.map(|c| (c / n).round().clamp(0.0, 255.0) as u8),
                date_detected: date,
            })
        })
        .collect()
}

pub fn generate_metadata(
    r: &Reconstruction,
    detections: &[DetectionSet],
    masks: &impl MaskSource,
    matcher: &ClassMatcher<'_>,
    cfg: &MetadataGenConfig,
    date: NaiveDate,
) -> Result<MetadataStore> {
    let frame = r.enu_frame().ok_or(MetadataError::NotGeoRegistered)?;
    let cands = candidate_points(r, detections, masks, matcher, cfg)?;
    let entries = cluster_candidates(&cands, cfg, &frame, date)?;
    Ok(MetadataStore::new(entries, frame))
}

pub fn format_color(c: [u8; 3]) -> String {
    format!("#{:02X}{:02X}{:02X}", c[0], c[1], c[2])
}

pub fn parse_color(s: &str) -> Option<[u8; 3]> {
    let hex = s.strip_prefix('#')?;
    if hex.len() != 6 || !hex.chars().all(|c| c.is_ascii_hexdigit()) {
        return None;
    }
    let byte = |i: usize| u8::from_str_radix(&hex[i..i + 2], 16).ok();
    Some([byte(0)?, byte(2)?, byte(4)?])
}

pub fn write_metadata(entries: &[MetadataEntry], w: impl Write) -> Result<()> {
    let mut wr = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    let header: Vec<&str> = CSV_HEADER.split(',').collect();
    wr.write_record(&header).map_err(csv_io)?;
    for e in entries {
        wr.write_record([
            format!("{:.9}", e.lat_deg),
            format!("{:.9}", e.lon_deg),
            e.class_name.clone(),
            format_color(e.color),
            e.date_detected.format("%Y-%m-%d").to_string(),
        ])
        .map_err(csv_io)?;
    }
    wr.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> MetadataError {
    MetadataError::Io(std::io::Error::other(e))
}

pub fn read_metadata_entries(r: impl Read) -> Result<Vec<MetadataEntry>> {
    let mut rd = csv::ReaderBuilder::new().has_headers(false).from_reader(r);
    let mut out = Vec::new();
    for (i, rec) in rd.records().enumerate() {
        let line = i + 1;
        let rec = rec.map_err(|e| MetadataError::Csv {
            line,
            message: e.to_string(),
        })?;
        if line == 1 {
            let got: Vec<&str> = rec.iter().collect();
            if got.join(",") != CSV_HEADER {
                return Err(MetadataError::Csv {
                    line,
                    message: format!("expected header '{CSV_HEADER}'"),
                });
            }
            continue;
        }
        let err = |message: String| MetadataError::Csv { line, message };
        if rec.len() != 5 {
            return Err(err(format!("expected 5 fields, got {}", rec.len())));
        }
        let lat_deg: f64 = rec[0].parse().map_err(|_| err(format!("invalid latitude '{}'", &rec[0])))?;
        let lon_deg: f64 = rec[1].parse().map_err(|_| err(format!("invalid longitude '{}'", &rec[1])))?;
        crate::geodesy::GeodeticCoord::new(lat_deg, lon_deg, 0.0).map_err(|e| err(e.to_string()))?;
        let color = parse_color(&rec[3]).ok_or_else(|| err(format!("invalid color '{}'", &rec[3])))?;
        let date_detected = NaiveDate::parse_from_str(&rec[4], "%Y-%m-%d")
            .map_err(|_| err(format!("invalid date '{}'", &rec[4])))?;
        if rec[2].is_empty() {
            return Err(err("empty class name".into()));
        }
        out.push(MetadataEntry {
            lat_deg,
            lon_deg,
            class_name: rec[2].to_string(),
            color,
            date_detected,
        });
    }
    Ok(out)
}

pub fn read_metadata(r: impl Read, frame: EnuFrame) -> Result<MetadataStore> {
    Ok(MetadataStore::new(read_metadata_entries(r)?, frame))
}
