//! Per-image perception outputs (segmentation masks, detections) and their
//! transfer onto the sparse point cloud.

pub mod io;

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sfm::{ImageRecord, Reconstruction};

pub use io::{
    read_detections, read_mask_pgm, read_masks_dir, read_palette, write_detections, write_mask_pgm,
    write_palette,
};

/// Default detector confidence cut-off.
pub const DEFAULT_SCORE_THRESHOLD: f64 = 0.4;

pub const UNLABELED: u16 = 0;

#[derive(Debug, Error)]
pub enum SemanticsError {
    #[error("palette: {0}")]
    Palette(String),
    #[error("mask {image}: {message}")]
    Mask { image: String, message: String },
    #[error("detections line {line}: {message}")]
    Detection { line: usize, message: String },
    #[error("score threshold {0} outside [0, 1]")]
    Threshold(f64),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, SemanticsError>;

/// Segmentation class ids and names. Id 0 is always `unlabeled`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassPalette {
    names: BTreeMap<u16, String>,
    ids: HashMap<String, u16>,
}

impl Default for ClassPalette {
    fn default() -> Self {
        let mut p = Self {
            names: BTreeMap::new(),
            ids: HashMap::new(),
        };
        p.names.insert(UNLABELED, "unlabeled".into());
        p.ids.insert("unlabeled".into(), UNLABELED);
        p
    }
}

impl ClassPalette {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_entries<I, S>(entries: I) -> Result<Self>
    where
        I: IntoIterator<Item = (u16, S)>,
        S: Into<String>,
    {
        let mut p = Self::default();
        for (id, name) in entries {
            p.insert(id, name)?;
        }
        Ok(p)
    }

    pub fn insert(&mut self, id: u16, name: impl Into<String>) -> Result<()> {
        let name = name.into();
        if id == UNLABELED {
            if name == "unlabeled" {
                return Ok(());
            }
            return Err(SemanticsError::Palette(format!("id 0 is reserved for 'unlabeled', got '{name}'")));
        }
        if name.is_empty() || name.contains(['\t', '\n']) {
            return Err(SemanticsError::Palette(format!("invalid class name for id {id}")));
        }
        if self.names.contains_key(&id) {
            return Err(SemanticsError::Palette(format!("duplicate class id {id}")));
        }
        if self.ids.contains_key(&name) {
            return Err(SemanticsError::Palette(format!("duplicate class name '{name}'")));
        }
        self.ids.insert(name.clone(), id);
        self.names.insert(id, name);
        Ok(())
    }

    pub fn name(&self, id: u16) -> Option<&str> {
        self.names.get(&id).map(String::as_str)
    }

    pub fn id(&self, name: &str) -> Option<u16> {
        self.ids.get(name).copied()
    }

    pub fn contains(&self, id: u16) -> bool {
        self.names.contains_key(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (u16, &str)> {
        self.names.iter().map(|(k, v)| (*k, v.as_str()))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.len() <= 1
    }

    /// Ids whose name marks a traffic-sign segment (`...traffic-sign...`).
    pub fn default_sign_family(&self) -> BTreeSet<u16> {
        self.names
            .iter()
            .filter(|(_, n)| n.contains("traffic-sign"))
            .map(|(id, _)| *id)
            .collect()
    }
}

/// Decides whether a mask pixel supports a detection of a given class.
///
/// Detector classes are fine-grained sign types while segmentation only
/// knows a coarse sign segment, so any pixel in the sign family supports
/// any detection. A detection class that is itself a palette entry also
/// accepts its own id.
#[derive(Debug, Clone)]
pub struct ClassMatcher<'a> {
    pub palette: &'a ClassPalette,
    pub sign_family: BTreeSet<u16>,
}

impl<'a> ClassMatcher<'a> {
    pub fn new(palette: &'a ClassPalette, sign_family: BTreeSet<u16>) -> Self {
        Self { palette, sign_family }
    }

    pub fn with_default_family(palette: &'a ClassPalette) -> Self {
        Self::new(palette, palette.default_sign_family())
    }

    pub fn accepts(&self, detection_class: &str, pixel_class: u16) -> bool {
        if pixel_class == UNLABELED {
            return false;
        }
        self.sign_family.contains(&pixel_class) || self.palette.id(detection_class) == Some(pixel_class)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentationMask {
    pub image_name: String,
    pub width: u32,
    pub height: u32,
    /// Row-major class ids.
    pub class_ids: Vec<u16>,
}

impl SegmentationMask {
    pub fn filled(image_name: impl Into<String>, width: u32, height: u32, class_id: u16) -> Self {
        Self {
            image_name: image_name.into(),
            width,
            height,
            class_ids: vec![class_id; width as usize * height as usize],
        }
    }

    pub fn get(&self, px: u32, py: u32) -> Option<u16> {
        (px < self.width && py < self.height).then(|| self.class_ids[(py * self.width + px) as usize])
    }

    pub fn set(&mut self, px: u32, py: u32, class_id: u16) {
        if px < self.width && py < self.height {
            self.class_ids[(py * self.width + px) as usize] = class_id;
        }
    }

    /// Class at the nearest pixel to a subpixel location; `None` when the
    /// location lies outside the image.
    pub fn class_at(&self, x: f64, y: f64) -> Option<u16> {
        let (px, py) = nearest_pixel(x, y, self.width, self.height)?;
        self.get(px, py)
    }

    pub fn validate(&self, palette: &ClassPalette) -> Result<()> {
        if self.class_ids.len() != self.width as usize * self.height as usize {
            return Err(SemanticsError::Mask {
                image: self.image_name.clone(),
                message: "raster size does not match dimensions".into(),
            });
        }
        if let Some(bad) = self.class_ids.iter().find(|id| !palette.contains(**id)) {
            return Err(SemanticsError::Mask {
                image: self.image_name.clone(),
                message: format!("class id {bad} not in palette"),
            });
        }
        Ok(())
    }
}

/// Rounds a subpixel coordinate to its pixel, clamping the half-pixel
/// border; coordinates outside `[0, w) × [0, h)` give `None`.
pub fn nearest_pixel(x: f64, y: f64, width: u32, height: u32) -> Option<(u32, u32)> {
    if !(x >= 0.0 && x < width as f64 && y >= 0.0 && y < height as f64) {
        return None;
    }
    let px = (x.round() as u32).min(width - 1);
    let py = (y.round() as u32).min(height - 1);
    Some((px, py))
}

pub trait MaskSource {
    fn mask(&self, image_name: &str) -> Option<&SegmentationMask>;
}

impl MaskSource for HashMap<String, SegmentationMask> {
    fn mask(&self, image_name: &str) -> Option<&SegmentationMask> {
        self.get(image_name)
    }
}

impl MaskSource for BTreeMap<String, SegmentationMask> {
    fn mask(&self, image_name: &str) -> Option<&SegmentationMask> {
        self.get(image_name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub xmin: f64,
    pub ymin: f64,
    pub xmax: f64,
    pub ymax: f64,
}

impl BoundingBox {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.xmin && x <= self.xmax && y >= self.ymin && y <= self.ymax
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.xmin + self.xmax), 0.5 * (self.ymin + self.ymax))
    }

    pub fn intersects(&self, other: &BoundingBox) -> bool {
        self.xmin <= other.xmax && other.xmin <= self.xmax && self.ymin <= other.ymax && other.ymin <= self.ymax
    }

    pub fn clamped(&self, width: u32, height: u32) -> BoundingBox {
        let w = width as f64;
        let h = height as f64;
        BoundingBox {
            xmin: self.xmin.clamp(0.0, w),
            ymin: self.ymin.clamp(0.0, h),
            xmax: self.xmax.clamp(0.0, w),
            ymax: self.ymax.clamp(0.0, h),
        }
    }

    pub fn is_valid(&self) -> bool {
        [self.xmin, self.ymin, self.xmax, self.ymax].iter().all(|v| v.is_finite())
            && self.xmin < self.xmax
            && self.ymin < self.ymax
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub class_name: String,
    pub score: f64,
    pub bbox: BoundingBox,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DetectionSet {
    pub image_name: String,
    pub detections: Vec<Detection>,
}

/// Keeps detections with `score >= threshold`, preserving order.
pub fn filter_by_score(ds: &DetectionSet, threshold: f64) -> Result<DetectionSet> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(SemanticsError::Threshold(threshold));
    }
    Ok(DetectionSet {
        image_name: ds.image_name.clone(),
        detections: ds.detections.iter().filter(|d| d.score >= threshold).cloned().collect(),
    })
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SegmentationReport {
    pub labels: BTreeMap<u64, u16>,
    /// Observations whose image had no mask.
    pub skipped_missing_mask: usize,
    /// Observations whose keypoint fell outside the mask raster.
    pub skipped_out_of_bounds: usize,
}

/// Labels every 3D point by majority vote over the mask classes at its
/// track keypoints.
///
/// Unlabeled pixels do not vote. Ties go to the class with more
/// observations across the whole cloud, then to the lower id, so the
/// result does not depend on track order.
pub fn segment_point_cloud(r: &Reconstruction, masks: &impl MaskSource) -> SegmentationReport {
    let mut report = SegmentationReport::default();
    let mut votes: BTreeMap<u64, BTreeMap<u16, usize>> = BTreeMap::new();
    let mut totals: BTreeMap<u16, usize> = BTreeMap::new();

    for p in r.points.values() {
        let entry = votes.entry(p.point3d_id).or_default();
        for t in &p.track {
            let Some(image) = r.images.get(&t.image_id) else { continue };
            let Some(mask) = masks.mask(&image.name) else {
                report.skipped_missing_mask += 1;
                continue;
            };
            let kp = &image.keypoints[t.keypoint_index];
            match mask.class_at(kp.x, kp.y) {
                Some(UNLABELED) => {}
                Some(class) => {
                    *entry.entry(class).or_default() += 1;
                    *totals.entry(class).or_default() += 1;
                }
                None => report.skipped_out_of_bounds += 1,
            }
        }
    }

    for (pid, counts) in votes {
        let label = counts
            .iter()
            .max_by(|(ca, na), (cb, nb)| {
                na.cmp(nb)
                    .then_with(|| totals[ca].cmp(&totals[cb]))
                    .then_with(|| cb.cmp(ca))
            })
            .map(|(c, _)| *c)
            .unwrap_or(UNLABELED);
        report.labels.insert(pid, label);
    }
    report
}

/// Keypoints of `image` with a triangulated point that lie inside the
/// detection box and on a mask pixel accepted for the detection class.
pub fn keypoints_supporting(
    image: &ImageRecord,
    det: &Detection,
    mask: &SegmentationMask,
    matcher: &ClassMatcher<'_>,
) -> Vec<usize> {
    image
        .registered_keypoints()
        .filter(|(_, kp, _)| det.bbox.contains(kp.x, kp.y))
        .filter(|(_, kp, _)| {
            mask.class_at(kp.x, kp.y)
                .is_some_and(|c| matcher.accepts(&det.class_name, c))
        })
        .map(|(i, _, _)| i)
        .collect()
}
