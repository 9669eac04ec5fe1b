//! Evaluation statistics.

use nalgebra::Vector3;
use serde::Serialize;
use thiserror::Error;

use crate::change::ChangeEvent;
use crate::geodesy::{EnuFrame, GeodesyError};
use crate::metadata::{MetadataError, MetadataStore};
use crate::pose::{GpsSample, PoseEstimate};
use crate::realtime::DistanceMap;
use crate::spatial::KdTree;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("{0} is empty")]
    Empty(&'static str),
    #[error("distance map {0}: dimensions differ from ground truth")]
    Dimensions(String),
    #[error(transparent)]
    Geodesy(#[from] GeodesyError),
    #[error(transparent)]
    Metadata(#[from] MetadataError),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ErrorStats {
    pub median: f64,
    pub std_dev: f64,
    pub mean: f64,
    pub n: usize,
}

impl ErrorStats {
    /// Population standard deviation; the median of an even count is the
    /// mean of the two middle values. Empty input gives all zeros.
    pub fn from_values(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self {
                median: 0.0,
                std_dev: 0.0,
                mean: 0.0,
                n: 0,
            };
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let median = if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) };
        let mean = v.iter().sum::<f64>() / n as f64;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        Self {
            median,
            std_dev: var.sqrt(),
            mean,
            n,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct ChannelErrors {
    pub abs_error: f64,
    pub rel_error: f64,
}

/// Pooled per-channel errors over a set of images.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct PixelErrors {
    pub depth: ChannelErrors,
    pub height: ChannelErrors,
    pub lateral: ChannelErrors,
    /// Labeled ground-truth pixels compared.
    pub pixels: usize,
    /// Per channel (depth, height, lateral): pixels left out of the relative
    /// error because the ground truth is zero.
    pub zero_gt_excluded: [usize; 3],
}

/// Absolute and relative error per channel, pooled over every labeled
/// ground-truth pixel of every pair. Pixels where the prediction is
/// unlabeled are skipped.
pub fn pixel_errors(pairs: &[(&DistanceMap, &DistanceMap)]) -> Result<PixelErrors> {
    // channel order in the map is (lateral, height, depth)
    const ORDER: [usize; 3] = [2, 1, 0];
    let mut abs = [0.0; 3];
    let mut rel = [0.0; 3];
    let mut rel_n = [0usize; 3];
    let mut n = 0usize;
    let mut excluded = [0usize; 3];
    for (pred, gt) in pairs {
        if pred.width != gt.width || pred.height != gt.height {
            return Err(MetricsError::Dimensions(pred.image_name.clone()));
        }
        for (p, g) in pred.pixels.iter().zip(&gt.pixels) {
            if g.iter().chain(p).any(|c| c.is_nan()) {
                continue;
            }
            n += 1;
            for (k, &c) in ORDER.iter().enumerate() {
                abs[k] += (p[c] - g[c]).abs();
                if g[c] == 0.0 {
                    excluded[k] += 1;
                } else {
                    rel[k] += (p[c] / g[c] - 1.0).abs();
                    rel_n[k] += 1;
                }
            }
        }
    }
    let ch = |k: usize| ChannelErrors {
        abs_error: if n > 0 { abs[k] / n as f64 } else { 0.0 },
        rel_error: if rel_n[k] > 0 { rel[k] / rel_n[k] as f64 } else { 0.0 },
    };
    Ok(PixelErrors {
        depth: ch(0),
        height: ch(1),
        lateral: ch(2),
        pixels: n,
        zero_gt_excluded: excluded,
    })
}

/// Distance from each estimate to the nearest reference sample, both in
/// `frame`.
pub fn pose_errors(estimates: &[PoseEstimate], reference: &[GpsSample], frame: &EnuFrame) -> Result<Vec<f64>> {
    if estimates.is_empty() {
        return Err(MetricsError::Empty("estimate list"));
    }
    if reference.is_empty() {
        return Err(MetricsError::Empty("reference trace"));
    }
    let pts = reference
        .iter()
        .enumerate()
        .map(|(i, s)| Ok((i, frame.project(&s.coord)?)))
        .collect::<Result<Vec<_>>>()?;
    let tree = KdTree::new(pts);
    Ok(estimates
        .iter()
        .map(|e| tree.nearest(&e.center).expect("non-empty").1)
        .collect())
}

pub fn pose_error_vs_trace(estimates: &[PoseEstimate], reference: &[GpsSample], frame: &EnuFrame) -> Result<ErrorStats> {
    Ok(ErrorStats::from_values(&pose_errors(estimates, reference, frame)?))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LocalizationMatch {
    pub predicted: usize,
    pub truth: usize,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LocalizationReport {
    pub stats: ErrorStats,
    pub matches: Vec<LocalizationMatch>,
    pub unmatched_pred: Vec<usize>,
    pub unmatched_truth: Vec<usize>,
}

/// Greedy nearest-first one-to-one matching of same-class entries within
/// `match_radius`, measured horizontally in the truth store's frame.
pub fn localization_report(predicted: &MetadataStore, truth: &MetadataStore, match_radius: f64) -> Result<LocalizationReport> {
    let frame = &truth.enu_frame;
    let hp = |e: &crate::metadata::MetadataEntry| frame.project_horizontal(e.lat_deg, e.lon_deg);
    let pp = predicted.entries.iter().map(hp).collect::<std::result::Result<Vec<_>, _>>()?;
    let tp = truth.entries.iter().map(hp).collect::<std::result::Result<Vec<_>, _>>()?;
    let mut pairs = Vec::new();
    for (i, p) in predicted.entries.iter().enumerate() {
        for (j, t) in truth.entries.iter().enumerate() {
            if p.class_name != t.class_name {
                continue;
            }
            let d = ((pp[i][0] - tp[j][0]).powi(2) + (pp[i][1] - tp[j][1]).powi(2)).sqrt();
            if d <= match_radius {
                pairs.push((d, i, j));
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut pred_used = vec![false; pp.len()];
    let mut truth_used = vec![false; tp.len()];
    let mut matches = Vec::new();
    for (d, i, j) in pairs {
        if !pred_used[i] && !truth_used[j] {
            pred_used[i] = true;
            truth_used[j] = true;
            matches.push(LocalizationMatch {
                predicted: i,
                truth: j,
                distance: d,
            });
        }
    }
    let dists: Vec<f64> = matches.iter().map(|m| m.distance).collect();
    Ok(LocalizationReport {
        stats: ErrorStats::from_values(&dists),
        matches,
        unmatched_pred: (0..pp.len()).filter(|&i| !pred_used[i]).collect(),
        unmatched_truth: (0..tp.len()).filter(|&j| !truth_used[j]).collect(),
    })
}

pub fn localization_error_stats(
    predicted: &MetadataStore,
    truth: &MetadataStore,
    match_radius: f64,
) -> Result<(ErrorStats, Vec<usize>, Vec<usize>)> {
    let r = localization_report(predicted, truth, match_radius)?;
    Ok((r.stats, r.unmatched_pred, r.unmatched_truth))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct ConfusionMatrix {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// `(tp + tn) / total`; 0 for an empty matrix.
    pub fn accuracy(&self) -> f64 {
        match self.total() {
            0 => 0.0,
            t => (self.tp + self.tn) as f64 / t as f64,
        }
    }
}

/// A ground-truth change or unchanged sign: kind, class and ENU position.
#[derive(Debug, Clone, PartialEq)]
pub struct TruthItem {
    pub kind: Option<crate::change::ChangeKind>,
    pub class_name: String,
    pub enu: Vector3<f64>,
}

/// Scores reported events against true changes and unchanged signs.
///
/// A report is a true positive when it has the kind and class of a true
/// change within `match_radius` (one report per change, nearest first).
/// Other reports are false positives. An unchanged sign is a true negative
/// unless a report of its class lies within `match_radius`.
pub fn change_confusion(
    reported: &[ChangeEvent],
    truth_changes: &[TruthItem],
    truth_unchanged: &[TruthItem],
    frame: &EnuFrame,
    match_radius: f64,
) -> Result<ConfusionMatrix> {
    let rp = reported
        .iter()
        .map(|e| frame.project_horizontal(e.position.lat_deg, e.position.lon_deg))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let hd = |a: [f64; 2], b: &Vector3<f64>| ((a[0] - b.x).powi(2) + (a[1] - b.y).powi(2)).sqrt();
    let mut pairs = Vec::new();
    for (i, e) in reported.iter().enumerate() {
        for (j, t) in truth_changes.iter().enumerate() {
            if t.kind == Some(e.kind) && t.class_name == e.class_name {
                let d = hd(rp[i], &t.enu);
                if d <= match_radius {
                    pairs.push((d, i, j));
                }
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut rep_used = vec![false; reported.len()];
    let mut change_hit = vec![false; truth_changes.len()];
    for (_, i, j) in pairs {
        if !rep_used[i] && !change_hit[j] {
            rep_used[i] = true;
            change_hit[j] = true;
        }
    }
    let tp = change_hit.iter().filter(|&&h| h).count();
    let tn = truth_unchanged
        .iter()
        .filter(|u| {
            !reported
                .iter()
                .zip(&rp)
                .any(|(e, p)| e.class_name == u.class_name && hd(*p, &u.enu) <= match_radius)
        })
        .count();
    Ok(ConfusionMatrix {
        tp,
        fp: rep_used.iter().filter(|&&u| !u).count(),
        fn_: truth_changes.len() - tp,
        tn,
    })
}
