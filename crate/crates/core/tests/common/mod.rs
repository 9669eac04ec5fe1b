#![allow(dead_code)]

use signmap::change::{ChangeKind, TemporaryLayer};
use signmap::config::PipelineConfig;
use signmap::metadata::MetadataStore;
use signmap::metrics::{change_confusion, ConfusionMatrix, TruthItem};
use signmap::pipeline::{build_metadata, georegister, process_drive, DriveInput, DriveOutcome, SynthDistances};
use signmap::sfm::Reconstruction;
use signmap::synth::{render_scene, Bundle, SyntheticScene, TruthStatus};

pub struct Run {
    pub bundle: Bundle,
    pub model: Reconstruction,
    pub semantic: MetadataStore,
    pub drives: Vec<DriveOutcome>,
    pub layer: TemporaryLayer,
}

/// Mapping pass, then every drive in order against one temporary layer.
pub fn run_scene(scene: &SyntheticScene, cfg: &PipelineConfig) -> Run {
    let bundle = render_scene(scene).expect("render");
    let reg = georegister(&bundle.model, &bundle.georef, None).expect("georegister");
    let semantic = build_metadata(
        &reg.model,
        &bundle.mapping_detections,
        &bundle.masks,
        &bundle.palette,
        cfg,
        scene.mapping_date,
    )
    .expect("metadata");
    let mut layer = TemporaryLayer::new(&semantic);
    let mut drives = Vec::new();
    for d in 0..bundle.drives.len() {
        let input = DriveInput::from_bundle(&bundle, d);
        let out = process_drive(&reg.model, &layer, &input, &SynthDistances::new(&bundle, d), cfg).expect("drive");
        layer = out.layer.clone();
        drives.push(out);
    }
    Run {
        bundle,
        model: reg.model,
        semantic,
        drives,
        layer,
    }
}

pub fn truth_items(bundle: &Bundle) -> (Vec<TruthItem>, Vec<TruthItem>) {
    let mut changes = Vec::new();
    let mut unchanged = Vec::new();
    for t in &bundle.truth {
        let kind = match t.status {
            TruthStatus::Unchanged => None,
            TruthStatus::Removed => Some(ChangeKind::Removed),
            TruthStatus::Appeared => Some(ChangeKind::Appeared),
        };
        let item = TruthItem {
            kind,
            class_name: t.class_name.clone(),
            enu: t.enu,
        };
        if kind.is_some() {
            changes.push(item);
        } else {
            unchanged.push(item);
        }
    }
    (changes, unchanged)
}

/// Scores the changes pending in the layer after all drives.
pub fn confusion(run: &Run, radius: f64) -> ConfusionMatrix {
    let (changes, unchanged) = truth_items(&run.bundle);
    let reported: Vec<_> = run.layer.pending.iter().map(|p| p.event.clone()).collect();
    change_confusion(&reported, &changes, &unchanged, &run.bundle.frame, radius).expect("confusion")
}
