use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use signmap::change::{self, PermanenceConfig, TemporaryLayer};
use signmap::config::{PermanenceSettings, PipelineConfig};
use signmap::geodesy::{EnuFrame, GeodeticCoord};
use signmap::metadata::{self, MetadataStore};
use signmap::metrics::{self, ErrorStats};
use signmap::pipeline::{self, io_err, open, write_file, DistanceDir, DriveInput, PipelineError};
use signmap::pose::{self, PoseEstimate, PoseSource};
use signmap::realtime::{self, DistanceMap};
use signmap::semantics::{self, io as sem_io};
use signmap::sfm::{self, Reconstruction};
use signmap::synth::{self, SyntheticScene, WriteOptions};

/// Builds and maintains a traffic-sign map layer from a sparse
/// reconstruction and crowdsourced drives.
#[derive(Parser, Debug)]
#[command(name = "signmap", version)]
struct Cli {
    /// Config file, JSON or `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for anything random (only `simulate` uses one).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(flatten)]
    thresholds: Thresholds,
    #[command(subcommand)]
    command: Command,
}

/// Overrides for config-file values.
#[derive(Args, Debug, Default)]
struct Thresholds {
    /// Clustering distance T_D in meters [default: 5]
    #[arg(long = "t-d", global = true)]
    t_d: Option<f64>,
    /// Supporting 3D points needed per detection [default: 2]
    #[arg(long, global = true)]
    min_support: Option<usize>,
    /// Match radius R in meters [default: 20]
    #[arg(long, global = true)]
    match_radius: Option<f64>,
    /// Nearest usable camera-to-sign distance in meters [default: 3]
    #[arg(long, global = true)]
    u_min: Option<f64>,
    /// Farthest usable camera-to-sign distance in meters [default: 50]
    #[arg(long, global = true)]
    u_max: Option<f64>,
    /// Detections scoring below this are dropped [default: 0.4]
    #[arg(long, global = true)]
    score_threshold: Option<f64>,
    /// Observation-to-track association radius in meters [default: 10]
    #[arg(long, global = true)]
    r_assoc: Option<f64>,
    /// Observations a track needs to report an appearance [default: 2]
    #[arg(long, global = true)]
    min_track_count: Option<usize>,
    /// Frames a sign must have been in view to be reported removed [default: 5]
    #[arg(long, global = true)]
    removal_min_visible_frames: Option<usize>,
    /// Field-of-view margin in degrees for the removal check [default: 5]
    #[arg(long, global = true)]
    fov_margin_deg: Option<f64>,
    /// Farthest reference image usable for a pose, in meters [default: 50]
    #[arg(long, global = true)]
    max_ref_distance: Option<f64>,
    /// Frames between expected registrations [default: 30]
    #[arg(long, global = true)]
    reanchor_every: Option<usize>,
    /// Distinct vehicles needed to make a change permanent
    #[arg(long, global = true)]
    min_vehicles: Option<usize>,
    /// Distinct days needed to make a change permanent
    #[arg(long, global = true)]
    min_days: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Align a raw model to ENU from image (or point3D:<id>) correspondences.
    Georegister { model: PathBuf, correspondences: PathBuf },
    /// Label every 3D point with a class from the segmentation masks.
    Segment {
        model: PathBuf,
        masks: PathBuf,
        palette: PathBuf,
    },
    /// Build the semantic layer from a geo-registered model.
    MetadataGen {
        model: PathBuf,
        masks: PathBuf,
        palette: PathBuf,
        detections: PathBuf,
        /// Date stamped on every entry (YYYY-MM-DD).
        #[arg(long)]
        date: NaiveDate,
    },
    /// Write sparse distance-map labels for every image of a geo-registered model.
    LabelsGen { model: PathBuf },
    /// Compare one drive with the map and record the changes as pending.
    DetectChanges {
        model: PathBuf,
        /// Layer directory, or a metadata CSV to start a fresh layer from.
        layer: PathBuf,
        drive: PathBuf,
        #[arg(long)]
        vehicle: String,
        #[arg(long)]
        date: NaiveDate,
    },
    /// Commit pending changes seen by enough vehicles on enough days.
    Promote { layer: PathBuf, semantic: PathBuf },
    /// Score pipeline outputs against ground truth.
    Eval {
        #[arg(long, value_enum)]
        kind: EvalKind,
        predicted: PathBuf,
        truth: PathBuf,
        /// Match radius for localization and change scoring [default: R]
        #[arg(long)]
        radius: Option<f64>,
    },
    /// Render a synthetic scene into an input bundle.
    Simulate {
        #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
        scene: Option<PathBuf>,
        /// basic, residential or campus
        #[arg(long)]
        preset: Option<String>,
        /// Also write ground-truth distance maps for the mapping frames.
        #[arg(long)]
        with_mapping_distance: bool,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum EvalKind {
    Pose,
    Pixel,
    Localization,
    Change,
}

struct Failure {
    code: u8,
    message: String,
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        Failure {
            code: if e.is_io() { 2 } else { 1 },
            message: e.to_string(),
        }
    }
}

fn invalid(message: impl Into<String>) -> Failure {
    Failure {
        code: 1,
        message: message.into(),
    }
}

fn convert<E: Into<PipelineError>>(e: E) -> Failure {
    Failure::from(e.into())
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Failure::from(io_err(path, e)))?;
            PipelineConfig::parse(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))?
        }
        None => PipelineConfig::default(),
    };
    let t = &cli.thresholds;
    macro_rules! set {
        ($($src:ident => $($dst:ident).+),* $(,)?) => {
            $(if let Some(v) = t.$src { cfg.$($dst).+ = v; })*
        };
    }
    set!(
        t_d => t_d,
        min_support => min_support,
        match_radius => match_radius_r,
        u_min => gate.u_min,
        u_max => gate.u_max,
        score_threshold => score_threshold,
        r_assoc => r_assoc,
        min_track_count => min_track_count,
        removal_min_visible_frames => removal_min_visible_frames,
        fov_margin_deg => fov_margin_deg,
        max_ref_distance => max_ref_distance,
        reanchor_every => reanchor_every,
    );
    match (t.min_vehicles, t.min_days, cfg.permanence) {
        (None, None, _) => {}
        (Some(v), Some(d), _) => {
            cfg.permanence = Some(PermanenceSettings {
                min_vehicles: v,
                min_days: d,
            })
        }
        (v, d, Some(p)) => {
            cfg.permanence = Some(PermanenceSettings {
                min_vehicles: v.unwrap_or(p.min_vehicles),
                min_days: d.unwrap_or(p.min_days),
            })
        }
        _ => return Err(invalid("--min-vehicles and --min-days must be given together")),
    }
    cfg.validate().map_err(invalid)?;
    Ok(cfg)
}

fn run(cli: Cli) -> Outcome {
    let cfg = load_config(&cli)?;
    let out = cli.out.clone().ok_or_else(|| invalid("--out <dir> is required"))?;
    fs::create_dir_all(&out).map_err(|e| Failure::from(io_err(&out, e)))?;
    match &cli.command {
        Command::Georegister { model, correspondences } => georegister(&cfg, model, correspondences, &out),
        Command::Segment { model, masks, palette } => segment(model, masks, palette, &out),
        Command::MetadataGen {
            model,
            masks,
            palette,
            detections,
            date,
        } => metadata_gen(&cfg, model, masks, palette, detections, *date, &out),
        Command::LabelsGen { model } => labels_gen(model, &out),
        Command::DetectChanges {
            model,
            layer,
            drive,
            vehicle,
            date,
        } => detect_changes(&cfg, model, layer, drive, vehicle, *date, &out),
        Command::Promote { layer, semantic } => promote(&cfg, layer, semantic, &out),
        Command::Eval {
            kind,
            predicted,
            truth,
            radius,
        } => {
            let radius = radius.unwrap_or(cfg.match_radius_r);
            if !(radius > 0.0) {
                return Err(invalid("--radius must be positive"));
            }
            match kind {
                EvalKind::Pose => eval_pose(predicted, truth, &out),
                EvalKind::Pixel => eval_pixel(predicted, truth, &out),
                EvalKind::Localization => eval_localization(predicted, truth, radius, &out),
                EvalKind::Change => eval_change(predicted, truth, radius, &out),
            }
        }
        Command::Simulate {
            scene,
            preset,
            with_mapping_distance,
        } => simulate(cli.seed, scene.as_deref(), preset.as_deref(), *with_mapping_distance, &out),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Outcome {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| invalid(e.to_string()))?;
    text.push('\n');
    Ok(write_file(path, text.as_bytes())?)
}

fn registered_model(path: &Path) -> Result<(Reconstruction, EnuFrame), Failure> {
    let model = sfm::parse_model(path).map_err(convert)?;
    let frame = model
        .georef
        .as_ref()
        .ok_or_else(|| invalid(format!("{}: model is not geo-registered", path.display())))?
        .frame()
        .map_err(convert)?;
    Ok((model, frame))
}

fn read_palette(path: &Path) -> Result<semantics::ClassPalette, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::from(io_err(path, e)))?;
    sem_io::read_palette(&text).map_err(convert)
}

fn georegister(cfg: &PipelineConfig, model: &Path, corr: &Path, out: &Path) -> Outcome {
    let raw = sfm::parse_model(model).map_err(convert)?;
    let items = pipeline::read_correspondences(open(corr)?)?;
    let reg = pipeline::georegister(&raw, &items, cfg.enu_origin)?;
    sfm::write_model(&reg.model, out).map_err(convert)?;
    println!(
        "georegistered {} images and {} points from {} correspondences; scale {:.6}, rms residual {:.4} m",
        reg.model.images.len(),
        reg.model.points.len(),
        items.len(),
        reg.transform.scale,
        reg.rms_residual
    );
    Ok(())
}

fn segment(model: &Path, masks: &Path, palette: &Path, out: &Path) -> Outcome {
    let r = sfm::parse_model(model).map_err(convert)?;
    let palette = read_palette(palette)?;
    let masks = sem_io::read_masks_dir(masks, &palette).map_err(convert)?;
    let report = semantics::segment_point_cloud(&r, &masks);
    let mut text = String::from("point3d_id,class_id,class_name\n");
    for (pid, class) in &report.labels {
        text.push_str(&format!("{pid},{class},{}\n", palette.name(*class).unwrap_or("")));
    }
    write_file(&out.join("point_labels.csv"), text.as_bytes())?;
    println!(
        "labeled {} of {} points; {} observations without a mask, {} out of bounds",
        report.labels.len(),
        r.points.len(),
        report.skipped_missing_mask,
        report.skipped_out_of_bounds
    );
    Ok(())
}

fn metadata_gen(
    cfg: &PipelineConfig,
    model: &Path,
    masks: &Path,
    palette: &Path,
    detections: &Path,
    date: NaiveDate,
    out: &Path,
) -> Outcome {
    let (r, _) = registered_model(model)?;
    let palette = read_palette(palette)?;
    let masks = sem_io::read_masks_dir(masks, &palette).map_err(convert)?;
    let dets = sem_io::read_detections(std::io::BufReader::new(open(detections)?)).map_err(convert)?;
    let store = pipeline::build_metadata(&r, &dets, &masks, &palette, cfg, date)?;
    let mut buf = Vec::new();
    metadata::write_metadata(&store.entries, &mut buf).map_err(convert)?;
    write_file(&out.join(change::METADATA_FILE), &buf)?;
    println!("wrote {} metadata entries", store.len());
    Ok(())
}

fn labels_gen(model: &Path, out: &Path) -> Outcome {
    let (r, _) = registered_model(model)?;
    let mut labeled = 0;
    for image in r.images.values() {
        let dmap = realtime::generate_sparse_labels(&r, image).map_err(convert)?;
        labeled += dmap.labeled_count();
        write_file(&out.join(format!("{}.b3dm", image.name)), &dmap.to_bytes())?;
    }
    println!("wrote {} label maps with {labeled} labeled pixels", r.images.len());
    Ok(())
}

fn read_layer(path: &Path, frame: EnuFrame) -> Result<TemporaryLayer, Failure> {
    if path.is_dir() {
        change::read_temporary_layer(path, frame).map_err(convert)
    } else {
        let store = metadata::read_metadata(open(path)?, frame).map_err(convert)?;
        Ok(TemporaryLayer::new(&store))
    }
}

fn detect_changes(
    cfg: &PipelineConfig,
    model: &Path,
    layer: &Path,
    drive: &Path,
    vehicle: &str,
    date: NaiveDate,
    out: &Path,
) -> Outcome {
    if vehicle.trim().is_empty() {
        return Err(invalid("--vehicle must not be empty"));
    }
    let (r, frame) = registered_model(model)?;
    let layer = read_layer(layer, frame)?;
    let input = DriveInput::load(drive, vehicle, date)?;
    let outcome = pipeline::process_drive(&r, &layer, &input, &DistanceDir(drive.join("distance")), cfg)?;

    let mut buf = Vec::new();
    change::write_change_report(&outcome.events, &mut buf).map_err(|e| Failure::from(io_err(out, e)))?;
    write_file(&out.join("changes.jsonl"), &buf)?;
    change::write_temporary_layer(&outcome.layer, &out.join("layer")).map_err(convert)?;
    let mut buf = Vec::new();
    pipeline::write_poses(&outcome.poses, &frame, &mut buf)?;
    write_file(&out.join("poses.csv"), &buf)?;
    let mut buf = Vec::new();
    pipeline::write_tracks(&outcome.tracks, &frame, &mut buf)?;
    write_file(&out.join("tracks.csv"), &buf)?;

    let appeared = outcome.events.iter().filter(|e| e.kind == change::ChangeKind::Appeared).count();
    println!(
        "{} frames posed ({} skipped), {} detections localized into {} tracks",
        outcome.poses.len(),
        outcome.skipped.len(),
        outcome.localized,
        outcome.tracks.len()
    );
    println!(
        "{} appeared, {} removed; {} changes pending",
        appeared,
        outcome.events.len() - appeared,
        outcome.layer.pending.len()
    );
    Ok(())
}

fn promote(cfg: &PipelineConfig, layer: &Path, semantic: &Path, out: &Path) -> Outcome {
    let p = cfg
        .permanence
        .ok_or_else(|| invalid("promotion needs permanence thresholds (--min-vehicles and --min-days)"))?;
    let pcfg = PermanenceConfig::new(p.min_vehicles, p.min_days).map_err(convert)?;
    let entries = metadata::read_metadata_entries(open(semantic)?).map_err(convert)?;
    let origin = match (cfg.enu_origin, entries.first()) {
        (Some(o), _) => o,
        (None, Some(e)) => GeodeticCoord::new(e.lat_deg, e.lon_deg, 0.0).map_err(convert)?,
        (None, None) => GeodeticCoord::new(0.0, 0.0, 0.0).map_err(convert)?,
    };
    let frame = EnuFrame::new(origin).map_err(convert)?;
    let semantic = MetadataStore::new(entries, frame);
    let layer = change::read_temporary_layer(layer, frame).map_err(convert)?;
    let result = change::promote(&layer, &pcfg, &semantic, cfg.match_radius_r).map_err(convert)?;

    let mut buf = Vec::new();
    metadata::write_metadata(&result.semantic.entries, &mut buf).map_err(convert)?;
    write_file(&out.join(change::METADATA_FILE), &buf)?;
    change::write_temporary_layer(&result.layer, &out.join("layer")).map_err(convert)?;
    println!(
        "{} appeared and {} removed made permanent, {} dropped; {} entries, {} still pending",
        result.appeared,
        result.removed,
        result.dropped,
        result.semantic.len(),
        result.layer.pending.len()
    );
    Ok(())
}

fn eval_pose(predicted: &Path, truth: &Path, out: &Path) -> Outcome {
    let positions = pipeline::read_pose_positions(open(predicted)?)?;
    let reference = pose::read_gps_trace(open(truth)?).map_err(convert)?;
    let first = reference
        .samples()
        .first()
        .ok_or_else(|| invalid(format!("{}: empty reference trace", truth.display())))?;
    let frame = EnuFrame::new(first.coord).map_err(convert)?;
    let estimates = positions
        .iter()
        .map(|(name, g)| {
            Ok(PoseEstimate {
                image_name: name.clone(),
                rotation_cw: nalgebra::Matrix3::identity(),
                center: frame.project(g)?,
                source: PoseSource::Propagated,
            })
        })
        .collect::<Result<Vec<_>, signmap::geodesy::GeodesyError>>()
        .map_err(convert)?;
    let errors = metrics::pose_errors(&estimates, reference.samples(), &frame).map_err(convert)?;
    let stats = ErrorStats::from_values(&errors);
    write_json(&out.join("pose_stats.json"), &stats)?;
    let mut text = String::from("image_name,error_m\n");
    for (e, err) in estimates.iter().zip(&errors) {
        text.push_str(&format!("{},{err}\n", e.image_name));
    }
    write_file(&out.join("pose_errors.csv"), text.as_bytes())?;
    println!("pose error over {} frames: median {:.3} m, std {:.3} m", stats.n, stats.median, stats.std_dev);
    Ok(())
}

fn read_b3dm_dir(dir: &Path) -> Result<BTreeMap<String, DistanceMap>, Failure> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| Failure::from(io_err(dir, e)))? {
        let path = entry.map_err(|e| Failure::from(io_err(dir, e)))?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()).and_then(|n| n.strip_suffix(".b3dm")) else {
            continue;
        };
        let bytes = pipeline::read_file(&path)?;
        out.insert(name.to_string(), DistanceMap::from_bytes(name, &bytes).map_err(convert)?);
    }
    Ok(out)
}

#[derive(Serialize)]
struct PixelSummary {
    #[serde(flatten)]
    errors: metrics::PixelErrors,
    images: usize,
    missing_predictions: Vec<String>,
}

fn eval_pixel(predicted: &Path, truth: &Path, out: &Path) -> Outcome {
    let pred = read_b3dm_dir(predicted)?;
    let gt = read_b3dm_dir(truth)?;
    let mut pairs = Vec::new();
    let mut missing = Vec::new();
    for (name, g) in &gt {
        match pred.get(name) {
            Some(p) => pairs.push((p, g)),
            None => missing.push(name.clone()),
        }
    }
    let pooled = metrics::pixel_errors(&pairs).map_err(convert)?;
    let mut text = String::from(
        "image_name,pixels,depth_abs_error,depth_rel_error,height_abs_error,height_rel_error,lateral_abs_error,lateral_rel_error\n",
    );
    for (p, g) in &pairs {
        let e = metrics::pixel_errors(&[(*p, *g)]).map_err(convert)?;
        text.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            g.image_name,
            e.pixels,
            e.depth.abs_error,
            e.depth.rel_error,
            e.height.abs_error,
            e.height.rel_error,
            e.lateral.abs_error,
            e.lateral.rel_error
        ));
    }
    write_file(&out.join("pixel_errors.csv"), text.as_bytes())?;
    let summary = PixelSummary {
        errors: pooled,
        images: pairs.len(),
        missing_predictions: missing,
    };
    write_json(&out.join("pixel_stats.json"), &summary)?;
    println!(
        "{} images, {} pixels: depth abs {:.4} m rel {:.4}",
        summary.images, pooled.pixels, pooled.depth.abs_error, pooled.depth.rel_error
    );
    Ok(())
}

fn store_from_csv(path: &Path, frame: Option<EnuFrame>) -> Result<MetadataStore, Failure> {
    let entries = metadata::read_metadata_entries(open(path)?).map_err(convert)?;
    let frame = match (frame, entries.first()) {
        (Some(f), _) => f,
        (None, Some(e)) => EnuFrame::new(GeodeticCoord::new(e.lat_deg, e.lon_deg, 0.0).map_err(convert)?).map_err(convert)?,
        (None, None) => EnuFrame::new(GeodeticCoord::new(0.0, 0.0, 0.0).map_err(convert)?).map_err(convert)?,
    };
    Ok(MetadataStore::new(entries, frame))
}

fn eval_localization(predicted: &Path, truth: &Path, radius: f64, out: &Path) -> Outcome {
    let truth = store_from_csv(truth, None)?;
    let pred = store_from_csv(predicted, Some(truth.enu_frame))?;
    let report = metrics::localization_report(&pred, &truth, radius).map_err(convert)?;
    write_json(&out.join("localization_stats.json"), &report)?;
    let mut text = String::from("predicted_index,truth_index,class_name,distance_m\n");
    for m in &report.matches {
        text.push_str(&format!(
            "{},{},{},{}\n",
            m.predicted, m.truth, truth.entries[m.truth].class_name, m.distance
        ));
    }
    write_file(&out.join("localization_errors.csv"), text.as_bytes())?;
    println!(
        "{} matched: median {:.3} m; {} unmatched predictions, {} unmatched truth",
        report.matches.len(),
        report.stats.median,
        report.unmatched_pred.len(),
        report.unmatched_truth.len()
    );
    Ok(())
}

#[derive(Serialize)]
struct ChangeSummary {
    #[serde(flatten)]
    confusion: metrics::ConfusionMatrix,
    accuracy: f64,
}

fn eval_change(predicted: &Path, truth: &Path, radius: f64, out: &Path) -> Outcome {
    let text = fs::read_to_string(truth).map_err(|e| Failure::from(io_err(truth, e)))?;
    let frame = first_truth_frame(&text)?;
    let (changes, unchanged) = pipeline::read_truth_signs(text.as_bytes(), &frame)?;
    // a layer directory is scored by its pending changes
    let reported = if predicted.is_dir() {
        change::read_temporary_layer(predicted, frame)
            .map_err(convert)?
            .pending
            .into_iter()
            .map(|p| p.event)
            .collect()
    } else {
        change::read_change_report(std::io::BufReader::new(open(predicted)?)).map_err(convert)?
    };
    let m = metrics::change_confusion(&reported, &changes, &unchanged, &frame, radius).map_err(convert)?;
    let summary = ChangeSummary {
        confusion: m,
        accuracy: m.accuracy(),
    };
    write_json(&out.join("change_stats.json"), &summary)?;
    println!("tp {} fp {} fn {} tn {}: accuracy {:.4}", m.tp, m.fp, m.fn_, m.tn, summary.accuracy);
    Ok(())
}

fn first_truth_frame(text: &str) -> Result<EnuFrame, Failure> {
    let mut rd = csv::Reader::from_reader(text.as_bytes());
    let headers = rd.headers().map_err(|e| invalid(e.to_string()))?.clone();
    let col = |n: &str| headers.iter().position(|h| h == n);
    let origin = match (col("lat_deg"), col("lon_deg"), rd.records().next()) {
        (Some(la), Some(lo), Some(Ok(rec))) => {
            let lat = rec[la].trim().parse().map_err(|_| invalid("truth signs line 2: bad lat_deg"))?;
            let lon = rec[lo].trim().parse().map_err(|_| invalid("truth signs line 2: bad lon_deg"))?;
            GeodeticCoord::new(lat, lon, 0.0).map_err(convert)?
        }
        _ => GeodeticCoord::new(0.0, 0.0, 0.0).map_err(convert)?,
    };
    EnuFrame::new(origin).map_err(convert)
}

fn simulate(seed: Option<u64>, scene: Option<&Path>, preset: Option<&str>, mapping_distance: bool, out: &Path) -> Outcome {
    let mut scene = match (scene, preset) {
        (Some(path), _) => {
            let text = fs::read_to_string(path).map_err(|e| Failure::from(io_err(path, e)))?;
            SyntheticScene::from_json(&text).map_err(convert)?
        }
        (None, Some(name)) => synth::preset(name, seed.unwrap_or(0)).map_err(convert)?,
        (None, None) => return Err(invalid("one of --scene or --preset is required")),
    };
    if let Some(s) = seed {
        scene.seed = s;
    }
    scene.validate().map_err(convert)?;
    let bundle = synth::render_scene(&scene).map_err(convert)?;
    for w in &bundle.warnings {
        log::warn!("{w}");
    }
    synth::write_bundle(&bundle, out, WriteOptions { mapping_distance }).map_err(convert)?;
    println!(
        "rendered {} signs, {} mapping frames, {} points, {} drives",
        bundle.truth.len(),
        bundle.mapping_frame_count(),
        bundle.model.points.len(),
        bundle.drives.len()
    );
    Ok(())
}
