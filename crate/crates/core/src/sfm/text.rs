use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::Vector3;

use super::{
    CameraIntrinsics, CameraModel, CameraPose, GeoRegistration, ImageRecord, Keypoint, Reconstruction, Result,
    ScenePoint, SfmError, TrackEntry, GEOREF_FILE,
};

const CAMERAS: &str = "cameras.txt";
const IMAGES: &str = "images.txt";
const POINTS: &str = "points3D.txt";

/// In-memory contents of a text model directory.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ModelText {
    pub cameras: String,
    pub images: String,
    pub points: String,
    pub georef: Option<String>,
}

fn io_err(path: &Path, source: std::io::Error) -> SfmError {
    SfmError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn parse_model(dir: &Path) -> Result<Reconstruction> {
    let (model, warnings) = parse_model_report(dir)?;
    for w in warnings {
        log::warn!("{}: {w}", dir.display());
    }
    Ok(model)
}

/// Parses the model and returns the non-fatal warnings (ignored distortion
/// parameters) alongside it.
pub fn parse_model_report(dir: &Path) -> Result<(Reconstruction, Vec<String>)> {
    let read = |name: &str| {
        let p = dir.join(name);
        fs::read_to_string(&p).map_err(|e| io_err(&p, e))
    };
    let georef_path = dir.join(GEOREF_FILE);
    let georef = if georef_path.exists() {
        Some(fs::read_to_string(&georef_path).map_err(|e| io_err(&georef_path, e))?)
    } else {
        None
    };
    let text = ModelText {
        cameras: read(CAMERAS)?,
        images: read(IMAGES)?,
        points: read(POINTS)?,
        georef,
    };
    parse_model_str(&text)
}

/// Data lines with their 1-based line numbers; `#` comments dropped.
fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim_start().starts_with('#'))
}

struct Fields<'a> {
    file: &'static str,
    line: usize,
    iter: std::str::SplitWhitespace<'a>,
}

impl<'a> Fields<'a> {
    fn new(file: &'static str, line: usize, text: &'a str) -> Self {
        Self {
            file,
            line,
            iter: text.split_whitespace(),
        }
    }

    fn err(&self, message: impl Into<String>) -> SfmError {
        SfmError::Malformed {
            file: self.file.to_string(),
            line: self.line,
            message: message.into(),
        }
    }

    fn next_str(&mut self, what: &str) -> Result<&'a str> {
        self.iter.next().ok_or_else(|| self.err(format!("missing {what}")))
    }

    fn next<T: std::str::FromStr>(&mut self, what: &str) -> Result<T> {
        let s = self.next_str(what)?;
        s.parse().map_err(|_| self.err(format!("invalid {what} '{s}'")))
    }

    fn next_f64(&mut self, what: &str) -> Result<f64> {
        let v: f64 = self.next(what)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(self.err(format!("non-finite {what}")))
        }
    }

    fn rest(&mut self) -> Vec<&'a str> {
        self.iter.by_ref().collect()
    }

    fn finish(&mut self) -> Result<()> {
        match self.iter.next() {
            Some(extra) => Err(self.err(format!("unexpected trailing field '{extra}'"))),
            None => Ok(()),
        }
    }
}

pub fn parse_model_str(text: &ModelText) -> Result<(Reconstruction, Vec<String>)> {
    let mut warnings = Vec::new();
    let cameras = parse_cameras(&text.cameras, &mut warnings)?;
    let images = parse_images(&text.images)?;
    let points = parse_points(&text.points)?;
    let georef = match &text.georef {
        Some(s) => {
            let g: GeoRegistration = serde_json::from_str(s).map_err(|e| SfmError::GeoRef(e.to_string()))?;
            g.origin.validate()?;
            Some(g)
        }
        None => None,
    };
    let model = Reconstruction {
        cameras,
        images,
        points,
        georef,
    };
    model.validate()?;
    Ok((model, warnings))
}

fn parse_cameras(text: &str, warnings: &mut Vec<String>) -> Result<BTreeMap<u32, CameraIntrinsics>> {
    let mut out = BTreeMap::new();
    for (line, l) in data_lines(text) {
        if l.trim().is_empty() {
            continue;
        }
        let mut f = Fields::new(CAMERAS, line, l);
        let camera_id: u32 = f.next("CAMERA_ID")?;
        let model_name = f.next_str("MODEL")?;
        let width: u32 = f.next("WIDTH")?;
        let height: u32 = f.next("HEIGHT")?;
        let params: Vec<f64> = f
            .rest()
            .iter()
            .map(|s| s.parse::<f64>().map_err(|_| f.err(format!("invalid parameter '{s}'"))))
            .collect::<Result<_>>()?;
        let expect = |n: usize| {
            if params.len() == n {
                Ok(())
            } else {
                Err(f.err(format!("{model_name} expects {n} parameters, got {}", params.len())))
            }
        };
        let (model, fx, fy, cx, cy) = match model_name {
            "SIMPLE_PINHOLE" => {
                expect(3)?;
                (CameraModel::SimplePinhole, params[0], params[0], params[1], params[2])
            }
            "PINHOLE" => {
                expect(4)?;
                (CameraModel::Pinhole, params[0], params[1], params[2], params[3])
            }
            "SIMPLE_RADIAL" => {
                expect(4)?;
                warnings.push(format!(
                    "{CAMERAS}:{line}: camera {camera_id} SIMPLE_RADIAL distortion k={} ignored",
                    params[3]
                ));
                (CameraModel::SimplePinhole, params[0], params[0], params[1], params[2])
            }
            other => {
                return Err(SfmError::UnknownModel {
                    file: CAMERAS.to_string(),
                    line,
                    model: other.to_string(),
                })
            }
        };
        let cam = CameraIntrinsics {
            camera_id,
            model,
            width,
            height,
            fx,
            fy,
            cx,
            cy,
        };
        if out.insert(camera_id, cam).is_some() {
            return Err(SfmError::DuplicateId {
                kind: "camera",
                id: camera_id.into(),
            });
        }
    }
    Ok(out)
}

fn parse_images(text: &str) -> Result<BTreeMap<u32, ImageRecord>> {
    let mut out = BTreeMap::new();
    let mut lines = data_lines(text).peekable();
    while let Some((line, l)) = lines.next() {
        if l.trim().is_empty() {
            continue;
        }
        let mut f = Fields::new(IMAGES, line, l);
        let image_id: u32 = f.next("IMAGE_ID")?;
        let qw = f.next_f64("QW")?;
        let qx = f.next_f64("QX")?;
        let qy = f.next_f64("QY")?;
        let qz = f.next_f64("QZ")?;
        let t = Vector3::new(f.next_f64("TX")?, f.next_f64("TY")?, f.next_f64("TZ")?);
        let camera_id: u32 = f.next("CAMERA_ID")?;
        let name = f.next_str("NAME")?.to_string();
        f.finish()?;
        let qnorm = (qw * qw + qx * qx + qy * qy + qz * qz).sqrt();
        if (qnorm - 1.0).abs() > 1e-6 {
            return Err(f.err(format!("quaternion norm {qnorm} is not 1")));
        }
        let pose = CameraPose::from_raw(qw, qx, qy, qz, t);

        // the keypoint line always follows, possibly empty
        let keypoints = match lines.next() {
            Some((kline, kl)) => parse_keypoints(kline, kl)?,
            None => Vec::new(),
        };
        let record = ImageRecord {
            image_id,
            name,
            pose,
            camera_id,
            keypoints,
        };
        if out.insert(image_id, record).is_some() {
            return Err(SfmError::DuplicateId {
                kind: "image",
                id: image_id.into(),
            });
        }
    }
    Ok(out)
}

fn parse_keypoints(line: usize, text: &str) -> Result<Vec<Keypoint>> {
    let mut f = Fields::new(IMAGES, line, text);
    let tokens = f.rest();
    if tokens.len() % 3 != 0 {
        return Err(f.err("keypoint line must hold X Y POINT3D_ID triples"));
    }
    tokens
        .chunks(3)
        .map(|c| {
            let x: f64 = c[0].parse().map_err(|_| f.err(format!("invalid keypoint x '{}'", c[0])))?;
            let y: f64 = c[1].parse().map_err(|_| f.err(format!("invalid keypoint y '{}'", c[1])))?;
            let id: i64 = c[2]
                .parse()
                .map_err(|_| f.err(format!("invalid POINT3D_ID '{}'", c[2])))?;
            let point3d_id = match id {
                -1 => None,
                id if id >= 0 => Some(id as u64),
                other => return Err(f.err(format!("invalid POINT3D_ID {other}"))),
            };
            if !(x.is_finite() && y.is_finite()) {
                return Err(f.err("non-finite keypoint coordinate"));
            }
            Ok(Keypoint { x, y, point3d_id })
        })
        .collect()
}

fn parse_points(text: &str) -> Result<BTreeMap<u64, ScenePoint>> {
    let mut out = BTreeMap::new();
    for (line, l) in data_lines(text) {
        if l.trim().is_empty() {
            continue;
        }
        let mut f = Fields::new(POINTS, line, l);
        let point3d_id: u64 = f.next("POINT3D_ID")?;
        let xyz = Vector3::new(f.next_f64("X")?, f.next_f64("Y")?, f.next_f64("Z")?);
        let rgb = [f.next("R")?, f.next("G")?, f.next("B")?];
        let reproj_error: f64 = f.next("ERROR")?;
        let rest = f.rest();
        if rest.len() % 2 != 0 {
            return Err(f.err("track must hold IMAGE_ID POINT2D_IDX pairs"));
        }
        let track = rest
            .chunks(2)
            .map(|c| {
                Ok(TrackEntry {
                    image_id: c[0].parse().map_err(|_| f.err(format!("invalid track IMAGE_ID '{}'", c[0])))?,
                    keypoint_index: c[1]
                        .parse()
                        .map_err(|_| f.err(format!("invalid track POINT2D_IDX '{}'", c[1])))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let point = ScenePoint {
            point3d_id,
            xyz,
            rgb,
            reproj_error,
            track,
        };
        if out.insert(point3d_id, point).is_some() {
            return Err(SfmError::DuplicateId {
                kind: "3D point",
                id: point3d_id,
            });
        }
    }
    Ok(out)
}

/// Canonical text form: ids ascending, floats in shortest round-trip form.
pub fn write_model_strings(r: &Reconstruction) -> ModelText {
    let mut cameras = String::new();
    cameras.push_str("# Camera list with one line of data per camera:\n");
    cameras.push_str("#   CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]\n");
    let _ = writeln!(cameras, "# Number of cameras: {}", r.cameras.len());
    for c in r.cameras.values() {
        let _ = match c.model {
            CameraModel::SimplePinhole => writeln!(
                cameras,
                "{} {} {} {} {} {} {}",
                c.camera_id,
                c.model.name(),
                c.width,
                c.height,
                c.fx,
                c.cx,
                c.cy
            ),
            CameraModel::Pinhole => writeln!(
                cameras,
                "{} {} {} {} {} {} {} {}",
                c.camera_id,
                c.model.name(),
                c.width,
                c.height,
                c.fx,
                c.fy,
                c.cx,
                c.cy
            ),
        };
    }

    let mut images = String::new();
    images.push_str("# Image list with two lines of data per image:\n");
    images.push_str("#   IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME\n");
    images.push_str("#   POINTS2D[] as (X, Y, POINT3D_ID)\n");
    let n_obs: usize = r.images.values().map(|im| im.registered_keypoints().count()).sum();
    let _ = writeln!(
        images,
        "# Number of images: {}, mean observations per image: {}",
        r.images.len(),
        if r.images.is_empty() { 0.0 } else { n_obs as f64 / r.images.len() as f64 }
    );
    for im in r.images.values() {
        let q = im.pose.rotation_wc.quaternion();
        let t = im.pose.translation_wc;
        let _ = writeln!(
            images,
            "{} {} {} {} {} {} {} {} {} {}",
            im.image_id, q.w, q.i, q.j, q.k, t.x, t.y, t.z, im.camera_id, im.name
        );
        let mut kp_line = String::new();
        for (i, kp) in im.keypoints.iter().enumerate() {
            if i > 0 {
                kp_line.push(' ');
            }
            match kp.point3d_id {
                Some(id) => {
                    let _ = write!(kp_line, "{} {} {}", kp.x, kp.y, id);
                }
                None => {
                    let _ = write!(kp_line, "{} {} -1", kp.x, kp.y);
                }
            }
        }
        images.push_str(&kp_line);
        images.push('\n');
    }

    let mut points = String::new();
    points.push_str("# 3D point list with one line of data per point:\n");
    points.push_str("#   POINT3D_ID, X, Y, Z, R, G, B, ERROR, TRACK[] as (IMAGE_ID, POINT2D_IDX)\n");
    let track_len: usize = r.points.values().map(|p| p.track.len()).sum();
    let _ = writeln!(
        points,
        "# Number of points: {}, mean track length: {}",
        r.points.len(),
        if r.points.is_empty() { 0.0 } else { track_len as f64 / r.points.len() as f64 }
    );
    for p in r.points.values() {
        let _ = write!(
            points,
            "{} {} {} {} {} {} {} {}",
            p.point3d_id, p.xyz.x, p.xyz.y, p.xyz.z, p.rgb[0], p.rgb[1], p.rgb[2], p.reproj_error
        );
        for t in &p.track {
            let _ = write!(points, " {} {}", t.image_id, t.keypoint_index);
        }
        points.push('\n');
    }

    let georef = r
        .georef
        .as_ref()
        .map(|g| serde_json::to_string_pretty(g).expect("georegistration serializes") + "\n");
    ModelText {
        cameras,
        images,
        points,
        georef,
    }
}

pub fn write_model(r: &Reconstruction, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let text = write_model_strings(r);
    let write = |name: &str, body: &str| {
        let p = dir.join(name);
        fs::write(&p, body).map_err(|e| io_err(&p, e))
    };
    write(CAMERAS, &text.cameras)?;
    write(IMAGES, &text.images)?;
    write(POINTS, &text.points)?;
    let georef_path = dir.join(GEOREF_FILE);
    match &text.georef {
        Some(g) => write(GEOREF_FILE, g)?,
        None if georef_path.exists() => fs::remove_file(&georef_path).map_err(|e| io_err(&georef_path, e))?,
        None => {}
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const CAMS: &str = "# comment\n1 PINHOLE 640 480 500 500 320 240\n";
    const IMGS: &str = "# Image list\n\
        1 1 0 0 0 0 0 0 1 a.jpg\n\
        10 20 0 30 40 -1\n\
        2 1 0 0 0 -1 0 0 1 b.jpg\n\
        15 22 0\n";
    const PTS: &str = "0 0.5 0.5 10 255 0 0 0.3 1 0 2 0\n";

    fn minimal() -> ModelText {
        ModelText {
            cameras: CAMS.into(),
            images: IMGS.into(),
            points: PTS.into(),
            georef: None,
        }
    }

    #[test]
    fn parses_minimal_model() {
        let (r, warnings) = parse_model_str(&minimal()).unwrap();
        assert!(warnings.is_empty());
        assert_eq!(r.cameras.len(), 1);
        assert_eq!(r.images.len(), 2);
        assert_eq!(r.images[&1].keypoints.len(), 2);
        assert_eq!(r.images[&1].keypoints[0].point3d_id, Some(0));
        assert_eq!(r.images[&1].keypoints[1].point3d_id, None);
        let p = &r.points[&0];
        assert_eq!(p.track.len(), 2);
        for t in &p.track {
            assert_eq!(r.images[&t.image_id].keypoints[t.keypoint_index].point3d_id, Some(0));
        }
        assert!(!r.is_geo_registered());
    }

    #[test]
    fn dangling_point_reports_image_and_index() {
        let mut t = minimal();
        t.images = t.images.replace("15 22 0", "15 22 99");
        match parse_model_str(&t) {
            Err(SfmError::DanglingPoint {
                image_id,
                keypoint_index,
                point3d_id,
            }) => assert_eq!((image_id, keypoint_index, point3d_id), (2, 0, 99)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_line_is_located() {
        let mut t = minimal();
        t.points = format!("# header\n{PTS}1 oops 0 0 1 2 3 0\n");
        match parse_model_str(&t) {
            Err(SfmError::Malformed { file, line, .. }) => {
                assert_eq!(file, "points3D.txt");
                assert_eq!(line, 3);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_ids_rejected() {
        let mut t = minimal();
        t.cameras.push_str("1 PINHOLE 640 480 500 500 320 240\n");
        assert!(matches!(parse_model_str(&t), Err(SfmError::DuplicateId { kind: "camera", .. })));
    }

    #[test]
    fn track_must_be_bidirectional() {
        let mut t = minimal();
        t.points = "0 0.5 0.5 10 255 0 0 0.3 1 0\n".into();
        assert!(matches!(parse_model_str(&t), Err(SfmError::TrackMismatch { image_id: 2, .. })));
    }

    #[test]
    fn unknown_model_rejected_and_radial_warns() {
        let mut t = minimal();
        t.cameras = "1 OPENCV 640 480 1 1 1 1 0 0 0 0\n".into();
        assert!(matches!(parse_model_str(&t), Err(SfmError::UnknownModel { .. })));
        t.cameras = "1 SIMPLE_RADIAL 640 480 500 320 240 0.01\n".into();
        let (r, w) = parse_model_str(&t).unwrap();
        assert_eq!(w.len(), 1);
        assert_eq!(r.cameras[&1].model, CameraModel::SimplePinhole);
        assert_eq!(r.cameras[&1].fy, 500.0);
    }

    #[test]
    fn empty_model_writes_header_only_files() {
        let text = write_model_strings(&Reconstruction::default());
        for body in [&text.cameras, &text.images, &text.points] {
            assert!(body.lines().all(|l| l.starts_with('#')));
        }
        let (r, _) = parse_model_str(&text).unwrap();
        assert_eq!(r, Reconstruction::default());
    }

    #[test]
    fn image_without_keypoints_round_trips() {
        let mut t = minimal();
        t.images.push_str("3 1 0 0 0 0 0 0 1 c.jpg\n\n");
        let (r, _) = parse_model_str(&t).unwrap();
        assert!(r.images[&3].keypoints.is_empty());
        let (again, _) = parse_model_str(&write_model_strings(&r)).unwrap();
        assert_eq!(r, again);
    }

    #[test]
    fn ids_written_ascending() {
        let mut t = minimal();
        // images out of order in the source file
        t.images = "2 1 0 0 0 -1 0 0 1 b.jpg\n15 22 0\n1 1 0 0 0 0 0 0 1 a.jpg\n10 20 0 30 40 -1\n".into();
        let (r, _) = parse_model_str(&t).unwrap();
        let out = write_model_strings(&r);
        let ids: Vec<&str> = out
            .images
            .lines()
            .filter(|l| !l.starts_with('#'))
            .step_by(2)
            .map(|l| l.split(' ').next().unwrap())
            .collect();
        assert_eq!(ids, vec!["1", "2"]);
    }
}
