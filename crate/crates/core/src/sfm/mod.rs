//! Sparse reconstruction model: cameras, posed images with keypoints and
//! triangulated points, stored in the COLMAP text layout.
//!
//! Poses follow the world→camera convention: `x_cam = R·x_world + t`, so the
//! camera center is `C = −Rᵀ·t`.

pub mod text;

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geodesy::{EnuFrame, GeodesyError, GeodeticCoord, SimilarityTransform};

pub use text::{parse_model, parse_model_report, parse_model_str, write_model, write_model_strings, ModelText};

/// File name of the geo-registration sidecar stored next to the three model files.
pub const GEOREF_FILE: &str = "georegistration.json";

/// Points closer to the image plane than this are treated as not visible.
pub const MIN_DEPTH: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum SfmError {
    #[error("{file}:{line}: {message}")]
    Malformed {
        file: String,
        line: usize,
        message: String,
    },
    #[error("{file}:{line}: unsupported camera model {model}")]
    UnknownModel {
        file: String,
        line: usize,
        model: String,
    },
    #[error("duplicate {kind} id {id}")]
    DuplicateId { kind: &'static str, id: u64 },
    #[error("duplicate image name {0}")]
    DuplicateName(String),
    #[error("image {image_id} keypoint {keypoint_index} references missing 3D point {point3d_id}")]
    DanglingPoint {
        image_id: u32,
        keypoint_index: usize,
        point3d_id: u64,
    },
    #[error("image {image_id} references missing camera {camera_id}")]
    DanglingCamera { image_id: u32, camera_id: u32 },
    #[error("3D point {point3d_id} track entry ({image_id}, {keypoint_index}) does not resolve")]
    DanglingTrack {
        point3d_id: u64,
        image_id: u32,
        keypoint_index: usize,
    },
    #[error("image {image_id} keypoint {keypoint_index} points at 3D point {point3d_id} whose track does not list it")]
    TrackMismatch {
        image_id: u32,
        keypoint_index: usize,
        point3d_id: u64,
    },
    #[error("camera {camera_id}: {message}")]
    InvalidCamera { camera_id: u32, message: String },
    #[error("image {image_id}: {message}")]
    InvalidImage { image_id: u32, message: String },
    #[error("geo-registration sidecar: {0}")]
    GeoRef(String),
    #[error(transparent)]
    Geodesy(#[from] GeodesyError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, SfmError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CameraModel {
    SimplePinhole,
    Pinhole,
}

impl CameraModel {
    pub fn name(self) -> &'static str {
        match self {
            CameraModel::SimplePinhole => "SIMPLE_PINHOLE",
            CameraModel::Pinhole => "PINHOLE",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub camera_id: u32,
    pub model: CameraModel,
    pub width: u32,
    pub height: u32,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn pinhole(camera_id: u32, width: u32, height: u32, fx: f64, fy: f64, cx: f64, cy: f64) -> Self {
        Self {
            camera_id,
            model: CameraModel::Pinhole,
            width,
            height,
            fx,
            fy,
            cx,
            cy,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |message: &str| {
            Err(SfmError::InvalidCamera {
                camera_id: self.camera_id,
                message: message.to_string(),
            })
        };
        if !(self.fx > 0.0 && self.fy > 0.0 && self.fx.is_finite() && self.fy.is_finite()) {
            return bad("focal lengths must be positive");
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64) {
            return bad("principal point x outside image");
        }
        if !(self.cy >= 0.0 && self.cy < self.height as f64) {
            return bad("principal point y outside image");
        }
        if self.model == CameraModel::SimplePinhole && self.fx != self.fy {
            return bad("SIMPLE_PINHOLE requires fx == fy");
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// Half of the horizontal field of view, in radians.
    pub fn horizontal_half_fov(&self) -> f64 {
        let half_w = (self.cx).max(self.width as f64 - self.cx);
        (half_w / self.fx).atan()
    }

    pub fn contains_pixel(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && u < self.width as f64 && v >= 0.0 && v < self.height as f64
    }
}

/// World→camera rigid transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    pub rotation_wc: UnitQuaternion<f64>,
    pub translation_wc: Vector3<f64>,
}

impl CameraPose {
    pub fn identity() -> Self {
        Self {
            rotation_wc: UnitQuaternion::identity(),
            translation_wc: Vector3::zeros(),
        }
    }

    /// Builds a pose from a rotation matrix (world→camera) and camera center.
    pub fn from_rotation_center(rotation_wc: &Matrix3<f64>, center: &Vector3<f64>) -> Self {
        let q = UnitQuaternion::from_matrix(rotation_wc);
        let r = q.to_rotation_matrix();
        Self {
            rotation_wc: q,
            translation_wc: -(r * center),
        }
    }

    /// Accepts raw COLMAP `QW QX QY QZ`; components farther than 1e-12
    /// from unit norm are renormalized.
    pub fn from_raw(qw: f64, qx: f64, qy: f64, qz: f64, t: Vector3<f64>) -> Self {
        let q = Quaternion::new(qw, qx, qy, qz);
        let rotation_wc = if (q.norm() - 1.0).abs() > 1e-12 {
            UnitQuaternion::from_quaternion(q)
        } else {
            UnitQuaternion::new_unchecked(q)
        };
        Self {
            rotation_wc,
            translation_wc: t,
        }
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        *self.rotation_wc.to_rotation_matrix().matrix()
    }

    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation_wc * p + self.translation_wc
    }

    pub fn center(&self) -> Vector3<f64> {
        camera_center(self)
    }
}

/// `C = −Rᵀ·t`.
pub fn camera_center(pose: &CameraPose) -> Vector3<f64> {
    -(pose.rotation_wc.inverse() * pose.translation_wc)
}

/// Pinhole projection `P = K·[R|t]`; `None` when the point is behind the
/// camera (depth ≤ [`MIN_DEPTH`]) or lands outside the image.
pub fn project_point(k: &CameraIntrinsics, pose: &CameraPose, p_world: &Vector3<f64>) -> Option<(f64, f64)> {
    let (u, v) = project_unbounded(k, pose, p_world)?;
    k.contains_pixel(u, v).then_some((u, v))
}

/// Projection without the image-bounds check.
pub fn project_unbounded(k: &CameraIntrinsics, pose: &CameraPose, p_world: &Vector3<f64>) -> Option<(f64, f64)> {
    let x = pose.world_to_camera(p_world);
    if !(x.z > MIN_DEPTH) {
        return None;
    }
    Some((k.fx * x.x / x.z + k.cx, k.fy * x.y / x.z + k.cy))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub point3d_id: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub image_id: u32,
    pub name: String,
    pub pose: CameraPose,
    pub camera_id: u32,
    pub keypoints: Vec<Keypoint>,
}

impl ImageRecord {
    /// Indices of keypoints with a triangulated 3D point.
    pub fn registered_keypoints(&self) -> impl Iterator<Item = (usize, &Keypoint, u64)> {
        self.keypoints
            .iter()
            .enumerate()
            .filter_map(|(i, kp)| kp.point3d_id.map(|id| (i, kp, id)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct TrackEntry {
    pub image_id: u32,
    pub keypoint_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenePoint {
    pub point3d_id: u64,
    pub xyz: Vector3<f64>,
    pub rgb: [u8; 3],
    pub reproj_error: f64,
    pub track: Vec<TrackEntry>,
}

/// Origin of the local ENU frame the model was aligned to, plus the
/// similarity that mapped the raw SfM frame into it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeoRegistration {
    pub origin: GeodeticCoord,
    pub scale: f64,
    /// Row-major.
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl GeoRegistration {
    pub fn new(origin: GeodeticCoord, t: &SimilarityTransform) -> Self {
        let r = &t.rotation;
        Self {
            origin,
            scale: t.scale,
            rotation: [
                [r[(0, 0)], r[(0, 1)], r[(0, 2)]],
                [r[(1, 0)], r[(1, 1)], r[(1, 2)]],
                [r[(2, 0)], r[(2, 1)], r[(2, 2)]],
            ],
            translation: t.translation.into(),
        }
    }

    pub fn transform(&self) -> SimilarityTransform {
        let r = &self.rotation;
        SimilarityTransform {
            scale: self.scale,
            rotation: Matrix3::new(
                r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2],
            ),
            translation: Vector3::from(self.translation),
        }
    }

    pub fn frame(&self) -> std::result::Result<EnuFrame, GeodesyError> {
        EnuFrame::new(self.origin)
    }
}

/// Prefix for correspondence rows that name a triangulated point instead
/// of an image.
pub const POINT_KEY_PREFIX: &str = "point3D:";

/// A model location with known geodetic coordinates. `key` is an image name
/// (its camera center) or `point3D:<id>`.
#[derive(Debug, Clone, PartialEq)]
pub struct Correspondence {
    pub key: String,
    pub coord: GeodeticCoord,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Reconstruction {
    pub cameras: BTreeMap<u32, CameraIntrinsics>,
    pub images: BTreeMap<u32, ImageRecord>,
    pub points: BTreeMap<u64, ScenePoint>,
    /// Present once the model coordinates are ENU meters.
    pub georef: Option<GeoRegistration>,
}

impl Reconstruction {
    pub fn is_geo_registered(&self) -> bool {
        self.georef.is_some()
    }

    pub fn enu_frame(&self) -> Option<EnuFrame> {
        self.georef.as_ref().and_then(|g| g.frame().ok())
    }

    pub fn image_by_name(&self, name: &str) -> Option<&ImageRecord> {
        self.images.values().find(|im| im.name == name)
    }

    pub fn camera_of(&self, image: &ImageRecord) -> Option<&CameraIntrinsics> {
        self.cameras.get(&image.camera_id)
    }

    /// Model-frame position a correspondence key refers to.
    pub fn locate_key(&self, key: &str) -> Option<Vector3<f64>> {
        if let Some(id) = key.strip_prefix(POINT_KEY_PREFIX) {
            let id: u64 = id.parse().ok()?;
            return self.points.get(&id).map(|p| p.xyz);
        }
        self.image_by_name(key).map(|im| im.pose.center())
    }

    /// Checks camera validity, unique names and the two-way link between
    /// keypoints and point tracks.
    pub fn validate(&self) -> Result<()> {
        for cam in self.cameras.values() {
            cam.validate()?;
        }
        let mut names = std::collections::BTreeSet::new();
        for im in self.images.values() {
            if !names.insert(im.name.as_str()) {
                return Err(SfmError::DuplicateName(im.name.clone()));
            }
            if !self.cameras.contains_key(&im.camera_id) {
                return Err(SfmError::DanglingCamera {
                    image_id: im.image_id,
                    camera_id: im.camera_id,
                });
            }
            if (im.pose.rotation_wc.norm() - 1.0).abs() > 1e-9 {
                return Err(SfmError::InvalidImage {
                    image_id: im.image_id,
                    message: "rotation quaternion is not unit norm".into(),
                });
            }
            for (i, kp) in im.keypoints.iter().enumerate() {
                if !(kp.x.is_finite() && kp.y.is_finite()) {
                    return Err(SfmError::InvalidImage {
                        image_id: im.image_id,
                        message: format!("keypoint {i} is not finite"),
                    });
                }
                if let Some(pid) = kp.point3d_id {
                    let point = self.points.get(&pid).ok_or(SfmError::DanglingPoint {
                        image_id: im.image_id,
                        keypoint_index: i,
                        point3d_id: pid,
                    })?;
                    let listed = point.track.iter().any(|t| t.image_id == im.image_id && t.keypoint_index == i);
                    if !listed {
                        return Err(SfmError::TrackMismatch {
                            image_id: im.image_id,
                            keypoint_index: i,
                            point3d_id: pid,
                        });
                    }
                }
            }
        }
        for p in self.points.values() {
            for t in &p.track {
                let ok = self
                    .images
                    .get(&t.image_id)
                    .and_then(|im| im.keypoints.get(t.keypoint_index))
                    .is_some_and(|kp| kp.point3d_id == Some(p.point3d_id));
                if !ok {
                    return Err(SfmError::DanglingTrack {
                        point3d_id: p.point3d_id,
                        image_id: t.image_id,
                        keypoint_index: t.keypoint_index,
                    });
                }
            }
        }
        Ok(())
    }

    /// Applies a similarity to the model: points move to `s·R·p + t` and
    /// camera frames are rescaled so camera-frame offsets are in the new
    /// units.
    pub fn transformed(&self, t: &SimilarityTransform) -> Reconstruction {
        let mut out = self.clone();
        let r_t = t.rotation.transpose();
        for im in out.images.values_mut() {
            let r_wc = im.pose.rotation_matrix() * r_t;
            let center = t.apply(&im.pose.center());
            im.pose = CameraPose::from_rotation_center(&r_wc, &center);
        }
        for p in out.points.values_mut() {
            p.xyz = t.apply(&p.xyz);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Matrix4, Rotation3};

    fn k() -> CameraIntrinsics {
        CameraIntrinsics::pinhole(1, 1000, 750, 1000.0, 1000.0, 500.0, 375.0)
    }

    #[test]
    fn optical_axis_hits_principal_point() {
        let pose = CameraPose::identity();
        assert_eq!(project_point(&k(), &pose, &Vector3::new(0.0, 0.0, 10.0)), Some((500.0, 375.0)));
        assert_eq!(project_point(&k(), &pose, &Vector3::new(1.0, 0.0, 10.0)), Some((600.0, 375.0)));
        assert_eq!(project_point(&k(), &pose, &Vector3::new(0.0, 0.0, -1.0)), None);
        // lands at u = 1000 + 500, outside the 1000 px wide image
        assert_eq!(project_point(&k(), &pose, &Vector3::new(10.0, 0.0, 10.0)), None);
    }

    #[test]
    fn center_sign_flip() {
        assert_eq!(camera_center(&CameraPose::identity()), Vector3::zeros());
        let pose = CameraPose {
            rotation_wc: UnitQuaternion::identity(),
            translation_wc: Vector3::new(0.0, 0.0, -5.0),
        };
        assert_eq!(camera_center(&pose), Vector3::new(0.0, 0.0, 5.0));
    }

    #[test]
    fn center_matches_homogeneous_inverse() {
        let rot = Rotation3::from_euler_angles(0.4, -0.2, 1.3);
        let t = Vector3::new(3.0, -1.5, 8.0);
        let pose = CameraPose {
            rotation_wc: UnitQuaternion::from_rotation_matrix(&rot),
            translation_wc: t,
        };
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(rot.matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        let inv = m.try_inverse().unwrap();
        let c = camera_center(&pose);
        assert!((c - inv.fixed_view::<3, 1>(0, 3)).norm() < 1e-12);
        assert!((rot * c + t).norm() < 1e-9);
    }

    #[test]
    fn similarity_moves_points_and_cameras_consistently() {
        let mut r = Reconstruction::default();
        r.cameras.insert(1, k());
        let pose = CameraPose::from_rotation_center(
            Rotation3::from_euler_angles(0.1, 0.2, 0.3).matrix(),
            &Vector3::new(1.0, 2.0, 3.0),
        );
        r.images.insert(
            1,
            ImageRecord {
                image_id: 1,
                name: "a.jpg".into(),
                pose,
                camera_id: 1,
                keypoints: vec![],
            },
        );
        let p = Vector3::new(1.5, 2.2, 9.0);
        let before = pose.world_to_camera(&p);
        let t = SimilarityTransform {
            scale: 2.5,
            rotation: *Rotation3::from_euler_angles(-0.5, 0.7, 1.9).matrix(),
            translation: Vector3::new(10.0, 0.0, -3.0),
        };
        let moved = r.transformed(&t);
        let after = moved.images[&1].pose.world_to_camera(&t.apply(&p));
        assert!((after - 2.5 * before).norm() < 1e-9);
        let (u0, v0) = project_unbounded(&k(), &pose, &p).unwrap();
        let (u1, v1) = project_unbounded(&k(), &moved.images[&1].pose, &t.apply(&p)).unwrap();
        assert!((u0 - u1).abs() < 1e-9 && (v0 - v1).abs() < 1e-9);
    }
}
