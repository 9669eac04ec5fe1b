//! WGS84 geodetic / ECEF / local ENU conversions and the similarity
//! transform used to geo-register a reconstruction.
//!
//! All metric thresholds elsewhere in the crate are Euclidean meters in an
//! [`EnuFrame`].

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// WGS84 semi-major axis in meters.
pub const WGS84_A: f64 = 6_378_137.0;
/// WGS84 flattening.
pub const WGS84_F: f64 = 1.0 / 298.257_223_563;
/// WGS84 semi-minor axis in meters.
pub const WGS84_B: f64 = WGS84_A * (1.0 - WGS84_F);
/// First eccentricity squared.
pub const WGS84_E2: f64 = WGS84_F * (2.0 - WGS84_F);

const MAX_GEODETIC_ITERATIONS: usize = 32;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeodesyError {
    #[error("latitude {0} deg outside [-90, 90]")]
    Latitude(f64),
    #[error("longitude {0} deg outside (-180, 180]")]
    Longitude(f64),
    #[error("altitude {0} is not finite")]
    Altitude(f64),
    #[error("ECEF coordinate is not finite")]
    NonFiniteEcef,
    #[error("ECEF point too close to the Earth's center ({0} m)")]
    NearCenter(f64),
    #[error("ENU basis is not a proper rotation")]
    InvalidBasis,
    #[error("similarity estimation needs at least 3 correspondences, got {0}")]
    TooFewPoints(usize),
    #[error("correspondence lists differ in length ({src} vs {dst})")]
    LengthMismatch { src: usize, dst: usize },
    #[error("degenerate (collinear or coincident) correspondence configuration")]
    Degenerate,
    #[error("non-finite coordinate in correspondence {0}")]
    NonFinitePoint(usize),
}

pub type Result<T> = std::result::Result<T, GeodesyError>;

/// Latitude, longitude (degrees) and height above the WGS84 ellipsoid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeodeticCoord {
    pub lat_deg: f64,
    pub lon_deg: f64,
    pub alt_m: f64,
}

impl GeodeticCoord {
    pub fn new(lat_deg: f64, lon_deg: f64, alt_m: f64) -> Result<Self> {
        let g = Self { lat_deg, lon_deg, alt_m };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if !(-90.0..=90.0).contains(&self.lat_deg) {
            return Err(GeodesyError::Latitude(self.lat_deg));
        }
        if !(self.lon_deg > -180.0 && self.lon_deg <= 180.0) {
            return Err(GeodesyError::Longitude(self.lon_deg));
        }
        if !self.alt_m.is_finite() {
            return Err(GeodesyError::Altitude(self.alt_m));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EcefCoord {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl EcefCoord {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn to_vector(self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }

    pub fn from_vector(v: &Vector3<f64>) -> Self {
        Self::new(v.x, v.y, v.z)
    }
}

pub fn geodetic_to_ecef(g: &GeodeticCoord) -> Result<EcefCoord> {
    g.validate()?;
    let (sin_lat, cos_lat) = g.lat_deg.to_radians().sin_cos();
    let (sin_lon, cos_lon) = g.lon_deg.to_radians().sin_cos();
    // prime vertical radius of curvature
    let n = WGS84_A / (1.0 - WGS84_E2 * sin_lat * sin_lat).sqrt();
    Ok(EcefCoord {
        x: (n + g.alt_m) * cos_lat * cos_lon,
        y: (n + g.alt_m) * cos_lat * sin_lon,
        z: (n * (1.0 - WGS84_E2) + g.alt_m) * sin_lat,
    })
}

/// Iterative inverse of [`geodetic_to_ecef`].
///
/// Starts from Bowring's parametric-latitude estimate and refines
/// `tan(lat) = (z + e² N sin(lat)) / p` until the update drops below
/// 1e-15 rad. Height uses the form that stays well conditioned at the poles.
pub fn ecef_to_geodetic(e: &EcefCoord) -> Result<GeodeticCoord> {
    if !(e.x.is_finite() && e.y.is_finite() && e.z.is_finite()) {
        return Err(GeodesyError::NonFiniteEcef);
    }
    let r = (e.x * e.x + e.y * e.y + e.z * e.z).sqrt();
    if r < 1.0 {
        return Err(GeodesyError::NearCenter(r));
    }
    let p = e.x.hypot(e.y);
    let ep2 = WGS84_E2 / (1.0 - WGS84_E2);

    let beta = (WGS84_A * e.z).atan2(WGS84_B * p);
    let (sb, cb) = beta.sin_cos();
    let mut lat = (e.z + ep2 * WGS84_B * sb * sb * sb).atan2(p - WGS84_E2 * WGS84_A * cb * cb * cb);
    for _ in 0..MAX_GEODETIC_ITERATIONS {
        let s = lat.sin();
        let n = WGS84_A / (1.0 - WGS84_E2 * s * s).sqrt();
        let next = (e.z + WGS84_E2 * n * s).atan2(p);
        let done = (next - lat).abs() < 1e-15;
        lat = next;
        if done {
            break;
        }
    }
    let (s, c) = lat.sin_cos();
    let alt = p * c + e.z * s - WGS84_A * (1.0 - WGS84_E2 * s * s).sqrt();
    let mut lon = e.y.atan2(e.x).to_degrees();
    if lon <= -180.0 {
        lon += 360.0;
    }
    Ok(GeodeticCoord {
        lat_deg: lat.to_degrees().clamp(-90.0, 90.0),
        lon_deg: lon,
        alt_m: alt,
    })
}

/// Local East-North-Up tangent frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnuFrame {
    origin: GeodeticCoord,
    origin_ecef: Vector3<f64>,
    /// Rows are the east, north and up axes expressed in ECEF.
    basis: Matrix3<f64>,
}

impl EnuFrame {
    pub fn new(origin: GeodeticCoord) -> Result<Self> {
        let origin_ecef = geodetic_to_ecef(&origin)?.to_vector();
        let (sl, cl) = origin.lat_deg.to_radians().sin_cos();
        let (so, co) = origin.lon_deg.to_radians().sin_cos();
        #[rustfmt::skip]
        let basis = Matrix3::new(
            -so,       co,       0.0,
            -sl * co,  -sl * so, cl,
            cl * co,   cl * so,  sl,
        );
        let frame = Self { origin, origin_ecef, basis };
        frame.validate()?;
        Ok(frame)
    }

    pub fn validate(&self) -> Result<()> {
        let err = (self.basis * self.basis.transpose() - Matrix3::identity()).norm();
        if err >= 1e-12 || (self.basis.determinant() - 1.0).abs() > 1e-12 {
            return Err(GeodesyError::InvalidBasis);
        }
        Ok(())
    }

    pub fn origin(&self) -> &GeodeticCoord {
        &self.origin
    }

    /// ECEF → ENU rotation.
    pub fn basis(&self) -> &Matrix3<f64> {
        &self.basis
    }

    pub fn ecef_to_enu(&self, e: &EcefCoord) -> Vector3<f64> {
        self.basis * (e.to_vector() - self.origin_ecef)
    }

    pub fn enu_to_ecef(&self, v: &Vector3<f64>) -> EcefCoord {
        EcefCoord::from_vector(&(self.basis.transpose() * v + self.origin_ecef))
    }

    pub fn project(&self, g: &GeodeticCoord) -> Result<Vector3<f64>> {
        Ok(self.ecef_to_enu(&geodetic_to_ecef(g)?))
    }

    pub fn unproject(&self, v: &Vector3<f64>) -> Result<GeodeticCoord> {
        ecef_to_geodetic(&self.enu_to_ecef(v))
    }

    /// East/north of a point given only latitude and longitude, placed at
    /// the frame origin's height.
    pub fn project_horizontal(&self, lat_deg: f64, lon_deg: f64) -> Result<[f64; 2]> {
        let v = self.project(&GeodeticCoord::new(lat_deg, lon_deg, self.origin.alt_m)?)?;
        Ok([v.x, v.y])
    }
}

pub fn enu_project(frame: &EnuFrame, g: &GeodeticCoord) -> Result<Vector3<f64>> {
    frame.project(g)
}

pub fn enu_unproject(frame: &EnuFrame, v: &Vector3<f64>) -> Result<GeodeticCoord> {
    frame.unproject(v)
}

/// `p ↦ scale · rotation · p + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityTransform {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl SimilarityTransform {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.scale * (self.rotation * p) + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            scale: 1.0 / self.scale,
            rotation: rt,
            translation: -(rt * self.translation) / self.scale,
        }
    }

    /// Root-mean-square of `‖apply(src) − dst‖` over the correspondences.
    pub fn rms_residual(&self, src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> f64 {
        if src.is_empty() {
            return 0.0;
        }
        let sum: f64 = src
            .iter()
            .zip(dst)
            .map(|(s, d)| (self.apply(s) - d).norm_squared())
            .sum();
        (sum / src.len() as f64).sqrt()
    }
}

pub fn apply_similarity(t: &SimilarityTransform, p: &Vector3<f64>) -> Vector3<f64> {
    t.apply(p)
}

/// Least-squares similarity (Umeyama) mapping `src` onto `dst`.
///
/// Rejects configurations whose cross-covariance has fewer than two
/// significant singular values (all points collinear or coincident).
pub fn estimate_similarity(
    src: &[Vector3<f64>],
    dst: &[Vector3<f64>],
) -> Result<SimilarityTransform> {
    if src.len() != dst.len() {
        return Err(GeodesyError::LengthMismatch {
            src: src.len(),
            dst: dst.len(),
        });
    }
    if src.len() < 3 {
        return Err(GeodesyError::TooFewPoints(src.len()));
    }
    for (i, (s, d)) in src.iter().zip(dst).enumerate() {
        if !(s.iter().all(|v| v.is_finite()) && d.iter().all(|v| v.is_finite())) {
            return Err(GeodesyError::NonFinitePoint(i));
        }
    }

    let n = src.len() as f64;
    let mu_src = src.iter().sum::<Vector3<f64>>() / n;
    let mu_dst = dst.iter().sum::<Vector3<f64>>() / n;

    let mut cov = Matrix3::zeros();
    let mut var_src = 0.0;
    for (s, d) in src.iter().zip(dst) {
        let sc = s - mu_src;
        cov += (d - mu_dst) * sc.transpose();
        var_src += sc.norm_squared();
    }
    cov /= n;
    var_src /= n;

    let svd = cov.svd(true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(GeodesyError::Degenerate),
    };
    let mut sv: Vec<(usize, f64)> = svd.singular_values.iter().copied().enumerate().collect();
    sv.sort_by(|a, b| b.1.total_cmp(&a.1));
    let largest = sv[0].1;
    if var_src <= 0.0 || largest <= 0.0 || sv[1].1 < 1e-12 * largest {
        return Err(GeodesyError::Degenerate);
    }

    // Flip the axis of the smallest singular value when the orthogonal
    // factor would be a reflection.
    let mut d = Vector3::new(1.0, 1.0, 1.0);
    if u.determinant() * v_t.determinant() < 0.0 {
        d[sv[2].0] = -1.0;
    }
    let rotation = u * Matrix3::from_diagonal(&d) * v_t;
    let trace: f64 = (0..3).map(|i| svd.singular_values[i] * d[i]).sum();
    let scale = trace / var_src;
    if !(scale > 0.0) {
        return Err(GeodesyError::Degenerate);
    }
    let translation = mu_dst - scale * (rotation * mu_src);
    Ok(SimilarityTransform {
        scale,
        rotation,
        translation,
    })
}
