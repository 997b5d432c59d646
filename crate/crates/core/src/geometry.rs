//! Pinhole camera with polynomial (Brown–Conrady style) lens correction.
//!
//! The correction polynomial maps a *distorted* point directly to its
//! *undistorted* position:
//!
//! ```text
//! r²  = x_d² + y_d²
//! rad = 1 + k1·r² + k2·r⁴ + k3·r⁶
//! x_u = x_d·rad + 2·p1·x_d·y_d + p2·(r² + 2·x_d²)
//! y_u = y_d·rad + p1·(r² + 2·y_d²) + 2·p2·x_d·y_d
//! ```
//!
//! [`TangentialForm::Printed`] swaps the last `y` term for `2·p1·x_d·y_d`,
//! which is the variant that ignores `p2` in the `y` equation.
//! The forward direction (undistorted → distorted) has no closed form and is
//! solved numerically by [`distort_pixel`].
//!
//! A [`CameraModel`] relates world points on a table plane to raw pixels:
//!
//! ```text
//! z_c · [x_p, y_p, 1]ᵀ = K · [R | t] · [x_w, y_w, z_w, 1]ᵀ
//! ```

use std::fmt;
use std::path::Path;

use nalgebra::{Matrix3, Matrix3x4, Matrix4, Vector3, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance used for algebraic identities (orthonormality, inverse residuals).
pub const IDENTITY_TOLERANCE: f64 = 1e-9;
/// Maximum number of iterations of the numerical inverse.
pub const MAX_INVERSE_ITERATIONS: usize = 50;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("intrinsic matrix is not invertible")]
    SingularIntrinsics,
    #[error("point is behind the camera (z_c = {z_c})")]
    BehindCamera { z_c: f64 },
    #[error("distortion inverse did not converge: residual {residual:e} after {iterations} iterations")]
    NonConvergence { residual: f64, iterations: usize },
    #[error("invalid calibration field `{field}`: {reason}")]
    InvariantViolation { field: &'static str, reason: String },
    #[error("calibration parse error: {0}")]
    Parse(String),
    #[error("cannot read calibration file {path}: {reason}")]
    Io { path: String, reason: String },
}

/// A point in pixel space (raw or undistorted, depending on context).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelPoint {
    pub x: f64,
    pub y: f64,
}

impl PixelPoint {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &PixelPoint) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// A point in the camera frame, meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl CameraPoint {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    fn to_vector(self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }
}

/// A point in the world frame, meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorldPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl WorldPoint {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn distance(&self, other: &WorldPoint) -> f64 {
        let (dx, dy, dz) = (self.x - other.x, self.y - other.y, self.z - other.z);
        (dx * dx + dy * dy + dz * dz).sqrt()
    }
}

impl fmt::Display for WorldPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({:.4}, {:.4}, {:.4})", self.x, self.y, self.z)
    }
}

/// Axis-aligned pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BoundingBox {
    /// Returns `None` unless `x_min < x_max` and `y_min < y_max`.
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Option<Self> {
        (x_min < x_max && y_min < y_max).then_some(Self { x_min, y_min, x_max, y_max })
    }

    pub fn centered(center: PixelPoint, half_width: f64, half_height: f64) -> Option<Self> {
        Self::new(center.x - half_width, center.y - half_height, center.x + half_width, center.y + half_height)
    }

    pub fn center(&self) -> PixelPoint {
        PixelPoint::new((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)
    }
}

/// Camera matrix `K` in pixel units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    matrix: Matrix3<f64>,
}

impl Intrinsics {
    pub fn new(matrix: Matrix3<f64>) -> Result<Self, GeometryError> {
        let bad = |reason: &str| GeometryError::InvariantViolation { field: "K", reason: reason.into() };
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(bad("entries must be finite"));
        }
        if matrix[(2, 0)] != 0.0 || matrix[(2, 1)] != 0.0 || matrix[(2, 2)] != 1.0 {
            return Err(bad("last row must be [0, 0, 1]"));
        }
        if matrix[(0, 0)] <= 0.0 || matrix[(1, 1)] <= 0.0 {
            return Err(bad("focal lengths must be positive"));
        }
        if matrix.try_inverse().is_none() {
            return Err(bad("matrix is singular"));
        }
        Ok(Self { matrix })
    }

    pub fn from_focal(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self, GeometryError> {
        Self::new(Matrix3::new(fx, 0.0, cx, 0.0, fy, cy, 0.0, 0.0, 1.0))
    }

    pub fn identity() -> Self {
        Self { matrix: Matrix3::identity() }
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.matrix
    }

    fn apply(&self, v: Vector3<f64>) -> PixelPoint {
        let p = self.matrix * v;
        PixelPoint::new(p.x / p.z, p.y / p.z)
    }
}

/// Which tangential cross term the `y` equation uses.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TangentialForm {
    /// `2·p2·x_d·y_d`, the standard model.
    #[default]
    Corrected,
    /// `2·p1·x_d·y_d`, reproducing the alternative printed form.
    Printed,
}

/// Lens correction coefficients `[k1, k2, p1, p2, k3]`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DistortionCoefficients {
    pub k1: f64,
    pub k2: f64,
    pub p1: f64,
    pub p2: f64,
    pub k3: f64,
    #[serde(default)]
    pub form: TangentialForm,
}

impl DistortionCoefficients {
    pub fn new(k1: f64, k2: f64, p1: f64, p2: f64, k3: f64) -> Result<Self, GeometryError> {
        let d = Self { k1, k2, p1, p2, k3, form: TangentialForm::Corrected };
        if [k1, k2, p1, p2, k3].iter().all(|v| v.is_finite()) {
            Ok(d)
        } else {
            Err(GeometryError::InvariantViolation { field: "dist", reason: "coefficients must be finite".into() })
        }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn with_form(mut self, form: TangentialForm) -> Self {
        self.form = form;
        self
    }

    pub fn is_zero(&self) -> bool {
        [self.k1, self.k2, self.p1, self.p2, self.k3].iter().all(|v| *v == 0.0)
    }

    /// Jacobian of [`undistort_pixel`] at `p`, row-major `[[dxu/dx, dxu/dy], [dyu/dx, dyu/dy]]`.
    fn jacobian(&self, p: PixelPoint) -> [[f64; 2]; 2] {
        let (x, y) = (p.x, p.y);
        let r2 = x * x + y * y;
        let rad = 1.0 + self.k1 * r2 + self.k2 * r2 * r2 + self.k3 * r2 * r2 * r2;
        // d(rad)/d(r²)
        let drad = self.k1 + 2.0 * self.k2 * r2 + 3.0 * self.k3 * r2 * r2;
        let cross = match self.form {
            TangentialForm::Corrected => self.p2,
            TangentialForm::Printed => self.p1,
        };
        let dxu_dx = rad + x * drad * 2.0 * x + 2.0 * self.p1 * y + self.p2 * 6.0 * x;
        let dxu_dy = x * drad * 2.0 * y + 2.0 * self.p1 * x + self.p2 * 2.0 * y;
        let dyu_dx = y * drad * 2.0 * x + self.p1 * 2.0 * x + 2.0 * cross * y;
        let dyu_dy = rad + y * drad * 2.0 * y + self.p1 * 6.0 * y + 2.0 * cross * x;
        [[dxu_dx, dxu_dy], [dyu_dx, dyu_dy]]
    }
}

/// Applies the correction polynomial to a distorted point.
///
/// Total: any finite input produces a finite output.
pub fn undistort_pixel(d: &DistortionCoefficients, p: PixelPoint) -> PixelPoint {
    let (x, y) = (p.x, p.y);
    let r2 = x * x + y * y;
    let rad = 1.0 + d.k1 * r2 + d.k2 * r2 * r2 + d.k3 * r2 * r2 * r2;
    let xu = x * rad + 2.0 * d.p1 * x * y + d.p2 * (r2 + 2.0 * x * x);
    let cross = match d.form {
        TangentialForm::Corrected => 2.0 * d.p2 * x * y,
        TangentialForm::Printed => 2.0 * d.p1 * x * y,
    };
    let yu = y * rad + d.p1 * (r2 + 2.0 * y * y) + cross;
    PixelPoint::new(xu, yu)
}

/// Inverts [`undistort_pixel`]: finds the distorted point whose correction is `p`.
///
/// Newton iteration on the 2×2 system, started at `p`, capped at
/// [`MAX_INVERSE_ITERATIONS`]. Converged when the residual is at most
/// [`IDENTITY_TOLERANCE`].
pub fn distort_pixel(d: &DistortionCoefficients, p: PixelPoint) -> Result<PixelPoint, GeometryError> {
    if d.is_zero() {
        return Ok(p);
    }
    let mut guess = p;
    let mut residual = f64::INFINITY;
    for _ in 0..MAX_INVERSE_ITERATIONS {
        let u = undistort_pixel(d, guess);
        let (ex, ey) = (u.x - p.x, u.y - p.y);
        residual = ex.hypot(ey);
        if residual <= IDENTITY_TOLERANCE {
            return Ok(guess);
        }
        let [[a, b], [c, e]] = d.jacobian(guess);
        let det = a * e - b * c;
        if !det.is_finite() || det.abs() < f64::EPSILON {
            break;
        }
        guess = PixelPoint::new(guess.x - (e * ex - b * ey) / det, guess.y - (a * ey - c * ex) / det);
        if !(guess.x.is_finite() && guess.y.is_finite()) {
            break;
        }
    }
    let u = undistort_pixel(d, guess);
    let final_residual = (u.x - p.x).hypot(u.y - p.y);
    if final_residual <= IDENTITY_TOLERANCE {
        Ok(guess)
    } else {
        Err(GeometryError::NonConvergence {
            residual: if final_residual.is_finite() { final_residual } else { residual },
            iterations: MAX_INVERSE_ITERATIONS,
        })
    }
}

/// Rigid world→camera transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Extrinsics {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Extrinsics {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        if rotation.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::InvariantViolation { field: "R", reason: "entries must be finite".into() });
        }
        if translation.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::InvariantViolation { field: "t", reason: "entries must be finite".into() });
        }
        let gram = rotation.transpose() * rotation - Matrix3::identity();
        let worst = gram.amax();
        if worst >= IDENTITY_TOLERANCE {
            return Err(GeometryError::InvariantViolation {
                field: "R",
                reason: format!("not orthonormal (max |RᵀR − I| = {worst:e})"),
            });
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() >= IDENTITY_TOLERANCE {
            return Err(GeometryError::InvariantViolation {
                field: "R",
                reason: format!("determinant {det} is not +1"),
            });
        }
        Ok(Self { rotation, translation })
    }

    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// `[R | t]`.
    pub fn projection_matrix(&self) -> Matrix3x4<f64> {
        let mut m = Matrix3x4::zeros();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.set_column(3, &self.translation);
        m
    }

    /// `[[R, t], [0, 1]]`.
    pub fn homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 4>(0, 0).copy_from(&self.projection_matrix());
        m
    }

    pub fn world_to_camera(&self, w: WorldPoint) -> CameraPoint {
        let c = self.projection_matrix() * Vector4::new(w.x, w.y, w.z, 1.0);
        CameraPoint::new(c.x, c.y, c.z)
    }

    /// Inverse rigid transform, computed in closed form as `Rᵀ(c − t)`.
    pub fn camera_to_world(&self, c: CameraPoint) -> WorldPoint {
        let w = self.rotation.transpose() * (c.to_vector() - self.translation);
        WorldPoint::new(w.x, w.y, w.z)
    }
}

/// Space in which the correction polynomial is evaluated.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistortionFrame {
    /// On normalized image coordinates, after `K⁻¹`.
    #[default]
    Normalized,
    /// On raw pixel coordinates, before `K⁻¹`.
    Raw,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraModel {
    pub intrinsics: Intrinsics,
    pub distortion: DistortionCoefficients,
    pub extrinsics: Extrinsics,
    /// Depth of the table plane along the camera's optical axis, meters.
    pub table_z_camera: f64,
    pub frame: DistortionFrame,
}

impl CameraModel {
    pub fn new(
        intrinsics: Intrinsics,
        distortion: DistortionCoefficients,
        extrinsics: Extrinsics,
        table_z_camera: f64,
    ) -> Result<Self, GeometryError> {
        if !(table_z_camera.is_finite() && table_z_camera > 0.0) {
            return Err(GeometryError::InvariantViolation {
                field: "table_z_camera",
                reason: format!("must be positive, got {table_z_camera}"),
            });
        }
        Ok(Self { intrinsics, distortion, extrinsics, table_z_camera, frame: DistortionFrame::Normalized })
    }

    /// Identity intrinsics and extrinsics, no distortion, table at depth 1.
    pub fn identity() -> Self {
        Self {
            intrinsics: Intrinsics::identity(),
            distortion: DistortionCoefficients::zero(),
            extrinsics: Extrinsics::identity(),
            table_z_camera: 1.0,
            frame: DistortionFrame::Normalized,
        }
    }

    pub fn with_frame(mut self, frame: DistortionFrame) -> Self {
        self.frame = frame;
        self
    }

    /// Maps an undistorted pixel to the raw pixel the sensor would report.
    pub fn distort(&self, p_undistorted: PixelPoint) -> Result<PixelPoint, GeometryError> {
        match self.frame {
            DistortionFrame::Raw => distort_pixel(&self.distortion, p_undistorted),
            DistortionFrame::Normalized => {
                let n = normalize(&self.intrinsics, p_undistorted)?;
                let d = distort_pixel(&self.distortion, n)?;
                Ok(self.intrinsics.apply(Vector3::new(d.x, d.y, 1.0)))
            }
        }
    }

    /// Maps a raw pixel to its undistorted pixel position.
    pub fn undistort(&self, p_raw: PixelPoint) -> Result<PixelPoint, GeometryError> {
        match self.frame {
            DistortionFrame::Raw => Ok(undistort_pixel(&self.distortion, p_raw)),
            DistortionFrame::Normalized => {
                let n = normalize(&self.intrinsics, p_raw)?;
                let u = undistort_pixel(&self.distortion, n);
                Ok(self.intrinsics.apply(Vector3::new(u.x, u.y, 1.0)))
            }
        }
    }

    /// World point to raw (distorted) pixel.
    pub fn project_raw(&self, w: WorldPoint) -> Result<PixelPoint, GeometryError> {
        let (p, _) = world_to_pixel(self, w)?;
        self.distort(p)
    }
}

fn normalize(k: &Intrinsics, p: PixelPoint) -> Result<PixelPoint, GeometryError> {
    let inv = k.matrix.try_inverse().ok_or(GeometryError::SingularIntrinsics)?;
    let n = inv * Vector3::new(p.x, p.y, 1.0);
    Ok(PixelPoint::new(n.x / n.z, n.y / n.z))
}

/// Back-projects an undistorted pixel to the camera-frame point at depth `z_c`.
pub fn pixel_to_camera(k: &Intrinsics, p_undistorted: PixelPoint, z_c: f64) -> Result<CameraPoint, GeometryError> {
    if z_c.is_nan() || z_c <= 0.0 {
        return Err(GeometryError::BehindCamera { z_c });
    }
    let n = normalize(k, p_undistorted)?;
    Ok(CameraPoint::new(n.x * z_c, n.y * z_c, z_c))
}

pub fn camera_to_world(e: &Extrinsics, c: CameraPoint) -> WorldPoint {
    e.camera_to_world(c)
}

pub fn world_to_camera(e: &Extrinsics, w: WorldPoint) -> CameraPoint {
    e.world_to_camera(w)
}

/// Projects a world point to its *undistorted* pixel and depth `z_c`.
pub fn world_to_pixel(m: &CameraModel, w: WorldPoint) -> Result<(PixelPoint, f64), GeometryError> {
    let h = m.intrinsics.matrix * m.extrinsics.projection_matrix() * Vector4::new(w.x, w.y, w.z, 1.0);
    let z_c = h.z;
    if z_c.is_nan() || z_c <= 0.0 {
        return Err(GeometryError::BehindCamera { z_c });
    }
    Ok((PixelPoint::new(h.x / z_c, h.y / z_c), z_c))
}

/// Raw pixel of an object lying on the table plane to its world position.
pub fn pixel_to_world(m: &CameraModel, p_raw: PixelPoint) -> Result<WorldPoint, GeometryError> {
    let undistorted = m.undistort(p_raw)?;
    let c = pixel_to_camera(&m.intrinsics, undistorted, m.table_z_camera)?;
    Ok(camera_to_world(&m.extrinsics, c))
}

/// On-disk calibration document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationDocument {
    #[serde(rename = "K")]
    pub k: Vec<f64>,
    pub dist: Vec<f64>,
    #[serde(rename = "R")]
    pub r: Vec<f64>,
    pub t: Vec<f64>,
    pub table_z_camera: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distortion_frame: Option<DistortionFrame>,
}

impl CalibrationDocument {
    pub fn from_model(m: &CameraModel) -> Self {
        let row_major = |mat: &Matrix3<f64>| (0..3).flat_map(|r| (0..3).map(move |c| mat[(r, c)])).collect();
        let d = &m.distortion;
        Self {
            k: row_major(&m.intrinsics.matrix),
            dist: vec![d.k1, d.k2, d.p1, d.p2, d.k3],
            r: row_major(&m.extrinsics.rotation),
            t: m.extrinsics.translation.iter().copied().collect(),
            table_z_camera: m.table_z_camera,
            distortion_frame: Some(m.frame),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("calibration document serializes")
    }

    pub fn into_model(self) -> Result<CameraModel, GeometryError> {
        fn exact<const N: usize>(field: &str, v: &[f64]) -> Result<[f64; N], GeometryError> {
            v.try_into().map_err(|_| GeometryError::Parse(format!("`{field}` must have {N} values, found {}", v.len())))
        }
        let k: [f64; 9] = exact("K", &self.k)?;
        let [k1, k2, p1, p2, k3] = exact::<5>("dist", &self.dist)?;
        let r: [f64; 9] = exact("R", &self.r)?;
        let t: [f64; 3] = exact("t", &self.t)?;
        let intrinsics = Intrinsics::new(Matrix3::from_row_slice(&k))?;
        let distortion = DistortionCoefficients::new(k1, k2, p1, p2, k3)?;
        let extrinsics = Extrinsics::new(Matrix3::from_row_slice(&r), Vector3::from(t))?;
        let model = CameraModel::new(intrinsics, distortion, extrinsics, self.table_z_camera)?;
        Ok(model.with_frame(self.distortion_frame.unwrap_or_default()))
    }
}

/// Parses and validates a calibration document.
pub fn load_calibration(text: &str) -> Result<CameraModel, GeometryError> {
    let doc: CalibrationDocument = toml::from_str(text).map_err(|e| GeometryError::Parse(e.message().to_string()))?;
    doc.into_model()
}

pub fn load_calibration_file(path: &Path) -> Result<CameraModel, GeometryError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| GeometryError::Io { path: path.display().to_string(), reason: e.to_string() })?;
    load_calibration(&text)
}

/// Maximum world-space error of the raw-pixel round trip over a grid of
/// table-plane points spanning normalized coordinates `[-0.5, 0.5] × [-0.4, 0.4]`.
pub fn round_trip_residual(m: &CameraModel, steps: usize) -> Result<f64, GeometryError> {
    let steps = steps.max(2);
    let mut worst: f64 = 0.0;
    for i in 0..steps {
        for j in 0..steps {
            let nx = -0.5 + i as f64 / (steps - 1) as f64;
            let ny = -0.4 + 0.8 * j as f64 / (steps - 1) as f64;
            let z = m.table_z_camera;
            let w = m.extrinsics.camera_to_world(CameraPoint::new(nx * z, ny * z, z));
            let raw = m.project_raw(w)?;
            let back = pixel_to_world(m, raw)?;
            worst = worst.max(back.distance(&w));
        }
    }
    Ok(worst)
}
