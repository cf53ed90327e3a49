use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Matrix4, Rotation3, Vector3};

use super::GeometryError;

/// Pinhole calibration in pixels. Pixel `(u, v)` addresses the center of the
/// pixel in column `u`, row `v`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self, GeometryError> {
        if !(fx > 0.0 && fy > 0.0 && fx.is_finite() && fy.is_finite() && cx.is_finite() && cy.is_finite()) {
            return Err(GeometryError::InvalidIntrinsics(format!("fx={fx} fy={fy} cx={cx} cy={cy}")));
        }
        Ok(Self { fx, fy, cx, cy })
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// Ray direction `K⁻¹·(u, v, 1)ᵀ` with unit z.
    pub fn unproject(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    /// Principal point moved by a border of `left`/`top` pixels added to the image.
    pub fn shifted(&self, left: f64, top: f64) -> Self {
        Self { cx: self.cx + left, cy: self.cy + top, ..*self }
    }

    pub fn to_line(&self) -> String {
        format!("{} {} {} {}", self.fx, self.fy, self.cx, self.cy)
    }

    pub fn parse(text: &str) -> Result<Self, GeometryError> {
        let values = parse_floats(text)?;
        if values.len() != 4 {
            return Err(GeometryError::Parse(format!("expected 4 intrinsics values, found {}", values.len())));
        }
        Self::new(values[0], values[1], values[2], values[3])
    }

    pub fn read(path: &Path) -> Result<Self, GeometryError> {
        let text = std::fs::read_to_string(path).map_err(|e| GeometryError::file(path, e))?;
        Self::parse(&text).map_err(|e| GeometryError::Parse(format!("{}: {e}", path.display())))
    }

    pub fn write(&self, path: &Path) -> Result<(), GeometryError> {
        std::fs::write(path, self.to_line() + "\n").map_err(|e| GeometryError::file(path, e))
    }
}

/// Tolerance for the rotation checks in [`Pose::new`].
pub const ROTATION_TOLERANCE: f64 = 1e-9;

/// World-to-camera rigid transform: `p_cam = R·x_world + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Pose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        let det = rotation.determinant();
        if !(ortho <= ROTATION_TOLERANCE) || !((det - 1.0).abs() <= ROTATION_TOLERANCE) {
            return Err(GeometryError::InvalidPose(format!(
                "rotation is not orthonormal (max |RᵀR−I| = {ortho:e}, det = {det})"
            )));
        }
        if translation.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::InvalidPose("non-finite translation".into()));
        }
        Ok(Self { rotation, translation })
    }

    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self { rotation: Matrix3::identity(), translation: t }
    }

    /// Builds a pose from any rotation-like matrix by projecting it onto SO(3).
    pub fn from_nearest_rotation(m: &Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation: nearest_rotation(m), translation }
    }

    /// Exact rotation from axis-angle, then `t`.
    pub fn from_axis_angle(axis_angle: Vector3<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation: *Rotation3::new(axis_angle).matrix(), translation }
    }

    /// Camera at `eye` looking at `target`, with image rows pointing along
    /// `-up`. Camera axes: x right, y down, z forward.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Result<Self, GeometryError> {
        let forward = target - eye;
        if forward.norm() < 1e-12 {
            return Err(GeometryError::InvalidPose("eye and target coincide".into()));
        }
        let forward = forward.normalize();
        let right = forward.cross(&up);
        if right.norm() < 1e-9 {
            return Err(GeometryError::InvalidPose("viewing direction parallel to up".into()));
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * eye);
        Ok(Self { rotation, translation })
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// Camera center in world coordinates, `−Rᵀt`.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    /// World point expressed in the camera frame.
    pub fn transform(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x + self.translation
    }

    /// Camera-frame point expressed in the world frame.
    pub fn inverse_transform(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (x - self.translation)
    }

    /// Camera-to-world transform.
    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self { rotation: rt, translation: -(rt * self.translation) }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Self {
        Self {
            rotation: nearest_rotation(&(self.rotation * other.rotation)),
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn from_matrix(m: &Matrix4<f64>) -> Result<Self, GeometryError> {
        let last = m.fixed_view::<1, 4>(3, 0);
        if (last[0], last[1], last[2], last[3]) != (0.0, 0.0, 0.0, 1.0) {
            return Err(GeometryError::InvalidPose(format!("last row must be 0 0 0 1, got {last}")));
        }
        Self::new(m.fixed_view::<3, 3>(0, 0).into(), m.fixed_view::<3, 1>(0, 3).into())
    }

    /// Four lines of four values, each printed with round-trip precision.
    pub fn to_text(&self) -> String {
        let m = self.matrix();
        let mut out = String::new();
        for r in 0..4 {
            let row: Vec<String> = (0..4).map(|c| format!("{:?}", m[(r, c)])).collect();
            writeln!(out, "{}", row.join(" ")).expect("writing to a String");
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, GeometryError> {
        let values = parse_floats(text)?;
        if values.len() != 16 {
            return Err(GeometryError::Parse(format!("expected 16 pose values, found {}", values.len())));
        }
        Self::from_matrix(&Matrix4::from_row_slice(&values))
    }

    pub fn read(path: &Path) -> Result<Self, GeometryError> {
        let text = std::fs::read_to_string(path).map_err(|e| GeometryError::file(path, e))?;
        Self::parse(&text).map_err(|e| GeometryError::Parse(format!("{}: {e}", path.display())))
    }

    pub fn write(&self, path: &Path) -> Result<(), GeometryError> {
        std::fs::write(path, self.to_text()).map_err(|e| GeometryError::file(path, e))
    }
}

/// Closest rotation in the Frobenius sense.
pub fn nearest_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let (u, v_t) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        let mut u = u;
        u.column_mut(2).neg_mut();
        r = u * v_t;
    }
    r
}

fn parse_floats(text: &str) -> Result<Vec<f64>, GeometryError> {
    text.split_whitespace()
        .map(|tok| tok.parse::<f64>().map_err(|_| GeometryError::Parse(format!("bad number '{tok}'"))))
        .collect()
}
