use nalgebra::{Vector2, Vector3};

use super::{CameraIntrinsics, GeometryError, Pose};
use crate::numerics::Tensor;

/// Points closer than this to the image plane cannot be projected.
pub const MIN_DEPTH: f64 = 1e-9;

/// Pinhole projection of a world point: returns the pixel and the camera-frame depth.
pub fn project(pose: &Pose, k: &CameraIntrinsics, x: &Vector3<f64>) -> Result<(Vector2<f64>, f64), GeometryError> {
    let c = pose.transform(x);
    if !(c.z > MIN_DEPTH) {
        return Err(GeometryError::BehindCamera { depth: c.z });
    }
    Ok((Vector2::new(k.fx * c.x / c.z + k.cx, k.fy * c.y / c.z + k.cy), c.z))
}

/// Depth image in meters, row-major; zero marks a missing measurement.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl DepthMap {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self, GeometryError> {
        if width == 0 || height == 0 || values.len() != width * height {
            return Err(GeometryError::InvalidArgument(format!(
                "depth map {width}x{height} needs {} values, got {}",
                width * height,
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(GeometryError::InvalidArgument(format!("depth values must be finite and >= 0, found {v}")));
        }
        Ok(Self { width, height, values })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }
}

/// Per-cell scene coordinates `[3, H, W]` with a validity mask of `H·W` entries.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneCoordinateMap {
    pub coords: Tensor,
    pub mask: Vec<bool>,
}

impl SceneCoordinateMap {
    pub fn new(coords: Tensor, mask: Vec<bool>) -> Result<Self, GeometryError> {
        let shape = coords.shape();
        if shape.len() != 3 || shape[0] != 3 || mask.len() != shape[1] * shape[2] {
            return Err(GeometryError::InvalidArgument(format!(
                "scene coordinate map needs [3, H, W] coords and H·W mask entries, got {shape:?} and {}",
                mask.len()
            )));
        }
        Ok(Self { coords, mask })
    }

    pub fn height(&self) -> usize {
        self.coords.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.coords.shape()[2]
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    /// Coordinate at a cell regardless of validity.
    pub fn at(&self, row: usize, col: usize) -> Vector3<f64> {
        let plane = self.height() * self.width();
        let i = row * self.width() + col;
        let d = self.coords.data();
        Vector3::new(d[i], d[plane + i], d[2 * plane + i])
    }

    pub fn get(&self, row: usize, col: usize) -> Option<Vector3<f64>> {
        self.mask[row * self.width() + col].then(|| self.at(row, col))
    }

    /// Coordinates as `[H·W, 3]` rows in row-major cell order.
    pub fn rows(&self) -> Tensor {
        let (h, w) = (self.height(), self.width());
        let plane = h * w;
        let d = self.coords.data();
        Tensor::from_fn(&[plane, 3], |i| d[(i % 3) * plane + i / 3])
    }
}

/// Lifts every pixel with positive depth into the world frame:
/// `x = Rᵀ(d·K⁻¹·(u, v, 1)ᵀ − t)`.
pub fn backproject(depth: &DepthMap, k: &CameraIntrinsics, pose: &Pose) -> SceneCoordinateMap {
    let (w, h) = (depth.width(), depth.height());
    let plane = w * h;
    let mut coords = vec![0.0; 3 * plane];
    let mut mask = vec![false; plane];
    for row in 0..h {
        for col in 0..w {
            let i = row * w + col;
            let d = depth.values[i];
            if d <= 0.0 {
                continue;
            }
            let x = pose.inverse_transform(&(k.unproject(col as f64, row as f64) * d));
            coords[i] = x.x;
            coords[plane + i] = x.y;
            coords[2 * plane + i] = x.z;
            mask[i] = true;
        }
    }
    let coords = Tensor::new(&[3, h, w], coords).expect("sized above");
    SceneCoordinateMap { coords, mask }
}

/// Translation error in centimeters between camera centers and the rotation
/// angle of `R_est·R_gtᵀ` in degrees.
pub fn pose_error(estimate: &Pose, ground_truth: &Pose) -> (f64, f64) {
    let t_cm = (estimate.center() - ground_truth.center()).norm() * 100.0;
    let r = estimate.rotation() * ground_truth.rotation().transpose();
    // atan2 form of arccos((trace − 1) / 2); stays accurate for tiny angles.
    let cos2 = r.trace() - 1.0;
    let sin2 = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]).norm();
    (t_cm, sin2.atan2(cos2).to_degrees())
}
