//! Pinhole cameras, world-to-camera poses, triangulation, point-only bundle
//! adjustment and robust PnP.

mod camera;
mod p3p;
mod pnp;
mod projection;
mod triangulation;

use std::path::Path;

pub use camera::{nearest_rotation, CameraIntrinsics, Pose, ROTATION_TOLERANCE};
pub use pnp::{pnp_ransac, refine_pose, Correspondence2D3D, PnpResult, RansacConfig};
pub use projection::{backproject, pose_error, project, DepthMap, SceneCoordinateMap, MIN_DEPTH};
pub use triangulation::{
    bundle_adjust_points, bundle_adjust_points_with_damping, mean_reprojection_error, reprojection_cost,
    triangulate, BundleAdjustment, Observation, Track, INITIAL_DAMPING, MAX_CONDITION, MAX_DAMPING,
};

/// Lambda Twist P3P solver used for RANSAC hypotheses.
pub fn solve_p3p(
    world: &[nalgebra::Vector3<f64>; 3],
    bearings: &[nalgebra::Vector3<f64>; 3],
) -> Vec<(nalgebra::Matrix3<f64>, nalgebra::Vector3<f64>)> {
    p3p::solve(world, bearings)
}

#[derive(Debug, thiserror::Error)]
pub enum GeometryError {
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("invalid pose: {0}")]
    InvalidPose(String),
    #[error("point is behind the camera (depth {depth})")]
    BehindCamera { depth: f64 },
    #[error("degenerate triangulation: {0}")]
    DegenerateTriangulation(String),
    #[error("track needs observations from at least 2 cameras, has {0}")]
    InsufficientObservations(usize),
    #[error("track {0} has no triangulated point")]
    MissingPoint(usize),
    #[error("camera index {0} out of range")]
    CameraIndex(usize),
    #[error("PnP needs at least 4 correspondences, got {0}")]
    InsufficientPoints(usize),
    #[error("no pose hypothesis reached 4 inliers (best {best_inliers})")]
    NoConsensus { best_inliers: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("{path}: {source}")]
    File { path: String, source: std::io::Error },
}

impl GeometryError {
    pub(crate) fn file(path: &Path, source: std::io::Error) -> Self {
        Self::File { path: path.display().to_string(), source }
    }
}
