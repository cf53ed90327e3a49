//! Scene datasets: synthetic generation, the on-disk scene format, dense and
//! sparse ground truth, and the Harris keypoint detector.

mod harris;
mod io;
mod sparse;
mod synthetic;

use std::path::PathBuf;

use crate::geometry::{backproject, CameraIntrinsics, DepthMap, GeometryError, Pose, SceneCoordinateMap};
use crate::numerics::{NumericsError, Tensor};

pub use harris::{detect_keypoints, HarrisDetector, DETECTOR_PREFIX};
pub use io::{load_image, load_scene, read_pgm8, save_scene, write_pgm8, PaddedImage};
pub use sparse::{build_sparse_gt, FrameKeypoints, MatchingConfig, SparseGroundTruth, SparseKeypoint, SparseTrack};
pub use synthetic::{generate_synthetic_scene, SyntheticSceneSpec};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),
    #[error("{}: {message}", path.display())]
    File { path: PathBuf, message: String },
    #[error("frame {0} has no depth")]
    MissingDepth(usize),
    #[error("no ground-truth track survived ({0})")]
    NoTracks(String),
    #[error("dataset: {0}")]
    Invalid(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

pub(crate) fn file_error(path: impl Into<PathBuf>, message: impl ToString) -> DataError {
    DataError::File { path: path.into(), message: message.to_string() }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One posed RGB(-D) image. `image` is `[3, H, W]` in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub id: usize,
    pub image: Tensor,
    pub depth: Option<DepthMap>,
    pub pose: Pose,
    pub intrinsics: CameraIntrinsics,
    pub split: Split,
}

impl Frame {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneDataset {
    pub frames: Vec<Frame>,
    /// `(height, width)` before padding to multiples of 8.
    pub original_size: (usize, usize),
    /// `(top, left)` padding added at load time.
    pub padding: (usize, usize),
}

impl SceneDataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Frame> {
        self.frames.iter().filter(move |f| f.split == split)
    }

    pub fn train(&self) -> impl Iterator<Item = &Frame> {
        self.split(Split::Train)
    }

    pub fn test(&self) -> impl Iterator<Item = &Frame> {
        self.split(Split::Test)
    }

    pub fn frame(&self, id: usize) -> Option<&Frame> {
        self.frames.iter().find(|f| f.id == id)
    }
}

/// Backprojects the depth map and keeps the pixel at offset (4, 4) of every
/// 8×8 block, masked where that pixel has no depth.
pub fn derive_dense_gt(frame: &Frame) -> Result<SceneCoordinateMap, DataError> {
    let depth = frame.depth.as_ref().ok_or(DataError::MissingDepth(frame.id))?;
    let (h, w) = (depth.height(), depth.width());
    if h % 8 != 0 || w % 8 != 0 {
        return Err(DataError::Invalid(format!("frame {} is {w}x{h}, not a multiple of 8", frame.id)));
    }
    let full = backproject(depth, &frame.intrinsics, &frame.pose);
    let (gh, gw) = (h / 8, w / 8);
    let n = gh * gw;
    let mut coords = vec![0.0; 3 * n];
    let mut mask = vec![false; n];
    for i in 0..gh {
        for j in 0..gw {
            let cell = i * gw + j;
            if let Some(x) = full.get(8 * i + 4, 8 * j + 4) {
                for c in 0..3 {
                    coords[c * n + cell] = x[c];
                }
                mask[cell] = true;
            }
        }
    }
    Ok(SceneCoordinateMap::new(Tensor::new(&[3, gh, gw], coords)?, mask)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::project;

    fn tiny_scene() -> SceneDataset {
        let spec = SyntheticSceneSpec { width: 64, height: 48, fx: 56.0, fy: 56.0, cx: 31.5, cy: 23.5, frames: 4, ..SyntheticSceneSpec::default() };
        generate_synthetic_scene(&spec, 3).unwrap()
    }

    #[test]
    fn dense_gt_shape_and_surfaces() {
        let scene = tiny_scene();
        let spec = SyntheticSceneSpec::default();
        let frame = &scene.frames[0];
        let gt = derive_dense_gt(frame).unwrap();
        assert_eq!(gt.coords.shape(), &[3, 6, 8]);
        assert_eq!(gt.valid_count(), 48);
        for i in 0..6 {
            for j in 0..8 {
                let x = gt.at(i, j);
                let residual = (0..3)
                    .flat_map(|a| [x[a].abs(), (x[a] - spec.room[a]).abs()])
                    .fold(f64::INFINITY, f64::min);
                assert!(residual < 1e-6, "{x:?} is {residual} m off every wall");
                let (p, _) = project(&frame.pose, &frame.intrinsics, &x).unwrap();
                assert!((p.x - (8 * j + 4) as f64).abs() < 0.5 && (p.y - (8 * i + 4) as f64).abs() < 0.5);
            }
        }
    }

    #[test]
    fn dense_gt_masks_missing_depth() {
        let mut frame = tiny_scene().frames[0].clone();
        let depth = frame.depth.as_ref().unwrap();
        let mut values = depth.values().to_vec();
        values[4 * 64 + 4] = 0.0;
        values[0] = 0.0;
        frame.depth = Some(DepthMap::new(64, 48, values).unwrap());
        let gt = derive_dense_gt(&frame).unwrap();
        assert!(!gt.mask[0]);
        assert_eq!(gt.valid_count(), 47);
        frame.depth = None;
        assert!(matches!(derive_dense_gt(&frame), Err(DataError::MissingDepth(0))));
    }
}
