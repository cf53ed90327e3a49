//! Pose recovery from predicted scene coordinates, localization metrics and
//! attention heatmaps.

use std::path::{Path, PathBuf};

use nalgebra::Vector2;

use crate::config::FlatConfig;
use crate::data::{write_pgm8, DataError, SceneDataset, Split};
use crate::encoder::EncoderError;
use crate::geometry::{pnp_ransac, pose_error, CameraIntrinsics, Correspondence2D3D, GeometryError, Pose, RansacConfig};
use crate::heads::{dense_predict, sparse_predict, HeadError};
use crate::model::{Model, ModelError, Mode};
use crate::numerics::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("split '{0:?}' has no frames")]
    EmptySplit(Split),
    #[error("attention layer {layer} head {head} out of range ({layers} layers, {heads} heads)")]
    AttentionIndex { layer: usize, head: usize, layers: usize, heads: usize },
    #[error("localization failed: {0}")]
    Localization(#[from] GeometryError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
}

impl From<EncoderError> for EvalError {
    fn from(e: EncoderError) -> Self {
        Self::Model(e.into())
    }
}

impl From<HeadError> for EvalError {
    fn from(e: HeadError) -> Self {
        Self::Model(e.into())
    }
}

/// Reads `ransac.*` keys over the defaults.
pub fn ransac_from_config(cfg: &FlatConfig) -> Result<RansacConfig, ModelError> {
    let d = RansacConfig::default();
    Ok(RansacConfig {
        threshold: cfg.get_or("ransac.threshold", d.threshold)?,
        hypotheses: cfg.get_or("ransac.hypotheses", d.hypotheses)?,
        early_exit_ratio: cfg.get_or("ransac.early_exit_ratio", d.early_exit_ratio)?,
        refine_iterations: cfg.get_or("ransac.refine_iterations", d.refine_iterations)?,
        seed: cfg.get_or("ransac.seed", d.seed)?,
    })
}

/// 2D-3D matches predicted for one `[3, H, W]` image. Dense mode yields one
/// per cell at pixel `(8j + 4, 8i + 4)`; sparse mode one per detected keypoint.
pub fn correspondences(model: &Model, image: &Tensor) -> Result<Vec<Correspondence2D3D>, EvalError> {
    let map = model.encoder.run(&model.store, image, false)?;
    match model.config.mode {
        Mode::Dense => {
            let coords = dense_predict(&map, &model.head, &model.store)?;
            let mut out = Vec::with_capacity(coords.height() * coords.width());
            for i in 0..coords.height() {
                for j in 0..coords.width() {
                    let pixel = Vector2::new((8 * j + 4) as f64, (8 * i + 4) as f64);
                    out.push(Correspondence2D3D::new(pixel, coords.at(i, j)));
                }
            }
            Ok(out)
        }
        Mode::Sparse => {
            let keypoints = model.config.detector.detect(&model.store, image)?;
            Ok(sparse_predict(&map, &keypoints, &model.head, &model.store)?
                .into_iter()
                .map(|(k, x)| Correspondence2D3D::new(Vector2::new(k.pixel[0], k.pixel[1]), x))
                .collect())
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Localization {
    pub pose: Pose,
    pub inliers: usize,
    pub correspondences: usize,
}

pub fn localize(
    model: &Model,
    image: &Tensor,
    intrinsics: &CameraIntrinsics,
    ransac: &RansacConfig,
) -> Result<Localization, EvalError> {
    let matches = correspondences(model, image)?;
    let result = pnp_ransac(&matches, intrinsics, ransac)?;
    Ok(Localization { pose: result.pose, inliers: result.inlier_count, correspondences: matches.len() })
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FrameResult {
    pub id: usize,
    /// `None` when localization failed.
    pub t_cm: Option<f64>,
    pub r_deg: Option<f64>,
    pub inliers: usize,
}

impl FrameResult {
    pub fn accurate(&self) -> bool {
        matches!((self.t_cm, self.r_deg), (Some(t), Some(r)) if t < 5.0 && r < 5.0)
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EvalSummary {
    /// Over successfully localized frames; `None` if there are none.
    pub median_t_cm: Option<f64>,
    pub median_r_deg: Option<f64>,
    pub acc_5cm_5deg: f64,
    pub frames: Vec<FrameResult>,
}

impl EvalSummary {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data serializes")
    }

    pub fn write(&self, path: &Path) -> Result<(), EvalError> {
        std::fs::write(path, self.to_json() + "\n").map_err(|e| DataError::File { path: path.into(), message: e.to_string() })?;
        Ok(())
    }
}

/// Median with the mean of the middle two for even counts.
pub fn median(values: &[f64]) -> Option<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => None,
        _ if n % 2 == 1 => Some(v[n / 2]),
        _ => Some(0.5 * (v[n / 2 - 1] + v[n / 2])),
    }
}

/// Frames are reported in id order, so the summary does not depend on the
/// order they were localized in.
pub fn summarize(mut frames: Vec<FrameResult>) -> EvalSummary {
    frames.sort_by_key(|f| f.id);
    let t: Vec<f64> = frames.iter().filter_map(|f| f.t_cm).collect();
    let r: Vec<f64> = frames.iter().filter_map(|f| f.r_deg).collect();
    let accurate = frames.iter().filter(|f| f.accurate()).count();
    EvalSummary {
        median_t_cm: median(&t),
        median_r_deg: median(&r),
        acc_5cm_5deg: if frames.is_empty() { 0.0 } else { accurate as f64 / frames.len() as f64 },
        frames,
    }
}

/// Scores each frame of `split` with the estimates from `estimate`; `None`
/// marks a failure.
pub fn evaluate_with(
    dataset: &SceneDataset,
    split: Split,
    mut estimate: impl FnMut(&crate::data::Frame) -> Result<Option<(Pose, usize)>, EvalError>,
) -> Result<EvalSummary, EvalError> {
    let mut frames = Vec::new();
    for frame in dataset.split(split) {
        frames.push(match estimate(frame)? {
            Some((pose, inliers)) => {
                let (t, r) = pose_error(&pose, &frame.pose);
                FrameResult { id: frame.id, t_cm: Some(t), r_deg: Some(r), inliers }
            }
            None => FrameResult { id: frame.id, t_cm: None, r_deg: None, inliers: 0 },
        });
    }
    if frames.is_empty() {
        return Err(EvalError::EmptySplit(split));
    }
    Ok(summarize(frames))
}

/// Localizes every frame of `split`. Each frame's RANSAC stream is seeded
/// from `ransac.seed` and the frame id.
pub fn evaluate(dataset: &SceneDataset, split: Split, model: &Model, ransac: &RansacConfig) -> Result<EvalSummary, EvalError> {
    evaluate_with(dataset, split, |frame| {
        let cfg = RansacConfig { seed: ransac.seed.wrapping_add(frame.id as u64), ..ransac.clone() };
        match localize(model, &frame.image, &frame.intrinsics, &cfg) {
            Ok(l) => Ok(Some((l.pose, l.inliers))),
            Err(EvalError::Localization(e)) => {
                log::debug!("frame {}: {e}", frame.id);
                Ok(None)
            }
            Err(e) => Err(e),
        }
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub layer: usize,
    pub head: usize,
    pub width: usize,
    pub height: usize,
    /// Row-major, in `[0, 1]`.
    pub values: Vec<f64>,
}

impl Heatmap {
    pub fn file_name(&self) -> String {
        format!("attn_L{}_H{}.pgm", self.layer, self.head)
    }

    pub fn to_gray8(&self) -> Vec<u8> {
        self.values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }

    /// Writes a binary P5 file named by [`Heatmap::file_name`] into `dir`.
    pub fn write(&self, dir: &Path) -> Result<PathBuf, EvalError> {
        let path = dir.join(self.file_name());
        write_pgm8(&path, self.width, self.height, &self.to_gray8())?;
        Ok(path)
    }
}

/// Attention each key receives, averaged over queries.
pub fn key_scores(attention: &Tensor) -> Vec<f64> {
    let (n, m) = (attention.shape()[0], attention.shape()[1]);
    let mut out = vec![0.0; m];
    for row in attention.data().chunks(m) {
        for (o, a) in out.iter_mut().zip(row) {
            *o += a;
        }
    }
    out.iter().map(|s| s / n as f64).collect()
}

/// Key scores of one head, min-max normalized (a flat map becomes all zeros)
/// and upsampled ×8 by nearest neighbour to the image size.
pub fn render_attention(model: &Model, image: &Tensor, layer: usize, head: usize) -> Result<Heatmap, EvalError> {
    let map = model.encoder.run(&model.store, image, true)?;
    let attention = map.attention.as_ref().expect("attention retained");
    let (layers, heads) = (attention.len(), attention.first().map_or(0, Vec::len));
    let scores = attention
        .get(layer)
        .and_then(|l| l.get(head))
        .ok_or(EvalError::AttentionIndex { layer, head, layers, heads })?;
    let (gh, gw) = map.grid();
    Ok(heatmap_from_scores(scores, gh, gw, layer, head))
}

/// Min-max normalized key scores of an `[N, N]` score matrix over an
/// `gh × gw` token grid, upsampled ×8.
pub fn heatmap_from_scores(scores: &Tensor, gh: usize, gw: usize, layer: usize, head: usize) -> Heatmap {
    let s = key_scores(scores);
    let (lo, hi) = s.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let range = hi - lo;
    let norm: Vec<f64> = s.iter().map(|x| if range > 0.0 { (x - lo) / range } else { 0.0 }).collect();
    let (height, width) = (8 * gh, 8 * gw);
    let values = (0..height * width).map(|p| norm[(p / width / 8) * gw + (p % width) / 8]).collect();
    Heatmap { layer, head, width, height, values }
}

/// Heatmaps for every head of every layer.
pub fn render_all_attention(model: &Model, image: &Tensor) -> Result<Vec<Heatmap>, EvalError> {
    let cfg = &model.config.encoder;
    let mut out = Vec::new();
    for layer in 0..cfg.num_layers {
        for head in 0..cfg.num_heads {
            out.push(render_attention(model, image, layer, head)?);
        }
    }
    Ok(out)
}
