//! Scene-coordinate heads: the pointwise MLP Φ, keypoint normalization and
//! bilinear descriptor sampling.

use std::sync::Arc;

use nalgebra::Vector3;
use rand::Rng;

use crate::encoder::AttentionFeatureMap;
use crate::numerics::nn::Linear;
use crate::numerics::{Backend, BilinearTap, Eager, NumericsError, ParamStore, Tensor};

pub use crate::geometry::SceneCoordinateMap;

#[derive(Debug, thiserror::Error)]
pub enum HeadError {
    #[error("head shape: {0}")]
    Shape(String),
    #[error("keypoint out of range: {0}")]
    OutOfRange(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

pub const DEFAULT_HIDDEN: [usize; 3] = [512, 1024, 1024];
pub const PARAM_PREFIX: &str = "head.";

/// Pointwise MLP ℝᴰ → ℝ³ with ReLU between hidden layers.
#[derive(Clone, Debug)]
pub struct MlpHead {
    widths: Vec<usize>,
    layers: Vec<Linear>,
}

impl MlpHead {
    /// Widths `(D, 512, 1024, 1024, 3)`.
    pub fn default_widths(dim: usize) -> Vec<usize> {
        let mut w = vec![dim];
        w.extend(DEFAULT_HIDDEN);
        w.push(3);
        w
    }

    pub fn new(store: &mut ParamStore, widths: &[usize], rng: &mut impl Rng) -> Result<Self, HeadError> {
        if widths.len() < 2 || widths.last() != Some(&3) || widths.contains(&0) {
            return Err(HeadError::Shape(format!("head widths must be positive and end in 3, got {widths:?}")));
        }
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let gain = if i + 1 < n { 2.0 } else { 1.0 };
                Linear::new(store, &format!("head.fc{i}"), widths[i], widths[i + 1], gain, rng)
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { widths: widths.to_vec(), layers })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_layer(&self) -> &Linear {
        self.layers.last().expect("at least one layer")
    }

    /// Sets the output bias, e.g. to the mean training coordinate.
    pub fn set_output_bias(&self, store: &mut ParamStore, bias: [f64; 3]) {
        store.get_mut(self.output_layer().bias).tensor_mut().data_mut().copy_from_slice(&bias);
    }

    /// `[M, D]` descriptors to `[M, 3]` coordinates.
    pub fn forward<B: Backend>(&self, b: &mut B, store: &ParamStore, x: &B::Value) -> Result<B::Value, HeadError> {
        let shape = b.shape(x);
        if shape.len() != 2 || shape[1] != self.input_dim() {
            return Err(HeadError::Shape(format!("head expects [M, {}], got {shape:?}", self.input_dim())));
        }
        let mut y = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            y = layer.forward(b, store, &y)?;
            if i + 1 < self.layers.len() {
                y = b.relu(&y);
            }
        }
        Ok(y)
    }

    /// Φ applied to every cell of a `[D, h, w]` map, giving `[h·w, 3]` rows
    /// in row-major cell order.
    pub fn dense_rows<B: Backend>(&self, b: &mut B, store: &ParamStore, map: &B::Value) -> Result<B::Value, HeadError> {
        let shape = b.shape(map);
        if shape.len() != 3 || shape[0] != self.input_dim() {
            return Err(HeadError::Shape(format!("head expects a [{}, h, w] map, got {shape:?}", self.input_dim())));
        }
        let flat = b.reshape(map, &[shape[0], shape[1] * shape[2]])?;
        let states = b.transpose(&flat)?;
        self.forward(b, store, &states)
    }

    /// Φ applied to descriptors bilinearly sampled from a `[D, h, w]` map.
    pub fn sparse_rows<B: Backend>(
        &self,
        b: &mut B,
        store: &ParamStore,
        map: &B::Value,
        taps: Arc<Vec<BilinearTap>>,
    ) -> Result<B::Value, HeadError> {
        let descriptors = sample_descriptors(b, map, taps)?;
        self.forward(b, store, &descriptors)
    }
}

/// A detected point in full-image pixels and its `[−1, 1]` normalization.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Keypoint {
    pub pixel: [f64; 2],
    pub normalized: [f64; 2],
}

/// `u_n = 2u/(W−1) − 1`, `v_n = 2v/(H−1) − 1`.
pub fn normalize_keypoints(pixels: &[[f64; 2]], width: usize, height: usize) -> Result<Vec<Keypoint>, HeadError> {
    if width < 2 || height < 2 {
        return Err(HeadError::Shape(format!("image {width}x{height} is too small to normalize into")));
    }
    let (wm, hm) = ((width - 1) as f64, (height - 1) as f64);
    pixels
        .iter()
        .map(|&[u, v]| {
            if !(0.0..=wm).contains(&u) || !(0.0..=hm).contains(&v) {
                return Err(HeadError::OutOfRange(format!("pixel ({u}, {v}) outside {width}x{height}")));
            }
            Ok(Keypoint { pixel: [u, v], normalized: [2.0 * u / wm - 1.0, 2.0 * v / hm - 1.0] })
        })
        .collect()
}

/// Grid positions within this distance of a cell center are snapped onto it,
/// making samples at centers exact.
const SNAP: f64 = 1e-9;

fn grid_position(n: f64, cells: usize) -> f64 {
    let x = (n + 1.0) * 0.5 * (cells - 1) as f64;
    let r = x.round();
    if (x - r).abs() <= SNAP {
        r
    } else {
        x
    }
}

/// Align-corners bilinear taps on an `h × w` grid: −1 is the center of the
/// first cell, +1 the center of the last.
pub fn bilinear_taps(normalized: &[[f64; 2]], h: usize, w: usize) -> Result<Vec<BilinearTap>, HeadError> {
    normalized
        .iter()
        .map(|&[un, vn]| {
            if !(-1.0..=1.0).contains(&un) || !(-1.0..=1.0).contains(&vn) {
                return Err(HeadError::OutOfRange(format!("normalized ({un}, {vn}) outside [-1, 1]")));
            }
            let x = grid_position(un, w);
            let y = grid_position(vn, h);
            let (x0, y0) = ((x.floor() as usize).min(w - 1), (y.floor() as usize).min(h - 1));
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (du, dv) = (x - x0 as f64, y - y0 as f64);
            Ok(BilinearTap {
                cells: [y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1],
                weights: [(1.0 - du) * (1.0 - dv), du * (1.0 - dv), (1.0 - du) * dv, du * dv],
            })
        })
        .collect()
}

/// Differentiable sampling of a `[D, h, w]` map: `[M, D]` descriptors.
pub fn sample_descriptors<B: Backend>(
    b: &mut B,
    map: &B::Value,
    taps: Arc<Vec<BilinearTap>>,
) -> Result<B::Value, HeadError> {
    let shape = b.shape(map);
    if shape.len() != 3 {
        return Err(HeadError::Shape(format!("expected a [D, h, w] map, got {shape:?}")));
    }
    let flat = b.reshape(map, &[shape[0], shape[1] * shape[2]])?;
    Ok(b.gather(&flat, taps)?)
}

pub fn bilinear_sample(map: &AttentionFeatureMap, normalized: &[[f64; 2]]) -> Result<Tensor, HeadError> {
    let (h, w) = map.grid();
    let taps = Arc::new(bilinear_taps(normalized, h, w)?);
    sample_descriptors(&mut Eager, &map.data, taps)
}

fn check_dim(map: &AttentionFeatureMap, head: &MlpHead) -> Result<(), HeadError> {
    if map.dim() != head.input_dim() {
        return Err(HeadError::Shape(format!(
            "feature dimension {} does not match head input {}",
            map.dim(),
            head.input_dim()
        )));
    }
    Ok(())
}

pub fn dense_predict(map: &AttentionFeatureMap, head: &MlpHead, store: &ParamStore) -> Result<SceneCoordinateMap, HeadError> {
    check_dim(map, head)?;
    let (h, w) = map.grid();
    let rows = head.dense_rows(&mut Eager, store, &map.data)?;
    let coords = Tensor::from_fn(&[3, h, w], |i| rows.data()[(i % (h * w)) * 3 + i / (h * w)]);
    Ok(SceneCoordinateMap { coords, mask: vec![true; h * w] })
}

pub fn sparse_predict(
    map: &AttentionFeatureMap,
    keypoints: &[Keypoint],
    head: &MlpHead,
    store: &ParamStore,
) -> Result<Vec<(Keypoint, Vector3<f64>)>, HeadError> {
    check_dim(map, head)?;
    if keypoints.is_empty() {
        return Ok(Vec::new());
    }
    let normalized: Vec<[f64; 2]> = keypoints.iter().map(|k| k.normalized).collect();
    let descriptors = bilinear_sample(map, &normalized)?;
    let rows = head.forward(&mut Eager, store, &descriptors)?;
    Ok(keypoints
        .iter()
        .zip(rows.data().chunks(3))
        .map(|(k, r)| (*k, Vector3::new(r[0], r[1], r[2])))
        .collect())
}
