use super::DataError;
use crate::heads::{normalize_keypoints, Keypoint};
use crate::numerics::{Backend, Eager, ParamStore, Tensor};

pub const DETECTOR_PREFIX: &str = "detector.";

/// Harris corner detector. Its fixed filters live in the parameter store as
/// frozen `detector.*` tensors so that checkpoints carry them and training can
/// verify they never change.
#[derive(Clone, Debug, PartialEq)]
pub struct HarrisDetector {
    pub k: f64,
    pub nms_radius: usize,
    pub max_count: usize,
    /// Responses below `relative_threshold · max` are discarded.
    pub relative_threshold: f64,
}

impl Default for HarrisDetector {
    fn default() -> Self {
        Self { k: 0.04, nms_radius: 4, max_count: 500, relative_threshold: 1e-3 }
    }
}

const ABSOLUTE_FLOOR: f64 = 1e-12;

/// Vertex of the parabola through three samples, as an offset in [−½, ½].
fn peak_offset(left: f64, center: f64, right: f64) -> f64 {
    let curvature = left - 2.0 * center + right;
    if curvature >= 0.0 {
        return 0.0;
    }
    (0.5 * (left - right) / curvature).clamp(-0.5, 0.5)
}

fn filters() -> [(&'static str, Tensor); 3] {
    let gray = Tensor::new(&[1, 3, 1, 1], vec![0.299, 0.587, 0.114]).expect("static shape");
    let sobel_x = [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0];
    let sobel_y = [-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0];
    let sobel = Tensor::new(&[2, 1, 3, 3], [sobel_x, sobel_y].concat()).expect("static shape");
    // 3×3 binomial window applied to each of Ixx, Iyy, Ixy separately
    let g = [1.0, 2.0, 1.0];
    let window = Tensor::from_fn(&[3, 3, 3, 3], |i| {
        let (o, c, r, col) = (i / 27, i / 9 % 3, i / 3 % 3, i % 3);
        if o == c {
            g[r] * g[col] / 16.0
        } else {
            0.0
        }
    });
    [("detector.gray", gray), ("detector.sobel", sobel), ("detector.window", window)]
}

impl HarrisDetector {
    pub fn with_max_count(max_count: usize) -> Self {
        Self { max_count, ..Self::default() }
    }

    /// Adds the frozen filter tensors (once) to `store`.
    pub fn register(store: &mut ParamStore) -> Result<(), DataError> {
        for (name, t) in filters() {
            if store.id(name).is_none() {
                store.add_frozen(name, t)?;
            }
        }
        Ok(())
    }

    fn filter<'a>(store: &'a ParamStore, name: &str) -> Result<&'a Tensor, DataError> {
        store
            .by_name(name)
            .map(|p| p.tensor())
            .ok_or_else(|| DataError::Invalid(format!("detector parameter '{name}' missing")))
    }

    /// Harris response `det(S) − k·tr(S)²` per pixel of a `[3, H, W]` image.
    pub fn response(&self, store: &ParamStore, image: &Tensor) -> Result<Tensor, DataError> {
        let e = &mut Eager;
        let gray = e.conv2d(image, Self::filter(store, "detector.gray")?, &Tensor::zeros(&[1]), 1, 0)?;
        let grad = e.conv2d(&gray, Self::filter(store, "detector.sobel")?, &Tensor::zeros(&[2]), 1, 1)?;
        let (h, w) = (image.shape()[1], image.shape()[2]);
        let n = h * w;
        let g = grad.data();
        let products = Tensor::from_fn(&[3, h, w], |i| {
            let (c, p) = (i / n, i % n);
            let (ix, iy) = (g[p], g[n + p]);
            [ix * ix, iy * iy, ix * iy][c]
        });
        let s = e.conv2d(&products, Self::filter(store, "detector.window")?, &Tensor::zeros(&[3]), 1, 1)?;
        let s = s.data();
        Ok(Tensor::from_fn(&[h, w], |p| {
            let (a, b, c) = (s[p], s[n + p], s[2 * n + p]);
            a * b - c * c - self.k * (a + b) * (a + b)
        }))
    }

    /// Keypoints sorted by descending response, ties by (row, col). Pixels
    /// closer than `nms_radius` to the border are skipped since the filters
    /// see zero padding there. Each peak is refined to subpixel precision by
    /// a parabola fit along rows and columns.
    pub fn detect_with_response(&self, store: &ParamStore, image: &Tensor) -> Result<Vec<(Keypoint, f64)>, DataError> {
        if image.rank() != 3 || image.shape()[0] != 3 {
            return Err(DataError::Invalid(format!("expected a [3, H, W] image, got {:?}", image.shape())));
        }
        let (h, w) = (image.shape()[1], image.shape()[2]);
        let r = self.nms_radius;
        if h <= 2 * r || w <= 2 * r || self.max_count == 0 {
            return Ok(Vec::new());
        }
        let resp = self.response(store, image)?;
        let at = |row: usize, col: usize| resp.data()[row * w + col];
        let mut peak = 0.0f64;
        for row in r..h - r {
            for col in r..w - r {
                peak = peak.max(at(row, col));
            }
        }
        let threshold = (self.relative_threshold * peak).max(ABSOLUTE_FLOOR);
        let mut found = Vec::new();
        for row in r..h - r {
            for col in r..w - r {
                let v = at(row, col);
                if v < threshold {
                    continue;
                }
                let beaten = (row.saturating_sub(r)..=(row + r).min(h - 1)).any(|rr| {
                    (col.saturating_sub(r)..=(col + r).min(w - 1)).any(|cc| {
                        let o = at(rr, cc);
                        o > v || (o == v && (rr, cc) < (row, col))
                    })
                });
                if !beaten {
                    found.push((row, col, v));
                }
            }
        }
        found.sort_by(|a, b| b.2.total_cmp(&a.2).then((a.0, a.1).cmp(&(b.0, b.1))));
        found.truncate(self.max_count);
        let pixels: Vec<[f64; 2]> = found
            .iter()
            .map(|&(row, col, v)| {
                let du = peak_offset(at(row, col - 1), v, at(row, col + 1));
                let dv = peak_offset(at(row - 1, col), v, at(row + 1, col));
                [col as f64 + du, row as f64 + dv]
            })
            .collect();
        let keypoints = normalize_keypoints(&pixels, w, h).map_err(|e| DataError::Invalid(e.to_string()))?;
        Ok(keypoints.into_iter().zip(found.iter().map(|f| f.2)).collect())
    }

    pub fn detect(&self, store: &ParamStore, image: &Tensor) -> Result<Vec<Keypoint>, DataError> {
        Ok(self.detect_with_response(store, image)?.into_iter().map(|(k, _)| k).collect())
    }
}

/// Harris keypoints with the default settings.
pub fn detect_keypoints(image: &Tensor, max_count: usize) -> Result<Vec<Keypoint>, DataError> {
    let mut store = ParamStore::new();
    HarrisDetector::register(&mut store)?;
    HarrisDetector::with_max_count(max_count).detect(&store, image)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray_image(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> Tensor {
        Tensor::from_fn(&[3, h, w], |i| f(i / w % h, i % w))
    }

    #[test]
    fn constant_image_has_no_corners() {
        let img = gray_image(20, 24, |_, _| 0.6);
        assert!(detect_keypoints(&img, 100).unwrap().is_empty());
    }

    #[test]
    fn single_white_pixel() {
        let img = gray_image(15, 15, |r, c| if (r, c) == (7, 7) { 1.0 } else { 0.0 });
        let mut store = ParamStore::new();
        HarrisDetector::register(&mut store).unwrap();
        let found = HarrisDetector::default().detect_with_response(&store, &img).unwrap();
        assert_eq!(found.len(), 1);
        let [u, v] = found[0].0.pixel;
        assert!((u - 7.0).abs() < 1e-12 && (v - 7.0).abs() < 1e-12);
        // gray weights sum to 1, and the hand-evaluated response is 1.3125
        assert!((found[0].1 - 1.3125).abs() < 1e-9, "{}", found[0].1);
    }

    #[test]
    fn deterministic_and_capped() {
        let img = gray_image(40, 48, |r, c| if (r / 6 + c / 6) % 2 == 0 { 0.9 } else { 0.1 });
        let a = detect_keypoints(&img, 1000).unwrap();
        assert_eq!(a, detect_keypoints(&img, 1000).unwrap());
        assert!(a.len() > 10);
        let capped = detect_keypoints(&img, 5).unwrap();
        assert_eq!(&a[..5], &capped[..]);
        // checker corners sit between pixels 5|6, 11|12, ...
        for k in &a {
            for x in k.pixel {
                assert!(((x + 0.5) / 6.0 - ((x + 0.5) / 6.0).round()).abs() * 6.0 < 0.5, "{:?}", k.pixel);
            }
        }
    }

    #[test]
    fn parabola_vertex() {
        assert_eq!(peak_offset(1.0, 2.0, 1.0), 0.0);
        // y = −(x − 0.25)² sampled at −1, 0, 1
        let f = |x: f64| -(x - 0.25) * (x - 0.25);
        assert!((peak_offset(f(-1.0), f(0.0), f(1.0)) - 0.25).abs() < 1e-15);
        assert_eq!(peak_offset(0.0, 0.0, 0.0), 0.0);
    }

    #[test]
    fn register_is_idempotent_and_frozen() {
        let mut store = ParamStore::new();
        HarrisDetector::register(&mut store).unwrap();
        HarrisDetector::register(&mut store).unwrap();
        assert_eq!(store.len(), 3);
        assert!(store.iter().all(|(_, p)| p.is_frozen()));
    }
}
