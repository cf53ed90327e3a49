use nalgebra::{Matrix3, Vector3};

use super::{DataError, Frame, HarrisDetector, SceneDataset};
use crate::geometry::{
    bundle_adjust_points, mean_reprojection_error, project, triangulate, CameraIntrinsics, Observation, Pose, Track,
};
use crate::heads::Keypoint;
use crate::numerics::ParamStore;

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MatchingConfig {
    /// Symmetric point-to-epipolar-line gate, pixels.
    pub epipolar_px: f64,
    /// A projected hypothesis is supported by a keypoint this close, pixels.
    pub support_px: f64,
    /// Tracks need this many distinct views.
    pub min_views: usize,
    /// Tracks with any observation reprojecting farther than this after
    /// adjustment are dropped.
    pub max_reprojection_px: f64,
    pub ba_iterations: usize,
    pub ba_tolerance: f64,
}

impl Default for MatchingConfig {
    fn default() -> Self {
        Self {
            epipolar_px: 2.0,
            support_px: 2.0,
            min_views: 3,
            max_reprojection_px: 2.0,
            ba_iterations: 50,
            ba_tolerance: 1e-12,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SparseKeypoint {
    pub keypoint: Keypoint,
    /// Scene coordinate when the keypoint belongs to a surviving track.
    pub coord: Option<Vector3<f64>>,
    pub track: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameKeypoints {
    pub frame_id: usize,
    pub keypoints: Vec<SparseKeypoint>,
}

impl FrameKeypoints {
    pub fn valid(&self) -> impl Iterator<Item = (&Keypoint, Vector3<f64>)> {
        self.keypoints.iter().filter_map(|k| k.coord.map(|c| (&k.keypoint, c)))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SparseTrack {
    pub point: Vector3<f64>,
    /// `(frame id, keypoint index within that frame)`.
    pub observations: Vec<(usize, usize)>,
    pub mean_reprojection_px: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SparseGroundTruth {
    pub frames: Vec<FrameKeypoints>,
    pub tracks: Vec<SparseTrack>,
    /// Summed squared reprojection error of the surviving tracks before and
    /// after bundle adjustment.
    pub dlt_cost: f64,
    pub ba_cost: f64,
}

impl SparseGroundTruth {
    pub fn frame(&self, id: usize) -> Option<&FrameKeypoints> {
        self.frames.iter().find(|f| f.frame_id == id)
    }
}

/// Result of [`refine_tracks`]: surviving tracks (indices into the input)
/// with their adjusted points.
#[derive(Clone, Debug)]
pub struct RefinedTracks {
    pub kept: Vec<(usize, Vector3<f64>, f64)>,
    pub dlt_cost: f64,
    pub ba_cost: f64,
}

/// Triangulates every track, bundle-adjusts the points and drops tracks that
/// fail to triangulate or reproject outside the gate in any view.
pub fn refine_tracks(
    tracks: &[Track],
    poses: &[Pose],
    intrinsics: &[CameraIntrinsics],
    config: &MatchingConfig,
) -> Result<RefinedTracks, DataError> {
    let mut initial = Vec::new();
    let mut index = Vec::new();
    for (i, track) in tracks.iter().enumerate() {
        if let Ok(x) = triangulate(track, poses, intrinsics) {
            initial.push(Track { observations: track.observations.clone(), point: Some(x) });
            index.push(i);
        }
    }
    let ba = bundle_adjust_points(&initial, poses, intrinsics, config.ba_iterations, config.ba_tolerance)?;
    let mut out = RefinedTracks { kept: Vec::new(), dlt_cost: 0.0, ba_cost: 0.0 };
    for ((before, after), &i) in initial.iter().zip(&ba.tracks).zip(&index) {
        let x = after.point.expect("adjusted tracks keep their points");
        let err = mean_reprojection_error(&x, &after.observations, poses, intrinsics)?;
        let worst = after.observations.iter().try_fold(0.0f64, |m, o| {
            let (pose, k) = (&poses[o.camera_index], &intrinsics[o.camera_index]);
            project(pose, k, &x).map(|(p, _)| m.max((p - o.pixel).norm()))
        });
        if err.is_finite() && matches!(worst, Ok(w) if w <= config.max_reprojection_px) {
            let cost = |t: &Track| crate::geometry::reprojection_cost(&t.point.unwrap(), &t.observations, poses, intrinsics);
            out.dlt_cost += cost(before)?;
            out.ba_cost += cost(after)?;
            out.kept.push((i, x, err));
        }
    }
    Ok(out)
}

fn skew(t: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -t.z, t.y, t.z, 0.0, -t.x, -t.y, t.x, 0.0)
}

/// `F` with `x_bᵀ·F·x_a = 0` for pixels of the same point in frames a and b.
fn fundamental(a: &Frame, b: &Frame) -> Matrix3<f64> {
    let r = b.pose.rotation() * a.pose.rotation().transpose();
    let t = b.pose.translation() - r * a.pose.translation();
    let e = skew(&t) * r;
    let ka = a.intrinsics.matrix().try_inverse().expect("valid intrinsics");
    let kb = b.intrinsics.matrix().try_inverse().expect("valid intrinsics");
    kb.transpose() * e * ka
}

fn line_distance(line: &Vector3<f64>, p: &Vector3<f64>) -> f64 {
    line.dot(p).abs() / (line.x * line.x + line.y * line.y).sqrt().max(1e-300)
}

/// Keypoint lookup by integer pixel.
struct PixelIndex {
    width: usize,
    height: usize,
    cells: Vec<Option<usize>>,
}

impl PixelIndex {
    fn new(keypoints: &[Keypoint], width: usize, height: usize) -> Self {
        let mut cells = vec![None; width * height];
        for (i, k) in keypoints.iter().enumerate() {
            let (c, r) = (k.pixel[0].round() as usize, k.pixel[1].round() as usize);
            cells[r * width + c] = Some(i);
        }
        Self { width, height, cells }
    }

    /// Closest keypoint within `radius` of `(u, v)`, ties broken by index.
    fn nearest(&self, keypoints: &[Keypoint], u: f64, v: f64, radius: f64) -> Option<usize> {
        let reach = radius.ceil() as isize + 1;
        let (cu, cv) = (u.round() as isize, v.round() as isize);
        let mut best: Option<(f64, usize)> = None;
        for r in cv - reach..=cv + reach {
            for c in cu - reach..=cu + reach {
                if r < 0 || c < 0 || r as usize >= self.height || c as usize >= self.width {
                    continue;
                }
                if let Some(i) = self.cells[r as usize * self.width + c as usize] {
                    let d = ((keypoints[i].pixel[0] - u).powi(2) + (keypoints[i].pixel[1] - v).powi(2)).sqrt();
                    if d <= radius && best.is_none_or(|(bd, bi)| d < bd || (d == bd && i < bi)) {
                        best = Some((d, i));
                    }
                }
            }
        }
        best.map(|(_, i)| i)
    }
}

/// Detects keypoints in every training frame, links them into multi-view
/// tracks using the known poses, and triangulates and adjusts each track.
///
/// For each keypoint and each other frame, every keypoint within the
/// epipolar gate yields a two-view 3D hypothesis. The hypothesis is projected
/// into all frames and collects the nearest keypoint in each as support; the
/// best hypothesis per keypoint is kept if it reaches `min_views` and no
/// different support set scores as well. Hypotheses
/// then claim their keypoints greedily, best supported first; one that would
/// reuse an already claimed keypoint is discarded.
pub fn build_sparse_gt(
    dataset: &SceneDataset,
    detector: &HarrisDetector,
    config: &MatchingConfig,
) -> Result<SparseGroundTruth, DataError> {
    let frames: Vec<&Frame> = dataset.train().collect();
    let mut store = ParamStore::new();
    HarrisDetector::register(&mut store)?;
    let keypoints: Vec<Vec<Keypoint>> =
        frames.iter().map(|f| detector.detect(&store, &f.image)).collect::<Result<_, _>>()?;
    let indices: Vec<PixelIndex> =
        frames.iter().zip(&keypoints).map(|(f, k)| PixelIndex::new(k, f.width(), f.height())).collect();
    let poses: Vec<Pose> = frames.iter().map(|f| f.pose.clone()).collect();
    let ks: Vec<CameraIntrinsics> = frames.iter().map(|f| f.intrinsics).collect();

    let total: usize = keypoints.iter().map(Vec::len).sum();
    let min_views = config.min_views.max(2);
    let mut hypotheses: Vec<(usize, f64, Vec<(usize, usize)>)> = Vec::new();

    let homogeneous = |k: &Keypoint| Vector3::new(k.pixel[0], k.pixel[1], 1.0);
    for a in 0..frames.len() {
        for (ia, ka) in keypoints[a].iter().enumerate() {
            let xa = homogeneous(ka);
            let mut best: Option<(usize, f64, Vec<(usize, usize)>)> = None;
            let mut ambiguous = false;
            for b in (0..frames.len()).filter(|&b| b != a) {
                let f = fundamental(frames[a], frames[b]);
                let line_b = f * xa;
                for (ib, kb) in keypoints[b].iter().enumerate() {
                    let xb = homogeneous(kb);
                    if line_distance(&line_b, &xb) >= config.epipolar_px
                        || line_distance(&(f.transpose() * xb), &xa) >= config.epipolar_px
                    {
                        continue;
                    }
                    let pair = Track::new(vec![
                        Observation::new(a, ka.pixel[0], ka.pixel[1]),
                        Observation::new(b, kb.pixel[0], kb.pixel[1]),
                    ]);
                    let Ok(x) = triangulate(&pair, &poses, &ks) else { continue };
                    let mut support = Vec::new();
                    let mut residual = 0.0;
                    for (c, frame) in frames.iter().enumerate() {
                        let Ok((p, _)) = project(&poses[c], &ks[c], &x) else { continue };
                        let hit = match c {
                            _ if c == a => Some(ia),
                            _ if c == b => Some(ib),
                            _ if p.x < 0.0 || p.y < 0.0 || p.x > (frame.width() - 1) as f64 || p.y > (frame.height() - 1) as f64 => None,
                            _ => indices[c].nearest(&keypoints[c], p.x, p.y, config.support_px),
                        };
                        if let Some(i) = hit {
                            let k = &keypoints[c][i];
                            residual += ((k.pixel[0] - p.x).powi(2) + (k.pixel[1] - p.y).powi(2)).sqrt();
                            support.push((c, i));
                        }
                    }
                    let score = support.len();
                    let residual = residual / score as f64;
                    match &best {
                        Some((s, _, _)) if score < *s => {}
                        Some((s, r, sup)) if score == *s => {
                            ambiguous |= *sup != support;
                            if residual < *r {
                                best = Some((score, residual, support));
                            }
                        }
                        _ => {
                            ambiguous = false;
                            best = Some((score, residual, support));
                        }
                    }
                }
            }
            if let Some(h) = best.filter(|h| h.0 >= min_views && !ambiguous) {
                hypotheses.push(h);
            }
        }
    }

    // support lists are in frame order, so ties fall back to a fixed order
    hypotheses.sort_by(|x, y| y.0.cmp(&x.0).then(x.1.total_cmp(&y.1)).then_with(|| x.2.cmp(&y.2)));
    let mut claimed: Vec<Vec<bool>> = keypoints.iter().map(|k| vec![false; k.len()]).collect();
    let mut candidates: Vec<Vec<(usize, usize)>> = Vec::new();
    for (_, _, support) in hypotheses {
        if support.iter().any(|&(c, i)| claimed[c][i]) {
            continue;
        }
        for &(c, i) in &support {
            claimed[c][i] = true;
        }
        candidates.push(support);
    }
    let tracks: Vec<Track> = candidates
        .iter()
        .map(|m| Track::new(m.iter().map(|&(c, i)| Observation::new(c, keypoints[c][i].pixel[0], keypoints[c][i].pixel[1])).collect()))
        .collect();
    let refined = refine_tracks(&tracks, &poses, &ks, config)?;
    if refined.kept.is_empty() {
        return Err(DataError::NoTracks(format!("{} keypoints, {} candidate tracks", total, tracks.len())));
    }

    let mut out_frames: Vec<FrameKeypoints> = frames
        .iter()
        .zip(&keypoints)
        .map(|(f, kps)| FrameKeypoints {
            frame_id: f.id,
            keypoints: kps.iter().map(|k| SparseKeypoint { keypoint: *k, coord: None, track: None }).collect(),
        })
        .collect();
    let mut out_tracks = Vec::with_capacity(refined.kept.len());
    for (t, &(candidate, point, err)) in refined.kept.iter().enumerate() {
        let mut observations = Vec::new();
        for &(c, i) in &candidates[candidate] {
            let slot = &mut out_frames[c].keypoints[i];
            slot.coord = Some(point);
            slot.track = Some(t);
            observations.push((frames[c].id, i));
        }
        out_tracks.push(SparseTrack { point, observations, mean_reprojection_px: err });
    }
    Ok(SparseGroundTruth { frames: out_frames, tracks: out_tracks, dlt_cost: refined.dlt_cost, ba_cost: refined.ba_cost })
}
