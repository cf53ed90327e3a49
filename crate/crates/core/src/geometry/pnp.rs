use nalgebra::{Matrix2x3, Matrix3, Matrix6, Rotation3, SMatrix, Vector2, Vector3, Vector6};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{p3p, CameraIntrinsics, GeometryError, Pose};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Correspondence2D3D {
    pub pixel: Vector2<f64>,
    pub scene: Vector3<f64>,
}

impl Correspondence2D3D {
    pub fn new(pixel: Vector2<f64>, scene: Vector3<f64>) -> Self {
        Self { pixel, scene }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RansacConfig {
    /// Reprojection error (pixels) below which a correspondence is an inlier.
    pub threshold: f64,
    pub hypotheses: usize,
    /// Stop sampling once this fraction of correspondences agree.
    pub early_exit_ratio: f64,
    pub refine_iterations: usize,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self { threshold: 10.0, hypotheses: 256, early_exit_ratio: 0.9, refine_iterations: 20, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PnpResult {
    pub pose: Pose,
    pub inliers: Vec<bool>,
    pub inlier_count: usize,
    /// Hypotheses drawn before stopping.
    pub hypotheses: usize,
}

fn reprojection_error(pose: &Pose, k: &CameraIntrinsics, c: &Correspondence2D3D) -> f64 {
    let p = pose.transform(&c.scene);
    if !(p.z > super::MIN_DEPTH) {
        return f64::INFINITY;
    }
    let u = k.fx * p.x / p.z + k.cx;
    let v = k.fy * p.y / p.z + k.cy;
    ((u - c.pixel.x).powi(2) + (v - c.pixel.y).powi(2)).sqrt()
}

fn inlier_mask(pose: &Pose, k: &CameraIntrinsics, data: &[Correspondence2D3D], threshold: f64) -> Vec<bool> {
    data.iter().map(|c| reprojection_error(pose, k, c) < threshold).collect()
}

/// Robust absolute pose from 2D–3D correspondences.
///
/// Each hypothesis solves P3P on three sampled correspondences and keeps the
/// solution that best reprojects a fourth. The hypothesis with most inliers
/// wins (earliest on ties) and is polished by Levenberg–Marquardt on its
/// inliers, after which the mask is recomputed.
pub fn pnp_ransac(
    data: &[Correspondence2D3D],
    k: &CameraIntrinsics,
    config: &RansacConfig,
) -> Result<PnpResult, GeometryError> {
    if data.len() < 4 {
        return Err(GeometryError::InsufficientPoints(data.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let rays: Vec<Vector3<f64>> = data.iter().map(|c| k.unproject(c.pixel.x, c.pixel.y)).collect();
    let mut best: Option<(Pose, usize)> = None;
    let mut drawn = 0;
    let early = (config.early_exit_ratio * data.len() as f64).ceil() as usize;
    for _ in 0..config.hypotheses {
        drawn += 1;
        let s = rand::seq::index::sample(&mut rng, data.len(), 4).into_vec();
        let world = [data[s[0]].scene, data[s[1]].scene, data[s[2]].scene];
        let bearings = [rays[s[0]], rays[s[1]], rays[s[2]]];
        let candidate = p3p::solve(&world, &bearings)
            .into_iter()
            .map(|(r, t)| Pose::from_nearest_rotation(&r, t))
            .map(|p| (reprojection_error(&p, k, &data[s[3]]), p))
            .filter(|(e, _)| e.is_finite())
            .min_by(|a, b| a.0.total_cmp(&b.0));
        let Some((_, pose)) = candidate else { continue };
        let count = data.iter().filter(|c| reprojection_error(&pose, k, c) < config.threshold).count();
        if best.as_ref().is_none_or(|(_, n)| count > *n) {
            best = Some((pose, count));
        }
        if count >= early.max(4) {
            break;
        }
    }
    let (mut pose, count) = best.ok_or(GeometryError::NoConsensus { best_inliers: 0 })?;
    if count < 4 {
        return Err(GeometryError::NoConsensus { best_inliers: count });
    }
    let mut mask = inlier_mask(&pose, k, data, config.threshold);
    for _ in 0..2 {
        let subset: Vec<Correspondence2D3D> =
            data.iter().zip(&mask).filter(|(_, m)| **m).map(|(c, _)| *c).collect();
        if subset.len() < 4 {
            break;
        }
        pose = refine_pose(&pose, k, &subset, config.refine_iterations);
        let next = inlier_mask(&pose, k, data, config.threshold);
        let changed = next != mask;
        mask = next;
        if !changed {
            break;
        }
    }
    let inlier_count = mask.iter().filter(|m| **m).count();
    if inlier_count < 4 {
        return Err(GeometryError::NoConsensus { best_inliers: inlier_count });
    }
    Ok(PnpResult { pose, inliers: mask, inlier_count, hypotheses: drawn })
}

fn total_cost(pose: &Pose, k: &CameraIntrinsics, data: &[Correspondence2D3D]) -> f64 {
    data.iter().map(|c| reprojection_error(pose, k, c).powi(2)).sum()
}

/// Levenberg–Marquardt over `R ← exp(ω)·R`, `t ← t + δ`, minimizing the sum
/// of squared reprojection errors.
pub fn refine_pose(pose: &Pose, k: &CameraIntrinsics, data: &[Correspondence2D3D], iterations: usize) -> Pose {
    let mut pose = *pose;
    let mut cost = total_cost(&pose, k, data);
    let mut lambda = super::INITIAL_DAMPING;
    for _ in 0..iterations {
        if !(cost > 0.0) || !cost.is_finite() {
            break;
        }
        let mut jtj = Matrix6::<f64>::zeros();
        let mut jtr = Vector6::<f64>::zeros();
        for c in data {
            let rx = pose.rotation() * c.scene;
            let p = rx + pose.translation();
            if !(p.z > super::MIN_DEPTH) {
                continue;
            }
            let r = Vector2::new(
                k.fx * p.x / p.z + k.cx - c.pixel.x,
                k.fy * p.y / p.z + k.cy - c.pixel.y,
            );
            #[rustfmt::skip]
            let dproj = Matrix2x3::new(
                k.fx / p.z, 0.0, -k.fx * p.x / (p.z * p.z),
                0.0, k.fy / p.z, -k.fy * p.y / (p.z * p.z),
            );
            let mut dp = SMatrix::<f64, 3, 6>::zeros();
            dp.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-rx.cross_matrix()));
            dp.fixed_view_mut::<3, 3>(0, 3).copy_from(&Matrix3::identity());
            let j = dproj * dp;
            jtj += j.transpose() * j;
            jtr += j.transpose() * r;
        }
        let mut improved = false;
        while lambda <= super::MAX_DAMPING {
            let mut damped = jtj;
            for d in 0..6 {
                damped[(d, d)] += lambda * jtj[(d, d)].max(1e-12);
            }
            let Some(step) = damped.cholesky().map(|ch| ch.solve(&(-jtr))) else {
                lambda *= 10.0;
                continue;
            };
            let omega = Vector3::new(step[0], step[1], step[2]);
            let rotation = Rotation3::new(omega).matrix() * pose.rotation();
            let candidate = Pose::from_nearest_rotation(&rotation, pose.translation() + Vector3::new(step[3], step[4], step[5]));
            let new_cost = total_cost(&candidate, k, data);
            if new_cost < cost {
                pose = candidate;
                cost = new_cost;
                lambda = (lambda / 10.0).max(1e-15);
                improved = true;
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    pose
}
