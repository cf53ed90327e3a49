use nalgebra::{DMatrix, Matrix3, Vector2, Vector3};

use super::{project, CameraIntrinsics, GeometryError, Pose};

/// One sighting of a track in a camera.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Observation {
    pub camera_index: usize,
    pub pixel: Vector2<f64>,
    /// Projective depth λ of the observation, filled once the point is known.
    pub depth_scale: Option<f64>,
}

impl Observation {
    pub fn new(camera_index: usize, u: f64, v: f64) -> Self {
        Self { camera_index, pixel: Vector2::new(u, v), depth_scale: None }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Track {
    pub observations: Vec<Observation>,
    pub point: Option<Vector3<f64>>,
}

impl Track {
    pub fn new(observations: Vec<Observation>) -> Self {
        Self { observations, point: None }
    }

    fn distinct_cameras(&self) -> usize {
        let mut cams: Vec<usize> = self.observations.iter().map(|o| o.camera_index).collect();
        cams.sort_unstable();
        cams.dedup();
        cams.len()
    }
}

/// Ratio of largest to third singular value of the DLT system above which
/// the null space is treated as ambiguous.
pub const MAX_CONDITION: f64 = 1e12;

fn camera<'a>(
    index: usize,
    poses: &'a [Pose],
    intrinsics: &'a [CameraIntrinsics],
) -> Result<(&'a Pose, &'a CameraIntrinsics), GeometryError> {
    match (poses.get(index), intrinsics.get(index)) {
        (Some(p), Some(k)) => Ok((p, k)),
        _ => Err(GeometryError::CameraIndex(index)),
    }
}

/// Linear (DLT) triangulation in normalized image coordinates.
///
/// Each observation contributes `x̂·P₃ − P₁` and `ŷ·P₃ − P₂` for `P = [R | t]`;
/// rows are scaled to unit norm before the SVD.
pub fn triangulate(
    track: &Track,
    poses: &[Pose],
    intrinsics: &[CameraIntrinsics],
) -> Result<Vector3<f64>, GeometryError> {
    if track.observations.len() < 2 || track.distinct_cameras() < 2 {
        return Err(GeometryError::InsufficientObservations(track.distinct_cameras()));
    }
    let n = track.observations.len();
    let mut a = DMatrix::<f64>::zeros(2 * n, 4);
    for (i, obs) in track.observations.iter().enumerate() {
        let (pose, k) = camera(obs.camera_index, poses, intrinsics)?;
        let ray = k.unproject(obs.pixel.x, obs.pixel.y);
        let (r, t) = (pose.rotation(), pose.translation());
        for (j, coord) in [ray.x, ray.y].into_iter().enumerate() {
            let mut row = [0.0; 4];
            for c in 0..3 {
                row[c] = coord * r[(2, c)] - r[(j, c)];
            }
            row[3] = coord * t.z - t[j];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            for c in 0..4 {
                a[(2 * i + j, c)] = row[c] / norm;
            }
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.expect("v_t requested");
    let mut order: Vec<usize> = (0..4).collect();
    order.sort_by(|&x, &y| svd.singular_values[y].total_cmp(&svd.singular_values[x]));
    let sigma = |i: usize| svd.singular_values[order[i]];
    if !(sigma(0) <= MAX_CONDITION * sigma(2)) {
        return Err(GeometryError::DegenerateTriangulation(format!(
            "condition number {:e} exceeds {MAX_CONDITION:e}",
            sigma(0) / sigma(2)
        )));
    }
    let h = v_t.row(order[3]);
    if h[3].abs() <= 1e-12 * h.norm() {
        return Err(GeometryError::DegenerateTriangulation("point at infinity (parallel rays)".into()));
    }
    let x = Vector3::new(h[0] / h[3], h[1] / h[3], h[2] / h[3]);
    for obs in &track.observations {
        let (pose, _) = camera(obs.camera_index, poses, intrinsics)?;
        let z = pose.transform(&x).z;
        if !(z > 0.0) {
            return Err(GeometryError::DegenerateTriangulation(format!(
                "point lies behind camera {} (depth {z})",
                obs.camera_index
            )));
        }
    }
    Ok(x)
}

/// Sum of squared pixel residuals of one point over its observations.
/// Infinite when the point falls behind any observing camera.
pub fn reprojection_cost(
    point: &Vector3<f64>,
    observations: &[Observation],
    poses: &[Pose],
    intrinsics: &[CameraIntrinsics],
) -> Result<f64, GeometryError> {
    let mut cost = 0.0;
    for obs in observations {
        let (pose, k) = camera(obs.camera_index, poses, intrinsics)?;
        match project(pose, k, point) {
            Ok((p, _)) => cost += (p - obs.pixel).norm_squared(),
            Err(_) => return Ok(f64::INFINITY),
        }
    }
    Ok(cost)
}

/// Mean reprojection distance in pixels.
pub fn mean_reprojection_error(
    point: &Vector3<f64>,
    observations: &[Observation],
    poses: &[Pose],
    intrinsics: &[CameraIntrinsics],
) -> Result<f64, GeometryError> {
    let mut total = 0.0;
    for obs in observations {
        let (pose, k) = camera(obs.camera_index, poses, intrinsics)?;
        match project(pose, k, point) {
            Ok((p, _)) => total += (p - obs.pixel).norm(),
            Err(_) => return Ok(f64::INFINITY),
        }
    }
    Ok(total / observations.len() as f64)
}

#[derive(Clone, Debug)]
pub struct BundleAdjustment {
    pub tracks: Vec<Track>,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    /// Set when some point's damping grew past [`MAX_DAMPING`]; that point
    /// keeps its best estimate so far.
    pub damping_exceeded: bool,
}

pub const INITIAL_DAMPING: f64 = 1e-3;
pub const MAX_DAMPING: f64 = 1e12;

/// Levenberg–Marquardt refinement of point positions with poses and
/// intrinsics held fixed. Points are independent, so each solves its own 3×3
/// damped normal equations; a step is kept only if it lowers that point's cost.
pub fn bundle_adjust_points(
    tracks: &[Track],
    poses: &[Pose],
    intrinsics: &[CameraIntrinsics],
    max_iters: usize,
    tol: f64,
) -> Result<BundleAdjustment, GeometryError> {
    bundle_adjust_points_with_damping(tracks, poses, intrinsics, max_iters, tol, INITIAL_DAMPING)
}

pub fn bundle_adjust_points_with_damping(
    tracks: &[Track],
    poses: &[Pose],
    intrinsics: &[CameraIntrinsics],
    max_iters: usize,
    tol: f64,
    initial_damping: f64,
) -> Result<BundleAdjustment, GeometryError> {
    let mut out = tracks.to_vec();
    let mut initial_cost = 0.0;
    let mut final_cost = 0.0;
    let mut iterations = 0;
    let mut damping_exceeded = false;
    for (index, track) in out.iter_mut().enumerate() {
        let mut x = track.point.ok_or(GeometryError::MissingPoint(index))?;
        let obs = &track.observations;
        let mut cost = reprojection_cost(&x, obs, poses, intrinsics)?;
        initial_cost += cost;
        let mut lambda = initial_damping;
        let mut it = 0;
        while it < max_iters && cost > 0.0 && cost.is_finite() {
            it += 1;
            let (jtj, jtr) = normal_equations(&x, obs, poses, intrinsics)?;
            let mut accepted = false;
            while !accepted {
                let mut damped = jtj;
                for d in 0..3 {
                    damped[(d, d)] += lambda * jtj[(d, d)].max(1e-12);
                }
                let Some(step) = damped.cholesky().map(|c| c.solve(&(-jtr))) else {
                    lambda *= 10.0;
                    if lambda > MAX_DAMPING {
                        break;
                    }
                    continue;
                };
                let candidate = x + step;
                let new_cost = reprojection_cost(&candidate, obs, poses, intrinsics)?;
                if new_cost < cost {
                    let decrease = cost - new_cost;
                    x = candidate;
                    cost = new_cost;
                    lambda = (lambda / 10.0).max(1e-15);
                    accepted = true;
                    if decrease <= tol * cost.max(tol) || step.norm() <= tol * (x.norm() + tol) {
                        it = max_iters;
                    }
                } else {
                    lambda *= 10.0;
                    if lambda > MAX_DAMPING {
                        break;
                    }
                }
            }
            if !accepted {
                if lambda > MAX_DAMPING && cost > tol {
                    damping_exceeded = true;
                }
                break;
            }
        }
        iterations = iterations.max(it);
        final_cost += cost;
        track.point = Some(x);
        for o in track.observations.iter_mut() {
            o.depth_scale = Some(poses[o.camera_index].transform(&x).z);
        }
    }
    if damping_exceeded {
        log::warn!("bundle adjustment: damping exceeded {MAX_DAMPING:e}; returning best estimates");
    }
    Ok(BundleAdjustment { tracks: out, initial_cost, final_cost, iterations, damping_exceeded })
}

fn normal_equations(
    x: &Vector3<f64>,
    observations: &[Observation],
    poses: &[Pose],
    intrinsics: &[CameraIntrinsics],
) -> Result<(Matrix3<f64>, Vector3<f64>), GeometryError> {
    let mut jtj = Matrix3::zeros();
    let mut jtr = Vector3::zeros();
    for obs in observations {
        let (pose, k) = camera(obs.camera_index, poses, intrinsics)?;
        let c = pose.transform(x);
        let (u, v) = (k.fx * c.x / c.z + k.cx, k.fy * c.y / c.z + k.cy);
        let r = Vector2::new(u - obs.pixel.x, v - obs.pixel.y);
        let dproj = nalgebra::Matrix2x3::new(
            k.fx / c.z, 0.0, -k.fx * c.x / (c.z * c.z),
            0.0, k.fy / c.z, -k.fy * c.y / (c.z * c.z),
        );
        let j = dproj * pose.rotation();
        jtj += j.transpose() * j;
        jtr += j.transpose() * r;
    }
    Ok((jtj, jtr))
}
