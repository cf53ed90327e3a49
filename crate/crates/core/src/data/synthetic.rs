use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DataError, Frame, SceneDataset, Split};
use crate::geometry::{project, CameraIntrinsics, DepthMap, Pose};
use crate::numerics::Tensor;

/// A textured axis-aligned box room `[0, room.x] × [0, room.y] × [0, room.z]`
/// (z up) seen from cameras on a horizontal arc that look at `target`.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SyntheticSceneSpec {
    pub room: [f64; 3],
    pub texture_seed: u64,
    /// Checker cell edge in meters.
    pub cell_size: f64,
    pub frames: usize,
    /// Arc center in the floor plane.
    pub center: [f64; 2],
    pub radius: f64,
    pub camera_height: f64,
    pub start_degrees: f64,
    pub arc_degrees: f64,
    pub target: [f64; 3],
    /// Uniform per-frame perturbation of the camera position, meters.
    pub jitter: f64,
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Default for SyntheticSceneSpec {
    fn default() -> Self {
        Self {
            room: [3.0, 3.0, 2.4],
            texture_seed: 1,
            cell_size: 0.15,
            frames: 20,
            center: [2.0, 1.5],
            radius: 0.6,
            camera_height: 1.2,
            start_degrees: -45.0,
            arc_degrees: 90.0,
            target: [-2.0, 1.5, 0.9],
            jitter: 0.02,
            width: 160,
            height: 160,
            fx: 140.0,
            fy: 140.0,
            cx: 79.5,
            cy: 79.5,
        }
    }
}

/// Consecutive frames must share at least this fraction of their view.
pub const MIN_OVERLAP: f64 = 0.3;

impl SyntheticSceneSpec {
    pub fn intrinsics(&self) -> Result<CameraIntrinsics, DataError> {
        Ok(CameraIntrinsics::new(self.fx, self.fy, self.cx, self.cy)?)
    }

    fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::InvalidSpec(m));
        if self.room.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return bad(format!("room dimensions must be positive, got {:?}", self.room));
        }
        if self.frames == 0 || self.width < 2 || self.height < 2 {
            return bad("need at least one frame and a 2x2 image".into());
        }
        if !(self.cell_size > 0.0) || !(self.jitter >= 0.0) || !(self.radius >= 0.0) {
            return bad("cell_size must be positive, jitter and radius nonnegative".into());
        }
        Ok(())
    }

    /// Flat `scene.*` key/value pairs.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let list = |v: &[f64]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",");
        [
            ("room", list(&self.room)),
            ("texture_seed", self.texture_seed.to_string()),
            ("cell_size", format!("{:?}", self.cell_size)),
            ("frames", self.frames.to_string()),
            ("center", list(&self.center)),
            ("radius", format!("{:?}", self.radius)),
            ("camera_height", format!("{:?}", self.camera_height)),
            ("start_degrees", format!("{:?}", self.start_degrees)),
            ("arc_degrees", format!("{:?}", self.arc_degrees)),
            ("target", list(&self.target)),
            ("jitter", format!("{:?}", self.jitter)),
            ("width", self.width.to_string()),
            ("height", self.height.to_string()),
            ("fx", format!("{:?}", self.fx)),
            ("fy", format!("{:?}", self.fy)),
            ("cx", format!("{:?}", self.cx)),
            ("cy", format!("{:?}", self.cy)),
        ]
        .into_iter()
        .map(|(k, v)| (format!("scene.{k}"), v))
        .collect()
    }

    /// Applies `scene.*` keys on top of the defaults; other keys are ignored.
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self, DataError> {
        let mut spec = Self::default();
        for (key, value) in pairs {
            let Some(k) = key.strip_prefix("scene.") else { continue };
            let bad = || DataError::InvalidSpec(format!("{key}: cannot parse '{value}'"));
            let float = || value.trim().parse::<f64>().map_err(|_| bad());
            let int = || value.trim().parse::<usize>().map_err(|_| bad());
            let floats = |n: usize| -> Result<Vec<f64>, DataError> {
                let v: Vec<f64> = value.split(',').map(|s| s.trim().parse()).collect::<Result<_, _>>().map_err(|_| bad())?;
                if v.len() == n {
                    Ok(v)
                } else {
                    Err(bad())
                }
            };
            match k {
                "room" => spec.room.copy_from_slice(&floats(3)?),
                "texture_seed" => spec.texture_seed = value.trim().parse().map_err(|_| bad())?,
                "cell_size" => spec.cell_size = float()?,
                "frames" => spec.frames = int()?,
                "center" => spec.center.copy_from_slice(&floats(2)?),
                "radius" => spec.radius = float()?,
                "camera_height" => spec.camera_height = float()?,
                "start_degrees" => spec.start_degrees = float()?,
                "arc_degrees" => spec.arc_degrees = float()?,
                "target" => spec.target.copy_from_slice(&floats(3)?),
                "jitter" => spec.jitter = float()?,
                "width" => spec.width = int()?,
                "height" => spec.height = int()?,
                "fx" => spec.fx = float()?,
                "fy" => spec.fy = float()?,
                "cx" => spec.cx = float()?,
                "cy" => spec.cy = float()?,
                _ => return Err(DataError::InvalidSpec(format!("unknown key '{key}'"))),
            }
        }
        spec.validate()?;
        Ok(spec)
    }
}

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn hash(seed: u64, face: usize, i: i64, j: i64, salt: u64) -> f64 {
    let mut h = mix(seed ^ 0x9e37_79b9_7f4a_7c15);
    for v in [face as u64, i as u64, j as u64, salt] {
        h = mix(h ^ v.wrapping_add(0x9e37_79b9_7f4a_7c15));
    }
    (h >> 11) as f64 / (1u64 << 53) as f64
}

const NOISE_SPACING: f64 = 0.05;

fn value_noise(seed: u64, face: usize, s: f64, t: f64) -> f64 {
    let (x, y) = (s / NOISE_SPACING, t / NOISE_SPACING);
    let (i, j) = (x.floor() as i64, y.floor() as i64);
    let (fx, fy) = (x - i as f64, y - j as f64);
    let at = |di, dj| hash(seed, face, i + di, j + dj, 7);
    (1.0 - fy) * ((1.0 - fx) * at(0, 0) + fx * at(1, 0)) + fy * ((1.0 - fx) * at(0, 1) + fx * at(1, 1))
}

/// A hit on the room's inner surface: face index `2·axis + (far side)` and
/// the two in-plane coordinates.
struct Hit {
    face: usize,
    s: f64,
    t: f64,
}

/// Distance along a ray from an interior point to the box wall, and the wall.
fn intersect(room: &[f64; 3], origin: &Vector3<f64>, dir: &Vector3<f64>) -> (f64, usize) {
    let mut best = (f64::INFINITY, 0);
    for a in 0..3 {
        if dir[a] == 0.0 {
            continue;
        }
        let far = dir[a] > 0.0;
        let plane = if far { room[a] } else { 0.0 };
        let t = (plane - origin[a]) / dir[a];
        if t < best.0 {
            best = (t, 2 * a + far as usize);
        }
    }
    best
}

fn surface(room: &[f64; 3], origin: &Vector3<f64>, dir: &Vector3<f64>) -> (f64, Hit) {
    let (t, face) = intersect(room, origin, dir);
    let p = origin + dir * t;
    let axis = face / 2;
    let (s, tt) = (p[(axis + 1) % 3], p[(axis + 2) % 3]);
    (t, Hit { face, s, t: tt })
}

fn texture(spec: &SyntheticSceneSpec, hit: &Hit) -> [f64; 3] {
    let (i, j) = ((hit.s / spec.cell_size).floor() as i64, (hit.t / spec.cell_size).floor() as i64);
    let seed = spec.texture_seed;
    let shade = if (i + j).rem_euclid(2) == 0 { 1.0 } else { 0.45 };
    let noise = value_noise(seed, hit.face, hit.s, hit.t) - 0.5;
    let mut rgb = [0.0; 3];
    for (c, v) in rgb.iter_mut().enumerate() {
        let base = 0.2 + 0.75 * hash(seed, hit.face, i, j, c as u64);
        *v = (base * shade + 0.25 * noise).clamp(0.0, 1.0);
    }
    rgb
}

fn quantize(v: f64) -> f64 {
    (v * 255.0).round() / 255.0
}

fn camera_poses(spec: &SyntheticSceneSpec, seed: u64) -> Result<Vec<Pose>, DataError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let target = Vector3::from(spec.target);
    let up = Vector3::z();
    (0..spec.frames)
        .map(|i| {
            let step = if spec.frames > 1 { spec.arc_degrees / (spec.frames - 1) as f64 } else { 0.0 };
            let angle = (spec.start_degrees + step * i as f64).to_radians();
            let mut eye = Vector3::new(
                spec.center[0] + spec.radius * angle.cos(),
                spec.center[1] + spec.radius * angle.sin(),
                spec.camera_height,
            );
            if spec.jitter > 0.0 {
                for a in 0..3 {
                    eye[a] += rng.random_range(-spec.jitter..=spec.jitter);
                }
            }
            if (0..3).any(|a| !(eye[a] > 0.0 && eye[a] < spec.room[a])) {
                return Err(DataError::InvalidSpec(format!("camera {i} at {:?} is outside the room", eye.as_slice())));
            }
            Pose::look_at(eye, target, up).map_err(|e| DataError::InvalidSpec(format!("camera {i}: {e}")))
        })
        .collect()
}

fn render(spec: &SyntheticSceneSpec, k: &CameraIntrinsics, pose: &Pose) -> Result<(Tensor, DepthMap), DataError> {
    let (w, h) = (spec.width, spec.height);
    let origin = pose.center();
    let to_world = pose.rotation().transpose();
    let ray = |u: f64, v: f64| to_world * k.unproject(u, v);
    let mut image = vec![0.0; 3 * h * w];
    let mut depth = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let (u, v) = (c as f64, r as f64);
            // unproject has unit z, so the ray parameter is the z-depth
            depth[r * w + c] = intersect(&spec.room, &origin, &ray(u, v)).0;
            let mut rgb = [0.0; 3];
            for (du, dv) in [(-0.25, -0.25), (0.25, -0.25), (-0.25, 0.25), (0.25, 0.25)] {
                let (_, hit) = surface(&spec.room, &origin, &ray(u + du, v + dv));
                let t = texture(spec, &hit);
                for ch in 0..3 {
                    rgb[ch] += 0.25 * t[ch];
                }
            }
            for ch in 0..3 {
                image[ch * h * w + r * w + c] = quantize(rgb[ch]);
            }
        }
    }
    Ok((Tensor::new(&[3, h, w], image)?, DepthMap::new(w, h, depth)?))
}

/// Fraction of frame `a`'s pixels (on a 4-px lattice) that are visible in `b`.
fn overlap(a: &Frame, b: &Frame) -> f64 {
    let depth = a.depth.as_ref().expect("rendered frames have depth");
    let (h, w) = (depth.height(), depth.width());
    let (mut seen, mut total) = (0usize, 0usize);
    for r in (0..h).step_by(4) {
        for c in (0..w).step_by(4) {
            total += 1;
            let x = a.pose.inverse_transform(&(a.intrinsics.unproject(c as f64, r as f64) * depth.get(r, c)));
            if let Ok((p, _)) = project(&b.pose, &b.intrinsics, &x) {
                if p.x >= -0.5 && p.y >= -0.5 && p.x <= w as f64 - 0.5 && p.y <= h as f64 - 0.5 {
                    seen += 1;
                }
            }
        }
    }
    seen as f64 / total as f64
}

/// Renders the room from every camera. Even-indexed frames form the training
/// split, odd ones the test split. `seed` drives the camera jitter.
pub fn generate_synthetic_scene(spec: &SyntheticSceneSpec, seed: u64) -> Result<SceneDataset, DataError> {
    spec.validate()?;
    let k = spec.intrinsics()?;
    let poses = camera_poses(spec, seed)?;
    let mut frames = Vec::with_capacity(spec.frames);
    for (id, pose) in poses.into_iter().enumerate() {
        let (image, depth) = render(spec, &k, &pose)?;
        frames.push(Frame {
            id,
            image,
            depth: Some(depth),
            pose,
            intrinsics: k,
            split: if id % 2 == 0 { Split::Train } else { Split::Test },
        });
    }
    for pair in frames.windows(2) {
        let o = overlap(&pair[0], &pair[1]);
        if o < MIN_OVERLAP {
            return Err(DataError::InvalidSpec(format!(
                "frames {} and {} overlap by only {:.0}%",
                pair[0].id,
                pair[1].id,
                100.0 * o
            )));
        }
    }
    Ok(SceneDataset { frames, original_size: (spec.height, spec.width), padding: (0, 0) })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticSceneSpec {
        SyntheticSceneSpec { width: 48, height: 40, fx: 42.0, fy: 42.0, cx: 23.5, cy: 19.5, ..Default::default() }
    }

    #[test]
    fn split_and_determinism() {
        let spec = SyntheticSceneSpec { frames: 20, ..small() };
        let a = generate_synthetic_scene(&spec, 5).unwrap();
        assert_eq!(a.train().count(), 10);
        assert_eq!(a.test().count(), 10);
        assert!(a.frames.iter().all(|f| f.depth.is_some()));
        let b = generate_synthetic_scene(&spec, 5).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic_scene(&spec, 6).unwrap();
        assert_ne!(a.frames[0].pose, c.frames[0].pose);
        assert!(a.frames[0].image.data().iter().all(|v| (0.0..=1.0).contains(v) && ((v * 255.0).round() - v * 255.0).abs() < 1e-9));
    }

    #[test]
    fn center_depth_matches_analytic_plane() {
        // Camera at the room center looking along +x: the center ray hits x = 3.
        let spec = SyntheticSceneSpec {
            frames: 1,
            radius: 0.0,
            jitter: 0.0,
            center: [1.5, 1.0],
            camera_height: 1.0,
            target: [2.5, 1.0, 1.0],
            width: 9,
            height: 9,
            cx: 4.0,
            cy: 4.0,
            ..small()
        };
        let scene = generate_synthetic_scene(&spec, 0).unwrap();
        let d = scene.frames[0].depth.as_ref().unwrap();
        assert!((d.get(4, 4) - 1.5).abs() < 1e-9);
    }

    #[test]
    fn depth_matches_brute_force_plane_search() {
        let spec = SyntheticSceneSpec { frames: 3, ..small() };
        let scene = generate_synthetic_scene(&spec, 2).unwrap();
        for frame in &scene.frames {
            let d = frame.depth.as_ref().unwrap();
            for (r, c) in [(0, 0), (7, 31), (39, 47), (20, 10)] {
                let eye = frame.pose.center();
                let dir = frame.pose.rotation().transpose() * frame.intrinsics.unproject(c as f64, r as f64);
                // Every wall plane, keeping the hit that stays inside the box.
                let mut depth = None;
                for a in 0..3 {
                    for plane in [0.0, spec.room[a]] {
                        let t = (plane - eye[a]) / dir[a];
                        let p = eye + dir * t;
                        let inside = (0..3).all(|b| p[b] >= -1e-12 && p[b] <= spec.room[b] + 1e-12);
                        if t > 0.0 && inside {
                            depth = Some(frame.pose.transform(&p).z);
                        }
                    }
                }
                assert!((d.get(r, c) - depth.unwrap()).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn camera_outside_room_is_rejected() {
        let spec = SyntheticSceneSpec { radius: 2.0, ..small() };
        assert!(matches!(generate_synthetic_scene(&spec, 0), Err(DataError::InvalidSpec(_))));
    }

    #[test]
    fn low_overlap_is_rejected() {
        let spec = SyntheticSceneSpec {
            frames: 3,
            center: [1.5, 1.5],
            target: [1.5, 1.5, 1.2],
            arc_degrees: 300.0,
            ..small()
        };
        assert!(generate_synthetic_scene(&spec, 0).is_err());
    }

    #[test]
    fn spec_pairs_round_trip() {
        let spec = SyntheticSceneSpec { texture_seed: 9, room: [2.5, 3.0, 2.0], jitter: 0.0, ..Default::default() };
        let pairs = spec.to_pairs();
        let back = SyntheticSceneSpec::from_pairs(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str()))).unwrap();
        assert_eq!(back, spec);
        assert!(SyntheticSceneSpec::from_pairs([("scene.frames", "x")]).is_err());
        assert!(SyntheticSceneSpec::from_pairs([("scene.bogus", "1")]).is_err());
    }
}
