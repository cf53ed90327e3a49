//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any criterion fails.

use std::sync::Arc;
use std::time::Instant;

use ascore::data::{
    build_sparse_gt, generate_synthetic_scene, load_scene, read_pgm8, save_scene, MatchingConfig, SceneDataset, Split,
    SyntheticSceneSpec,
};
use ascore::encoder::{Encoder, EncoderConfig, AttentionLayer};
use ascore::eval::{evaluate, render_all_attention, EvalSummary};
use ascore::geometry::{
    backproject, bundle_adjust_points, pnp_ransac, pose_error, project, reprojection_cost, triangulate, CameraIntrinsics,
    Correspondence2D3D, DepthMap, Observation, Pose, RansacConfig, Track,
};
use ascore::heads::{bilinear_taps, dense_predict, sample_descriptors, sparse_predict, Keypoint, MlpHead};
use ascore::model::{Model, ModelConfig, Mode};
use ascore::numerics::gradcheck::check_gradients;
use ascore::numerics::{Backend, Graph, NumericsError, ParamStore, Reduction, Tensor, Var};
use ascore::training::{lr_schedule, train, TrainConfig, TrainingSet};
use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn fail<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// `Σ y ⊙ w` for a fixed random `w`, so every output entry gets a distinct
/// upstream gradient.
fn contract(g: &mut Graph, y: Var, rng: &mut ChaCha8Rng) -> Result<Var, NumericsError> {
    let w = g.input(uniform(&g.shape(&y), rng));
    let p = g.mul(&y, &w)?;
    Ok(g.sum(&p))
}

fn numerics<E: std::fmt::Display>(e: E) -> NumericsError {
    NumericsError::InvalidArgument(e.to_string())
}

// ---------------------------------------------------------------- gradients

const GRAD_INSTANCES: u64 = 20;

fn gradient_integrity() -> Outcome {
    let start = Instant::now();
    let mut worst: Vec<(&str, f64)> = Vec::new();
    type Case = fn(u64) -> Result<f64, NumericsError>;
    let cases: [(&str, Case); 7] = [
        ("conv2d", |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let stride = rng.random_range(1..=2);
            let (cin, cout) = (rng.random_range(1..=3), rng.random_range(1..=3));
            let mut store = ParamStore::new();
            store.add("w", uniform(&[cout, cin, 3, 3], &mut rng))?;
            store.add("b", uniform(&[cout], &mut rng))?;
            let x = uniform(&[cin, rng.random_range(3..=6), rng.random_range(3..=6)], &mut rng);
            let r = check_gradients(&mut store, &[x], 1e-5, |g, s, xs| {
                let (w, b) = (g.param(s, s.id("w").unwrap()), g.param(s, s.id("b").unwrap()));
                let y = g.conv2d(&xs[0], &w, &b, stride, 1)?;
                contract(g, y, &mut ChaCha8Rng::seed_from_u64(seed + 1000))
            })?;
            Ok(r.max_rel_error)
        }),
        ("linear", |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (n, i, o) = (rng.random_range(1..=5), rng.random_range(1..=6), rng.random_range(1..=4));
            let mut store = ParamStore::new();
            store.add("w", uniform(&[o, i], &mut rng))?;
            store.add("b", uniform(&[o], &mut rng))?;
            let x = uniform(&[n, i], &mut rng);
            let r = check_gradients(&mut store, &[x], 1e-5, |g, s, xs| {
                let (w, b) = (g.param(s, s.id("w").unwrap()), g.param(s, s.id("b").unwrap()));
                let y = g.linear(&xs[0], &w, &b)?;
                contract(g, y, &mut ChaCha8Rng::seed_from_u64(seed + 1000))
            })?;
            Ok(r.max_rel_error)
        }),
        ("softmax", |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let axis = rng.random_range(0..2);
            let x = Tensor::from_fn(&[rng.random_range(1..=5), rng.random_range(2..=6)], |_| rng.random_range(-3.0..3.0));
            let r = check_gradients(&mut ParamStore::new(), &[x], 1e-5, |g, _, xs| {
                let y = g.softmax(&xs[0], axis)?;
                contract(g, y, &mut ChaCha8Rng::seed_from_u64(seed + 1000))
            })?;
            Ok(r.max_rel_error)
        }),
        ("attention layer", |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let heads = rng.random_range(1..=2);
            let dim = 4 * heads;
            let mut store = ParamStore::new();
            let layer = AttentionLayer::new(&mut store, "l", dim, heads, &mut rng).map_err(numerics)?;
            let x = uniform(&[rng.random_range(2..=6), dim], &mut rng);
            let r = check_gradients(&mut store, &[x], 1e-5, |g, s, xs| {
                let y = layer.forward(g, s, &xs[0], None).map_err(numerics)?;
                contract(g, y, &mut ChaCha8Rng::seed_from_u64(seed + 1000))
            })?;
            Ok(r.max_rel_error)
        }),
        ("bilinear_sample", |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (d, h, w) = (rng.random_range(1..=4), rng.random_range(2..=5), rng.random_range(2..=5));
            let map = uniform(&[d, h, w], &mut rng);
            let points: Vec<[f64; 2]> = (0..rng.random_range(1..=6)).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
            let taps = Arc::new(bilinear_taps(&points, h, w).map_err(numerics)?);
            let r = check_gradients(&mut ParamStore::new(), &[map], 1e-5, |g, _, xs| {
                let y = sample_descriptors(g, &xs[0], taps.clone()).map_err(numerics)?;
                contract(g, y, &mut ChaCha8Rng::seed_from_u64(seed + 1000))
            })?;
            Ok(r.max_rel_error)
        }),
        ("MLP head", |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = rng.random_range(2..=8);
            let mut store = ParamStore::new();
            let head = MlpHead::new(&mut store, &[d, 12, 12, 3], &mut rng).map_err(numerics)?;
            let x = uniform(&[rng.random_range(1..=5), d], &mut rng);
            let r = check_gradients(&mut store, &[x], 1e-5, |g, s, xs| {
                let y = head.forward(g, s, &xs[0]).map_err(numerics)?;
                contract(g, y, &mut ChaCha8Rng::seed_from_u64(seed + 1000))
            })?;
            Ok(r.max_rel_error)
        }),
        ("l2_loss", |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.random_range(1..=6);
            let mut mask: Vec<bool> = (0..n).map(|_| rng.random_bool(0.7)).collect();
            mask[rng.random_range(0..n)] = true;
            let reduction = if rng.random_bool(0.5) { Reduction::Sum } else { Reduction::Mean };
            let target = uniform(&[n, 3], &mut rng);
            let pred = uniform(&[n, 3], &mut rng);
            let r = check_gradients(&mut ParamStore::new(), &[pred], 1e-5, |g, _, xs| {
                g.l2_loss(&xs[0], &target, &mask, reduction)
            })?;
            Ok(r.max_rel_error)
        }),
    ];
    for (name, case) in cases {
        let mut max = 0.0f64;
        for seed in 0..GRAD_INSTANCES {
            let err = case(seed).map_err(|e| format!("{name} seed {seed}: {e}"))?;
            ensure!(err < 1e-4, "{name} seed {seed}: relative error {err:e}");
            max = max.max(err);
        }
        worst.push((name, max));
    }
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 120.0, "took {secs:.1} s");
    let overall = worst.iter().map(|w| w.1).fold(0.0, f64::max);
    Ok(format!("7 ops x {GRAD_INSTANCES} instances, max rel error {overall:.1e}, {secs:.1} s"))
}

// ---------------------------------------------------------------- attention

fn attention_normalization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut store = ParamStore::new();
    let encoder = Encoder::new(EncoderConfig::tiny(), &mut store, &mut rng).map_err(fail)?;
    let mut worst = 0.0f64;
    let mut rows = 0usize;
    for _ in 0..100 {
        let (h, w) = (8 * rng.random_range(2..=6), 8 * rng.random_range(2..=6));
        let image = Tensor::from_fn(&[3, h, w], |_| rng.random_range(0.0..1.0));
        let map = encoder.run(&store, &image, true).map_err(fail)?;
        for layer in map.attention.as_ref().ok_or("attention not retained")? {
            for scores in layer {
                let n = scores.shape()[1];
                for row in scores.data().chunks(n) {
                    worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
                    rows += 1;
                }
            }
        }
    }
    ensure!(worst <= 1e-9, "row sum off by {worst:e}");
    Ok(format!("{rows} rows over 100 inputs, max |sum - 1| = {worst:.1e}"))
}

// ---------------------------------------------------------------- geometry

fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
    let aa = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0));
    let t = Vector3::from_fn(|_, _| rng.random_range(-2.0..2.0));
    Pose::from_axis_angle(aa, t)
}

fn random_intrinsics(rng: &mut ChaCha8Rng, w: f64, h: f64) -> CameraIntrinsics {
    let f = rng.random_range(0.6..1.5) * w;
    CameraIntrinsics::new(f, f * rng.random_range(0.9..1.1), w / 2.0 + rng.random_range(-3.0..3.0), h / 2.0 + rng.random_range(-3.0..3.0))
        .expect("positive focal")
}

/// A camera at `center` looking at `target`.
fn looking_at(center: Vector3<f64>, target: Vector3<f64>) -> Pose {
    Pose::look_at(center, target, Vector3::new(0.0, 0.0, 1.0)).expect("non-degenerate")
}

fn geometry_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    // project ∘ backproject
    let (w, h) = (32usize, 24usize);
    let mut round_trip = 0.0f64;
    for _ in 0..1000 {
        let pose = random_pose(&mut rng);
        let k = random_intrinsics(&mut rng, w as f64, h as f64);
        let (row, col) = (rng.random_range(0..h), rng.random_range(0..w));
        let d = rng.random_range(0.2..10.0);
        let mut values = vec![0.0; w * h];
        values[row * w + col] = d;
        let map = backproject(&DepthMap::new(w, h, values).map_err(fail)?, &k, &pose);
        let x = map.get(row, col).ok_or("backprojected pixel masked")?;
        let (p, depth) = project(&pose, &k, &x).map_err(fail)?;
        ensure!((p - Vector2::new(col as f64, row as f64)).norm() < 1e-6, "pixel moved to {p:?}");
        let again = pose.inverse_transform(&(k.unproject(p.x, p.y) * depth));
        round_trip = round_trip.max((again - x).norm());
    }
    ensure!(round_trip < 1e-9, "round trip error {round_trip:e} m");

    // noise-free triangulation and bundle adjustment
    let mut tri = 0.0f64;
    let mut ba_cases = 0;
    for _ in 0..200 {
        let x = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let views = rng.random_range(2..=5);
        let poses: Vec<Pose> = (0..views)
            .map(|_| {
                let dir = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)).normalize();
                looking_at(x + dir * rng.random_range(1.5..4.0) + Vector3::new(0.0, 0.0, 0.01), x)
            })
            .collect();
        let ks: Vec<CameraIntrinsics> = (0..views).map(|_| random_intrinsics(&mut rng, 640.0, 480.0)).collect();
        let obs: Vec<Observation> = (0..views)
            .map(|i| project(&poses[i], &ks[i], &x).map(|(p, _)| Observation::new(i, p.x, p.y)))
            .collect::<Result<_, _>>()
            .map_err(fail)?;
        let exact = triangulate(&Track::new(obs.clone()), &poses, &ks).map_err(fail)?;
        tri = tri.max((exact - x).norm());

        let noisy: Vec<Observation> = obs
            .iter()
            .map(|o| Observation::new(o.camera_index, o.pixel.x + rng.random_range(-2.0..2.0), o.pixel.y + rng.random_range(-2.0..2.0)))
            .collect();
        let mut track = Track::new(noisy);
        let Ok(init) = triangulate(&track, &poses, &ks) else { continue };
        track.point = Some(init);
        let before = reprojection_cost(&init, &track.observations, &poses, &ks).map_err(fail)?;
        let ba = bundle_adjust_points(&[track], &poses, &ks, 50, 1e-12).map_err(fail)?;
        let after = reprojection_cost(&ba.tracks[0].point.unwrap(), &ba.tracks[0].observations, &poses, &ks).map_err(fail)?;
        ensure!(after <= before, "bundle adjustment raised cost {before} -> {after}");
        ba_cases += 1;
    }
    ensure!(tri < 1e-6, "triangulation error {tri:e} m");

    // RANSAC PnP with 30 % outliers
    let mut worst = (0.0f64, 0.0f64);
    for trial in 0..50u64 {
        let k = random_intrinsics(&mut rng, 640.0, 480.0);
        let truth = random_pose(&mut rng);
        let mut data = Vec::new();
        for i in 0..100 {
            let pixel = Vector2::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
            let scene = if i % 10 < 3 {
                Vector3::from_fn(|_, _| rng.random_range(-5.0..5.0))
            } else {
                truth.inverse_transform(&(k.unproject(pixel.x, pixel.y) * rng.random_range(1.0..6.0)))
            };
            data.push(Correspondence2D3D::new(pixel, scene));
        }
        let result = pnp_ransac(&data, &k, &RansacConfig { seed: trial, ..Default::default() }).map_err(fail)?;
        let (t_cm, r_deg) = pose_error(&result.pose, &truth);
        worst = (worst.0.max(t_cm / 100.0), worst.1.max(r_deg));
    }
    ensure!(worst.0 < 1e-6 && worst.1 < 1e-6, "PnP error {:e} m / {:e} deg", worst.0, worst.1);
    Ok(format!(
        "round trip {round_trip:.1e} m, triangulation {tri:.1e} m, BA non-increasing on {ba_cases} tracks, PnP {:.1e} m / {:.1e} deg",
        worst.0, worst.1
    ))
}

// ---------------------------------------------------------------- schedule

fn schedule_exactness() -> Outcome {
    let lr0 = 5e-4;
    let expected = [(0, 1.0), (50_000, 1.0), (100_000, 0.5), (250_000, 0.0625), (299_999, 0.0625)];
    for (c, factor) in expected {
        let lr = lr_schedule(c, 300_000, lr0);
        ensure!(lr == lr0 * factor, "C={c}: {lr:e} != {:e}", lr0 * factor);
    }
    ensure!(lr_schedule(0, 500_000, lr0) == lr0, "negative k not clamped");
    Ok("N=300000, C in {0, 50000, 100000, 250000, 299999} exact".into())
}

// ---------------------------------------------------------------- heads

fn mode_consistency() -> Outcome {
    let mut worst = 0.0f64;
    let mut compared = 0;
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let mut store = ParamStore::new();
        let cfg = EncoderConfig::tiny();
        let encoder = Encoder::new(cfg.clone(), &mut store, &mut rng).map_err(fail)?;
        let head = MlpHead::new(&mut store, &MlpHead::default_widths(cfg.descriptor_dim), &mut rng).map_err(fail)?;
        let (h, w) = (8 * rng.random_range(2..=6), 8 * rng.random_range(2..=6));
        let image = Tensor::from_fn(&[3, h, w], |_| rng.random_range(0.0..1.0));
        let map = encoder.run(&store, &image, false).map_err(fail)?;
        let (gh, gw) = map.grid();
        let dense = dense_predict(&map, &head, &store).map_err(fail)?;
        let mut keypoints = Vec::new();
        for i in 0..gh {
            for j in 0..gw {
                keypoints.push(Keypoint {
                    pixel: [(8 * j + 4) as f64, (8 * i + 4) as f64],
                    normalized: [2.0 * j as f64 / (gw - 1) as f64 - 1.0, 2.0 * i as f64 / (gh - 1) as f64 - 1.0],
                });
            }
        }
        let sparse = sparse_predict(&map, &keypoints, &head, &store).map_err(fail)?;
        for (cell, (_, x)) in sparse.iter().enumerate() {
            worst = worst.max((x - dense.at(cell / gw, cell % gw)).amax());
            compared += 1;
        }
    }
    ensure!(worst <= 1e-12, "max difference {worst:e}");
    Ok(format!("{compared} cells over 10 random models, max difference {worst:.1e}"))
}

fn shape_config_fidelity() -> Outcome {
    let image = Tensor::from_fn(&[3, 480, 640], |i| ((i * 7919) % 251) as f64 / 250.0);
    let mut shapes = Vec::new();
    for (cfg, dim) in [(EncoderConfig::lite(), 256), (EncoderConfig::big(), 512)] {
        let mut store = ParamStore::new();
        let encoder = Encoder::new(cfg.clone(), &mut store, &mut ChaCha8Rng::seed_from_u64(0)).map_err(fail)?;
        let map = encoder.run(&store, &image, false).map_err(fail)?;
        ensure!(map.data.shape() == [dim, 60, 80], "{:?} encoder gave {:?}", cfg.variant, map.data.shape());
        shapes.push(format!("{:?}", map.data.shape()));
    }
    let lite = EncoderConfig::lite();
    ensure!((lite.num_layers, lite.num_heads) == (5, 4), "transformer defaults L={} h={}", lite.num_layers, lite.num_heads);
    let widths = ModelConfig::lite(Mode::Dense).head_widths;
    ensure!(widths == [256, 512, 1024, 1024, 3], "head widths {widths:?}");
    let model = Model::new(ModelConfig::lite(Mode::Dense), 0).map_err(fail)?;
    let backbone = Encoder::backbone_parameter_count(&model.store);
    let ratio = backbone as f64 / 1.4e6;
    ensure!((0.85..=1.15).contains(&ratio), "lite backbone has {backbone} parameters ({ratio:.3} of 1.4M)");
    Ok(format!(
        "lite/big -> {}, L=5 h=4, head {widths:?}, lite backbone {backbone} params ({:+.1}% vs 1.4M)",
        shapes.join(" / "),
        (ratio - 1.0) * 100.0
    ))
}

// ---------------------------------------------------------------- end to end

const SEED: u64 = 0;
const E2E_ITERATIONS: usize = 5000;
/// Under the step schedule a 5000-iteration run trains at lr0/16 throughout.
const E2E_LR: f64 = 1.6e-2;
/// The 10 px default scaled from 640 px wide images to 160 px.
const E2E_RANSAC_PX: f64 = 2.5;

fn e2e_ransac() -> RansacConfig {
    RansacConfig { threshold: E2E_RANSAC_PX, seed: SEED, ..Default::default() }
}

fn run_e2e(mode: Mode) -> Result<(EvalSummary, usize, f64), String> {
    let start = Instant::now();
    let spec = SyntheticSceneSpec::default();
    ensure!((spec.frames, spec.width, spec.height) == (20, 160, 160), "default scene is not 20 x 160x160");
    let scene = generate_synthetic_scene(&spec, SEED).map_err(fail)?;
    let mut model = Model::new(ModelConfig::tiny(mode), SEED).map_err(fail)?;
    let (data, tracks) = match mode {
        Mode::Dense => (TrainingSet::dense(&scene).map_err(fail)?, 0),
        Mode::Sparse => {
            let gt = build_sparse_gt(&scene, &model.config.detector, &MatchingConfig::default()).map_err(fail)?;
            (TrainingSet::sparse(&scene, &gt).map_err(fail)?, gt.tracks.len())
        }
    };
    let cfg = TrainConfig { mode, iterations: E2E_ITERATIONS, initial_lr: E2E_LR, seed: SEED, ..Default::default() };
    train(&data, &mut model, &cfg, None).map_err(fail)?;
    let summary = evaluate(&scene, Split::Test, &model, &e2e_ransac()).map_err(fail)?;
    Ok((summary, tracks, start.elapsed().as_secs_f64()))
}

fn e2e_dense() -> Outcome {
    let (s, _, secs) = run_e2e(Mode::Dense)?;
    let (t, r) = (s.median_t_cm.unwrap_or(f64::INFINITY), s.median_r_deg.unwrap_or(f64::INFINITY));
    let detail = format!("{} test frames, median {t:.2} cm / {r:.2} deg, acc {:.2}, {secs:.0} s", s.frames.len(), s.acc_5cm_5deg);
    ensure!(s.frames.len() == 10, "{detail}");
    ensure!(t < 5.0 && r < 5.0 && s.acc_5cm_5deg >= 0.8 && secs < 1800.0, "{detail}");
    Ok(detail)
}

fn e2e_sparse() -> Outcome {
    let (s, tracks, secs) = run_e2e(Mode::Sparse)?;
    let t = s.median_t_cm.unwrap_or(f64::INFINITY);
    let detail = format!(
        "{tracks} tracks, median {t:.2} cm / {:.2} deg, acc {:.2}, {secs:.0} s",
        s.median_r_deg.unwrap_or(f64::INFINITY),
        s.acc_5cm_5deg
    );
    ensure!(tracks >= 200 && t < 10.0 && secs < 1800.0, "{detail}");
    Ok(detail)
}

// ---------------------------------------------------------------- determinism

fn small_scene() -> Result<SceneDataset, String> {
    let spec = SyntheticSceneSpec { width: 64, height: 64, fx: 56.0, fy: 56.0, cx: 31.5, cy: 31.5, frames: 8, ..Default::default() };
    generate_synthetic_scene(&spec, 5).map_err(fail)
}

fn train_and_eval(mode: Mode, scene: &SceneDataset, dir: &std::path::Path) -> Result<(Vec<u8>, String), String> {
    let mut model = Model::new(ModelConfig::tiny(mode), 42).map_err(fail)?;
    let data = match mode {
        Mode::Dense => TrainingSet::dense(scene),
        Mode::Sparse => {
            let gt = build_sparse_gt(scene, &model.config.detector, &MatchingConfig::default()).map_err(fail)?;
            TrainingSet::sparse(scene, &gt)
        }
    }
    .map_err(fail)?;
    let cfg = TrainConfig { mode, iterations: 150, initial_lr: 1e-2, seed: 42, ..Default::default() };
    let report = train(&data, &mut model, &cfg, Some(dir)).map_err(fail)?;
    let ckpt = std::fs::read(report.checkpoint.ok_or("no checkpoint")?).map_err(fail)?;
    let summary = evaluate(scene, Split::Test, &model, &RansacConfig { threshold: 2.0, ..Default::default() }).map_err(fail)?;
    Ok((ckpt, summary.to_json()))
}

fn determinism() -> Outcome {
    let scene = small_scene()?;
    ensure!(scene == small_scene()?, "scene generation is not deterministic");
    for mode in [Mode::Dense, Mode::Sparse] {
        let (a, b) = (tempfile::tempdir().map_err(fail)?, tempfile::tempdir().map_err(fail)?);
        let first = train_and_eval(mode, &scene, a.path())?;
        let second = train_and_eval(mode, &scene, b.path())?;
        ensure!(first.0 == second.0, "{mode} checkpoints differ");
        ensure!(first.1 == second.1, "{mode} summaries differ");
    }
    Ok("dense and sparse: bit-identical checkpoints and EvalSummary JSON".into())
}

// ---------------------------------------------------------------- formats

/// Independent P5 header parse: magic, dimensions, maxval, body size.
fn parse_p5(bytes: &[u8]) -> Result<(usize, usize, &[u8]), String> {
    let mut fields = Vec::new();
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        ensure!(start < i, "truncated header");
        fields.push(std::str::from_utf8(&bytes[start..i]).map_err(fail)?.to_string());
    }
    ensure!(fields[0] == "P5", "magic {}", fields[0]);
    let (w, h, max): (usize, usize, usize) =
        (fields[1].parse().map_err(fail)?, fields[2].parse().map_err(fail)?, fields[3].parse().map_err(fail)?);
    ensure!(max == 255, "maxval {max}");
    let body = &bytes[i + 1..];
    ensure!(body.len() == w * h, "body has {} bytes, expected {}", body.len(), w * h);
    Ok((w, h, body))
}

fn format_round_trips() -> Outcome {
    let dir = tempfile::tempdir().map_err(fail)?;
    // scene directory, with a size that needs padding
    let spec = SyntheticSceneSpec { width: 62, height: 46, fx: 50.0, fy: 50.0, cx: 30.5, cy: 22.5, frames: 4, ..Default::default() };
    let original = generate_synthetic_scene(&spec, 9).map_err(fail)?;
    save_scene(&original, &dir.path().join("a")).map_err(fail)?;
    let loaded = load_scene(&dir.path().join("a")).map_err(fail)?;
    ensure!(loaded.original_size == (46, 62), "original size {:?}", loaded.original_size);
    save_scene(&loaded, &dir.path().join("b")).map_err(fail)?;
    for sub in ["frames/000001.ppm", "depth/000001.pgm", "poses/000001.txt", "intrinsics.txt", "split.txt"] {
        let (x, y) = (std::fs::read(dir.path().join("a").join(sub)), std::fs::read(dir.path().join("b").join(sub)));
        ensure!(x.map_err(fail)? == y.map_err(fail)?, "{sub} changed across save -> load -> save");
    }
    let again = load_scene(&dir.path().join("b")).map_err(fail)?;
    ensure!(again == loaded, "second load differs");
    for (a, b) in original.frames.iter().zip(&loaded.frames) {
        ensure!(a.pose == b.pose && a.split == b.split, "frame {} pose or split changed", a.id);
        let (top, left) = loaded.padding;
        for c in 0..3 {
            for r in 0..46 {
                for col in 0..62 {
                    let x = a.image.at(&[c, r, col]);
                    let y = b.image.at(&[c, r + top, col + left]);
                    ensure!(x == y, "frame {} pixel changed", a.id);
                }
            }
        }
    }

    // checkpoint
    let model = Model::new(ModelConfig::tiny(Mode::Sparse), 3).map_err(fail)?;
    model.save(&dir.path().join("model")).map_err(fail)?;
    let back = Model::load(&dir.path().join("model")).map_err(fail)?;
    ensure!(back.config == model.config, "model config changed");
    for ((_, p), (_, q)) in model.store.iter().zip(back.store.iter()) {
        let same = p.name() == q.name()
            && p.tensor().shape() == q.tensor().shape()
            && p.tensor().data().iter().zip(q.tensor().data()).all(|(x, y)| x.to_bits() == y.to_bits());
        ensure!(same, "parameter {} changed", p.name());
    }

    // heatmaps
    let frame = &loaded.frames[0];
    let maps = render_all_attention(&model, &frame.image).map_err(fail)?;
    for m in &maps {
        let path = m.write(dir.path()).map_err(fail)?;
        let bytes = std::fs::read(&path).map_err(fail)?;
        let (w, h, body) = parse_p5(&bytes)?;
        ensure!((h, w) == (frame.height(), frame.width()), "{} is {w}x{h}", m.file_name());
        ensure!(body == m.to_gray8().as_slice(), "{} body differs", m.file_name());
        ensure!(read_pgm8(&path).map_err(fail)?.2 == body, "decoder disagrees on {}", m.file_name());
        ensure!(m.values.iter().all(|v| (0.0..=1.0).contains(v)), "{} values out of range", m.file_name());
    }
    Ok(format!("scene (62x46 padded), checkpoint and {} heatmaps", maps.len()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("gradient integrity", gradient_integrity),
        ("attention normalization", attention_normalization),
        ("geometry oracles", geometry_oracles),
        ("schedule exactness", schedule_exactness),
        ("mode consistency", mode_consistency),
        ("shape/config fidelity", shape_config_fidelity),
        ("end-to-end dense localization", e2e_dense),
        ("end-to-end sparse localization", e2e_sparse),
        ("determinism", determinism),
        ("format round trips", format_round_trips),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail} [{secs:.1} s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail} [{secs:.1} s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
    println!("all criteria passed");
}
