//! Supervised training: L2 scene-coordinate loss, step-decay schedule and the
//! Adam loop over encoder and head.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{ConfigError, FlatConfig};
use crate::data::{derive_dense_gt, DataError, SceneDataset, SparseGroundTruth, DETECTOR_PREFIX};
use crate::heads::bilinear_taps;
use crate::model::{Model, ModelError, Mode, CHECKPOINT_FILE};
use crate::numerics::{AdamState, Backend, BilinearTap, Graph, NumericsError, Reduction, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training data is {data} but the run is {run}")]
    ModeMismatch { data: Mode, run: Mode },
    #[error("frozen detector parameters changed during training")]
    DetectorChanged,
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

impl From<ConfigError> for TrainError {
    fn from(e: ConfigError) -> Self {
        Self::Config(e.to_string())
    }
}

fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io { path: path.to_path_buf(), source }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub mode: Mode,
    pub iterations: usize,
    pub initial_lr: f64,
    /// Images per iteration.
    pub batch_size: usize,
    pub seed: u64,
    pub reduction: Reduction,
    pub checkpoint_every: usize,
    /// Start the output bias at the mean training coordinate.
    pub init_output_bias: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Dense,
            iterations: 300_000,
            initial_lr: 5e-4,
            batch_size: 1,
            seed: 0,
            reduction: Reduction::Mean,
            checkpoint_every: 10_000,
            init_output_bias: true,
        }
    }
}

impl TrainConfig {
    /// Reads `model.mode` and the `train.*` keys.
    pub fn from_config(cfg: &FlatConfig) -> Result<Self, TrainError> {
        let d = Self::default();
        let reduction = match cfg.get("train.reduction").unwrap_or("mean") {
            "mean" => Reduction::Mean,
            "sum" => Reduction::Sum,
            other => return Err(TrainError::Config(format!("train.reduction must be sum or mean, got '{other}'"))),
        };
        let out = Self {
            mode: cfg.get("model.mode").unwrap_or("dense").parse()?,
            iterations: cfg.get_or("train.iterations", d.iterations)?,
            initial_lr: cfg.get_or("train.initial_lr", d.initial_lr)?,
            batch_size: cfg.get_or("train.batch_size", d.batch_size)?,
            seed: cfg.get_or("train.seed", d.seed)?,
            reduction,
            checkpoint_every: cfg.get_or("train.checkpoint_every", d.checkpoint_every)?,
            init_output_bias: cfg.get_or("train.init_output_bias", d.init_output_bias)?,
        };
        out.validate()?;
        Ok(out)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return Err(TrainError::Config(format!("initial_lr must be positive, got {}", self.initial_lr)));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// `lr0 · 0.5^k` with `k = ⌊(C + 2·10⁵ − N) / 5·10⁴⌋ + 1`, clamped at `k ≥ 0`.
pub fn lr_schedule(iteration: usize, total: usize, lr0: f64) -> f64 {
    let raw = (iteration as i64 + 200_000 - total as i64).div_euclid(50_000) + 1;
    let k = raw.max(0);
    lr0 * 0.5f64.powi(k.min(i32::MAX as i64) as i32)
}

/// Squared Euclidean error over the valid rows of `[M, 3]` predictions.
pub fn l2_loss<B: Backend>(
    b: &mut B,
    pred: &B::Value,
    target: &Tensor,
    mask: &[bool],
    reduction: Reduction,
) -> Result<B::Value, NumericsError> {
    let shape = b.shape(pred);
    if shape.len() != 2 || shape[1] != 3 {
        return Err(NumericsError::ShapeMismatch { op: "l2_loss", detail: format!("expected [M, 3], got {shape:?}") });
    }
    b.l2_loss(pred, target, mask, reduction)
}

#[derive(Clone, Debug)]
enum Supervision {
    /// Row-major `[h·w, 3]` targets with validity.
    Dense { target: Tensor, mask: Vec<bool> },
    /// Keypoint taps into the `h × w` grid with their `[M, 3]` targets.
    Sparse { taps: Arc<Vec<BilinearTap>>, target: Tensor },
}

#[derive(Clone, Debug)]
pub struct TrainingSample {
    pub frame_id: usize,
    pub image: Tensor,
    supervision: Supervision,
}

impl TrainingSample {
    fn valid_rows(&self) -> impl Iterator<Item = &[f64]> {
        let (t, m): (&Tensor, Option<&Vec<bool>>) = match &self.supervision {
            Supervision::Dense { target, mask } => (target, Some(mask)),
            Supervision::Sparse { target, .. } => (target, None),
        };
        t.data().chunks(3).enumerate().filter(move |(i, _)| m.is_none_or(|m| m[*i])).map(|(_, r)| r)
    }
}

#[derive(Clone, Debug)]
pub struct TrainingSet {
    pub mode: Mode,
    pub samples: Vec<TrainingSample>,
}

impl TrainingSet {
    /// Training-split frames with their subsampled depth-derived coordinates.
    pub fn dense(dataset: &SceneDataset) -> Result<Self, TrainError> {
        let samples = dataset
            .train()
            .map(|f| {
                let gt = derive_dense_gt(f)?;
                Ok(TrainingSample {
                    frame_id: f.id,
                    image: f.image.clone(),
                    supervision: Supervision::Dense { target: gt.rows(), mask: gt.mask.clone() },
                })
            })
            .collect::<Result<Vec<_>, TrainError>>()?;
        Self::checked(Mode::Dense, samples)
    }

    /// Training-split frames with their triangulated keypoints. Frames
    /// without any valid keypoint are skipped.
    pub fn sparse(dataset: &SceneDataset, gt: &SparseGroundTruth) -> Result<Self, TrainError> {
        let mut samples = Vec::new();
        for fk in &gt.frames {
            let frame = dataset
                .frame(fk.frame_id)
                .ok_or_else(|| TrainError::Config(format!("ground truth names unknown frame {}", fk.frame_id)))?;
            let (points, coords): (Vec<[f64; 2]>, Vec<f64>) =
                fk.valid().map(|(k, x)| (k.normalized, x)).fold((Vec::new(), Vec::new()), |(mut p, mut c), (n, x)| {
                    p.push(n);
                    c.extend_from_slice(x.as_slice());
                    (p, c)
                });
            if points.is_empty() {
                continue;
            }
            let taps = bilinear_taps(&points, frame.height() / 8, frame.width() / 8)
                .map_err(|e| TrainError::Config(e.to_string()))?;
            samples.push(TrainingSample {
                frame_id: frame.id,
                image: frame.image.clone(),
                supervision: Supervision::Sparse { taps: Arc::new(taps), target: Tensor::new(&[points.len(), 3], coords)? },
            });
        }
        Self::checked(Mode::Sparse, samples)
    }

    fn checked(mode: Mode, samples: Vec<TrainingSample>) -> Result<Self, TrainError> {
        if samples.is_empty() {
            return Err(TrainError::Config("no training frames with ground truth".into()));
        }
        Ok(Self { mode, samples })
    }

    /// Mean of all valid target coordinates.
    pub fn mean_target(&self) -> [f64; 3] {
        let mut sum = [0.0; 3];
        let mut n = 0usize;
        for row in self.samples.iter().flat_map(TrainingSample::valid_rows) {
            for c in 0..3 {
                sum[c] += row[c];
            }
            n += 1;
        }
        sum.map(|s| s / n.max(1) as f64)
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub loss: f64,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct TrainReport {
    pub config: TrainConfig,
    pub records: Vec<IterationRecord>,
    /// Final parameter file when an output directory was given.
    pub checkpoint: Option<PathBuf>,
}

impl TrainReport {
    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }
}

/// Forward pass and loss of one training step on a fresh tape.
fn step_loss(
    g: &mut Graph,
    model: &Model,
    batch: &[&TrainingSample],
    reduction: Reduction,
) -> Result<crate::numerics::Var, TrainError> {
    let mut preds = None;
    let mut targets = Vec::new();
    let mut masks = Vec::new();
    for sample in batch {
        let image = g.input(sample.image.clone());
        let map = model.encoder.encode(g, &model.store, &image, None).map_err(ModelError::from)?;
        let (pred, target, mask) = match &sample.supervision {
            Supervision::Dense { target, mask } => {
                (model.head.dense_rows(g, &model.store, &map).map_err(ModelError::from)?, target, mask.clone())
            }
            Supervision::Sparse { taps, target } => (
                model.head.sparse_rows(g, &model.store, &map, taps.clone()).map_err(ModelError::from)?,
                target,
                vec![true; target.shape()[0]],
            ),
        };
        preds = Some(match preds {
            None => pred,
            Some(prev) => g.concat(&prev, &pred, 0)?,
        });
        targets.extend_from_slice(target.data());
        masks.extend(mask);
    }
    let pred = preds.expect("nonempty batch");
    let target = Tensor::new(&[masks.len(), 3], targets)?;
    Ok(l2_loss(g, &pred, &target, &masks, reduction)?)
}

/// Runs `config.iterations` Adam steps. With `out`, a `log.csv` is written as
/// training proceeds, parameters are checkpointed every
/// `config.checkpoint_every` iterations and the final model is saved there.
pub fn train(
    data: &TrainingSet,
    model: &mut Model,
    config: &TrainConfig,
    out: Option<&Path>,
) -> Result<TrainReport, TrainError> {
    config.validate()?;
    if data.mode != config.mode {
        return Err(TrainError::ModeMismatch { data: data.mode, run: config.mode });
    }
    let mut report = TrainReport { config: config.clone(), records: Vec::with_capacity(config.iterations), checkpoint: None };
    let mut log = match out {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(io_error(dir))?;
            let path = dir.join("log.csv");
            let mut w = BufWriter::new(File::create(&path).map_err(io_error(&path))?);
            writeln!(w, "iteration,loss,lr,seconds").and_then(|_| w.flush()).map_err(io_error(&path))?;
            Some((w, path))
        }
        None => None,
    };
    if config.iterations == 0 {
        return Ok(report);
    }
    let detector_before = model.store.fingerprint(DETECTOR_PREFIX);
    if config.init_output_bias {
        model.head.set_output_bias(&mut model.store, data.mean_target());
    }
    let mut adam = AdamState::new(&model.store);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let start = Instant::now();
    for c in 0..config.iterations {
        let batch: Vec<&TrainingSample> =
            (0..config.batch_size).map(|_| &data.samples[rng.random_range(0..data.samples.len())]).collect();
        model.store.zero_grad();
        let mut g = Graph::new();
        let loss = step_loss(&mut g, model, &batch, config.reduction)?;
        let value = g.value(loss).data()[0];
        g.backward(loss, &mut model.store)?;
        let lr = lr_schedule(c, config.iterations, config.initial_lr);
        adam.step(&mut model.store, lr)?;
        let record = IterationRecord { iteration: c + 1, loss: value, lr, seconds: start.elapsed().as_secs_f64() };
        if let Some((w, path)) = log.as_mut() {
            writeln!(w, "{},{:?},{:?},{:.3}", record.iteration, record.loss, record.lr, record.seconds)
                .and_then(|_| w.flush())
                .map_err(io_error(path))?;
        }
        if record.iteration % 100 == 0 {
            log::info!("iteration {} loss {:.6} lr {:.3e}", record.iteration, value, lr);
        }
        report.records.push(record);
        if let Some(dir) = out {
            if config.checkpoint_every > 0 && (c + 1) % config.checkpoint_every == 0 && c + 1 < config.iterations {
                model.store.save(&dir.join(format!("checkpoint_{:06}.ckpt", c + 1)))?;
            }
        }
    }
    if model.store.fingerprint(DETECTOR_PREFIX) != detector_before {
        return Err(TrainError::DetectorChanged);
    }
    if let Some(dir) = out {
        model.save(dir)?;
        report.checkpoint = Some(dir.join(CHECKPOINT_FILE));
    }
    Ok(report)
}
