use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use ascore::config::FlatConfig;
use ascore::data::{
    build_sparse_gt, generate_synthetic_scene, load_image, load_scene, save_scene, MatchingConfig, Split,
    SyntheticSceneSpec,
};
use ascore::eval::{evaluate, localize, ransac_from_config, render_all_attention, render_attention};
use ascore::geometry::CameraIntrinsics;
use ascore::model::{Model, ModelConfig, Mode};
use ascore::training::{train, TrainConfig, TrainingSet};
use clap::{Args, Parser, Subcommand};

/// Scene coordinate regression with an attention encoder.
#[derive(Parser, Debug)]
#[command(name = "ascore", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic RGB-D room scene.
    GenScene {
        #[command(flatten)]
        common: Common,
    },
    /// Train a model on a scene directory.
    Train {
        #[command(flatten)]
        common: Common,
        /// Scene directory (or `data.scene` in the config).
        #[arg(long)]
        scene: Option<PathBuf>,
    },
    /// Localize every frame of a split and report pose errors.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        scene: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Estimate the pose of a single image.
    Localize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        /// Binary P6 image.
        #[arg(long)]
        image: PathBuf,
        /// File holding "fx fy cx cy" for the unpadded image.
        #[arg(long)]
        intrinsics: PathBuf,
    },
    /// Write attention heatmaps as P5 graymaps.
    RenderAttention {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Only this layer (all layers otherwise).
        #[arg(long, requires = "head")]
        layer: Option<usize>,
        #[arg(long, requires = "layer")]
        head: Option<usize>,
    },
}

/// Bad invocation rather than a failure while running.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct UsageError(String);

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

impl Common {
    fn config(&self) -> anyhow::Result<FlatConfig> {
        match &self.config {
            Some(p) => FlatConfig::read(p).with_context(|| format!("reading config {}", p.display())),
            None => Ok(FlatConfig::default()),
        }
    }

    fn out(&self) -> anyhow::Result<&Path> {
        self.out.as_deref().ok_or_else(|| usage("--out <dir> is required"))
    }
}

fn scene_dir(flag: Option<PathBuf>, cfg: &FlatConfig) -> anyhow::Result<PathBuf> {
    flag.or_else(|| cfg.get("data.scene").map(PathBuf::from))
        .ok_or_else(|| usage("--scene <dir> (or data.scene in the config) is required"))
}

fn gen_scene(common: Common) -> anyhow::Result<()> {
    let cfg = common.config()?;
    let spec = SyntheticSceneSpec::from_pairs(cfg.with_prefix("scene."))?;
    let out = common.out()?;
    let scene = generate_synthetic_scene(&spec, common.seed.unwrap_or(0))?;
    save_scene(&scene, out)?;
    println!("wrote {} frames to {}", scene.frames.len(), out.display());
    Ok(())
}

fn train_cmd(common: Common, scene: Option<PathBuf>) -> anyhow::Result<()> {
    let cfg = common.config()?;
    let out = common.out()?;
    let dataset = load_scene(&scene_dir(scene, &cfg)?)?;
    let mut train_cfg = TrainConfig::from_config(&cfg)?;
    if let Some(seed) = common.seed {
        train_cfg.seed = seed;
    }
    let model_cfg = ModelConfig::from_config(&cfg)?;
    let mut model = Model::new(model_cfg, train_cfg.seed)?;
    let data = match model.config.mode {
        Mode::Dense => TrainingSet::dense(&dataset)?,
        Mode::Sparse => {
            let gt = build_sparse_gt(&dataset, &model.config.detector, &MatchingConfig::default())?;
            log::info!("{} sparse tracks", gt.tracks.len());
            TrainingSet::sparse(&dataset, &gt)?
        }
    };
    log::info!("training {} parameters for {} iterations", model.parameter_count(), train_cfg.iterations);
    let report = train(&data, &mut model, &train_cfg, Some(out))?;
    // a zero-iteration run still leaves a loadable model behind
    model.save(out)?;
    match report.records.last() {
        Some(r) => println!("iteration {} loss {:.6}", r.iteration, r.loss),
        None => println!("no iterations run"),
    }
    println!("model written to {}", out.display());
    Ok(())
}

fn eval_cmd(common: Common, model: PathBuf, scene: Option<PathBuf>, split: String) -> anyhow::Result<()> {
    let cfg = common.config()?;
    let split = match split.as_str() {
        "train" => Split::Train,
        "test" => Split::Test,
        other => return Err(usage(format!("--split must be train or test, got '{other}'"))),
    };
    let dataset = load_scene(&scene_dir(scene, &cfg)?)?;
    let model = Model::load(&model)?;
    let mut ransac = ransac_from_config(&cfg)?;
    if let Some(seed) = common.seed {
        ransac.seed = seed;
    }
    let summary = evaluate(&dataset, split, &model, &ransac)?;
    if let Some(out) = &common.out {
        std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        summary.write(&out.join("eval.json"))?;
    }
    println!("{}", summary.to_json());
    Ok(())
}

fn localize_cmd(common: Common, model: PathBuf, image: PathBuf, intrinsics: PathBuf) -> anyhow::Result<()> {
    let cfg = common.config()?;
    let model = Model::load(&model)?;
    let loaded = load_image(&image)?;
    let (top, left) = loaded.padding;
    let k = CameraIntrinsics::read(&intrinsics)?.shifted(left as f64, top as f64);
    let mut ransac = ransac_from_config(&cfg)?;
    if let Some(seed) = common.seed {
        ransac.seed = seed;
    }
    let result = localize(&model, &loaded.image, &k, &ransac)?;
    if let Some(out) = &common.out {
        std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        result.pose.write(&out.join("pose.txt"))?;
    }
    println!("inliers {} of {}", result.inliers, result.correspondences);
    println!("{}", result.pose.to_text());
    Ok(())
}

fn render_cmd(common: Common, model: PathBuf, image: PathBuf, layer: Option<usize>, head: Option<usize>) -> anyhow::Result<()> {
    let out = common.out()?;
    let model = Model::load(&model)?;
    let image = load_image(&image)?.image;
    let maps = match (layer, head) {
        (Some(l), Some(h)) => vec![render_attention(&model, &image, l, h)?],
        _ => render_all_attention(&model, &image)?,
    };
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for m in maps {
        println!("{}", m.write(out)?.display());
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenScene { common } => gen_scene(common),
        Command::Train { common, scene } => train_cmd(common, scene),
        Command::Eval { common, model, scene, split } => eval_cmd(common, model, scene, split),
        Command::Localize { common, model, image, intrinsics } => localize_cmd(common, model, image, intrinsics),
        Command::RenderAttention { common, model, image, layer, head } => render_cmd(common, model, image, layer, head),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<UsageError>() => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
