//! The full regressor: encoder, MLP head and (frozen) keypoint detector
//! sharing one parameter store.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{ConfigError, FlatConfig};
use crate::data::{DataError, HarrisDetector};
use crate::encoder::{Encoder, EncoderConfig, EncoderError};
use crate::heads::{HeadError, MlpHead};
use crate::numerics::{NumericsError, ParamStore};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Dense,
    Sparse,
}

impl FromStr for Mode {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "dense" => Ok(Self::Dense),
            "sparse" => Ok(Self::Sparse),
            other => Err(ModelError::Invalid(format!("unknown mode '{other}' (dense or sparse)"))),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Dense => "dense",
            Self::Sparse => "sparse",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub mode: Mode,
    pub encoder: EncoderConfig,
    /// Head widths; the first must equal the descriptor dimension.
    pub head_widths: Vec<usize>,
    pub detector: HarrisDetector,
}

impl ModelConfig {
    pub fn new(mode: Mode, encoder: EncoderConfig) -> Self {
        let head_widths = MlpHead::default_widths(encoder.descriptor_dim);
        Self { mode, encoder, head_widths, detector: HarrisDetector::default() }
    }

    pub fn lite(mode: Mode) -> Self {
        Self::new(mode, EncoderConfig::lite())
    }

    pub fn tiny(mode: Mode) -> Self {
        Self::new(mode, EncoderConfig::tiny())
    }

    /// Reads `model.mode`, `model.head_widths`, `detector.*` and `encoder.*`.
    pub fn from_config(cfg: &FlatConfig) -> Result<Self, ModelError> {
        let mode = cfg.get("model.mode").unwrap_or("dense").parse()?;
        let encoder = EncoderConfig::from_pairs(cfg.with_prefix("encoder."))?;
        let mut out = Self::new(mode, encoder);
        if let Some(w) = cfg.get("model.head_widths") {
            out.head_widths = w
                .split(',')
                .map(|s| s.trim().parse())
                .collect::<Result<_, _>>()
                .map_err(|_| ModelError::Invalid(format!("model.head_widths: cannot parse '{w}'")))?;
        }
        let d = HarrisDetector::default();
        out.detector = HarrisDetector {
            k: cfg.get_or("detector.k", d.k)?,
            nms_radius: cfg.get_or("detector.nms_radius", d.nms_radius)?,
            max_count: cfg.get_or("detector.max_keypoints", d.max_count)?,
            relative_threshold: cfg.get_or("detector.relative_threshold", d.relative_threshold)?,
        };
        out.validate()?;
        Ok(out)
    }

    pub fn to_config(&self) -> FlatConfig {
        let mut cfg = FlatConfig::from_pairs(self.encoder.to_pairs());
        cfg.set("model.mode", self.mode.to_string());
        cfg.set(
            "model.head_widths",
            self.head_widths.iter().map(ToString::to_string).collect::<Vec<_>>().join(","),
        );
        cfg.set("detector.k", format!("{:?}", self.detector.k));
        cfg.set("detector.nms_radius", self.detector.nms_radius.to_string());
        cfg.set("detector.max_keypoints", self.detector.max_count.to_string());
        cfg.set("detector.relative_threshold", format!("{:?}", self.detector.relative_threshold));
        cfg
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        self.encoder.validate()?;
        if self.head_widths.first() != Some(&self.encoder.descriptor_dim) {
            return Err(ModelError::Invalid(format!(
                "head input width {:?} must equal the descriptor dimension {}",
                self.head_widths.first(),
                self.encoder.descriptor_dim
            )));
        }
        Ok(())
    }
}

pub const CONFIG_FILE: &str = "model.cfg";
pub const CHECKPOINT_FILE: &str = "model.ckpt";

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub head: MlpHead,
}

impl Model {
    /// Fresh weights drawn from a generator seeded with `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(config.encoder.clone(), &mut store, &mut rng)?;
        let head = MlpHead::new(&mut store, &config.head_widths, &mut rng)?;
        HarrisDetector::register(&mut store)?;
        Ok(Self { config, store, encoder, head })
    }

    /// Writes `model.cfg` and `model.ckpt` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), ModelError> {
        std::fs::create_dir_all(dir).map_err(NumericsError::from)?;
        std::fs::write(dir.join(CONFIG_FILE), self.config.to_config().to_text()).map_err(NumericsError::from)?;
        self.store.save(&dir.join(CHECKPOINT_FILE))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, ModelError> {
        let config = ModelConfig::from_config(&FlatConfig::read(&dir.join(CONFIG_FILE))?)?;
        let mut model = Self::new(config, 0)?;
        let ckpt = dir.join(CHECKPOINT_FILE);
        model.store.load(&ckpt).map_err(|e| ModelError::Invalid(format!("{}: {e}", ckpt.display())))?;
        Ok(model)
    }

    pub fn parameter_count(&self) -> usize {
        self.store.count_parameters()
    }
}
