//! Convolutional feature extractor and attention feature transformer.

mod attention;
mod config;

use rand::Rng;

pub use attention::AttentionLayer;
pub use config::{BackboneLayer, BackbonePlan, EncoderConfig, Variant, BIG_BACKBONE, LITE_BACKBONE, TINY_BACKBONE};

use crate::numerics::nn::Conv2d;
use crate::numerics::{Backend, Eager, NumericsError, ParamStore, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum EncoderError {
    #[error("encoder config: {0}")]
    Config(String),
    #[error("encoder input: {0}")]
    Shape(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Output of the convolutional extractor, `[D, H/8, W/8]`.
#[derive(Clone, Debug)]
pub struct DescriptorMap {
    pub data: Tensor,
    pub image_height: usize,
    pub image_width: usize,
}

/// Output of the feature transformer, same shape as its descriptor map.
#[derive(Clone, Debug)]
pub struct AttentionFeatureMap {
    pub data: Tensor,
    pub image_height: usize,
    pub image_width: usize,
    /// `attention[layer][head]` is an `[N, N]` row-stochastic score matrix.
    pub attention: Option<Vec<Vec<Tensor>>>,
}

impl AttentionFeatureMap {
    pub fn dim(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.data.shape()[1], self.data.shape()[2])
    }
}

#[derive(Clone, Debug)]
enum Step {
    Conv { conv: Conv2d, relu: bool },
    Pool,
}

pub const PARAM_PREFIX: &str = "encoder.";

#[derive(Clone, Debug)]
pub struct Encoder {
    config: EncoderConfig,
    steps: Vec<Step>,
    layers: Vec<AttentionLayer>,
}

impl Encoder {
    /// Registers all encoder parameters under `encoder.` with He-style
    /// initialization drawn from `rng`.
    pub fn new(config: EncoderConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self, EncoderError> {
        config.validate()?;
        let mut steps = Vec::new();
        let mut channels = config.input_channels;
        let last_conv = config.backbone.0.iter().rposition(|l| matches!(l, BackboneLayer::Conv { .. }));
        for (i, layer) in config.backbone.0.iter().enumerate() {
            match *layer {
                BackboneLayer::MaxPool => steps.push(Step::Pool),
                BackboneLayer::Conv { out_channels, kernel } => {
                    let relu = Some(i) != last_conv;
                    let gain = if relu { 2.0 } else { 1.0 };
                    let conv = Conv2d::new(
                        store,
                        &format!("encoder.backbone.{i}"),
                        channels,
                        out_channels,
                        kernel,
                        gain,
                        rng,
                    )?;
                    steps.push(Step::Conv { conv, relu });
                    channels = out_channels;
                }
            }
        }
        let layers = (0..config.num_layers)
            .map(|l| {
                AttentionLayer::new(store, &format!("encoder.layers.{l}"), config.descriptor_dim, config.num_heads, rng)
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { config, steps, layers })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn layers(&self) -> &[AttentionLayer] {
        &self.layers
    }

    fn check_image(&self, shape: &[usize]) -> Result<(), EncoderError> {
        if shape.len() != 3 || shape[0] != self.config.input_channels {
            return Err(EncoderError::Shape(format!(
                "expected [{}, H, W] image, got {shape:?}",
                self.config.input_channels
            )));
        }
        if shape[1] % 8 != 0 || shape[2] % 8 != 0 || shape[1] == 0 || shape[2] == 0 {
            return Err(EncoderError::Shape(format!(
                "image size {}x{} is not a multiple of 8; pad it first",
                shape[2], shape[1]
            )));
        }
        Ok(())
    }

    /// `F_c`: `[C, H, W]` → `[D, H/8, W/8]`.
    pub fn features<B: Backend>(&self, b: &mut B, store: &ParamStore, image: &B::Value) -> Result<B::Value, EncoderError> {
        self.check_image(&b.shape(image))?;
        let mut x = image.clone();
        for step in &self.steps {
            x = match step {
                Step::Pool => b.maxpool2x2(&x)?,
                Step::Conv { conv, relu } => {
                    let y = conv.forward(b, store, &x)?;
                    if *relu {
                        b.relu(&y)
                    } else {
                        y
                    }
                }
            };
        }
        Ok(x)
    }

    /// `F_t`: flattens `[D, h, w]` into `h·w` row-major state vectors, adds the
    /// positional encoding, runs every attention layer and restores the shape.
    pub fn transform_map<B: Backend>(
        &self,
        b: &mut B,
        store: &ParamStore,
        descriptors: &B::Value,
        mut retain: Option<&mut Vec<Vec<Tensor>>>,
    ) -> Result<B::Value, EncoderError> {
        let shape = b.shape(descriptors);
        let d = self.config.descriptor_dim;
        if shape.len() != 3 || shape[0] != d {
            return Err(EncoderError::Shape(format!("expected [{d}, h, w] descriptors, got {shape:?}")));
        }
        let (h, w) = (shape[1], shape[2]);
        let flat = b.reshape(descriptors, &[d, h * w])?;
        let mut states = b.transpose(&flat)?;
        if self.config.positional_encoding {
            let pe = b.input(positional_encoding(d, h, w));
            states = b.add(&states, &pe)?;
        }
        for layer in &self.layers {
            let mut scores = retain.as_ref().map(|_| Vec::with_capacity(self.config.num_heads));
            states = layer.forward(b, store, &states, scores.as_mut())?;
            if let (Some(all), Some(scores)) = (retain.as_deref_mut(), scores) {
                all.push(scores);
            }
        }
        let flat = b.transpose(&states)?;
        Ok(b.reshape(&flat, &[d, h, w])?)
    }

    pub fn encode<B: Backend>(
        &self,
        b: &mut B,
        store: &ParamStore,
        image: &B::Value,
        retain: Option<&mut Vec<Vec<Tensor>>>,
    ) -> Result<B::Value, EncoderError> {
        let features = self.features(b, store, image)?;
        self.transform_map(b, store, &features, retain)
    }

    pub fn extract_features(&self, store: &ParamStore, image: &Tensor) -> Result<DescriptorMap, EncoderError> {
        let data = self.features(&mut Eager, store, image)?;
        Ok(DescriptorMap { data, image_height: image.shape()[1], image_width: image.shape()[2] })
    }

    pub fn transform(
        &self,
        store: &ParamStore,
        map: &DescriptorMap,
        retain_attention: bool,
    ) -> Result<AttentionFeatureMap, EncoderError> {
        let mut scores = Vec::new();
        let data = self.transform_map(&mut Eager, store, &map.data, retain_attention.then_some(&mut scores))?;
        Ok(AttentionFeatureMap {
            data,
            image_height: map.image_height,
            image_width: map.image_width,
            attention: retain_attention.then_some(scores),
        })
    }

    pub fn run(&self, store: &ParamStore, image: &Tensor, retain_attention: bool) -> Result<AttentionFeatureMap, EncoderError> {
        let map = self.extract_features(store, image)?;
        self.transform(store, &map, retain_attention)
    }

    pub fn backbone_parameter_count(store: &ParamStore) -> usize {
        store.count_with_prefix("encoder.backbone.")
    }
}

/// Fixed 2D sinusoidal encoding, `[h·w, D]` with row-major token order.
/// Channels are split in quarters: sin/cos of the row index, then sin/cos of
/// the column index, with frequencies `10000^(−i/q)`, `q = D/4`. Leftover
/// channels when D is not a multiple of 4 stay zero.
pub fn positional_encoding(dim: usize, h: usize, w: usize) -> Tensor {
    let q = dim / 4;
    let mut data = vec![0.0; h * w * dim];
    for r in 0..h {
        for c in 0..w {
            let row = &mut data[(r * w + c) * dim..][..dim];
            for i in 0..q {
                let freq = 10000f64.powf(-(i as f64) / q as f64);
                row[i] = (r as f64 * freq).sin();
                row[q + i] = (r as f64 * freq).cos();
                row[2 * q + i] = (c as f64 * freq).sin();
                row[3 * q + i] = (c as f64 * freq).cos();
            }
        }
    }
    Tensor::new(&[h * w, dim], data).expect("sized above")
}
