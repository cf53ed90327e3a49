//! Parameterized layers shared by the encoder and the heads.

use rand::Rng;

use super::init::scaled_normal;
use super::{Backend, NumericsError, ParamId, ParamStore, Tensor};

/// Fully connected layer `y = x·Wᵀ + b` on row vectors, `W: [out, in]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    /// Weights drawn with variance `gain / in`; zero bias.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_features: usize,
        out_features: usize,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Result<Self, NumericsError> {
        let weight = store.add(
            format!("{name}.weight"),
            scaled_normal(&[out_features, in_features], in_features, gain, rng),
        )?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_features]))?;
        Ok(Self { weight, bias, in_features, out_features })
    }

    pub fn forward<B: Backend>(&self, b: &mut B, store: &ParamStore, x: &B::Value) -> Result<B::Value, NumericsError> {
        let w = b.param(store, self.weight);
        let bias = b.param(store, self.bias);
        b.linear(x, &w, &bias)
    }
}

/// Same-padded, stride-1 convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Result<Self, NumericsError> {
        let fan_in = in_channels * kernel * kernel;
        let weight = store.add(
            format!("{name}.weight"),
            scaled_normal(&[out_channels, in_channels, kernel, kernel], fan_in, gain, rng),
        )?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_channels]))?;
        Ok(Self { weight, bias, kernel })
    }

    pub fn forward<B: Backend>(&self, b: &mut B, store: &ParamStore, x: &B::Value) -> Result<B::Value, NumericsError> {
        let w = b.param(store, self.weight);
        let bias = b.param(store, self.bias);
        b.conv2d(x, &w, &bias, 1, self.kernel / 2)
    }
}
