use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::Tensor;

/// Zero-mean Gaussian weights with standard deviation `sqrt(gain / fan_in)`.
/// Gain 2 is He initialization for layers followed by ReLU.
pub fn scaled_normal(shape: &[usize], fan_in: usize, gain: f64, rng: &mut impl Rng) -> Tensor {
    let std = (gain / fan_in.max(1) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite standard deviation");
    Tensor::from_fn(shape, |_| normal.sample(rng))
}

pub fn he_normal(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    scaled_normal(shape, fan_in, 2.0, rng)
}
