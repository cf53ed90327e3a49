use rand::Rng;

use super::EncoderError;
use crate::numerics::nn::Linear;
use crate::numerics::{Backend, ParamStore, Tensor};

/// One feature-transformer layer: `s' = s + σ([s | Ψ(s)])` where Ψ is
/// multi-head self-attention and σ is a 2D → 2D → D MLP with ReLU.
#[derive(Clone, Debug)]
pub struct AttentionLayer {
    pub query: Linear,
    pub key: Linear,
    /// Message projection.
    pub value: Linear,
    pub output: Linear,
    pub mlp_hidden: Linear,
    pub mlp_out: Linear,
    pub dim: usize,
    pub heads: usize,
}

impl AttentionLayer {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self, EncoderError> {
        if heads == 0 || dim == 0 || dim % heads != 0 {
            return Err(EncoderError::Config(format!("dimension {dim} is not divisible by {heads} heads")));
        }
        Ok(Self {
            query: Linear::new(store, &format!("{prefix}.attn.query"), dim, dim, 1.0, rng)?,
            key: Linear::new(store, &format!("{prefix}.attn.key"), dim, dim, 1.0, rng)?,
            value: Linear::new(store, &format!("{prefix}.attn.value"), dim, dim, 1.0, rng)?,
            output: Linear::new(store, &format!("{prefix}.attn.output"), dim, dim, 1.0, rng)?,
            mlp_hidden: Linear::new(store, &format!("{prefix}.mlp.0"), 2 * dim, 2 * dim, 2.0, rng)?,
            mlp_out: Linear::new(store, &format!("{prefix}.mlp.1"), 2 * dim, dim, 1.0, rng)?,
            dim,
            heads,
        })
    }

    /// Ψ: per-head softmax(q·kᵀ / √(D/h))·m, heads concatenated and projected.
    /// When `retain` is given, each head's `[N, N]` score matrix is pushed to it.
    pub fn multi_head_attention<B: Backend>(
        &self,
        b: &mut B,
        store: &ParamStore,
        states: &B::Value,
        mut retain: Option<&mut Vec<Tensor>>,
    ) -> Result<B::Value, EncoderError> {
        let shape = b.shape(states);
        if shape.len() != 2 || shape[1] != self.dim {
            return Err(EncoderError::Shape(format!("attention expects [N, {}], got {shape:?}", self.dim)));
        }
        let q = self.query.forward(b, store, states)?;
        let k = self.key.forward(b, store, states)?;
        let m = self.value.forward(b, store, states)?;
        let width = self.dim / self.heads;
        let scale = 1.0 / (width as f64).sqrt();
        let mut merged: Option<B::Value> = None;
        for head in 0..self.heads {
            let qh = b.narrow(&q, 1, head * width, width)?;
            let kh = b.narrow(&k, 1, head * width, width)?;
            let mh = b.narrow(&m, 1, head * width, width)?;
            let logits = b.matmul_nt(&qh, &kh)?;
            let logits = b.scale(&logits, scale);
            let alpha = b.softmax(&logits, 1)?;
            if let Some(store) = retain.as_deref_mut() {
                store.push(b.tensor(&alpha).clone());
            }
            let out = b.matmul(&alpha, &mh)?;
            merged = Some(match merged {
                None => out,
                Some(prev) => b.concat(&prev, &out, 1)?,
            });
        }
        let merged = merged.expect("at least one head");
        Ok(self.output.forward(b, store, &merged)?)
    }

    pub fn forward<B: Backend>(
        &self,
        b: &mut B,
        store: &ParamStore,
        states: &B::Value,
        retain: Option<&mut Vec<Tensor>>,
    ) -> Result<B::Value, EncoderError> {
        let message = self.multi_head_attention(b, store, states, retain)?;
        let joined = b.concat(states, &message, 1)?;
        let hidden = self.mlp_hidden.forward(b, store, &joined)?;
        let hidden = b.relu(&hidden);
        let delta = self.mlp_out.forward(b, store, &hidden)?;
        Ok(b.add(states, &delta)?)
    }
}
