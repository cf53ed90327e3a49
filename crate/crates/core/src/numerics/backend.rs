use std::sync::Arc;

use super::kernels::BilinearTap;
use super::ops::{self, Reduction};
use super::{NumericsError, ParamId, ParamStore, Tensor};

/// Forward-evaluation interface shared by the recording [`Graph`](super::Graph)
/// and the non-recording [`Eager`] evaluator. Model code is written once
/// against this trait.
pub trait Backend {
    type Value: Clone;

    /// Registers a constant (or, for the graph, optionally differentiable) input.
    fn input(&mut self, tensor: Tensor) -> Self::Value;
    fn param(&mut self, store: &ParamStore, id: ParamId) -> Self::Value;
    fn tensor<'a>(&'a self, value: &'a Self::Value) -> &'a Tensor;

    fn shape(&self, value: &Self::Value) -> Vec<usize> {
        self.tensor(value).shape().to_vec()
    }

    fn conv2d(
        &mut self,
        x: &Self::Value,
        weight: &Self::Value,
        bias: &Self::Value,
        stride: usize,
        padding: usize,
    ) -> Result<Self::Value, NumericsError>;
    fn relu(&mut self, x: &Self::Value) -> Self::Value;
    fn maxpool2x2(&mut self, x: &Self::Value) -> Result<Self::Value, NumericsError>;
    /// `x[N, I] · weight[O, I]ᵀ + bias[O]`.
    fn linear(
        &mut self,
        x: &Self::Value,
        weight: &Self::Value,
        bias: &Self::Value,
    ) -> Result<Self::Value, NumericsError>;
    fn matmul(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value, NumericsError>;
    /// `a · bᵀ`.
    fn matmul_nt(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value, NumericsError>;
    fn transpose(&mut self, x: &Self::Value) -> Result<Self::Value, NumericsError>;
    fn concat(
        &mut self,
        a: &Self::Value,
        b: &Self::Value,
        axis: usize,
    ) -> Result<Self::Value, NumericsError>;
    fn narrow(
        &mut self,
        x: &Self::Value,
        axis: usize,
        start: usize,
        len: usize,
    ) -> Result<Self::Value, NumericsError>;
    fn softmax(&mut self, x: &Self::Value, axis: usize) -> Result<Self::Value, NumericsError>;
    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value, NumericsError>;
    fn sub(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value, NumericsError>;
    fn mul(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value, NumericsError>;
    fn scale(&mut self, x: &Self::Value, factor: f64) -> Self::Value;
    fn reshape(&mut self, x: &Self::Value, shape: &[usize]) -> Result<Self::Value, NumericsError>;
    fn sum(&mut self, x: &Self::Value) -> Self::Value;
    /// Weighted gather of rows from a `[D, N]` map: output `[M, D]`.
    fn gather(
        &mut self,
        map: &Self::Value,
        taps: Arc<Vec<BilinearTap>>,
    ) -> Result<Self::Value, NumericsError>;
    /// Squared Euclidean error between rows of `pred` and a constant target,
    /// restricted to rows with `mask[i] == true`.
    fn l2_loss(
        &mut self,
        pred: &Self::Value,
        target: &Tensor,
        mask: &[bool],
        reduction: Reduction,
    ) -> Result<Self::Value, NumericsError>;

    fn mean(&mut self, x: &Self::Value) -> Self::Value {
        let n = self.tensor(x).numel() as f64;
        let s = self.sum(x);
        self.scale(&s, 1.0 / n)
    }
}

/// Evaluates operations immediately and keeps no history, so intermediate
/// buffers are released as soon as the caller drops them. Used for
/// inference with frozen parameters.
#[derive(Debug, Default)]
pub struct Eager;

impl Eager {
    pub fn new() -> Self {
        Self
    }
}

impl Backend for Eager {
    type Value = Tensor;

    fn input(&mut self, tensor: Tensor) -> Tensor {
        tensor.with_requires_grad(false)
    }

    fn param(&mut self, store: &ParamStore, id: ParamId) -> Tensor {
        let t = store.get(id).tensor();
        Tensor::from_arc(t.shape().to_vec(), t.shared_data())
    }

    fn tensor<'a>(&'a self, value: &'a Tensor) -> &'a Tensor {
        value
    }

    fn conv2d(&mut self, x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, padding: usize) -> Result<Tensor, NumericsError> {
        let g = ops::conv_geometry(x, w, b, stride, padding)?;
        Ok(ops::conv2d(&g, x, w, b))
    }

    fn relu(&mut self, x: &Tensor) -> Tensor {
        ops::relu(x)
    }

    fn maxpool2x2(&mut self, x: &Tensor) -> Result<Tensor, NumericsError> {
        ops::maxpool2x2(x).map(|(t, _)| t)
    }

    fn linear(&mut self, x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor, NumericsError> {
        ops::linear(x, w, b)
    }

    fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, NumericsError> {
        ops::matmul(a, b, false)
    }

    fn matmul_nt(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, NumericsError> {
        ops::matmul(a, b, true)
    }

    fn transpose(&mut self, x: &Tensor) -> Result<Tensor, NumericsError> {
        ops::transpose(x)
    }

    fn concat(&mut self, a: &Tensor, b: &Tensor, axis: usize) -> Result<Tensor, NumericsError> {
        ops::concat(a, b, axis)
    }

    fn narrow(&mut self, x: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor, NumericsError> {
        ops::narrow(x, axis, start, len)
    }

    fn softmax(&mut self, x: &Tensor, axis: usize) -> Result<Tensor, NumericsError> {
        ops::softmax(x, axis)
    }

    fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, NumericsError> {
        ops::elementwise("add", a, b, |x, y| x + y)
    }

    fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, NumericsError> {
        ops::elementwise("sub", a, b, |x, y| x - y)
    }

    fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, NumericsError> {
        ops::elementwise("mul", a, b, |x, y| x * y)
    }

    fn scale(&mut self, x: &Tensor, factor: f64) -> Tensor {
        ops::scale(x, factor)
    }

    fn reshape(&mut self, x: &Tensor, shape: &[usize]) -> Result<Tensor, NumericsError> {
        x.reshape(shape)
    }

    fn sum(&mut self, x: &Tensor) -> Tensor {
        ops::sum(x)
    }

    fn gather(&mut self, map: &Tensor, taps: Arc<Vec<BilinearTap>>) -> Result<Tensor, NumericsError> {
        ops::gather(map, &taps)
    }

    fn l2_loss(&mut self, pred: &Tensor, target: &Tensor, mask: &[bool], reduction: Reduction) -> Result<Tensor, NumericsError> {
        ops::l2_loss(pred, target, mask, reduction).map(|(t, _)| t)
    }
}
