use std::sync::Arc;

use super::backend::Backend;
use super::kernels::{self, BilinearTap, ConvGeometry, Strides};
use super::ops::{self, Reduction};
use super::{NumericsError, ParamId, ParamStore, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeometry },
    Relu(Var),
    MaxPool { x: Var, argmax: Vec<usize> },
    Linear { x: Var, w: Var, b: Var },
    MatMul { a: Var, b: Var, transpose_rhs: bool },
    Transpose(Var),
    Concat { a: Var, b: Var, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    Softmax { x: Var, axis: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Reshape(Var),
    Sum(Var),
    Gather { map: Var, taps: Arc<Vec<BilinearTap>> },
    L2 { pred: Var, target: Tensor, mask: Vec<bool>, denom: f64 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Reverse-mode tape. Nodes are appended in evaluation order, so reverse
/// index order is a valid topological order for backpropagation.
///
/// Gradient contract: [`Graph::backward`] adds parameter gradients into the
/// [`ParamStore`]; calling it twice without [`ParamStore::zero_grad`] doubles
/// them. Gradients of differentiable inputs are readable via
/// [`Graph::grad`] and reflect the most recent backward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    input_grads: Vec<Option<Vec<f64>>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Input leaf that receives a gradient on backward.
    pub fn input_with_grad(&mut self, tensor: Tensor) -> Var {
        self.push(tensor, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.input_grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value: value.with_requires_grad(false), op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn record(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let needs = self.needs(parents);
        self.push(value, op, needs)
    }

    /// Backpropagates from a single-element loss.
    pub fn backward(&mut self, loss: Var, params: &mut ParamStore) -> Result<(), NumericsError> {
        let numel = self.nodes[loss.0].value.numel();
        if numel != 1 {
            return Err(NumericsError::NotScalar(numel));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut input_grads = vec![None; self.nodes.len()];

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => input_grads[id] = Some(g),
                Op::Param(pid) => params.accumulate(*pid, &g)?,
                op => self.propagate(op, &node.value, &g, &mut grads),
            }
        }
        self.input_grads = input_grads;
        Ok(())
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: &Var| &self.nodes[v.0].value;
        let mut send = |v: Var, delta: Vec<f64>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
                slot @ None => *slot = Some(delta),
            }
        };
        match op {
            Op::Leaf | Op::Param(_) => unreachable!("leaves handled by caller"),
            Op::Conv2d { x, w, b, geom } => {
                let (gx, gw, gb) = kernels::conv2d_backward(geom, val(x).data(), val(w).data(), g);
                send(*x, gx);
                send(*w, gw);
                send(*b, gb);
            }
            Op::Relu(x) => {
                let gx = val(x).data().iter().zip(g).map(|(v, d)| if *v > 0.0 { *d } else { 0.0 }).collect();
                send(*x, gx);
            }
            Op::MaxPool { x, argmax } => {
                let mut gx = vec![0.0; val(x).numel()];
                for (d, &idx) in g.iter().zip(argmax) {
                    gx[idx] += d;
                }
                send(*x, gx);
            }
            Op::Linear { x, w, b } => {
                let (n, i) = (val(x).shape()[0], val(x).shape()[1]);
                let o = val(w).shape()[0];
                let mut gx = vec![0.0; n * i];
                kernels::gemm(n, o, i, g, Strides::row_major(o), val(w).data(), Strides::row_major(i), 0.0, &mut gx, Strides::row_major(i));
                let mut gw = vec![0.0; o * i];
                kernels::gemm(o, n, i, g, Strides::transposed(o), val(x).data(), Strides::row_major(i), 0.0, &mut gw, Strides::row_major(i));
                let mut gb = vec![0.0; o];
                for row in g.chunks_exact(o) {
                    gb.iter_mut().zip(row).for_each(|(a, d)| *a += d);
                }
                send(*x, gx);
                send(*w, gw);
                send(*b, gb);
            }
            Op::MatMul { a, b, transpose_rhs } => {
                let (m, k) = (val(a).shape()[0], val(a).shape()[1]);
                let n = out.shape()[1];
                // a: m×k, b: k×n (or n×k when transposed), g: m×n
                let mut ga = vec![0.0; m * k];
                let sb = if *transpose_rhs { Strides::row_major(k) } else { Strides::transposed(n) };
                kernels::gemm(m, n, k, g, Strides::row_major(n), val(b).data(), sb, 0.0, &mut ga, Strides::row_major(k));
                let mut gb = vec![0.0; k * n];
                if *transpose_rhs {
                    // d(bᵀ) = aᵀ·g  ->  d(b) = gᵀ·a  (n×k)
                    kernels::gemm(n, m, k, g, Strides::transposed(n), val(a).data(), Strides::row_major(k), 0.0, &mut gb, Strides::row_major(k));
                } else {
                    kernels::gemm(k, m, n, val(a).data(), Strides::transposed(k), g, Strides::row_major(n), 0.0, &mut gb, Strides::row_major(n));
                }
                send(*a, ga);
                send(*b, gb);
            }
            Op::Transpose(x) => {
                let (r, c) = (val(x).shape()[0], val(x).shape()[1]);
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        gx[i * c + j] = g[j * r + i];
                    }
                }
                send(*x, gx);
            }
            Op::Concat { a, b, axis } => {
                let (outer, la, inner) = kernels::axis_split(val(a).shape(), *axis);
                let lb = val(b).shape()[*axis];
                let (mut ga, mut gb) = (Vec::with_capacity(val(a).numel()), Vec::with_capacity(val(b).numel()));
                for o in 0..outer {
                    let base = o * (la + lb) * inner;
                    ga.extend_from_slice(&g[base..base + la * inner]);
                    gb.extend_from_slice(&g[base + la * inner..base + (la + lb) * inner]);
                }
                send(*a, ga);
                send(*b, gb);
            }
            Op::Narrow { x, axis, start } => {
                let (outer, full, inner) = kernels::axis_split(val(x).shape(), *axis);
                let len = out.shape()[*axis];
                let mut gx = vec![0.0; val(x).numel()];
                for o in 0..outer {
                    let dst = o * full * inner + start * inner;
                    gx[dst..dst + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                send(*x, gx);
            }
            Op::Softmax { x, axis } => {
                send(*x, kernels::softmax_backward(out.shape(), *axis, out.data(), g));
            }
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.iter().map(|d| -d).collect());
            }
            Op::Mul(a, b) => {
                let ga = g.iter().zip(val(b).data()).map(|(d, y)| d * y).collect();
                let gb = g.iter().zip(val(a).data()).map(|(d, x)| d * x).collect();
                send(*a, ga);
                send(*b, gb);
            }
            Op::Scale(x, c) => send(*x, g.iter().map(|d| d * c).collect()),
            Op::Reshape(x) => send(*x, g.to_vec()),
            Op::Sum(x) => send(*x, vec![g[0]; val(x).numel()]),
            Op::Gather { map, taps } => {
                let (d, n) = (val(map).shape()[0], val(map).shape()[1]);
                send(*map, kernels::gather_backward(d, n, taps, g));
            }
            Op::L2 { pred, target, mask, denom } => {
                let c = val(pred).shape()[1];
                let p = val(pred).data();
                let t = target.data();
                let factor = 2.0 * g[0] / denom;
                let mut gp = vec![0.0; p.len()];
                for (row, _) in mask.iter().enumerate().filter(|(_, m)| **m) {
                    for j in 0..c {
                        let k = row * c + j;
                        gp[k] = factor * (p[k] - t[k]);
                    }
                }
                send(*pred, gp);
            }
        }
    }
}

impl Backend for Graph {
    type Value = Var;

    fn input(&mut self, tensor: Tensor) -> Var {
        self.push(tensor, Op::Leaf, false)
    }

    fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        let shared = Tensor::from_arc(p.tensor().shape().to_vec(), p.tensor().shared_data());
        self.push(shared, Op::Param(id), !p.is_frozen())
    }

    fn tensor<'a>(&'a self, value: &'a Var) -> &'a Tensor {
        self.value(*value)
    }

    fn conv2d(&mut self, x: &Var, w: &Var, b: &Var, stride: usize, padding: usize) -> Result<Var, NumericsError> {
        let geom = ops::conv_geometry(self.value(*x), self.value(*w), self.value(*b), stride, padding)?;
        let out = ops::conv2d(&geom, self.value(*x), self.value(*w), self.value(*b));
        Ok(self.record(out, Op::Conv2d { x: *x, w: *w, b: *b, geom }, &[*x, *w, *b]))
    }

    fn relu(&mut self, x: &Var) -> Var {
        let out = ops::relu(self.value(*x));
        self.record(out, Op::Relu(*x), &[*x])
    }

    fn maxpool2x2(&mut self, x: &Var) -> Result<Var, NumericsError> {
        let (out, argmax) = ops::maxpool2x2(self.value(*x))?;
        Ok(self.record(out, Op::MaxPool { x: *x, argmax }, &[*x]))
    }

    fn linear(&mut self, x: &Var, w: &Var, b: &Var) -> Result<Var, NumericsError> {
        let out = ops::linear(self.value(*x), self.value(*w), self.value(*b))?;
        Ok(self.record(out, Op::Linear { x: *x, w: *w, b: *b }, &[*x, *w, *b]))
    }

    fn matmul(&mut self, a: &Var, b: &Var) -> Result<Var, NumericsError> {
        let out = ops::matmul(self.value(*a), self.value(*b), false)?;
        Ok(self.record(out, Op::MatMul { a: *a, b: *b, transpose_rhs: false }, &[*a, *b]))
    }

    fn matmul_nt(&mut self, a: &Var, b: &Var) -> Result<Var, NumericsError> {
        let out = ops::matmul(self.value(*a), self.value(*b), true)?;
        Ok(self.record(out, Op::MatMul { a: *a, b: *b, transpose_rhs: true }, &[*a, *b]))
    }

    fn transpose(&mut self, x: &Var) -> Result<Var, NumericsError> {
        let out = ops::transpose(self.value(*x))?;
        Ok(self.record(out, Op::Transpose(*x), &[*x]))
    }

    fn concat(&mut self, a: &Var, b: &Var, axis: usize) -> Result<Var, NumericsError> {
        let out = ops::concat(self.value(*a), self.value(*b), axis)?;
        Ok(self.record(out, Op::Concat { a: *a, b: *b, axis }, &[*a, *b]))
    }

    fn narrow(&mut self, x: &Var, axis: usize, start: usize, len: usize) -> Result<Var, NumericsError> {
        let out = ops::narrow(self.value(*x), axis, start, len)?;
        Ok(self.record(out, Op::Narrow { x: *x, axis, start }, &[*x]))
    }

    fn softmax(&mut self, x: &Var, axis: usize) -> Result<Var, NumericsError> {
        let out = ops::softmax(self.value(*x), axis)?;
        Ok(self.record(out, Op::Softmax { x: *x, axis }, &[*x]))
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var, NumericsError> {
        let out = ops::elementwise("add", self.value(*a), self.value(*b), |x, y| x + y)?;
        Ok(self.record(out, Op::Add(*a, *b), &[*a, *b]))
    }

    fn sub(&mut self, a: &Var, b: &Var) -> Result<Var, NumericsError> {
        let out = ops::elementwise("sub", self.value(*a), self.value(*b), |x, y| x - y)?;
        Ok(self.record(out, Op::Sub(*a, *b), &[*a, *b]))
    }

    fn mul(&mut self, a: &Var, b: &Var) -> Result<Var, NumericsError> {
        let out = ops::elementwise("mul", self.value(*a), self.value(*b), |x, y| x * y)?;
        Ok(self.record(out, Op::Mul(*a, *b), &[*a, *b]))
    }

    fn scale(&mut self, x: &Var, factor: f64) -> Var {
        let out = ops::scale(self.value(*x), factor);
        self.record(out, Op::Scale(*x, factor), &[*x])
    }

    fn reshape(&mut self, x: &Var, shape: &[usize]) -> Result<Var, NumericsError> {
        let out = self.value(*x).reshape(shape)?;
        Ok(self.record(out, Op::Reshape(*x), &[*x]))
    }

    fn sum(&mut self, x: &Var) -> Var {
        let out = ops::sum(self.value(*x));
        self.record(out, Op::Sum(*x), &[*x])
    }

    fn gather(&mut self, map: &Var, taps: Arc<Vec<BilinearTap>>) -> Result<Var, NumericsError> {
        let out = ops::gather(self.value(*map), &taps)?;
        Ok(self.record(out, Op::Gather { map: *map, taps }, &[*map]))
    }

    fn l2_loss(&mut self, pred: &Var, target: &Tensor, mask: &[bool], reduction: Reduction) -> Result<Var, NumericsError> {
        let (out, denom) = ops::l2_loss(self.value(*pred), target, mask, reduction)?;
        let op = Op::L2 { pred: *pred, target: target.clone(), mask: mask.to_vec(), denom };
        Ok(self.record(out, op, &[*pred]))
    }
}
