//! Shape-checked forward evaluation shared by the graph and eager backends.

use super::kernels::{self, BilinearTap, ConvGeometry, Strides};
use super::{NumericsError, Tensor};

fn mismatch(op: &'static str, detail: String) -> NumericsError {
    NumericsError::ShapeMismatch { op, detail }
}

fn tensor(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
    Tensor::from_arc(shape, std::sync::Arc::new(data))
}

pub(crate) fn conv_geometry(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<ConvGeometry, NumericsError> {
    let (xs, ws) = (x.shape(), w.shape());
    if xs.len() != 3 || ws.len() != 4 {
        return Err(mismatch("conv2d", format!("input {xs:?}, weight {ws:?}")));
    }
    if ws[1] != xs[0] {
        return Err(mismatch(
            "conv2d",
            format!("weight expects {} input channels, input has {}", ws[1], xs[0]),
        ));
    }
    if b.shape() != [ws[0]] {
        return Err(mismatch("conv2d", format!("bias {:?} for {} outputs", b.shape(), ws[0])));
    }
    if ws[2] % 2 == 0 || ws[3] % 2 == 0 {
        return Err(NumericsError::InvalidArgument(format!(
            "conv2d kernel must be odd, got {}x{}",
            ws[2], ws[3]
        )));
    }
    if stride == 0 {
        return Err(NumericsError::InvalidArgument("conv2d stride must be >= 1".into()));
    }
    if xs[1] + 2 * padding < ws[2] || xs[2] + 2 * padding < ws[3] {
        return Err(mismatch("conv2d", format!("kernel {ws:?} larger than padded input {xs:?}")));
    }
    Ok(ConvGeometry {
        in_channels: xs[0],
        height: xs[1],
        width: xs[2],
        out_channels: ws[0],
        kh: ws[2],
        kw: ws[3],
        stride,
        padding,
    })
}

pub(crate) fn conv2d(g: &ConvGeometry, x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let data = kernels::conv2d_forward(g, x.data(), w.data(), b.data());
    tensor(vec![g.out_channels, g.out_height(), g.out_width()], data)
}

pub(crate) fn relu(x: &Tensor) -> Tensor {
    tensor(x.shape().to_vec(), x.data().iter().map(|v| v.max(0.0)).collect())
}

pub(crate) fn maxpool2x2(x: &Tensor) -> Result<(Tensor, Vec<usize>), NumericsError> {
    let s = x.shape();
    if s.len() != 3 || s[1] < 2 || s[2] < 2 {
        return Err(mismatch("maxpool2x2", format!("needs [C,H>=2,W>=2], got {s:?}")));
    }
    let (data, arg) = kernels::maxpool2x2_forward(s[0], s[1], s[2], x.data());
    Ok((tensor(vec![s[0], s[1] / 2, s[2] / 2], data), arg))
}

fn matrix_dims(op: &'static str, t: &Tensor) -> Result<(usize, usize), NumericsError> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(mismatch(op, format!("expected a matrix, got {s:?}"))),
    }
}

pub(crate) fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor, NumericsError> {
    let (n, i) = matrix_dims("linear", x)?;
    let (o, wi) = matrix_dims("linear", w)?;
    if wi != i || b.shape() != [o] {
        return Err(mismatch(
            "linear",
            format!("input {:?}, weight {:?}, bias {:?}", x.shape(), w.shape(), b.shape()),
        ));
    }
    let mut out = Vec::with_capacity(n * o);
    for _ in 0..n {
        out.extend_from_slice(b.data());
    }
    kernels::gemm(
        n,
        i,
        o,
        x.data(),
        Strides::row_major(i),
        w.data(),
        Strides::transposed(i),
        1.0,
        &mut out,
        Strides::row_major(o),
    );
    Ok(tensor(vec![n, o], out))
}

/// `a·b` (`transpose_rhs = false`) or `a·bᵀ` (`transpose_rhs = true`).
pub(crate) fn matmul(a: &Tensor, b: &Tensor, transpose_rhs: bool) -> Result<Tensor, NumericsError> {
    let (m, k) = matrix_dims("matmul", a)?;
    let (br, bc) = matrix_dims("matmul", b)?;
    let (bk, n, sb) = if transpose_rhs {
        (bc, br, Strides::transposed(bc))
    } else {
        (br, bc, Strides::row_major(bc))
    };
    if bk != k {
        return Err(mismatch(
            "matmul",
            format!("{:?} x {:?} (transpose_rhs={transpose_rhs})", a.shape(), b.shape()),
        ));
    }
    let mut out = vec![0.0; m * n];
    kernels::gemm(m, k, n, a.data(), Strides::row_major(k), b.data(), sb, 0.0, &mut out, Strides::row_major(n));
    Ok(tensor(vec![m, n], out))
}

pub(crate) fn transpose(x: &Tensor) -> Result<Tensor, NumericsError> {
    let (r, c) = matrix_dims("transpose", x)?;
    let src = x.data();
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = src[i * c + j];
        }
    }
    Ok(tensor(vec![c, r], out))
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<(), NumericsError> {
    if axis >= shape.len() {
        return Err(NumericsError::AxisOutOfRange { op, axis, rank: shape.len() });
    }
    Ok(())
}

pub(crate) fn concat(a: &Tensor, b: &Tensor, axis: usize) -> Result<Tensor, NumericsError> {
    check_axis("concat", a.shape(), axis)?;
    check_axis("concat", b.shape(), axis)?;
    let (sa, sb) = (a.shape(), b.shape());
    let compatible = sa.len() == sb.len()
        && sa.iter().zip(sb).enumerate().all(|(i, (x, y))| i == axis || x == y);
    if !compatible {
        return Err(mismatch("concat", format!("{sa:?} and {sb:?} along axis {axis}")));
    }
    let (outer, la, inner) = kernels::axis_split(sa, axis);
    let lb = sb[axis];
    let mut out = Vec::with_capacity(a.numel() + b.numel());
    for o in 0..outer {
        out.extend_from_slice(&a.data()[o * la * inner..(o + 1) * la * inner]);
        out.extend_from_slice(&b.data()[o * lb * inner..(o + 1) * lb * inner]);
    }
    let mut shape = sa.to_vec();
    shape[axis] = la + lb;
    Ok(tensor(shape, out))
}

pub(crate) fn narrow(x: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor, NumericsError> {
    check_axis("narrow", x.shape(), axis)?;
    let (outer, full, inner) = kernels::axis_split(x.shape(), axis);
    if len == 0 || start + len > full {
        return Err(mismatch("narrow", format!("range {start}..{} of axis size {full}", start + len)));
    }
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = o * full * inner + start * inner;
        out.extend_from_slice(&x.data()[base..base + len * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    Ok(tensor(shape, out))
}

pub(crate) fn softmax(x: &Tensor, axis: usize) -> Result<Tensor, NumericsError> {
    check_axis("softmax", x.shape(), axis)?;
    Ok(tensor(x.shape().to_vec(), kernels::softmax_forward(x.shape(), axis, x.data())))
}

pub(crate) fn elementwise(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor, NumericsError> {
    if a.shape() != b.shape() {
        return Err(mismatch(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(tensor(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect(),
    ))
}

pub(crate) fn scale(x: &Tensor, factor: f64) -> Tensor {
    tensor(x.shape().to_vec(), x.data().iter().map(|v| v * factor).collect())
}

pub(crate) fn sum(x: &Tensor) -> Tensor {
    tensor(vec![1], vec![x.data().iter().sum()])
}

pub(crate) fn gather(x: &Tensor, taps: &[BilinearTap]) -> Result<Tensor, NumericsError> {
    let (d, n) = matrix_dims("gather", x)?;
    if taps.is_empty() {
        return Err(NumericsError::InvalidArgument("gather needs at least one sample".into()));
    }
    if let Some(bad) = taps.iter().find(|t| t.cells.iter().any(|&c| c >= n)) {
        return Err(mismatch("gather", format!("cell index {:?} outside {n} cells", bad.cells)));
    }
    Ok(tensor(vec![taps.len(), d], kernels::gather_forward(d, n, x.data(), taps)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    Sum,
    #[default]
    Mean,
}

/// Masked squared-error loss over the rows of `pred`/`target` (`[N, C]`).
/// Returns the loss tensor and the normaliser (valid row count for mean).
pub(crate) fn l2_loss(
    pred: &Tensor,
    target: &Tensor,
    mask: &[bool],
    reduction: Reduction,
) -> Result<(Tensor, f64), NumericsError> {
    let (n, c) = matrix_dims("l2_loss", pred)?;
    if target.shape() != pred.shape() || mask.len() != n {
        return Err(mismatch(
            "l2_loss",
            format!("pred {:?}, target {:?}, mask {}", pred.shape(), target.shape(), mask.len()),
        ));
    }
    let valid = mask.iter().filter(|m| **m).count();
    if valid == 0 {
        return Err(NumericsError::EmptyMask);
    }
    let denom = match reduction {
        Reduction::Sum => 1.0,
        Reduction::Mean => valid as f64,
    };
    let mut total = 0.0;
    for (row, _) in mask.iter().enumerate().filter(|(_, m)| **m) {
        for j in 0..c {
            let d = pred.data()[row * c + j] - target.data()[row * c + j];
            total += d * d;
        }
    }
    Ok((tensor(vec![1], vec![total / denom]), denom))
}
