//! Raw forward/backward kernels on row-major slices. Shape checking happens
//! in the backends; these functions assume consistent arguments.

/// Upper bound on the im2col scratch buffer, in elements.
const COL_BUDGET: usize = 1 << 20;

#[derive(Clone, Copy, Debug)]
pub(crate) struct Strides {
    pub row: usize,
    pub col: usize,
}

impl Strides {
    pub const fn row_major(cols: usize) -> Self {
        Self { row: cols, col: 1 }
    }

    pub const fn transposed(rows: usize) -> Self {
        Self { row: 1, col: rows }
    }
}

fn span(rows: usize, cols: usize, s: Strides) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * s.row + (cols - 1) * s.col + 1
    }
}

/// `c = a·b + beta·c` for an `m×k` by `k×n` product with explicit strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    sa: Strides,
    b: &[f64],
    sb: Strides,
    beta: f64,
    c: &mut [f64],
    sc: Strides,
) {
    assert!(span(m, k, sa) <= a.len(), "gemm: lhs out of bounds");
    assert!(span(k, n, sb) <= b.len(), "gemm: rhs out of bounds");
    assert!(span(m, n, sc) <= c.len(), "gemm: output out of bounds");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                c[i * sc.row + j * sc.col] *= beta;
            }
        }
        return;
    }
    // SAFETY: the asserts above guarantee every strided access stays inside
    // the slices, and `c` is borrowed mutably so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.row as isize,
            sa.col as isize,
            b.as_ptr(),
            sb.row as isize,
            sb.col as isize,
            beta,
            c.as_mut_ptr(),
            sc.row as isize,
            sc.col as isize,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kh) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kw) / self.stride + 1
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kh * self.kw
    }

    fn rows_per_chunk(&self) -> usize {
        let per_row = self.patch_len() * self.out_width();
        (COL_BUDGET / per_row.max(1)).clamp(1, self.out_height())
    }

    /// Fills `col` (patch_len × rows·out_width) for output rows `r0..r1`.
    fn im2col(&self, input: &[f64], r0: usize, r1: usize, col: &mut [f64]) {
        let (ow, n) = (self.out_width(), (r1 - r0) * self.out_width());
        let pad = self.padding as isize;
        for c in 0..self.in_channels {
            let plane = &input[c * self.height * self.width..(c + 1) * self.height * self.width];
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = ((c * self.kh + i) * self.kw + j) * n;
                    let dst = &mut col[row..row + n];
                    for r in r0..r1 {
                        let y = (r * self.stride) as isize - pad + i as isize;
                        let out = &mut dst[(r - r0) * ow..(r - r0 + 1) * ow];
                        if y < 0 || y >= self.height as isize {
                            out.iter_mut().for_each(|v| *v = 0.0);
                            continue;
                        }
                        let src = &plane[y as usize * self.width..(y as usize + 1) * self.width];
                        for (x, v) in out.iter_mut().enumerate() {
                            let xi = (x * self.stride) as isize - pad + j as isize;
                            *v = if xi < 0 || xi >= self.width as isize {
                                0.0
                            } else {
                                src[xi as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im_add(&self, col: &[f64], r0: usize, r1: usize, grad_input: &mut [f64]) {
        let (ow, n) = (self.out_width(), (r1 - r0) * self.out_width());
        let pad = self.padding as isize;
        for c in 0..self.in_channels {
            let plane =
                &mut grad_input[c * self.height * self.width..(c + 1) * self.height * self.width];
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = ((c * self.kh + i) * self.kw + j) * n;
                    let src = &col[row..row + n];
                    for r in r0..r1 {
                        let y = (r * self.stride) as isize - pad + i as isize;
                        if y < 0 || y >= self.height as isize {
                            continue;
                        }
                        let dst = &mut plane[y as usize * self.width..(y as usize + 1) * self.width];
                        for (x, v) in src[(r - r0) * ow..(r - r0 + 1) * ow].iter().enumerate() {
                            let xi = (x * self.stride) as isize - pad + j as isize;
                            if xi >= 0 && xi < self.width as isize {
                                dst[xi as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(g: &ConvGeometry, input: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let (oh, ow) = (g.out_height(), g.out_width());
    let plane = oh * ow;
    let k = g.patch_len();
    let mut out = vec![0.0; g.out_channels * plane];
    let chunk = g.rows_per_chunk();
    let mut col = vec![0.0; k * chunk * ow];
    let mut r0 = 0;
    while r0 < oh {
        let r1 = (r0 + chunk).min(oh);
        let n = (r1 - r0) * ow;
        g.im2col(input, r0, r1, &mut col[..k * n]);
        gemm(
            g.out_channels,
            k,
            n,
            weight,
            Strides::row_major(k),
            &col[..k * n],
            Strides::row_major(n),
            0.0,
            &mut out[r0 * ow..],
            Strides::row_major(plane),
        );
        r0 = r1;
    }
    for (o, b) in bias.iter().enumerate() {
        out[o * plane..(o + 1) * plane].iter_mut().for_each(|v| *v += b);
    }
    out
}

/// Returns `(grad_input, grad_weight, grad_bias)`.
pub(crate) fn conv2d_backward(
    g: &ConvGeometry,
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let plane = oh * ow;
    let k = g.patch_len();
    let mut grad_input = vec![0.0; input.len()];
    let mut grad_weight = vec![0.0; weight.len()];
    let grad_bias = (0..g.out_channels)
        .map(|o| grad_out[o * plane..(o + 1) * plane].iter().sum())
        .collect();
    let chunk = g.rows_per_chunk();
    let mut col = vec![0.0; k * chunk * ow];
    let mut dcol = vec![0.0; k * chunk * ow];
    let mut r0 = 0;
    while r0 < oh {
        let r1 = (r0 + chunk).min(oh);
        let n = (r1 - r0) * ow;
        g.im2col(input, r0, r1, &mut col[..k * n]);
        let dy = &grad_out[r0 * ow..];
        gemm(
            g.out_channels,
            n,
            k,
            dy,
            Strides::row_major(plane),
            &col[..k * n],
            Strides::transposed(n),
            1.0,
            &mut grad_weight,
            Strides::row_major(k),
        );
        gemm(
            k,
            g.out_channels,
            n,
            weight,
            Strides::transposed(k),
            dy,
            Strides::row_major(plane),
            0.0,
            &mut dcol[..k * n],
            Strides::row_major(n),
        );
        g.col2im_add(&dcol[..k * n], r0, r1, &mut grad_input);
        r0 = r1;
    }
    (grad_input, grad_weight, grad_bias)
}

/// 2×2 max pooling with stride 2 on `[C, H, W]`; odd trailing rows/cols are
/// dropped. Returns the output and the flat input index of each maximum
/// (first maximum wins on ties).
pub(crate) fn maxpool2x2_forward(
    channels: usize,
    height: usize,
    width: usize,
    input: &[f64],
) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (height / 2, width / 2);
    let mut out = Vec::with_capacity(channels * oh * ow);
    let mut arg = Vec::with_capacity(channels * oh * ow);
    for c in 0..channels {
        let base = c * height * width;
        for i in 0..oh {
            for j in 0..ow {
                let candidates = [
                    base + 2 * i * width + 2 * j,
                    base + 2 * i * width + 2 * j + 1,
                    base + (2 * i + 1) * width + 2 * j,
                    base + (2 * i + 1) * width + 2 * j + 1,
                ];
                let mut best = candidates[0];
                for &idx in &candidates[1..] {
                    if input[idx] > input[best] {
                        best = idx;
                    }
                }
                out.push(input[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

/// Splits a shape around `axis` into (outer, axis length, inner).
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn softmax_forward(shape: &[usize], axis: usize, input: &[f64]) -> Vec<f64> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut out = vec![0.0; input.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |t: usize| o * len * inner + t * inner + i;
            let max = (0..len).map(|t| input[at(t)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for t in 0..len {
                let e = (input[at(t)] - max).exp();
                out[at(t)] = e;
                total += e;
            }
            for t in 0..len {
                out[at(t)] /= total;
            }
        }
    }
    out
}

pub(crate) fn softmax_backward(shape: &[usize], axis: usize, output: &[f64], grad_out: &[f64]) -> Vec<f64> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut grad = vec![0.0; output.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |t: usize| o * len * inner + t * inner + i;
            let dot: f64 = (0..len).map(|t| output[at(t)] * grad_out[at(t)]).sum();
            for t in 0..len {
                grad[at(t)] = output[at(t)] * (grad_out[at(t)] - dot);
            }
        }
    }
    grad
}

/// One bilinear sample: four flat cell indices into a `[D, N]` map and their
/// interpolation weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BilinearTap {
    pub cells: [usize; 4],
    pub weights: [f64; 4],
}

/// `out[m, d] = Σ_t w_t · map[d, cell_t]` for a `[D, N]` map.
pub(crate) fn gather_forward(channels: usize, cells: usize, map: &[f64], taps: &[BilinearTap]) -> Vec<f64> {
    let mut out = vec![0.0; taps.len() * channels];
    for (m, tap) in taps.iter().enumerate() {
        let row = &mut out[m * channels..(m + 1) * channels];
        for (d, v) in row.iter_mut().enumerate() {
            let plane = &map[d * cells..(d + 1) * cells];
            let mut acc = 0.0;
            for t in 0..4 {
                if tap.weights[t] != 0.0 {
                    acc += tap.weights[t] * plane[tap.cells[t]];
                }
            }
            *v = acc;
        }
    }
    out
}

pub(crate) fn gather_backward(channels: usize, cells: usize, taps: &[BilinearTap], grad_out: &[f64]) -> Vec<f64> {
    let mut grad = vec![0.0; channels * cells];
    for (m, tap) in taps.iter().enumerate() {
        for d in 0..channels {
            let g = grad_out[m * channels + d];
            for t in 0..4 {
                grad[d * cells + tap.cells[t]] += tap.weights[t] * g;
            }
        }
    }
    grad
}
