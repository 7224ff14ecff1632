//! Raw numeric kernels shared by the forward-only [`super::ops`] functions and
//! the recorded [`super::Graph`] operations.

use crate::error::{Error, Result};

/// Added inside the logarithm of every cross-entropy term so that a zero
/// predicted probability yields a large finite loss instead of `-inf`.
pub const LOG_EPSILON: f64 = 1e-12;

/// Tolerance on `sum == 1` when validating probability vectors.
const PROB_SUM_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Padding {
    Valid,
    Same,
}

/// How per-row losses are combined into one scalar.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Reduction {
    Mean,
    Sum,
}

/// Output length of a convolution along one axis, with the padding placed
/// before the first element.
pub fn conv_output_dim(
    n: usize,
    k: usize,
    stride: usize,
    padding: Padding,
) -> Option<(usize, usize)> {
    if stride == 0 || k == 0 {
        return None;
    }
    match padding {
        Padding::Valid => (n >= k).then(|| ((n - k) / stride + 1, 0)),
        Padding::Same => {
            let out = n.div_ceil(stride);
            let total = ((out - 1) * stride + k).saturating_sub(n);
            Some((out, total / 2))
        }
    }
}

pub fn pool_output_dim(n: usize, k: usize, stride: usize) -> Option<usize> {
    (stride > 0 && k > 0 && k <= n).then(|| (n - k) / stride + 1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

impl ConvGeom {
    /// Validates shapes for `input [B,H,W,Cin]` (or `[H,W,Cin]`), kernels
    /// `[kh,kw,Cin,Cout]` and bias `[Cout]`.
    pub fn new(
        input: &[usize],
        kernels: &[usize],
        bias: &[usize],
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        let (batch, h, w, cin) = match *input {
            [h, w, c] => (1, h, w, c),
            [b, h, w, c] => (b, h, w, c),
            _ => {
                return Err(Error::Dimension(format!(
                    "conv2d input must be [H,W,C] or [B,H,W,C], got {input:?}"
                )))
            }
        };
        let [kh, kw, kcin, cout] = *kernels else {
            return Err(Error::Dimension(format!(
                "conv2d kernels must be [kh,kw,Cin,Cout], got {kernels:?}"
            )));
        };
        if kcin != cin {
            return Err(Error::Dimension(format!(
                "conv2d input has {cin} channels but kernels expect {kcin}"
            )));
        }
        if bias != [cout] {
            return Err(Error::Dimension(format!(
                "conv2d bias must be [{cout}], got {bias:?}"
            )));
        }
        if stride == 0 {
            return Err(Error::Parameter("conv2d stride must be >= 1".into()));
        }
        let (out_h, pad_top) = conv_output_dim(h, kh, stride, padding).ok_or_else(|| {
            Error::Dimension(format!("conv2d kernel height {kh} exceeds input height {h}"))
        })?;
        let (out_w, pad_left) = conv_output_dim(w, kw, stride, padding).ok_or_else(|| {
            Error::Dimension(format!("conv2d kernel width {kw} exceeds input width {w}"))
        })?;
        Ok(ConvGeom {
            batch,
            h,
            w,
            cin,
            kh,
            kw,
            cout,
            stride,
            out_h,
            out_w,
            pad_top,
            pad_left,
        })
    }

    pub fn rows(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }

    pub fn patch(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    /// Visits every (patch row, column offset, input offset, run length)
    /// triple of contiguous input runs that a patch reads.
    #[inline]
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize)) {
        let patch = self.patch();
        let (h, w, cin, kw) = (self.h as isize, self.w as isize, self.cin, self.kw);
        for b in 0..self.batch {
            for oy in 0..self.out_h {
                for ox in 0..self.out_w {
                    let row = ((b * self.out_h + oy) * self.out_w + ox) * patch;
                    let ix0 = (ox * self.stride) as isize - self.pad_left as isize;
                    for ky in 0..self.kh {
                        let iy = (oy * self.stride + ky) as isize - self.pad_top as isize;
                        if iy < 0 || iy >= h {
                            continue;
                        }
                        let in_row = (b * self.h + iy as usize) * self.w;
                        let col_row = row + ky * kw * cin;
                        if ix0 >= 0 && ix0 + kw as isize <= w {
                            f(col_row, (in_row + ix0 as usize) * cin, kw * cin);
                        } else {
                            for kx in 0..kw {
                                let ix = ix0 + kx as isize;
                                if ix >= 0 && ix < w {
                                    f(col_row + kx * cin, (in_row + ix as usize) * cin, cin);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn im2col(input: &[f64], g: &ConvGeom) -> Vec<f64> {
    let mut cols = vec![0.0; g.rows() * g.patch()];
    g.for_each_run(|col, src, len| cols[col..col + len].copy_from_slice(&input[src..src + len]));
    cols
}

pub(crate) fn col2im_add(cols: &[f64], g: &ConvGeom, input_grad: &mut [f64]) {
    g.for_each_run(|col, dst, len| {
        input_grad[dst..dst + len]
            .iter_mut()
            .zip(&cols[col..col + len])
            .for_each(|(a, b)| *a += b)
    });
}

/// `c = a·b + beta·c` with `a` logically `m×k` and `b` logically `k×n`,
/// each optionally stored transposed. Row-major throughout.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_transposed: bool,
    b: &[f64],
    b_transposed: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k, "gemm: lhs size");
    assert_eq!(b.len(), k * n, "gemm: rhs size");
    assert_eq!(c.len(), m * n, "gemm: output size");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_transposed { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_transposed { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above guarantee every index the strides can reach
    // lies inside the three slices, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn fill_rows_with_bias(out: &mut [f64], bias: &[f64]) {
    for row in out.chunks_exact_mut(bias.len()) {
        row.copy_from_slice(bias);
    }
}

pub(crate) fn add_column_sums(grad: &[f64], width: usize, into: &mut [f64]) {
    for row in grad.chunks_exact(width) {
        into.iter_mut().zip(row).for_each(|(a, b)| *a += b);
    }
}

/// Returns `(output, cols)`; `cols` is kept by the tape for the backward pass.
pub(crate) fn conv2d_forward(
    input: &[f64],
    kernels: &[f64],
    bias: &[f64],
    g: &ConvGeom,
) -> (Vec<f64>, Vec<f64>) {
    let cols = im2col(input, g);
    let mut out = vec![0.0; g.rows() * g.cout];
    fill_rows_with_bias(&mut out, bias);
    gemm(g.rows(), g.patch(), g.cout, &cols, false, kernels, false, 1.0, &mut out);
    (out, cols)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct PoolGeom {
    pub batch: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub k: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl PoolGeom {
    pub fn new(input: &[usize], k: usize, stride: usize) -> Result<Self> {
        let (batch, h, w, c) = match *input {
            [h, w, c] => (1, h, w, c),
            [b, h, w, c] => (b, h, w, c),
            _ => {
                return Err(Error::Dimension(format!(
                    "maxpool2d input must be [H,W,C] or [B,H,W,C], got {input:?}"
                )))
            }
        };
        if stride == 0 || k == 0 {
            return Err(Error::Parameter("maxpool2d window and stride must be >= 1".into()));
        }
        let out_h = pool_output_dim(h, k, stride).ok_or_else(|| {
            Error::Dimension(format!("maxpool2d window {k} exceeds input height {h}"))
        })?;
        let out_w = pool_output_dim(w, k, stride).ok_or_else(|| {
            Error::Dimension(format!("maxpool2d window {k} exceeds input width {w}"))
        })?;
        Ok(PoolGeom {
            batch,
            h,
            w,
            c,
            k,
            stride,
            out_h,
            out_w,
        })
    }
}

/// Max pooling; the returned indices point at the winning input element of
/// each window (first in row-major order on ties).
pub(crate) fn maxpool_forward(input: &[f64], g: &PoolGeom) -> (Vec<f64>, Vec<usize>) {
    let n = g.batch * g.out_h * g.out_w * g.c;
    let mut out = Vec::with_capacity(n);
    let mut argmax = Vec::with_capacity(n);
    for b in 0..g.batch {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                for ch in 0..g.c {
                    let mut best_idx = usize::MAX;
                    let mut best = f64::NEG_INFINITY;
                    for ky in 0..g.k {
                        let iy = oy * g.stride + ky;
                        for kx in 0..g.k {
                            let ix = ox * g.stride + kx;
                            let idx = ((b * g.h + iy) * g.w + ix) * g.c + ch;
                            if best_idx == usize::MAX || input[idx] > best {
                                best = input[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_idx);
                }
            }
        }
    }
    (out, argmax)
}

/// `[rows, n] · [n, m] + bias` as a flat `[rows, m]` buffer.
pub(crate) fn dense_forward(input: &[f64], weight: &[f64], bias: &[f64], rows: usize, n: usize) -> Vec<f64> {
    let m = bias.len();
    let mut out = vec![0.0; rows * m];
    fill_rows_with_bias(&mut out, bias);
    gemm(rows, n, m, input, false, weight, false, 1.0, &mut out);
    out
}

/// Row-wise `softmax(x / tau)` with max subtraction.
pub(crate) fn softmax_rows(logits: &[f64], width: usize, tau: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks_exact(width) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max) / tau;
        let start = out.len();
        let mut sum = 0.0;
        for &l in row {
            let e = (l / tau - max).exp();
            sum += e;
            out.push(e);
        }
        out[start..].iter_mut().for_each(|v| *v /= sum);
    }
    out
}

pub(crate) fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::Parameter(format!("temperature must be positive, got {tau}")))
    }
}

pub(crate) fn check_probability_rows(values: &[f64], width: usize, what: &str) -> Result<()> {
    for (r, row) in values.chunks_exact(width).enumerate() {
        if let Some(v) = row.iter().find(|v| v.is_nan() || **v < 0.0) {
            return Err(Error::Domain(format!(
                "{what} row {r} has invalid entry {v}"
            )));
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > PROB_SUM_TOLERANCE {
            return Err(Error::Domain(format!("{what} row {r} sums to {sum}")));
        }
    }
    Ok(())
}

/// Per-row `-Σ t·ln(p + ε)`.
pub(crate) fn cross_entropy_rows(target: &[f64], predicted: &[f64], width: usize) -> Vec<f64> {
    target
        .chunks_exact(width)
        .zip(predicted.chunks_exact(width))
        .map(|(t, p)| {
            -t.iter()
                .zip(p)
                .map(|(&t, &p)| if t == 0.0 { 0.0 } else { t * (p + LOG_EPSILON).ln() })
                .sum::<f64>()
        })
        .collect()
}

pub(crate) fn reduce(values: &[f64], reduction: Reduction) -> f64 {
    let sum: f64 = values.iter().sum();
    match reduction {
        Reduction::Sum => sum,
        Reduction::Mean => sum / values.len() as f64,
    }
}

/// Leading "row" count and row width of a rank-1 or rank-2 shape.
pub(crate) fn matrix_dims(shape: &[usize], what: &str) -> Result<(usize, usize)> {
    match *shape {
        [k] => Ok((1, k)),
        [b, k] => Ok((b, k)),
        _ => Err(Error::Dimension(format!(
            "{what} expects a vector or a matrix, got shape {shape:?}"
        ))),
    }
}
