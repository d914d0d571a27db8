//! Raw numeric kernels behind the tape operations.
//!
//! Layouts: images are `[C, H, W]` row-major, convolution kernels
//! `[C_out, C_in, Kh, Kw]`, matrices `[N, D]`. Convolution is "valid":
//! the output extent is `floor((H - Kh) / stride) + 1`.
//!
//! Inner loops are written as slice zips over contiguous rows so they
//! vectorize; the stride-1 case, which dominates, has a dedicated path.

/// `out_row[x] += k * in_row[x * stride]`.
#[inline]
fn axpy_strided(out_row: &mut [f64], in_row: &[f64], k: f64, stride: usize) {
    if stride == 1 {
        for (o, i) in out_row.iter_mut().zip(in_row) {
            *o += k * *i;
        }
    } else {
        for (o, i) in out_row.iter_mut().zip(in_row.iter().step_by(stride)) {
            *o += k * *i;
        }
    }
}

/// `out_row[x * stride] += k * grad_row[x]`.
#[inline]
fn scatter_strided(out_row: &mut [f64], grad_row: &[f64], k: f64, stride: usize) {
    if stride == 1 {
        for (o, g) in out_row.iter_mut().zip(grad_row) {
            *o += k * *g;
        }
    } else {
        for (o, g) in out_row.iter_mut().step_by(stride).zip(grad_row) {
            *o += k * *g;
        }
    }
}

/// Dot product of `a` with every `stride`-th element of `b`.
#[inline]
fn dot_strided(a: &[f64], b: &[f64], stride: usize) -> f64 {
    if stride == 1 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    } else {
        a.iter().zip(b.iter().step_by(stride)).map(|(x, y)| x * y).sum()
    }
}

pub fn conv_out_extent(input: usize, kernel: usize, stride: usize) -> usize {
    (input - kernel) / stride + 1
}

/// Valid 2-D convolution of a `[ci, h, w]` image with `[co, ci, kh, kw]`
/// kernels and a `[co]` bias.
///
/// Output rows are accumulated in a stack buffer with the row loop
/// outermost, so the working set per step is one row plus the kernels;
/// large-plane layers stay compute-bound instead of re-sweeping the output.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_forward(
    input: &[f64],
    (ci, h, w): (usize, usize, usize),
    kernels: &[f64],
    (co, kh, kw): (usize, usize, usize),
    bias: &[f64],
    stride: usize,
) -> Vec<f64> {
    let ho = conv_out_extent(h, kh, stride);
    let wo = conv_out_extent(w, kw, stride);
    let mut out = vec![0.0; co * ho * wo];
    let mut row_buf = vec![0.0; wo];
    for oy in 0..ho {
        for oc in 0..co {
            row_buf.fill(bias[oc]);
            for ic in 0..ci {
                let in_plane = &input[ic * h * w..(ic + 1) * h * w];
                for ky in 0..kh {
                    let base = (oy * stride + ky) * w;
                    let ker = &kernels[((oc * ci + ic) * kh + ky) * kw..][..kw];
                    for (kx, &k) in ker.iter().enumerate() {
                        axpy_strided(&mut row_buf, &in_plane[base + kx..], k, stride);
                    }
                }
            }
            out[(oc * ho + oy) * wo..(oc * ho + oy + 1) * wo].copy_from_slice(&row_buf);
        }
    }
    out
}

/// Gradients of [`conv2d_forward`]. `d_input` is skipped when `None`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    input: &[f64],
    (ci, h, w): (usize, usize, usize),
    kernels: &[f64],
    (co, kh, kw): (usize, usize, usize),
    stride: usize,
    d_out: &[f64],
    mut d_input: Option<&mut [f64]>,
    d_kernels: &mut [f64],
    d_bias: &mut [f64],
) {
    let ho = conv_out_extent(h, kh, stride);
    let wo = conv_out_extent(w, kw, stride);
    for oc in 0..co {
        d_bias[oc] += d_out[oc * ho * wo..(oc + 1) * ho * wo].iter().sum::<f64>();
    }
    for oy in 0..ho {
        for oc in 0..co {
            let d_row = &d_out[(oc * ho + oy) * wo..(oc * ho + oy + 1) * wo];
            for ic in 0..ci {
                let in_plane = &input[ic * h * w..(ic + 1) * h * w];
                for ky in 0..kh {
                    let base = (oy * stride + ky) * w;
                    let kbase = ((oc * ci + ic) * kh + ky) * kw;
                    for kx in 0..kw {
                        d_kernels[kbase + kx] += dot_strided(d_row, &in_plane[base + kx..], stride);
                    }
                    if let Some(d_in) = d_input.as_deref_mut() {
                        let d_in_plane = &mut d_in[ic * h * w..(ic + 1) * h * w];
                        for kx in 0..kw {
                            let k = kernels[kbase + kx];
                            scatter_strided(&mut d_in_plane[base + kx..], d_row, k, stride);
                        }
                    }
                }
            }
        }
    }
}

/// Max pooling over `[c, h, w]`. Returns the pooled values and, per output
/// cell, the flat input index of its maximum (first occurrence in row-major
/// scan order on ties), which routes the gradient.
pub fn maxpool_forward(
    input: &[f64],
    (c, h, w): (usize, usize, usize),
    k: usize,
    stride: usize,
) -> (Vec<f64>, Vec<u32>) {
    let ho = conv_out_extent(h, k, stride);
    let wo = conv_out_extent(w, k, stride);
    let mut out = vec![0.0; c * ho * wo];
    let mut argmax = vec![0u32; c * ho * wo];
    for ch in 0..c {
        let plane = &input[ch * h * w..(ch + 1) * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0usize;
                for ky in 0..k {
                    let row = (oy * stride + ky) * w + ox * stride;
                    for (kx, &v) in plane[row..row + k].iter().enumerate() {
                        if v > best {
                            best = v;
                            best_idx = row + kx;
                        }
                    }
                }
                let o = (oy * wo + ox) + ch * ho * wo;
                out[o] = best;
                argmax[o] = (ch * h * w + best_idx) as u32;
            }
        }
    }
    (out, argmax)
}

pub fn maxpool_backward(d_out: &[f64], argmax: &[u32], d_input: &mut [f64]) {
    for (d, &idx) in d_out.iter().zip(argmax) {
        d_input[idx as usize] += d;
    }
}

/// `out[n, m] = sum_d input[n, d] * weight[d, m] + bias[m]`.
pub fn linear_forward(
    input: &[f64],
    (n, d): (usize, usize),
    weight: &[f64],
    m: usize,
    bias: &[f64],
) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for row in 0..n {
        let out_row = &mut out[row * m..(row + 1) * m];
        out_row.copy_from_slice(bias);
        for dd in 0..d {
            let x = input[row * d + dd];
            if x == 0.0 {
                continue;
            }
            axpy_strided(out_row, &weight[dd * m..(dd + 1) * m], x, 1);
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn linear_backward(
    input: &[f64],
    (n, d): (usize, usize),
    weight: &[f64],
    m: usize,
    d_out: &[f64],
    mut d_input: Option<&mut [f64]>,
    d_weight: &mut [f64],
    d_bias: &mut [f64],
) {
    for row in 0..n {
        let d_row = &d_out[row * m..(row + 1) * m];
        for (b, g) in d_bias.iter_mut().zip(d_row) {
            *b += g;
        }
        for dd in 0..d {
            let x = input[row * d + dd];
            if x != 0.0 {
                axpy_strided(&mut d_weight[dd * m..(dd + 1) * m], d_row, x, 1);
            }
        }
        if let Some(d_in) = d_input.as_deref_mut() {
            let d_in_row = &mut d_in[row * d..(row + 1) * d];
            for (dd, slot) in d_in_row.iter_mut().enumerate() {
                *slot += dot_strided(d_row, &weight[dd * m..(dd + 1) * m], 1);
            }
        }
    }
}

/// Elementwise smooth-L1 of a difference: `0.5 d^2` for `|d| < 1`,
/// `|d| - 0.5` beyond.
#[inline]
pub fn smooth_l1_value(d: f64) -> f64 {
    let a = d.abs();
    if a < 1.0 {
        0.5 * d * d
    } else {
        a - 0.5
    }
}

/// Derivative of [`smooth_l1_value`] with respect to `d`.
#[inline]
pub fn smooth_l1_grad(d: f64) -> f64 {
    if d.abs() < 1.0 {
        d
    } else {
        d.signum()
    }
}
