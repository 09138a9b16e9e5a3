//! Layer kernels over flat row-major buffers.
//!
//! Convolutions are 3×3 cross-correlations with stride 1 and zero padding 1,
//! kernels laid out as `[out][in][3][3]`. Dense weights are `[out][in]`.

use crate::error::{Error, Result};

use super::Scalar;

pub const KERNEL: usize = 3;

/// Dot product with eight independent accumulators so it vectorizes.
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [T::zero(); 8];
    let chunks = n / 8;
    for (ca, cb) in a.chunks_exact(8).zip(b.chunks_exact(8)) {
        for l in 0..8 {
            acc[l] = ca[l].mul_add(cb[l], acc[l]);
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..n {
        tail += a[i] * b[i];
    }
    let pairs = [
        acc[0] + acc[4],
        acc[1] + acc[5],
        acc[2] + acc[6],
        acc[3] + acc[7],
    ];
    (pairs[0] + pairs[2]) + (pairs[1] + pairs[3]) + tail
}

/// Copies `channels` planes into a zero border of one pixel. Rows of the
/// result have stride `width + 2`; two spare values at the end let every
/// 3×3 tap read a full output span without bounds checks.
fn pad<T: Scalar>(input: &[T], channels: usize, height: usize, width: usize) -> Vec<T> {
    let mut out = Vec::new();
    pad_into(input, channels, height, width, &mut out);
    out
}

fn pad_into<T: Scalar>(
    input: &[T],
    channels: usize,
    height: usize,
    width: usize,
    out: &mut Vec<T>,
) {
    let stride = width + 2;
    let padded = padded_len(height, width);
    out.clear();
    out.resize(channels * padded, T::zero());
    for c in 0..channels {
        for y in 0..height {
            let src = &input[(c * height + y) * width..(c * height + y + 1) * width];
            let at = c * padded + (y + 1) * stride + 1;
            out[at..at + width].copy_from_slice(src);
        }
    }
}

fn padded_len(height: usize, width: usize) -> usize {
    (height + 2) * (width + 2) + 2
}

fn tap_offsets(width: usize) -> [usize; 9] {
    let stride = width + 2;
    let mut off = [0; 9];
    for (t, o) in off.iter_mut().enumerate() {
        *o = (t / 3) * stride + t % 3;
    }
    off
}

const BLOCK: usize = 4;

/// Accumulates one input plane into `BLOCK` output planes at once so each
/// loaded input value feeds several kernels.
#[inline(always)]
fn conv_block<T: Scalar>(
    p: &[T],
    off: &[usize; 9],
    span: usize,
    k: &[[T; 9]; BLOCK],
    acc: &mut [T],
) {
    let s: [&[T]; 9] = std::array::from_fn(|t| &p[off[t]..off[t] + span]);
    let (a0, rest) = acc.split_at_mut(span);
    let (a1, rest) = rest.split_at_mut(span);
    let (a2, a3) = rest.split_at_mut(span);
    let a3 = &mut a3[..span];
    for j in 0..span {
        let x: [T; 9] = std::array::from_fn(|t| s[t][j]);
        let mut v = [a0[j], a1[j], a2[j], a3[j]];
        for (b, vb) in v.iter_mut().enumerate() {
            for t in 0..9 {
                *vb = x[t].mul_add(k[b][t], *vb);
            }
        }
        a0[j] = v[0];
        a1[j] = v[1];
        a2[j] = v[2];
        a3[j] = v[3];
    }
}

/// Reusable buffers for [`conv2d_forward_into`].
#[derive(Debug, Default, Clone)]
pub struct ConvScratch<T> {
    padded: Vec<T>,
    acc: Vec<T>,
}

/// `out[o] = bias[o] + Σ_c kernel[o][c] ⋆ input[c]`, same spatial size.
pub fn conv2d_forward<T: Scalar>(
    input: &[T],
    in_channels: usize,
    height: usize,
    width: usize,
    kernels: &[T],
    biases: &[T],
) -> Result<Vec<T>> {
    let mut out = Vec::new();
    conv2d_forward_into(
        input,
        in_channels,
        height,
        width,
        kernels,
        biases,
        &mut ConvScratch::default(),
        &mut out,
    )?;
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_forward_into<T: Scalar>(
    input: &[T],
    in_channels: usize,
    height: usize,
    width: usize,
    kernels: &[T],
    biases: &[T],
    scratch: &mut ConvScratch<T>,
    out: &mut Vec<T>,
) -> Result<()> {
    let out_channels = biases.len();
    if input.len() != in_channels * height * width {
        return Err(Error::ShapeMismatch(format!(
            "conv input has {} values, expected {in_channels}x{height}x{width}",
            input.len()
        )));
    }
    if kernels.len() != out_channels * in_channels * KERNEL * KERNEL {
        return Err(Error::ShapeMismatch(format!(
            "conv kernels have {} values, expected {out_channels}x{in_channels}x3x3",
            kernels.len()
        )));
    }
    pad_into(input, in_channels, height, width, &mut scratch.padded);
    let padded = &scratch.padded;
    let plen = padded_len(height, width);
    let span = height * (width + 2);
    let off = tap_offsets(width);
    let acc = &mut scratch.acc;
    acc.resize(BLOCK * span, T::zero());
    out.clear();
    out.reserve(out_channels * height * width);
    for o0 in (0..out_channels).step_by(BLOCK) {
        let n = BLOCK.min(out_channels - o0);
        for b in 0..BLOCK {
            let bias = if b < n { biases[o0 + b] } else { T::zero() };
            acc[b * span..(b + 1) * span].fill(bias);
        }
        for c in 0..in_channels {
            let p = &padded[c * plen..(c + 1) * plen];
            let mut k = [[T::zero(); 9]; BLOCK];
            for (b, kb) in k.iter_mut().enumerate().take(n) {
                let at = ((o0 + b) * in_channels + c) * 9;
                kb.copy_from_slice(&kernels[at..at + 9]);
            }
            conv_block(p, &off, span, &k, acc);
        }
        for b in 0..n {
            for row in acc[b * span..(b + 1) * span].chunks_exact(width + 2) {
                out.extend_from_slice(&row[..width]);
            }
        }
    }
    Ok(())
}

/// Gradients of a conv layer. Accumulates into `grad_kernels`/`grad_biases`
/// and returns the input gradient when `want_input` is set.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Scalar>(
    input: &[T],
    in_channels: usize,
    height: usize,
    width: usize,
    kernels: &[T],
    grad_out: &[T],
    grad_kernels: &mut [T],
    grad_biases: &mut [T],
    want_input: bool,
) -> Option<Vec<T>> {
    let out_channels = grad_biases.len();
    let plane = height * width;
    let stride = width + 2;
    let span = height * stride;
    let plen = padded_len(height, width);
    let off = tap_offsets(width);
    let padded = pad(input, in_channels, height, width);
    // Output gradients in padded-stride layout, zero in the spare columns and
    // behind `lead` zeros so the input gradient can be gathered like a
    // forward convolution.
    let lead = 2 * stride + 2;
    let glen = lead + plen;
    let mut gs = vec![T::zero(); out_channels * glen];
    for o in 0..out_channels {
        let g_plane = &grad_out[o * plane..(o + 1) * plane];
        grad_biases[o] += g_plane.iter().copied().fold(T::zero(), |a, b| a + b);
        let go = &mut gs[o * glen..(o + 1) * glen];
        for y in 0..height {
            go[lead + y * stride..lead + y * stride + width]
                .copy_from_slice(&g_plane[y * width..(y + 1) * width]);
        }
        let go = &go[lead..lead + span];
        for c in 0..in_channels {
            let p = &padded[c * plen..(c + 1) * plen];
            let base = (o * in_channels + c) * 9;
            let taps = dot9(go, p, &off, span);
            for t in 0..9 {
                grad_kernels[base + t] += taps[t];
            }
        }
    }
    if !want_input {
        return None;
    }
    let back: [usize; 9] = std::array::from_fn(|t| lead - off[t]);
    let mut acc = vec![T::zero(); BLOCK * plen];
    let mut out = Vec::with_capacity(in_channels * plane);
    for c0 in (0..in_channels).step_by(BLOCK) {
        let n = BLOCK.min(in_channels - c0);
        acc.fill(T::zero());
        for o in 0..out_channels {
            let mut k = [[T::zero(); 9]; BLOCK];
            for (b, kb) in k.iter_mut().enumerate().take(n) {
                let at = (o * in_channels + c0 + b) * 9;
                kb.copy_from_slice(&kernels[at..at + 9]);
            }
            conv_block(&gs[o * glen..(o + 1) * glen], &back, plen, &k, &mut acc);
        }
        for b in 0..n {
            for y in 0..height {
                let at = b * plen + (y + 1) * stride + 1;
                out.extend_from_slice(&acc[at..at + width]);
            }
        }
    }
    Some(out)
}

/// The nine tap correlations of `g` against the shifted views of `p`.
fn dot9<T: Scalar>(g: &[T], p: &[T], off: &[usize; 9], span: usize) -> [T; 9] {
    const LANES: usize = 8;
    let s: [&[T]; 9] = std::array::from_fn(|t| &p[off[t]..off[t] + span]);
    let g = &g[..span];
    let mut acc = [[T::zero(); LANES]; 9];
    let full = span / LANES * LANES;
    for i in (0..full).step_by(LANES) {
        let gi = &g[i..i + LANES];
        for t in 0..9 {
            let si = &s[t][i..i + LANES];
            for l in 0..LANES {
                acc[t][l] = gi[l].mul_add(si[l], acc[t][l]);
            }
        }
    }
    std::array::from_fn(|t| {
        let mut sum = acc[t].iter().copied().fold(T::zero(), |a, b| a + b);
        for i in full..span {
            sum += g[i] * s[t][i];
        }
        sum
    })
}

pub fn relu<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        T::zero()
    }
}

pub fn relu_in_place<T: Scalar>(values: &mut [T]) {
    for v in values {
        *v = relu(*v);
    }
}

/// 2×2 non-overlapping max pooling; odd trailing rows/columns are dropped.
/// Returns the pooled planes and the flat input index of each maximum.
pub fn maxpool2<T: Scalar>(
    input: &[T],
    channels: usize,
    height: usize,
    width: usize,
) -> (Vec<T>, Vec<u32>) {
    let (oh, ow) = (height / 2, width / 2);
    let mut out = Vec::with_capacity(channels * oh * ow);
    let mut arg = Vec::with_capacity(channels * oh * ow);
    for c in 0..channels {
        let base = c * height * width;
        for y in 0..oh {
            for x in 0..ow {
                let mut best = base + 2 * y * width + 2 * x;
                for idx in [
                    base + 2 * y * width + 2 * x + 1,
                    base + (2 * y + 1) * width + 2 * x,
                    base + (2 * y + 1) * width + 2 * x + 1,
                ] {
                    if input[idx] > input[best] {
                        best = idx;
                    }
                }
                out.push(input[best]);
                arg.push(best as u32);
            }
        }
    }
    (out, arg)
}

/// `relu(maxpool2(x))` without the argmax bookkeeping, for inference.
pub fn maxpool2_relu_into<T: Scalar>(
    input: &[T],
    channels: usize,
    height: usize,
    width: usize,
    out: &mut Vec<T>,
) {
    let (oh, ow) = (height / 2, width / 2);
    out.clear();
    out.reserve(channels * oh * ow);
    for c in 0..channels {
        let plane = &input[c * height * width..(c + 1) * height * width];
        for y in 0..oh {
            let r0 = &plane[2 * y * width..2 * y * width + 2 * ow];
            let r1 = &plane[(2 * y + 1) * width..(2 * y + 1) * width + 2 * ow];
            for (a, b) in r0.chunks_exact(2).zip(r1.chunks_exact(2)) {
                let mut m = T::zero();
                for v in [a[0], a[1], b[0], b[1]] {
                    if v > m {
                        m = v;
                    }
                }
                out.push(m);
            }
        }
    }
}

/// `y = W x + b` with `W` of shape `[bias.len()][x.len()]`.
pub fn dense_forward<T: Scalar>(x: &[T], weights: &[T], bias: &[T]) -> Result<Vec<T>> {
    if weights.len() != bias.len() * x.len() {
        return Err(Error::ShapeMismatch(format!(
            "dense weights have {} values, expected {}x{}",
            weights.len(),
            bias.len(),
            x.len()
        )));
    }
    Ok(weights
        .chunks_exact(x.len().max(1))
        .zip(bias)
        .map(|(row, &b)| b + dot(row, x))
        .collect())
}

/// Accumulates dense-layer gradients; returns `∂L/∂x`.
pub fn dense_backward<T: Scalar>(
    x: &[T],
    weights: &[T],
    grad_y: &[T],
    grad_weights: &mut [T],
    grad_bias: &mut [T],
) -> Vec<T> {
    let n = x.len();
    let mut grad_x = vec![T::zero(); n];
    for (o, &g) in grad_y.iter().enumerate() {
        grad_bias[o] += g;
        if g == T::zero() {
            continue;
        }
        let gw = &mut grad_weights[o * n..(o + 1) * n];
        for (d, &v) in gw.iter_mut().zip(x) {
            *d += g * v;
        }
        let w = &weights[o * n..(o + 1) * n];
        for (d, &wv) in grad_x.iter_mut().zip(w) {
            *d += g * wv;
        }
    }
    grad_x
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("softmax logits"));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}
