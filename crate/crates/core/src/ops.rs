//! Forward and backward kernels for every primitive the two networks use.
//!
//! Layouts: images are `H x W x C`, 2-D convolution weights `k x k x Cin x
//! Cout`, sequences `L x C`, 1-D weights `taps x C x C'`. All convolutions
//! are cross-correlations (no kernel flip) with zero padding.
//!
//! Each output element is produced by exactly one task with a fixed
//! reduction order, so results do not depend on the rayon thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Number of output positions handled by one conv2d task.
const CONV_CHUNK: usize = 2048;

fn conv2d_dims<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
    pad: usize,
) -> Result<(usize, usize, usize, usize, usize, usize, usize)> {
    input.expect_rank("conv2d", 3)?;
    weights.expect_rank("conv2d", 4)?;
    let (h, w, cin) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let ws = weights.shape();
    let (k, cout) = (ws[0], ws[3]);
    if ws[1] != k || ws[2] != cin {
        return Err(Error::shape(
            "conv2d",
            format!("weights {ws:?} incompatible with input {:?}", input.shape()),
        ));
    }
    if bias.len() != cout {
        return Err(Error::shape("conv2d", format!("bias length {} != Cout {cout}", bias.len())));
    }
    if k == 0 || h + 2 * pad < k || w + 2 * pad < k {
        return Err(Error::shape("conv2d", format!("kernel {k} with pad {pad} exceeds input {h}x{w}")));
    }
    let ho = h + 2 * pad - k + 1;
    let wo = w + 2 * pad - k + 1;
    Ok((h, w, cin, k, cout, ho, wo))
}

/// 2-D convolution with zero padding `pad` on every side.
pub fn conv2d<T: Scalar>(input: &Tensor<T>, weights: &Tensor<T>, bias: &Tensor<T>, pad: usize) -> Result<Tensor<T>> {
    let (h, w, cin, k, cout, ho, wo) = conv2d_dims(input, weights, bias, pad)?;
    let kk = k * k * cin;
    let src = input.data();
    let wt = weights.data();
    let b = bias.data();
    let mut out = vec![T::zero(); ho * wo * cout];
    let direct = k == 1 && pad == 0;

    out.par_chunks_mut(CONV_CHUNK * cout).enumerate().for_each(|(ci, chunk)| {
        let p0 = ci * CONV_CHUNK;
        let np = chunk.len() / cout;
        for row in chunk.chunks_exact_mut(cout) {
            row.copy_from_slice(b);
        }
        if direct {
            T::gemm(np, kk, cout, T::one(), &src[p0 * cin..], kk, 1, wt, cout, 1, T::one(), chunk, cout, 1);
            return;
        }
        let mut col = vec![T::zero(); np * kk];
        for (i, crow) in col.chunks_exact_mut(kk).enumerate() {
            let p = p0 + i;
            let (oy, ox) = (p / wo, p % wo);
            for ky in 0..k {
                let iy = oy + ky;
                if iy < pad || iy - pad >= h {
                    continue;
                }
                let iy = iy - pad;
                for kx in 0..k {
                    let ix = ox + kx;
                    if ix < pad || ix - pad >= w {
                        continue;
                    }
                    let ix = ix - pad;
                    let dst = (ky * k + kx) * cin;
                    let s = (iy * w + ix) * cin;
                    crow[dst..dst + cin].copy_from_slice(&src[s..s + cin]);
                }
            }
        }
        T::gemm(np, kk, cout, T::one(), &col, kk, 1, wt, cout, 1, T::one(), chunk, cout, 1);
    });
    Tensor::from_vec(&[ho, wo, cout], out)
}

/// Gradients of [`conv2d`] given the upstream gradient of its output.
#[derive(Debug)]
pub struct Conv2dGrads<T: Scalar> {
    pub input: Option<Tensor<T>>,
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
    pad: usize,
    upstream: &Tensor<T>,
    need_input_grad: bool,
) -> Result<Conv2dGrads<T>> {
    let (h, w, cin, k, cout, ho, wo) = conv2d_dims(input, weights, bias, pad)?;
    if upstream.shape() != [ho, wo, cout] {
        return Err(Error::shape("conv2d_backward", format!("upstream {:?}", upstream.shape())));
    }
    let kk = k * k * cin;
    let src = input.data();
    let g = upstream.data();

    let mut db = vec![0.0f64; cout];
    for row in g.chunks_exact(cout) {
        for (acc, &x) in db.iter_mut().zip(row) {
            *acc += x.as_f64();
        }
    }

    // dW = col^T * dout, reduced over position chunks in a fixed order.
    let partials: Vec<Vec<T>> = g
        .par_chunks(CONV_CHUNK * cout)
        .enumerate()
        .map(|(ci, gchunk)| {
            let p0 = ci * CONV_CHUNK;
            let np = gchunk.len() / cout;
            let mut col = vec![T::zero(); np * kk];
            for (i, crow) in col.chunks_exact_mut(kk).enumerate() {
                let p = p0 + i;
                let (oy, ox) = (p / wo, p % wo);
                for ky in 0..k {
                    let iy = oy + ky;
                    if iy < pad || iy - pad >= h {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = ox + kx;
                        if ix < pad || ix - pad >= w {
                            continue;
                        }
                        let dst = (ky * k + kx) * cin;
                        let s = ((iy - pad) * w + ix - pad) * cin;
                        crow[dst..dst + cin].copy_from_slice(&src[s..s + cin]);
                    }
                }
            }
            let mut dw = vec![T::zero(); kk * cout];
            T::gemm(kk, np, cout, T::one(), &col, 1, kk, gchunk, cout, 1, T::zero(), &mut dw, cout, 1);
            dw
        })
        .collect();
    let mut dw = vec![T::zero(); kk * cout];
    for part in partials {
        for (a, b) in dw.iter_mut().zip(part) {
            *a += b;
        }
    }

    let dinput = if need_input_grad {
        // Input gradient is a correlation of the upstream gradient with the
        // spatially flipped, channel-transposed kernel.
        let mut flipped = vec![T::zero(); k * k * cout * cin];
        let wt = weights.data();
        for ky in 0..k {
            for kx in 0..k {
                for c_in in 0..cin {
                    for c_out in 0..cout {
                        let src_idx = ((ky * k + kx) * cin + c_in) * cout + c_out;
                        let dst_idx = (((k - 1 - ky) * k + (k - 1 - kx)) * cout + c_out) * cin + c_in;
                        flipped[dst_idx] = wt[src_idx];
                    }
                }
            }
        }
        let flipped = Tensor::from_vec(&[k, k, cout, cin], flipped)?;
        let zero_bias = Tensor::zeros(&[cin]);
        let back_pad = k - 1 - pad.min(k - 1);
        let mut din = conv2d(upstream, &flipped, &zero_bias, back_pad)?;
        if pad > k - 1 {
            // Padding wider than the kernel: crop the border that only saw zeros.
            let extra = pad - (k - 1);
            din = crop(&din, extra, extra, h, w)?;
        }
        Some(din)
    } else {
        None
    };

    Ok(Conv2dGrads {
        input: dinput,
        weights: Tensor::from_vec(weights.shape(), dw)?,
        bias: Tensor::from_vec(&[cout], db.into_iter().map(T::of).collect())?,
    })
}

fn crop<T: Scalar>(t: &Tensor<T>, y0: usize, x0: usize, h: usize, w: usize) -> Result<Tensor<T>> {
    let (th, tw, c) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    if y0 + h > th || x0 + w > tw {
        return Err(Error::shape("crop", format!("{h}x{w} at ({y0},{x0}) exceeds {th}x{tw}")));
    }
    let mut out = Vec::with_capacity(h * w * c);
    for y in y0..y0 + h {
        let s = (y * tw + x0) * c;
        out.extend_from_slice(&t.data()[s..s + w * c]);
    }
    Tensor::from_vec(&[h, w, c], out)
}

/// 2x2 max pooling with stride 2. A trailing odd row or column is dropped.
///
/// Returns the pooled tensor and, for each output element, the flat input
/// index of the selected maximum (first occurrence in row-major window order).
pub fn maxpool2<T: Scalar>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<u32>)> {
    input.expect_rank("maxpool2", 3)?;
    let (h, w, c) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    if h < 2 || w < 2 {
        return Err(Error::shape("maxpool2", format!("input {h}x{w} is smaller than the 2x2 window")));
    }
    let (ho, wo) = (h / 2, w / 2);
    let src = input.data();
    let mut out = vec![T::zero(); ho * wo * c];
    let mut arg = vec![0u32; ho * wo * c];
    out.par_chunks_mut(wo * c).zip(arg.par_chunks_mut(wo * c)).enumerate().for_each(|(oy, (orow, arow))| {
        for ox in 0..wo {
            for ch in 0..c {
                let mut best_idx = ((2 * oy) * w + 2 * ox) * c + ch;
                let mut best = src[best_idx];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = ((2 * oy + dy) * w + 2 * ox + dx) * c + ch;
                    if src[idx] > best {
                        best = src[idx];
                        best_idx = idx;
                    }
                }
                orow[ox * c + ch] = best;
                arow[ox * c + ch] = best_idx as u32;
            }
        }
    });
    Ok((Tensor::from_vec(&[ho, wo, c], out)?, arg))
}

pub fn maxpool2_backward<T: Scalar>(input_shape: &[usize], argmax: &[u32], upstream: &Tensor<T>) -> Result<Tensor<T>> {
    if argmax.len() != upstream.len() {
        return Err(Error::shape("maxpool2_backward", "argmax/upstream length mismatch"));
    }
    let mut din = Tensor::zeros(input_shape);
    let d = din.data_mut();
    for (&i, &g) in argmax.iter().zip(upstream.data()) {
        d[i as usize] += g;
    }
    Ok(din)
}

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|x| if x > T::zero() { x } else { T::zero() })
}

/// ReLU derivative is taken as 0 at exactly 0.
pub fn relu_backward<T: Scalar>(input: &Tensor<T>, upstream: &Tensor<T>) -> Result<Tensor<T>> {
    if input.shape() != upstream.shape() {
        return Err(Error::shape("relu_backward", format!("{:?} vs {:?}", input.shape(), upstream.shape())));
    }
    let data = input
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(input.shape(), data)
}

fn conv1d_dims<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
    dilation: usize,
) -> Result<(usize, usize, usize, usize)> {
    if dilation < 1 {
        return Err(Error::invalid("dilation must be at least 1"));
    }
    input.expect_rank("dilated_conv1d", 2)?;
    weights.expect_rank("dilated_conv1d", 3)?;
    let (l, c) = (input.shape()[0], input.shape()[1]);
    if l == 0 {
        return Err(Error::invalid("dilated_conv1d: sequence length must be positive"));
    }
    let ws = weights.shape();
    let (taps, co) = (ws[0], ws[2]);
    if taps % 2 == 0 || ws[1] != c {
        return Err(Error::shape(
            "dilated_conv1d",
            format!("weights {ws:?} incompatible with input {:?}", input.shape()),
        ));
    }
    if bias.len() != co {
        return Err(Error::shape("dilated_conv1d", format!("bias length {} != C' {co}", bias.len())));
    }
    Ok((l, c, taps, co))
}

/// Valid output rows for a tap at signed offset `off`: `(out_start, in_start, count)`.
fn tap_range(l: usize, off: isize) -> Option<(usize, usize, usize)> {
    let a = off.unsigned_abs();
    if a >= l {
        return None;
    }
    if off >= 0 {
        Some((0, a, l - a))
    } else {
        Some((a, 0, l - a))
    }
}

/// Dilated 1-D correlation over the sequence axis with taps at
/// `{-d, 0, d}` (for three taps) and zero padding of width `d`:
/// `out[l, c'] = b[c'] + sum_j sum_c w[j, c, c'] * in[l + (j - 1) d, c]`.
/// A single-tap kernel is a pointwise (1x1) convolution.
pub fn dilated_conv1d<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
    dilation: usize,
) -> Result<Tensor<T>> {
    let (l, c, taps, co) = conv1d_dims(input, weights, bias, dilation)?;
    let mut out = vec![T::zero(); l * co];
    for row in out.chunks_exact_mut(co) {
        row.copy_from_slice(bias.data());
    }
    let half = (taps / 2) as isize;
    let (src, wt) = (input.data(), weights.data());
    for j in 0..taps {
        let off = (j as isize - half) * dilation as isize;
        let Some((o0, i0, n)) = tap_range(l, off) else { continue };
        T::gemm(
            n,
            c,
            co,
            T::one(),
            &src[i0 * c..],
            c,
            1,
            &wt[j * c * co..],
            co,
            1,
            T::one(),
            &mut out[o0 * co..],
            co,
            1,
        );
    }
    Tensor::from_vec(&[l, co], out)
}

#[derive(Debug)]
pub struct Conv1dGrads<T: Scalar> {
    pub input: Tensor<T>,
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn dilated_conv1d_backward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
    dilation: usize,
    upstream: &Tensor<T>,
) -> Result<Conv1dGrads<T>> {
    let (l, c, taps, co) = conv1d_dims(input, weights, bias, dilation)?;
    if upstream.shape() != [l, co] {
        return Err(Error::shape("dilated_conv1d_backward", format!("upstream {:?}", upstream.shape())));
    }
    let (src, wt, g) = (input.data(), weights.data(), upstream.data());
    let mut din = vec![T::zero(); l * c];
    let mut dw = vec![T::zero(); taps * c * co];
    let half = (taps / 2) as isize;
    for j in 0..taps {
        let off = (j as isize - half) * dilation as isize;
        let Some((o0, i0, n)) = tap_range(l, off) else { continue };
        // dW_j = in[i0..i0+n]^T * g[o0..o0+n]
        T::gemm(c, n, co, T::one(), &src[i0 * c..], 1, c, &g[o0 * co..], co, 1, T::zero(), &mut dw[j * c * co..], co, 1);
        // din[i0..] += g[o0..] * W_j^T
        T::gemm(n, co, c, T::one(), &g[o0 * co..], co, 1, &wt[j * c * co..], 1, co, T::one(), &mut din[i0 * c..], c, 1);
    }
    let mut db = vec![0.0f64; co];
    for row in g.chunks_exact(co) {
        for (acc, &x) in db.iter_mut().zip(row) {
            *acc += x.as_f64();
        }
    }
    Ok(Conv1dGrads {
        input: Tensor::from_vec(&[l, c], din)?,
        weights: Tensor::from_vec(weights.shape(), dw)?,
        bias: Tensor::from_vec(&[co], db.into_iter().map(T::of).collect())?,
    })
}

/// Sums disjoint `factor x factor` windows of a 2-D grid; trailing rows and
/// columns that do not fill a window are dropped.
pub fn sum_pool<T: Scalar>(input: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    input.expect_rank("sum_pool", 2)?;
    if factor == 0 {
        return Err(Error::invalid("sum_pool factor must be at least 1"));
    }
    let (h, w) = (input.shape()[0], input.shape()[1]);
    let (ho, wo) = (h / factor, w / factor);
    if ho == 0 || wo == 0 {
        return Err(Error::shape("sum_pool", format!("{h}x{w} grid is smaller than factor {factor}")));
    }
    let src = input.data();
    let mut out = Vec::with_capacity(ho * wo);
    for oy in 0..ho {
        for ox in 0..wo {
            let mut acc = 0.0f64;
            for y in oy * factor..(oy + 1) * factor {
                for x in ox * factor..(ox + 1) * factor {
                    acc += src[y * w + x].as_f64();
                }
            }
            out.push(T::of(acc));
        }
    }
    Tensor::from_vec(&[ho, wo], out)
}
