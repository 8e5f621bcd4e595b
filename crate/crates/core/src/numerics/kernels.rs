//! Forward kernels and their vector-Jacobian products.
//!
//! Spatial maps are `[H, W, D]` row-major; token matrices are `[L, D]`.
//! Every `*_backward` takes the upstream gradient of the forward output and
//! returns gradients for the forward inputs, in argument order.

use crate::error::{Error, Result};

use super::Tensor;

/// Default rotary frequency base.
pub const ROPE_BASE: f64 = 10_000.0;

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2("matmul")?;
    let (k2, n) = b.dims2("matmul")?;
    if k != k2 {
        return Err(Error::shape("matmul", format!("[{m}x{k}] * [{k2}x{n}]")));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = ad[i * k + p];
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    Tensor::new(&[m, n], out)
}

/// Gradients of `a @ b` with respect to `a` and `b`.
pub fn matmul_backward(a: &Tensor, b: &Tensor, grad: &Tensor) -> Result<(Tensor, Tensor)> {
    let ga = matmul(grad, &b.transpose()?)?;
    let gb = matmul(&a.transpose()?, grad)?;
    Ok((ga, gb))
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let (m, n) = x.dims2("softmax_rows")?;
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(n) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Tensor::new(&[m, n], out)
}

/// Gradient through softmax given its output `y`.
pub fn softmax_rows_backward(y: &Tensor, grad: &Tensor) -> Result<Tensor> {
    let (m, n) = y.dims2("softmax_rows_backward")?;
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let yr = &y.data()[i * n..(i + 1) * n];
        let gr = &grad.data()[i * n..(i + 1) * n];
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for j in 0..n {
            out[i * n + j] = yr[j] * (gr[j] - dot);
        }
    }
    Tensor::new(&[m, n], out)
}

fn norm_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    (mean, 1.0 / (var + eps).sqrt())
}

/// Per-token normalization over the last axis (biased variance), then affine.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let (l, d) = x.dims2("layer_norm")?;
    if gamma.len() != d || beta.len() != d {
        return Err(Error::shape(
            "layer_norm",
            format!(
                "D = {d}, gamma {:?}, beta {:?}",
                gamma.shape(),
                beta.shape()
            ),
        ));
    }
    let mut out = vec![0.0; l * d];
    for i in 0..l {
        let row = x.row(i);
        let (mean, inv) = norm_stats(row, eps);
        for j in 0..d {
            out[i * d + j] = (row[j] - mean) * inv * gamma.data()[j] + beta.data()[j];
        }
    }
    Tensor::new(&[l, d], out)
}

pub fn layer_norm_backward(
    x: &Tensor,
    gamma: &Tensor,
    eps: f64,
    grad: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (l, d) = x.dims2("layer_norm_backward")?;
    let mut gx = vec![0.0; l * d];
    let mut gg = vec![0.0; d];
    let mut gb = vec![0.0; d];
    let mut xhat = vec![0.0; d];
    let mut dxhat = vec![0.0; d];
    for i in 0..l {
        let row = x.row(i);
        let gr = grad.row(i);
        let (mean, inv) = norm_stats(row, eps);
        for j in 0..d {
            xhat[j] = (row[j] - mean) * inv;
            dxhat[j] = gr[j] * gamma.data()[j];
            gg[j] += gr[j] * xhat[j];
            gb[j] += gr[j];
        }
        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dx = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        for j in 0..d {
            gx[i * d + j] = inv * (dxhat[j] - mean_d - xhat[j] * mean_dx);
        }
    }
    Ok((
        Tensor::new(&[l, d], gx)?,
        Tensor::new(gamma.shape(), gg)?,
        Tensor::new(gamma.shape(), gb)?,
    ))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of `x * Phi(x)`:
/// `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// 3x3 depthwise cross-correlation with one pixel of zero padding.
pub fn depthwise_conv3x3(f: &Tensor, k: &Tensor) -> Result<Tensor> {
    let (h, w, d) = f.dims3("depthwise_conv3x3")?;
    if k.shape() != [3, 3, d] {
        return Err(Error::shape(
            "depthwise_conv3x3",
            format!("kernel {:?} for {d} channels", k.shape()),
        ));
    }
    let (fd, kd) = (f.data(), k.data());
    let mut out = vec![0.0; h * w * d];
    for y in 0..h {
        for x in 0..w {
            let o = (y * w + x) * d;
            for ky in 0..3 {
                let Some(sy) = (y + ky).checked_sub(1).filter(|&v| v < h) else {
                    continue;
                };
                for kx in 0..3 {
                    let Some(sx) = (x + kx).checked_sub(1).filter(|&v| v < w) else {
                        continue;
                    };
                    let s = (sy * w + sx) * d;
                    let kk = (ky * 3 + kx) * d;
                    for c in 0..d {
                        out[o + c] += fd[s + c] * kd[kk + c];
                    }
                }
            }
        }
    }
    Tensor::new(&[h, w, d], out)
}

pub fn depthwise_conv3x3_backward(
    f: &Tensor,
    k: &Tensor,
    grad: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let (h, w, d) = f.dims3("depthwise_conv3x3_backward")?;
    let (fd, kd, gd) = (f.data(), k.data(), grad.data());
    let mut gf = vec![0.0; h * w * d];
    let mut gk = vec![0.0; 9 * d];
    for y in 0..h {
        for x in 0..w {
            let o = (y * w + x) * d;
            for ky in 0..3 {
                let Some(sy) = (y + ky).checked_sub(1).filter(|&v| v < h) else {
                    continue;
                };
                for kx in 0..3 {
                    let Some(sx) = (x + kx).checked_sub(1).filter(|&v| v < w) else {
                        continue;
                    };
                    let s = (sy * w + sx) * d;
                    let kk = (ky * 3 + kx) * d;
                    for c in 0..d {
                        gf[s + c] += gd[o + c] * kd[kk + c];
                        gk[kk + c] += gd[o + c] * fd[s + c];
                    }
                }
            }
        }
    }
    Ok((Tensor::new(&[h, w, d], gf)?, Tensor::new(&[3, 3, d], gk)?))
}

/// Non-overlapping `s x s` mean pooling; `s` must divide both spatial extents.
pub fn avg_pool2d(f: &Tensor, s: usize) -> Result<Tensor> {
    let (h, w, d) = f.dims3("avg_pool2d")?;
    if s == 0 || h % s != 0 || w % s != 0 {
        return Err(Error::Precondition(format!(
            "avg_pool2d: kernel {s} does not divide {h}x{w}"
        )));
    }
    let (ho, wo) = (h / s, w / s);
    let norm = 1.0 / (s * s) as f64;
    let fd = f.data();
    let mut out = vec![0.0; ho * wo * d];
    for oy in 0..ho {
        for ox in 0..wo {
            let o = (oy * wo + ox) * d;
            for dy in 0..s {
                for dx in 0..s {
                    let src = ((oy * s + dy) * w + ox * s + dx) * d;
                    for c in 0..d {
                        out[o + c] += fd[src + c];
                    }
                }
            }
            for v in &mut out[o..o + d] {
                *v *= norm;
            }
        }
    }
    Tensor::new(&[ho, wo, d], out)
}

pub fn avg_pool2d_backward(input_shape: &[usize], s: usize, grad: &Tensor) -> Result<Tensor> {
    let [h, w, d] = input_shape[..] else {
        return Err(Error::shape(
            "avg_pool2d_backward",
            format!("{input_shape:?}"),
        ));
    };
    let wo = w / s;
    let norm = 1.0 / (s * s) as f64;
    let gd = grad.data();
    let mut out = vec![0.0; h * w * d];
    for y in 0..h {
        for x in 0..w {
            let src = ((y / s) * wo + x / s) * d;
            let dst = (y * w + x) * d;
            for c in 0..d {
                out[dst + c] = gd[src + c] * norm;
            }
        }
    }
    Tensor::new(&[h, w, d], out)
}

/// Source taps for one output coordinate under half-pixel-center sampling.
fn bilinear_taps(dst: usize, src_len: usize, dst_len: usize) -> (usize, usize, f64) {
    let scale = src_len as f64 / dst_len as f64;
    let src = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (src_len - 1) as f64);
    let i0 = src.floor() as usize;
    let i1 = (i0 + 1).min(src_len - 1);
    (i0, i1, src - i0 as f64)
}

/// Bilinear resize with `align_corners = false` semantics, clamped at the borders.
pub fn resize_bilinear(f: &Tensor, h2: usize, w2: usize) -> Result<Tensor> {
    let (h, w, d) = f.dims3("resize_bilinear")?;
    if h2 == 0 || w2 == 0 {
        return Err(Error::Precondition(
            "resize_bilinear: zero target size".into(),
        ));
    }
    let fd = f.data();
    let xs: Vec<_> = (0..w2).map(|x| bilinear_taps(x, w, w2)).collect();
    let mut out = vec![0.0; h2 * w2 * d];
    for y in 0..h2 {
        let (y0, y1, ty) = bilinear_taps(y, h, h2);
        for (x, &(x0, x1, tx)) in xs.iter().enumerate() {
            let o = (y * w2 + x) * d;
            let taps = [
                ((y0 * w + x0) * d, (1.0 - ty) * (1.0 - tx)),
                ((y0 * w + x1) * d, (1.0 - ty) * tx),
                ((y1 * w + x0) * d, ty * (1.0 - tx)),
                ((y1 * w + x1) * d, ty * tx),
            ];
            for c in 0..d {
                out[o + c] = taps.iter().map(|&(s, wt)| fd[s + c] * wt).sum();
            }
        }
    }
    Tensor::new(&[h2, w2, d], out)
}

pub fn resize_bilinear_backward(input_shape: &[usize], grad: &Tensor) -> Result<Tensor> {
    let [h, w, d] = input_shape[..] else {
        return Err(Error::shape(
            "resize_bilinear_backward",
            format!("{input_shape:?}"),
        ));
    };
    let (h2, w2, _) = grad.dims3("resize_bilinear_backward")?;
    let gd = grad.data();
    let mut out = vec![0.0; h * w * d];
    for y in 0..h2 {
        let (y0, y1, ty) = bilinear_taps(y, h, h2);
        for x in 0..w2 {
            let (x0, x1, tx) = bilinear_taps(x, w, w2);
            let o = (y * w2 + x) * d;
            let taps = [
                ((y0 * w + x0) * d, (1.0 - ty) * (1.0 - tx)),
                ((y0 * w + x1) * d, (1.0 - ty) * tx),
                ((y1 * w + x0) * d, ty * (1.0 - tx)),
                ((y1 * w + x1) * d, ty * tx),
            ];
            for (s, wt) in taps {
                for c in 0..d {
                    out[s + c] += gd[o + c] * wt;
                }
            }
        }
    }
    Tensor::new(&[h, w, d], out)
}

/// Rotates a `[L, d_h]` per-head matrix: the first half of each row by the
/// token's row coordinate, the second half by its column coordinate.
/// Pairs are adjacent components `(2i, 2i+1)` within each half with
/// frequency `base^(-2i / (d_h/2))`.
pub fn rope2d(x: &Tensor, coords: &[(usize, usize)], base: f64) -> Result<Tensor> {
    rope2d_signed(x, coords, base, 1.0)
}

/// Inverse rotation, which is also the vector-Jacobian product of [`rope2d`].
pub fn rope2d_backward(grad: &Tensor, coords: &[(usize, usize)], base: f64) -> Result<Tensor> {
    rope2d_signed(grad, coords, base, -1.0)
}

fn rope2d_signed(x: &Tensor, coords: &[(usize, usize)], base: f64, sign: f64) -> Result<Tensor> {
    let (l, dh) = x.dims2("rope2d")?;
    if dh % 4 != 0 {
        return Err(Error::Config(format!(
            "rope2d: head dim {dh} is not divisible by 4"
        )));
    }
    if coords.len() != l {
        return Err(Error::shape(
            "rope2d",
            format!("{} coords for {l} tokens", coords.len()),
        ));
    }
    let half = dh / 2;
    let freqs: Vec<f64> = (0..half / 2)
        .map(|i| base.powf(-((2 * i) as f64) / half as f64))
        .collect();
    let mut out = x.data().to_vec();
    for (t, &(row, col)) in coords.iter().enumerate() {
        let r = &mut out[t * dh..(t + 1) * dh];
        for (offset, pos) in [(0, row), (half, col)] {
            for (i, &f) in freqs.iter().enumerate() {
                let (sin, cos) = (sign * pos as f64 * f).sin_cos();
                let a = offset + 2 * i;
                let (x0, x1) = (r[a], r[a + 1]);
                r[a] = x0 * cos - x1 * sin;
                r[a + 1] = x0 * sin + x1 * cos;
            }
        }
    }
    Tensor::new(&[l, dh], out)
}
