//! Forward and backward kernels for the non-convolutional primitives.

use super::{Real, Result, Tensor, TensorError};

/// Output shape of a binary elementwise op: exact match, or one side scalar.
pub(crate) fn broadcast_shape<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<Vec<usize>> {
    if a.shape() == b.shape() {
        Ok(a.shape().to_vec())
    } else if b.len() == 1 {
        Ok(a.shape().to_vec())
    } else if a.len() == 1 {
        Ok(b.shape().to_vec())
    } else {
        Err(TensorError::ShapeMismatch {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        })
    }
}

#[inline]
fn at<T: Copy>(v: &[T], i: usize) -> T {
    if v.len() == 1 {
        v[0]
    } else {
        v[i]
    }
}

pub(crate) fn zip_with<T: Real>(a: &[T], b: &[T], len: usize, f: impl Fn(T, T) -> T) -> Vec<T> {
    (0..len).map(|i| f(at(a, i), at(b, i))).collect()
}

/// Reduce a full-size gradient to the shape of an operand that may have
/// been broadcast from a scalar.
pub(crate) fn unbroadcast<T: Real>(grad: Vec<T>, operand_len: usize) -> Vec<T> {
    if operand_len == grad.len() {
        grad
    } else {
        vec![grad.iter().copied().sum()]
    }
}

pub(crate) fn leaky_relu<T: Real>(x: &[T], slope: T) -> Vec<T> {
    x.iter().map(|&v| if v >= T::zero() { v } else { slope * v }).collect()
}

pub(crate) fn leaky_relu_backward<T: Real>(x: &[T], slope: T, g: &[T]) -> Vec<T> {
    x.iter()
        .zip(g)
        .map(|(&v, &g)| if v >= T::zero() { g } else { slope * g })
        .collect()
}

pub(crate) struct NormSaved<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
}

/// Per-(batch, channel) normalization over the spatial voxels.
pub(crate) fn instance_norm<T: Real>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> (Vec<T>, NormSaved<T>) {
    let (batch, channels) = (x.shape()[0], x.shape()[1]);
    let vox = x.len() / (batch * channels).max(1);
    let count = T::from_usize(vox).unwrap();
    let mut out = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv_std = vec![T::zero(); batch * channels];
    for inst in 0..batch * channels {
        let c = inst % channels;
        let range = inst * vox..(inst + 1) * vox;
        let xs = &x.data()[range.clone()];
        let mean = xs.iter().copied().sum::<T>() / count;
        let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / count;
        let inv = (var + eps).sqrt().recip();
        inv_std[inst] = inv;
        let (g, b) = (gamma[c], beta[c]);
        for ((o, h), &v) in out[range.clone()].iter_mut().zip(&mut xhat[range]).zip(xs) {
            *h = (v - mean) * inv;
            *o = g * *h + b;
        }
    }
    (out, NormSaved { xhat, inv_std })
}

pub(crate) struct NormGrads<T> {
    pub input: Vec<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

pub(crate) fn instance_norm_backward<T: Real>(
    shape: &[usize],
    gamma: &[T],
    saved: &NormSaved<T>,
    g: &[T],
) -> NormGrads<T> {
    let (batch, channels) = (shape[0], shape[1]);
    let vox = g.len() / (batch * channels).max(1);
    let count = T::from_usize(vox).unwrap();
    let mut dx = vec![T::zero(); g.len()];
    let mut dgamma = vec![T::zero(); channels];
    let mut dbeta = vec![T::zero(); channels];
    for inst in 0..batch * channels {
        let c = inst % channels;
        let range = inst * vox..(inst + 1) * vox;
        let gs = &g[range.clone()];
        let hs = &saved.xhat[range.clone()];
        let sum_g: T = gs.iter().copied().sum();
        let sum_gh: T = gs.iter().zip(hs).map(|(&a, &b)| a * b).sum();
        dgamma[c] = dgamma[c] + sum_gh;
        dbeta[c] = dbeta[c] + sum_g;
        // d xhat = g * gamma; dx = inv/N * (N*dxhat - sum(dxhat) - xhat*sum(dxhat*xhat))
        let scale = gamma[c] * saved.inv_std[inst] / count;
        for ((d, &gv), &h) in dx[range].iter_mut().zip(gs).zip(hs) {
            *d = scale * (count * gv - sum_g - h * sum_gh);
        }
    }
    NormGrads {
        input: dx,
        gamma: dgamma,
        beta: dbeta,
    }
}

/// Softmax over axis 1 of a `[batch, channels, ...]` tensor.
pub(crate) fn softmax_channels<T: Real>(x: &Tensor<T>) -> Vec<T> {
    let (batch, channels) = (x.shape()[0], x.shape()[1]);
    let vox = x.len() / (batch * channels).max(1);
    let src = x.data();
    let mut out = vec![T::zero(); x.len()];
    let mut denom = vec![T::zero(); vox];
    let mut max = vec![T::neg_infinity(); vox];
    for n in 0..batch {
        let base = n * channels * vox;
        max.fill(T::neg_infinity());
        for c in 0..channels {
            let row = &src[base + c * vox..base + (c + 1) * vox];
            for (m, &v) in max.iter_mut().zip(row) {
                if v > *m {
                    *m = v;
                }
            }
        }
        denom.fill(T::zero());
        for c in 0..channels {
            let range = base + c * vox..base + (c + 1) * vox;
            for (((o, &v), &m), d) in out[range.clone()].iter_mut().zip(&src[range]).zip(&max).zip(denom.iter_mut()) {
                *o = (v - m).exp();
                *d = *d + *o;
            }
        }
        for c in 0..channels {
            let range = base + c * vox..base + (c + 1) * vox;
            for (o, &d) in out[range].iter_mut().zip(&denom) {
                *o = *o / d;
            }
        }
    }
    out
}

pub(crate) fn softmax_channels_backward<T: Real>(shape: &[usize], y: &[T], g: &[T]) -> Vec<T> {
    let (batch, channels) = (shape[0], shape[1]);
    let vox = y.len() / (batch * channels).max(1);
    let mut dx = vec![T::zero(); y.len()];
    let mut dot = vec![T::zero(); vox];
    for n in 0..batch {
        let base = n * channels * vox;
        dot.fill(T::zero());
        for c in 0..channels {
            let range = base + c * vox..base + (c + 1) * vox;
            for ((d, &yv), &gv) in dot.iter_mut().zip(&y[range.clone()]).zip(&g[range]) {
                *d = *d + yv * gv;
            }
        }
        for c in 0..channels {
            let range = base + c * vox..base + (c + 1) * vox;
            for (((o, &yv), &gv), &d) in dx[range.clone()].iter_mut().zip(&y[range.clone()]).zip(&g[range]).zip(&dot) {
                *o = yv * (gv - d);
            }
        }
    }
    dx
}

pub(crate) fn concat_shape<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Vec<usize>> {
    a.expect_rank("concat_channels", 5)?;
    b.expect_rank("concat_channels", 5)?;
    for axis in [0, 2, 3, 4] {
        if a.shape()[axis] != b.shape()[axis] {
            return Err(TensorError::AxisMismatch {
                op: "concat_channels",
                axis,
                left: a.shape()[axis],
                right: b.shape()[axis],
            });
        }
    }
    let mut shape = a.shape().to_vec();
    shape[1] += b.shape()[1];
    Ok(shape)
}

pub(crate) fn concat_channels<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Vec<T> {
    let batch = a.shape()[0];
    let (ablock, bblock) = (a.len() / batch.max(1), b.len() / batch.max(1));
    let mut out = Vec::with_capacity(a.len() + b.len());
    for n in 0..batch {
        out.extend_from_slice(&a.data()[n * ablock..(n + 1) * ablock]);
        out.extend_from_slice(&b.data()[n * bblock..(n + 1) * bblock]);
    }
    out
}

/// Channels `[start, start + len)` of a `[batch, channels, ...]` buffer.
pub(crate) fn slice_channels<T: Real>(shape: &[usize], data: &[T], start: usize, len: usize) -> Vec<T> {
    let (batch, channels) = (shape[0], shape[1]);
    let vox = data.len() / (batch * channels).max(1);
    let mut out = Vec::with_capacity(batch * len * vox);
    for n in 0..batch {
        let base = (n * channels + start) * vox;
        out.extend_from_slice(&data[base..base + len * vox]);
    }
    out
}

/// Scatter a channel slice gradient back into a zero buffer of `shape`.
pub(crate) fn unslice_channels<T: Real>(shape: &[usize], g: &[T], start: usize, len: usize) -> Vec<T> {
    let (batch, channels) = (shape[0], shape[1]);
    let vox = g.len() / (batch * len).max(1);
    let mut out = vec![T::zero(); batch * channels * vox];
    for n in 0..batch {
        let dst = (n * channels + start) * vox;
        out[dst..dst + len * vox].copy_from_slice(&g[n * len * vox..(n + 1) * len * vox]);
    }
    out
}
