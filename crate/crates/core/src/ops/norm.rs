//! Batch normalization over the channel axis (axis 1) of `[N,C,...]`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

fn layout(input: &Tensor, channels: usize) -> Result<(usize, usize)> {
    if input.ndim() < 2 || input.dim(1) != channels {
        return Err(Error::shape(
            "batchnorm",
            format!("input {:?} does not have C={channels} on axis 1", input.shape()),
        ));
    }
    let inner: usize = input.shape()[2..].iter().product();
    Ok((input.dim(0), inner))
}

/// Saved state needed by [`batchnorm_backward`].
#[derive(Clone, Debug)]
pub struct BatchNormCache {
    pub normalized: Tensor,
    pub inv_std: Vec<f32>,
    /// Per-channel batch mean and unbiased variance (train mode only).
    pub batch_mean: Vec<f32>,
    pub batch_var: Vec<f32>,
    pub train: bool,
}

/// Returns the output and the cache. In train mode statistics come from the
/// batch; in eval mode from `running_mean`/`running_var`.
pub fn batchnorm(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &Tensor,
    running_var: &Tensor,
    train: bool,
) -> Result<(Tensor, BatchNormCache)> {
    let c = gamma.len();
    let (n, inner) = layout(input, c)?;
    let count = n * inner;
    let x = input.data();
    let idx = |b: usize, ch: usize, i: usize| (b * c + ch) * inner + i;
    let mut mean = vec![0.0f32; c];
    let mut var = vec![0.0f32; c];
    let mut batch_var = vec![0.0f32; c];
    for ch in 0..c {
        if train {
            let mut s = 0.0f64;
            for b in 0..n {
                for i in 0..inner {
                    s += x[idx(b, ch, i)] as f64;
                }
            }
            let m = s / count as f64;
            let mut sq = 0.0f64;
            for b in 0..n {
                for i in 0..inner {
                    let d = x[idx(b, ch, i)] as f64 - m;
                    sq += d * d;
                }
            }
            mean[ch] = m as f32;
            var[ch] = (sq / count as f64) as f32;
            batch_var[ch] = if count > 1 {
                (sq / (count - 1) as f64) as f32
            } else {
                var[ch]
            };
        } else {
            mean[ch] = running_mean.data()[ch];
            var[ch] = running_var.data()[ch];
        }
    }
    let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut normalized = vec![0.0f32; input.len()];
    let mut out = vec![0.0f32; input.len()];
    for b in 0..n {
        for ch in 0..c {
            for i in 0..inner {
                let k = idx(b, ch, i);
                let xh = (x[k] - mean[ch]) * inv_std[ch];
                normalized[k] = xh;
                out[k] = gamma.data()[ch] * xh + beta.data()[ch];
            }
        }
    }
    Ok((
        Tensor::new(input.shape(), out)?,
        BatchNormCache {
            normalized: Tensor::new(input.shape(), normalized)?,
            inv_std,
            batch_mean: mean,
            batch_var,
            train,
        },
    ))
}

pub struct BatchNormGrads {
    pub input: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
}

pub fn batchnorm_backward(grad_out: &Tensor, gamma: &Tensor, cache: &BatchNormCache) -> Result<BatchNormGrads> {
    let c = gamma.len();
    let (n, inner) = layout(grad_out, c)?;
    let count = (n * inner) as f64;
    let g = grad_out.data();
    let xh = cache.normalized.data();
    let idx = |b: usize, ch: usize, i: usize| (b * c + ch) * inner + i;
    let mut dgamma = vec![0.0f32; c];
    let mut dbeta = vec![0.0f32; c];
    let mut gin = vec![0.0f32; grad_out.len()];
    for ch in 0..c {
        let (mut sg, mut sgx) = (0.0f64, 0.0f64);
        for b in 0..n {
            for i in 0..inner {
                let k = idx(b, ch, i);
                sg += g[k] as f64;
                sgx += (g[k] * xh[k]) as f64;
            }
        }
        dgamma[ch] = sgx as f32;
        dbeta[ch] = sg as f32;
        let gm = gamma.data()[ch] as f64;
        let is = cache.inv_std[ch] as f64;
        for b in 0..n {
            for i in 0..inner {
                let k = idx(b, ch, i);
                gin[k] = if cache.train {
                    (gm * is * (g[k] as f64 - sg / count - xh[k] as f64 * sgx / count)) as f32
                } else {
                    (gm * is * g[k] as f64) as f32
                };
            }
        }
    }
    Ok(BatchNormGrads {
        input: Tensor::new(grad_out.shape(), gin)?,
        gamma: Tensor::new(&[c], dgamma)?,
        beta: Tensor::new(&[c], dbeta)?,
    })
}
