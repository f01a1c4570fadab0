//! Per-channel batch normalisation over every axis except axis 1.

use crate::error::{Error, Result};
use crate::ops::Mode;
use crate::param::Param;
use crate::tensor::{Real, Tensor};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

/// Affine parameters plus running statistics for one normalised layer.
#[derive(Debug, Clone)]
pub struct BatchNorm<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub eps: T,
    pub momentum: T,
}

impl<T: Real> BatchNorm<T> {
    pub fn new(channels: usize, eps: f64, momentum: f64) -> Self {
        Self {
            gamma: Param::new(Tensor::full(&[channels], T::one())),
            beta: Param::new(Tensor::zeros(&[channels])),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], T::one()),
            eps: T::lit(eps),
            momentum: T::lit(momentum),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.value.numel()
    }
}

#[derive(Debug)]
pub struct BatchNormCtx<T> {
    shape: Vec<usize>,
    /// Normalised input, `(x - mean) / std`.
    xhat: Vec<T>,
    inv_std: Vec<T>,
    gamma: Vec<T>,
    mode: Mode,
}

#[derive(Debug)]
pub struct BatchNormGrads<T> {
    pub input: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

fn layout<T: Real>(input: &Tensor<T>, channels: usize) -> Result<(usize, usize, usize)> {
    if input.rank() < 2 {
        return Err(Error::shape("batchnorm", "rank (at least 2)", 2, input.rank()));
    }
    let s = input.shape();
    if s[1] != channels {
        return Err(Error::shape("batchnorm", "channels", channels, s[1]));
    }
    let inner: usize = s[2..].iter().product();
    Ok((s[0], s[1], inner))
}

pub fn batchnorm_forward<T: Real>(
    input: &Tensor<T>,
    bn: &mut BatchNorm<T>,
    mode: Mode,
) -> Result<(Tensor<T>, BatchNormCtx<T>)> {
    let (n, c, inner) = layout(input, bn.channels())?;
    let count = n * inner;
    let x = input.data();
    let mut mean = vec![T::zero(); c];
    let mut inv_std = vec![T::zero(); c];
    match mode {
        Mode::Train => {
            let cnt = T::from_usize(count).unwrap();
            for ch in 0..c {
                let mut sum = T::zero();
                for s in 0..n {
                    sum += x[(s * c + ch) * inner..][..inner].iter().copied().sum::<T>();
                }
                let mu = sum / cnt;
                let mut sq = T::zero();
                for s in 0..n {
                    for &v in &x[(s * c + ch) * inner..][..inner] {
                        sq += (v - mu) * (v - mu);
                    }
                }
                let var = sq / cnt;
                mean[ch] = mu;
                inv_std[ch] = T::one() / (var + bn.eps).sqrt();
                let unbiased = if count > 1 {
                    sq / T::from_usize(count - 1).unwrap()
                } else {
                    var
                };
                let m = bn.momentum;
                let rm = &mut bn.running_mean.data_mut()[ch];
                *rm = (T::one() - m) * *rm + m * mu;
                let rv = &mut bn.running_var.data_mut()[ch];
                *rv = (T::one() - m) * *rv + m * unbiased;
            }
        }
        Mode::Eval => {
            for ch in 0..c {
                mean[ch] = bn.running_mean.data()[ch];
                inv_std[ch] = T::one() / (bn.running_var.data()[ch] + bn.eps).sqrt();
            }
        }
    }
    let mut xhat = vec![T::zero(); x.len()];
    let mut out = vec![T::zero(); x.len()];
    for s in 0..n {
        for ch in 0..c {
            let off = (s * c + ch) * inner;
            let (g, b) = (bn.gamma.value.data()[ch], bn.beta.value.data()[ch]);
            for i in off..off + inner {
                let h = (x[i] - mean[ch]) * inv_std[ch];
                xhat[i] = h;
                out[i] = g * h + b;
            }
        }
    }
    let out = Tensor::new(input.shape(), out)?;
    out.ensure_finite("batchnorm_forward")?;
    Ok((
        out,
        BatchNormCtx {
            shape: input.shape().to_vec(),
            xhat,
            inv_std,
            gamma: bn.gamma.value.data().to_vec(),
            mode,
        },
    ))
}

pub fn batchnorm_backward<T: Real>(ctx: BatchNormCtx<T>, grad_out: &Tensor<T>) -> Result<BatchNormGrads<T>> {
    if grad_out.shape() != ctx.shape.as_slice() {
        return Err(Error::shape("batchnorm_backward", "grad_out elements", ctx.xhat.len(), grad_out.numel()));
    }
    let (n, c) = (ctx.shape[0], ctx.shape[1]);
    let inner: usize = ctx.shape[2..].iter().product();
    let cnt = T::from_usize(n * inner).unwrap();
    let dy = grad_out.data();
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for s in 0..n {
        for ch in 0..c {
            let off = (s * c + ch) * inner;
            for i in off..off + inner {
                dbeta[ch] += dy[i];
                dgamma[ch] += dy[i] * ctx.xhat[i];
            }
        }
    }
    let mut dx = vec![T::zero(); dy.len()];
    for s in 0..n {
        for ch in 0..c {
            let off = (s * c + ch) * inner;
            let scale = ctx.gamma[ch] * ctx.inv_std[ch];
            for i in off..off + inner {
                dx[i] = match ctx.mode {
                    Mode::Train => {
                        scale * (dy[i] - dbeta[ch] / cnt - ctx.xhat[i] * dgamma[ch] / cnt)
                    }
                    Mode::Eval => scale * dy[i],
                };
            }
        }
    }
    let grads = BatchNormGrads {
        input: Tensor::new(&ctx.shape, dx)?,
        gamma: Tensor::new(&[c], dgamma)?,
        beta: Tensor::new(&[c], dbeta)?,
    };
    grads.input.ensure_finite("batchnorm_backward")?;
    Ok(grads)
}
