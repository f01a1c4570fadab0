use rand::Rng;

use crate::error::{Error, Result};
use crate::ops::Mode;
use crate::tensor::{Real, Tensor};

/// Inverted-dropout mask: each entry is either 0 or `1 / (1 - p)`.
#[derive(Debug, Clone)]
pub struct DropoutMask<T> {
    scale: Vec<T>,
}

impl<T: Real> DropoutMask<T> {
    pub fn sample(numel: usize, p: f64, rng: &mut impl Rng) -> Result<Self> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {p} outside [0, 1)")));
        }
        let keep = T::lit(1.0 / (1.0 - p));
        let scale = (0..numel)
            .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
            .collect();
        Ok(Self { scale })
    }

    pub fn identity(numel: usize) -> Self {
        Self {
            scale: vec![T::one(); numel],
        }
    }

    pub fn apply(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        if input.numel() != self.scale.len() {
            return Err(Error::shape("dropout", "elements", self.scale.len(), input.numel()));
        }
        let data = input.data().iter().zip(&self.scale).map(|(&x, &m)| x * m).collect();
        Tensor::new(input.shape(), data)
    }

    pub fn survivors(&self) -> usize {
        self.scale.iter().filter(|&&m| m != T::zero()).count()
    }
}

#[derive(Debug)]
pub struct DropoutCtx<T> {
    mask: DropoutMask<T>,
}

pub fn dropout_forward<T: Real>(
    input: &Tensor<T>,
    p: f64,
    mode: Mode,
    rng: &mut impl Rng,
) -> Result<(Tensor<T>, DropoutCtx<T>)> {
    let mask = match mode {
        Mode::Train if p > 0.0 => DropoutMask::sample(input.numel(), p, rng)?,
        _ => {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("dropout probability {p} outside [0, 1)")));
            }
            DropoutMask::identity(input.numel())
        }
    };
    let out = mask.apply(input)?;
    Ok((out, DropoutCtx { mask }))
}

pub fn dropout_backward<T: Real>(ctx: DropoutCtx<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    ctx.mask.apply(grad_out)
}
