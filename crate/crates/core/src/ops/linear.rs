use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug)]
pub struct LinearCtx<T> {
    input: Tensor<T>,
    weight: Tensor<T>,
}

#[derive(Debug)]
pub struct LinearGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// `y = x · Wᵀ + b` for `x: [N,F]`, `W: [G,F]`, `b: [G]`.
pub fn linear_forward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<(Tensor<T>, LinearCtx<T>)> {
    const OP: &str = "linear";
    input.expect_rank(OP, 2)?;
    weight.expect_rank(OP, 2)?;
    bias.expect_rank(OP, 1)?;
    let (n, f) = (input.shape()[0], input.shape()[1]);
    let (g, wf) = (weight.shape()[0], weight.shape()[1]);
    if wf != f {
        return Err(Error::shape(OP, "weight input features", f, wf));
    }
    if bias.shape()[0] != g {
        return Err(Error::shape(OP, "bias length", g, bias.shape()[0]));
    }
    let mut out = Vec::with_capacity(n * g);
    for _ in 0..n {
        out.extend_from_slice(bias.data());
    }
    T::gemm(n, f, g, input.data(), (f, 1), weight.data(), (1, f), T::one(), &mut out, (g, 1));
    let out = Tensor::new(&[n, g], out)?;
    out.ensure_finite("linear_forward")?;
    Ok((
        out,
        LinearCtx {
            input: input.clone(),
            weight: weight.clone(),
        },
    ))
}

pub fn linear_backward<T: Real>(ctx: LinearCtx<T>, grad_out: &Tensor<T>) -> Result<LinearGrads<T>> {
    let LinearCtx { input, weight } = ctx;
    let (n, f) = (input.shape()[0], input.shape()[1]);
    let g = weight.shape()[0];
    grad_out.expect_rank("linear_backward", 2)?;
    if grad_out.shape() != [n, g] {
        return Err(Error::shape("linear_backward", "grad_out width", g, grad_out.shape()[1]));
    }
    let dy = grad_out.data();
    let mut dx = vec![T::zero(); n * f];
    T::gemm(n, g, f, dy, (g, 1), weight.data(), (f, 1), T::zero(), &mut dx, (f, 1));
    let mut dw = vec![T::zero(); g * f];
    T::gemm(g, n, f, dy, (1, g), input.data(), (f, 1), T::zero(), &mut dw, (f, 1));
    let mut db = vec![T::zero(); g];
    for row in dy.chunks(g) {
        for (acc, &v) in db.iter_mut().zip(row) {
            *acc += v;
        }
    }
    let grads = LinearGrads {
        input: Tensor::new(&[n, f], dx)?,
        weight: Tensor::new(&[g, f], dw)?,
        bias: Tensor::new(&[g], db)?,
    };
    grads.input.ensure_finite("linear_backward")?;
    grads.weight.ensure_finite("linear_backward")?;
    Ok(grads)
}
