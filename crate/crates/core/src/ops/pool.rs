use crate::error::{Error, Result};
use crate::ops::conv::dims4;
use crate::tensor::{Real, Tensor};

#[derive(Debug)]
pub struct MaxPool2dCtx {
    input_shape: Vec<usize>,
    argmax: Vec<usize>,
}

/// 2×2 / stride-2 max pooling. Ties resolve to the first element in
/// row-major window order.
pub fn maxpool2d_forward<T: Real>(input: &Tensor<T>) -> Result<(Tensor<T>, MaxPool2dCtx)> {
    input.expect_rank("maxpool2d", 4)?;
    let [n, c, h, w] = dims4(input);
    if h % 2 != 0 {
        return Err(Error::shape("maxpool2d", "height (must be even)", h + 1, h));
    }
    if w % 2 != 0 {
        return Err(Error::shape("maxpool2d", "width (must be even)", w + 1, w));
    }
    let (oh, ow) = (h / 2, w / 2);
    let src = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for y in 0..oh {
            for x in 0..ow {
                let first = base + 2 * y * w + 2 * x;
                let mut best = first;
                for idx in [first + 1, first + w, first + w + 1] {
                    if src[idx] > src[best] {
                        best = idx;
                    }
                }
                out.push(src[best]);
                argmax.push(best);
            }
        }
    }
    Ok((
        Tensor::new(&[n, c, oh, ow], out)?,
        MaxPool2dCtx {
            input_shape: input.shape().to_vec(),
            argmax,
        },
    ))
}

impl MaxPool2dCtx {
    /// Flat input index chosen for each output element.
    pub fn argmax(&self) -> &[usize] {
        &self.argmax
    }
}

/// Max pooling with the window choices fixed in advance (`argmax` as
/// returned by a previous forward on an input of the same shape).
pub fn maxpool2d_forward_pinned<T: Real>(input: &Tensor<T>, argmax: &[usize]) -> Result<(Tensor<T>, MaxPool2dCtx)> {
    input.expect_rank("maxpool2d", 4)?;
    let [n, c, h, w] = dims4(input);
    let out_shape = [n, c, h / 2, w / 2];
    let count: usize = out_shape.iter().product();
    if argmax.len() != count || argmax.iter().any(|&i| i >= input.numel()) {
        return Err(Error::shape("maxpool2d_pinned", "pinned choices", count, argmax.len()));
    }
    let out = argmax.iter().map(|&i| input.data()[i]).collect();
    Ok((
        Tensor::new(&out_shape, out)?,
        MaxPool2dCtx {
            input_shape: input.shape().to_vec(),
            argmax: argmax.to_vec(),
        },
    ))
}

pub fn maxpool2d_backward<T: Real>(ctx: MaxPool2dCtx, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if grad_out.numel() != ctx.argmax.len() {
        return Err(Error::shape("maxpool2d_backward", "grad_out elements", ctx.argmax.len(), grad_out.numel()));
    }
    let mut g = Tensor::zeros(&ctx.input_shape);
    let dst = g.data_mut();
    for (&idx, &v) in ctx.argmax.iter().zip(grad_out.data()) {
        dst[idx] += v;
    }
    Ok(g)
}

#[derive(Debug)]
pub struct AvgPool1dCtx {
    input_shape: Vec<usize>,
    pool: usize,
}

/// Mean over contiguous groups of `pool` features: `[N, P·C] -> [N, C]`.
pub fn avgpool1d_forward<T: Real>(input: &Tensor<T>, pool: usize) -> Result<(Tensor<T>, AvgPool1dCtx)> {
    input.expect_rank("avgpool1d", 2)?;
    let (n, f) = (input.shape()[0], input.shape()[1]);
    if pool == 0 || f % pool != 0 {
        return Err(Error::shape("avgpool1d", "features (multiple of pool size)", pool * (f / pool.max(1) + 1), f));
    }
    let inv = T::one() / T::from_usize(pool).unwrap();
    let out: Vec<T> = input
        .data()
        .chunks(pool)
        .map(|g| g.iter().copied().sum::<T>() * inv)
        .collect();
    Ok((
        Tensor::new(&[n, f / pool], out)?,
        AvgPool1dCtx {
            input_shape: input.shape().to_vec(),
            pool,
        },
    ))
}

pub fn avgpool1d_backward<T: Real>(ctx: AvgPool1dCtx, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let expected = ctx.input_shape[0] * ctx.input_shape[1] / ctx.pool;
    if grad_out.numel() != expected {
        return Err(Error::shape("avgpool1d_backward", "grad_out elements", expected, grad_out.numel()));
    }
    let inv = T::one() / T::from_usize(ctx.pool).unwrap();
    let data = grad_out
        .data()
        .iter()
        .flat_map(|&g| std::iter::repeat_n(g * inv, ctx.pool))
        .collect();
    Tensor::new(&ctx.input_shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::rand_tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn max_of_window_and_routing() {
        let x = Tensor::new(&[1, 1, 2, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let (y, ctx) = maxpool2d_forward(&x).unwrap();
        assert_eq!(y.data(), &[4.0]);
        let g = maxpool2d_backward(ctx, &Tensor::new(&[1, 1, 1, 1], vec![2.5f32]).unwrap()).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 0.0, 2.5]);
    }

    #[test]
    fn ties_route_to_first_in_row_major_order() {
        let x = Tensor::full(&[1, 1, 2, 2], 0.7f32);
        let (y, ctx) = maxpool2d_forward(&x).unwrap();
        assert_eq!(y.data(), &[0.7]);
        let g = maxpool2d_backward(ctx, &Tensor::full(&[1, 1, 1, 1], 1.0f32)).unwrap();
        assert_eq!(g.data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn constant_input_stays_constant() {
        let x = Tensor::full(&[2, 3, 4, 6], -1.25f32);
        let (y, _) = maxpool2d_forward(&x).unwrap();
        assert_eq!(y.shape(), &[2, 3, 2, 3]);
        assert!(y.data().iter().all(|&v| v == -1.25));
    }

    #[test]
    fn maxpool_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = rand_tensor::<f32>(&mut rng, &[1, 1, 6, 6]);
        let (y, _) = maxpool2d_forward(&x).unwrap();
        for oy in 0..3 {
            for ox in 0..3 {
                let mut m = f32::NEG_INFINITY;
                for dy in 0..2 {
                    for dx in 0..2 {
                        m = m.max(x.data()[(2 * oy + dy) * 6 + 2 * ox + dx]);
                    }
                }
                assert_eq!(y.data()[oy * 3 + ox], m);
            }
        }
    }

    #[test]
    fn pinned_choices_reproduce_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = rand_tensor::<f32>(&mut rng, &[2, 3, 4, 4]);
        let (y, ctx) = maxpool2d_forward(&x).unwrap();
        let (yp, _) = maxpool2d_forward_pinned(&x, ctx.argmax()).unwrap();
        assert_eq!(y, yp);
        let (z, _) = maxpool2d_forward_pinned(&x.scale(-1.0), ctx.argmax()).unwrap();
        assert_eq!(z, y.scale(-1.0));
        assert!(maxpool2d_forward_pinned(&x, &ctx.argmax()[1..]).is_err());
    }

    #[test]
    fn odd_spatial_dims_rejected() {
        assert!(maxpool2d_forward(&Tensor::<f32>::zeros(&[1, 1, 5, 4])).is_err());
        assert!(maxpool2d_forward(&Tensor::<f32>::zeros(&[1, 1, 4, 3])).is_err());
    }

    #[test]
    fn avgpool_mean_of_one_to_ten() {
        let x = Tensor::new(&[1, 10], (1..=10).map(|v| v as f32).collect()).unwrap();
        let (y, ctx) = avgpool1d_forward(&x, 10).unwrap();
        assert_eq!(y.data(), &[5.5]);
        let g = avgpool1d_backward(ctx, &Tensor::full(&[1, 1], 1.0f32)).unwrap();
        assert!(g.data().iter().all(|&v| (v - 0.1).abs() < 1e-7));
    }

    #[test]
    fn avgpool_constant_and_loop_oracle() {
        let c = Tensor::full(&[2, 20], 3.0f32);
        let (y, _) = avgpool1d_forward(&c, 10).unwrap();
        assert!(y.data().iter().all(|&v| (v - 3.0).abs() < 1e-6));

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor::<f32>(&mut rng, &[2, 100]);
        let (y, _) = avgpool1d_forward(&x, 10).unwrap();
        for s in 0..2 {
            for c in 0..10 {
                let mut acc = 0.0f32;
                for j in 0..10 {
                    acc += x.data()[s * 100 + c * 10 + j];
                }
                assert!((y.data()[s * 10 + c] - acc / 10.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn avgpool_requires_divisible_width() {
        assert!(avgpool1d_forward(&Tensor::<f32>::zeros(&[1, 15]), 10).is_err());
    }
}
