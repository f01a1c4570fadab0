//! 3×3, stride-1, zero-padded convolution via im2col + GEMM.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const KERNEL: usize = 3;
const PAD: isize = 1;
const TAPS: usize = KERNEL * KERNEL;

#[derive(Debug)]
pub struct Conv2dCtx<T> {
    input: Tensor<T>,
    weight: Tensor<T>,
}

#[derive(Debug)]
pub struct Conv2dGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

fn check_shapes<T: Real>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<()> {
    const OP: &str = "conv2d";
    input.expect_rank(OP, 4)?;
    weight.expect_rank(OP, 4)?;
    bias.expect_rank(OP, 1)?;
    let [_, c, _, _] = dims4(input);
    let [o, wc, kh, kw] = dims4(weight);
    if wc != c {
        return Err(Error::shape(OP, "weight input channels", c, wc));
    }
    if kh != KERNEL {
        return Err(Error::shape(OP, "kernel height", KERNEL, kh));
    }
    if kw != KERNEL {
        return Err(Error::shape(OP, "kernel width", KERNEL, kw));
    }
    if bias.shape()[0] != o {
        return Err(Error::shape(OP, "bias length", o, bias.shape()[0]));
    }
    Ok(())
}

pub(crate) fn dims4<T: Real>(t: &Tensor<T>) -> [usize; 4] {
    let s = t.shape();
    [s[0], s[1], s[2], s[3]]
}

/// Valid output columns `[lo, hi)` for horizontal tap offset `dx`.
fn x_range(w: usize, dx: isize) -> (usize, usize) {
    let lo = (-dx).max(0) as usize;
    let hi = (w as isize - dx).min(w as isize).max(0) as usize;
    (lo.min(hi), hi)
}

/// Unfold one `[C,H,W]` image into `[C·9, H·W]` patch columns.
fn im2col<T: Real>(img: &[T], c: usize, h: usize, w: usize, cols: &mut [T]) {
    let hw = h * w;
    for ch in 0..c {
        let plane = &img[ch * hw..(ch + 1) * hw];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = &mut cols[(ch * TAPS + ky * KERNEL + kx) * hw..][..hw];
                let dy = ky as isize - PAD;
                let dx = kx as isize - PAD;
                let (lo, hi) = x_range(w, dx);
                for y in 0..h {
                    let sy = y as isize + dy;
                    let out = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    out[..lo].fill(T::zero());
                    out[hi..].fill(T::zero());
                    let s0 = (lo as isize + dx) as usize;
                    out[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                }
            }
        }
    }
}

/// Fold patch columns back, accumulating overlapping contributions.
fn col2im<T: Real>(cols: &[T], c: usize, h: usize, w: usize, img: &mut [T]) {
    let hw = h * w;
    for ch in 0..c {
        let plane = &mut img[ch * hw..(ch + 1) * hw];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = &cols[(ch * TAPS + ky * KERNEL + kx) * hw..][..hw];
                let dy = ky as isize - PAD;
                let dx = kx as isize - PAD;
                let (lo, hi) = x_range(w, dx);
                let s0 = (lo as isize + dx) as usize;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * w + s0..][..hi - lo];
                    for (d, &g) in dst.iter_mut().zip(&row[y * w + lo..y * w + hi]) {
                        *d += g;
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<(Tensor<T>, Conv2dCtx<T>)> {
    check_shapes(input, weight, bias)?;
    let [n, c, h, w] = dims4(input);
    let o = weight.shape()[0];
    let hw = h * w;
    let ck = c * TAPS;
    let mut out = vec![T::zero(); n * o * hw];
    let mut cols = vec![T::zero(); ck * hw];
    for s in 0..n {
        im2col(input.outer(s), c, h, w, &mut cols);
        let dst = &mut out[s * o * hw..(s + 1) * o * hw];
        for (oc, &b) in bias.data().iter().enumerate() {
            dst[oc * hw..(oc + 1) * hw].fill(b);
        }
        T::gemm(o, ck, hw, weight.data(), (ck, 1), &cols, (hw, 1), T::one(), dst, (hw, 1));
    }
    let out = Tensor::new(&[n, o, h, w], out)?;
    out.ensure_finite("conv2d_forward")?;
    Ok((
        out,
        Conv2dCtx {
            input: input.clone(),
            weight: weight.clone(),
        },
    ))
}

pub fn conv2d_backward<T: Real>(ctx: Conv2dCtx<T>, grad_out: &Tensor<T>) -> Result<Conv2dGrads<T>> {
    let Conv2dCtx { input, weight } = ctx;
    let [n, c, h, w] = dims4(&input);
    let o = weight.shape()[0];
    let expected = [n, o, h, w];
    grad_out.expect_rank("conv2d_backward", 4)?;
    for (axis, (&e, &g)) in expected.iter().zip(grad_out.shape()).enumerate() {
        if e != g {
            return Err(Error::shape("conv2d_backward", format!("grad_out axis {axis}"), e, g));
        }
    }
    let hw = h * w;
    let ck = c * TAPS;
    let mut g_in = Tensor::zeros(input.shape());
    let mut g_w = vec![T::zero(); o * ck];
    let mut g_b = vec![T::zero(); o];
    let mut cols = vec![T::zero(); ck * hw];
    let mut g_cols = vec![T::zero(); ck * hw];
    for s in 0..n {
        let go = grad_out.outer(s);
        for (oc, gb) in g_b.iter_mut().enumerate() {
            *gb += go[oc * hw..(oc + 1) * hw].iter().copied().sum::<T>();
        }
        im2col(input.outer(s), c, h, w, &mut cols);
        // dW += dY · colsᵀ
        T::gemm(o, hw, ck, go, (hw, 1), &cols, (1, hw), T::one(), &mut g_w, (ck, 1));
        // dcols = Wᵀ · dY
        T::gemm(ck, o, hw, weight.data(), (1, ck), go, (hw, 1), T::zero(), &mut g_cols, (hw, 1));
        let per = c * hw;
        col2im(&g_cols, c, h, w, &mut g_in.data_mut()[s * per..(s + 1) * per]);
    }
    let grads = Conv2dGrads {
        input: g_in,
        weight: Tensor::new(weight.shape(), g_w)?,
        bias: Tensor::new(&[o], g_b)?,
    };
    grads.input.ensure_finite("conv2d_backward")?;
    grads.weight.ensure_finite("conv2d_backward")?;
    Ok(grads)
}
