//! Oracles shared by unit tests. Deliberately loop-based and independent of
//! the GEMM paths they check.

use rand::Rng;

use crate::tensor::{Real, Tensor};

pub fn rand_tensor<T: Real>(rng: &mut impl Rng, shape: &[usize]) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::lit(rng.gen_range(-1.0..1.0))).collect();
    Tensor::new(shape, data).unwrap()
}

pub fn naive_conv2d<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let o = w.shape()[0];
    let mut out = Tensor::zeros(&[n, o, h, wd]);
    for s in 0..n {
        for oc in 0..o {
            for y in 0..h {
                for xx in 0..wd {
                    let mut acc = b.data()[oc].as_f64();
                    for ic in 0..c {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let sy = y as isize + ky as isize - 1;
                                let sx = xx as isize + kx as isize - 1;
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= wd as isize {
                                    continue;
                                }
                                let xv = x.data()[((s * c + ic) * h + sy as usize) * wd + sx as usize];
                                let wv = w.data()[((oc * c + ic) * 3 + ky) * 3 + kx];
                                acc += xv.as_f64() * wv.as_f64();
                            }
                        }
                    }
                    out.data_mut()[((s * o + oc) * h + y) * wd + xx] = T::lit(acc);
                }
            }
        }
    }
    out
}

/// Max relative error between `analytic` and central differences of `loss`
/// with respect to every element of `param` (step 1e-3).
pub fn fd_rel_err(
    param: &Tensor<f64>,
    analytic: &Tensor<f64>,
    mut loss: impl FnMut(&Tensor<f64>) -> f64,
) -> f64 {
    let eps = 1e-3;
    let mut worst = 0.0f64;
    let mut p = param.clone();
    for i in 0..param.numel() {
        let orig = p.data()[i];
        p.data_mut()[i] = orig + eps;
        let up = loss(&p);
        p.data_mut()[i] = orig - eps;
        let down = loss(&p);
        p.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic.data()[i];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    worst
}
