use rand::Rng;

use crate::tensor::{Real, Tensor};

/// A trainable tensor together with its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

impl<T: Real> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let grad = Tensor::zeros_like(&value);
        Self { value, grad }
    }

    pub fn scalar(value: T) -> Self {
        Self::new(Tensor::scalar(value))
    }

    /// Entries drawn from `U(-bound, bound)`.
    pub fn uniform(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::lit(rng.gen_range(-bound..bound))).collect();
        Self::new(Tensor::new(shape, data).expect("shape and data agree"))
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    pub fn accumulate(&mut self, grad: &Tensor<T>) -> crate::Result<()> {
        self.grad.add_assign(grad)
    }
}
