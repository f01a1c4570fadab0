//! Adam with projection of `k` onto its bounds, and cosine annealing.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::network::ParamRef;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
struct Moments<T> {
    m: Tensor<T>,
    v: Tensor<T>,
}

/// Adam state keyed by parameter position; the parameter list must be
/// presented in the same order at every step.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    moments: Vec<Moments<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update with learning rate `lr`. Parameters with
    /// `k_bounds` are clamped into them afterwards. A non-finite gradient
    /// aborts before anything is modified.
    pub fn step(&mut self, params: &mut [ParamRef<'_, T>], lr: f64) -> Result<()> {
        for p in params.iter() {
            if !p.param.grad.is_finite() {
                return Err(Error::NonFiniteGrad { param: p.name.clone() });
            }
        }
        if self.moments.is_empty() {
            self.moments = params
                .iter()
                .map(|p| Moments {
                    m: Tensor::zeros_like(&p.param.value),
                    v: Tensor::zeros_like(&p.param.value),
                })
                .collect();
        }
        if self.moments.len() != params.len() {
            return Err(Error::Config(format!(
                "optimizer tracks {} parameters, got {}",
                self.moments.len(),
                params.len()
            )));
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let (b1, b2) = (T::lit(beta1), T::lit(beta2));
        let (ob1, ob2) = (T::lit(1.0 - beta1), T::lit(1.0 - beta2));
        let step_size = T::lit(lr / bc1);
        let inv_sqrt_bc2 = T::lit(1.0 / bc2.sqrt());
        let eps = T::lit(eps);
        for (p, mom) in params.iter_mut().zip(&mut self.moments) {
            p.param.value.expect_same_shape("adam", &mom.m)?;
            let value = p.param.value.data_mut();
            let grad = p.param.grad.data();
            let m = mom.m.data_mut();
            let v = mom.v.data_mut();
            for i in 0..value.len() {
                let g = grad[i];
                m[i] = b1 * m[i] + ob1 * g;
                v[i] = b2 * v[i] + ob2 * g * g;
                value[i] -= step_size * m[i] / (v[i].sqrt() * inv_sqrt_bc2 + eps);
            }
            if let Some((lo, hi)) = p.k_bounds {
                let (lo, hi) = (T::lit(lo), T::lit(hi));
                for x in value.iter_mut() {
                    *x = x.max(lo).min(hi);
                }
            }
        }
        Ok(())
    }
}

/// Cosine-annealed learning rate at `epoch`, constant at `lr_min` past `t_max`.
pub fn lr_at(epoch: usize, lr: f64, lr_min: f64, t_max: usize) -> f64 {
    if t_max == 0 || epoch >= t_max {
        return lr_min;
    }
    lr_min + 0.5 * (lr - lr_min) * (1.0 + (PI * epoch as f64 / t_max as f64).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::Param;

    fn refs<'a>(ps: &'a mut [Param<f64>], k: Option<(f64, f64)>) -> Vec<ParamRef<'a, f64>> {
        ps.iter_mut()
            .enumerate()
            .map(|(i, p)| ParamRef {
                name: format!("p{i}"),
                param: p,
                k_bounds: k,
            })
            .collect()
    }

    #[test]
    fn zero_gradient_is_noop() {
        let mut ps = vec![Param::new(Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap())];
        let before = ps[0].value.clone();
        let mut adam = Adam::new(AdamConfig::default());
        for _ in 0..5 {
            adam.step(&mut refs(&mut ps, None), 0.1).unwrap();
        }
        assert_eq!(ps[0].value, before);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut ps = vec![Param::scalar(0.0)];
        ps[0].grad = Tensor::scalar(1.0);
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut refs(&mut ps, None), 0.1).unwrap();
        // m̂ = 1, v̂ = 1: update = -lr / (1 + eps)
        assert!((ps[0].value.item() + 0.1 / (1.0 + 1e-8)).abs() < 1e-12);
    }

    #[test]
    fn matches_reference_over_several_steps() {
        let grads = [0.3, -1.2, 0.7, 2.0, -0.1];
        let mut ps = vec![Param::scalar(0.5)];
        let mut adam = Adam::new(AdamConfig::default());
        let (mut x, mut m, mut v) = (0.5f64, 0.0f64, 0.0f64);
        for (t, &g) in grads.iter().enumerate() {
            ps[0].grad = Tensor::scalar(g);
            adam.step(&mut refs(&mut ps, None), 0.01).unwrap();
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t as i32 + 1));
            let vh = v / (1.0 - 0.999f64.powi(t as i32 + 1));
            x -= 0.01 * mh / (vh.sqrt() + 1e-8);
            assert!((ps[0].value.item() - x).abs() < 1e-12);
        }
    }

    #[test]
    fn k_clamped_at_upper_bound() {
        let mut ps = vec![Param::scalar(4.99)];
        ps[0].grad = Tensor::scalar(-1e6);
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut refs(&mut ps, Some((0.5, 5.0))), 0.1).unwrap();
        assert_eq!(ps[0].value.item(), 5.0);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut ps = vec![Param::scalar(1.0), Param::scalar(2.0)];
        ps[1].grad = Tensor::scalar(f64::NAN);
        let mut adam = Adam::new(AdamConfig::default());
        match adam.step(&mut refs(&mut ps, None), 0.1) {
            Err(Error::NonFiniteGrad { param }) => assert_eq!(param, "p1"),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(ps[0].value.item(), 1.0);
    }

    #[test]
    fn cosine_schedule_examples() {
        assert_eq!(lr_at(0, 1e-4, 0.0, 100), 1e-4);
        assert!((lr_at(50, 1e-4, 0.0, 100) - 5e-5).abs() < 1e-18);
        assert_eq!(lr_at(100, 1e-4, 0.0, 100), 0.0);
        assert_eq!(lr_at(150, 1e-4, 1e-6, 100), 1e-6);
        let mut prev = f64::INFINITY;
        for e in 0..=100 {
            let lr = lr_at(e, 1e-4, 0.0, 100);
            assert!(lr <= prev);
            prev = lr;
        }
    }
}
