//! Spiking neuron layers: LIF, KLIF and KLIF* dynamics with an arctangent
//! surrogate gradient and a learnable, layer-shared scaling factor `k`.
//!
//! Per timestep every neuron charges
//!
//! ```text
//! H_t = V_{t-1} + (V_reset - V_{t-1}) / tau + X_t / tau
//! ```
//!
//! and then, depending on the kind:
//!
//! | kind  | firing input `F_t`   | spike `S_t`        | retained potential `V_t`            |
//! |-------|----------------------|--------------------|-------------------------------------|
//! | LIF   | `H_t`                | `F_t > V_th`       | `H_t (1 - S_t) + V_reset S_t`       |
//! | KLIF  | `act(k H_t)`         | `F_t > V_th`       | `F_t (1 - S_t) + V_reset S_t`       |
//! | KLIF* | `act(k H_t)`         | `F_t > V_th`       | `F_t / k (1 - S_t) + V_reset S_t`   |
//!
//! The backward pass replaces `dS/dF` with
//! `alpha / (2 (1 + (pi/2 * alpha * (F_t - V_th))^2))`.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::Param;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NeuronKind {
    Lif,
    Klif,
    KlifStar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Relu,
    Celu,
    LeakyRelu,
    Identity,
}

/// CELU shape parameter.
pub const CELU_ALPHA: f64 = 1.0;
/// Negative-side slope of the leaky rectifier.
pub const LEAKY_SLOPE: f64 = 0.01;

impl Activation {
    /// Returns `(act(z), act'(z))`.
    #[inline]
    pub fn eval<T: Real>(self, z: T) -> (T, T) {
        self.eval_branch(z, z > T::zero())
    }

    /// Evaluate the positive (`z > 0`) or non-positive piece of the
    /// activation at `z`, regardless of the sign of `z`.
    #[inline]
    pub fn eval_branch<T: Real>(self, z: T, positive: bool) -> (T, T) {
        let one = T::one();
        if positive {
            return (z, one);
        }
        match self {
            Activation::Relu => (T::zero(), T::zero()),
            Activation::Celu => {
                let a = T::lit(CELU_ALPHA);
                let e = (z / a).exp();
                (a * (e - one), e)
            }
            Activation::LeakyRelu => {
                let s = T::lit(LEAKY_SLOPE);
                (s * z, s)
            }
            Activation::Identity => (z, one),
        }
    }
}

macro_rules! str_enum {
    ($ty:ident { $($variant:ident => $name:literal),+ $(,)? }) => {
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($ty::$variant),)+
                    other => Err(Error::Config(format!(
                        concat!("unknown ", stringify!($ty), " `{}` (expected one of: ", $($name, " ",)+ ")"),
                        other
                    ))),
                }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($ty::$variant => $name,)+ })
            }
        }
    };
}

str_enum!(NeuronKind { Lif => "lif", Klif => "klif", KlifStar => "klif-star" });
str_enum!(Activation { Relu => "relu", Celu => "celu", LeakyRelu => "leaky-relu", Identity => "identity" });

/// How the spike nonlinearity is evaluated in the forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FireMode {
    /// Heaviside step; the normal training and inference path.
    Hard,
    /// Smooth primitive of the surrogate, so finite differences of the
    /// forward pass equal the analytic backward pass.
    Relaxed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpikingLayerConfig {
    pub kind: NeuronKind,
    pub activation: Activation,
    pub tau: f64,
    pub v_th: f64,
    pub v_reset: f64,
    pub alpha: f64,
    pub k_init: f64,
    pub k_min: f64,
    pub k_max: f64,
    pub k_learnable: bool,
    pub detach_reset: bool,
    /// Debug switch: scales the backward surrogate by 1.1 so gradient
    /// checks can be shown to fail.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub break_surrogate: bool,
}

impl Default for SpikingLayerConfig {
    fn default() -> Self {
        Self {
            kind: NeuronKind::Klif,
            activation: Activation::Relu,
            tau: 2.0,
            v_th: 1.0,
            v_reset: 0.0,
            alpha: 2.0,
            k_init: 1.0,
            k_min: 0.5,
            k_max: 5.0,
            k_learnable: true,
            detach_reset: false,
            break_surrogate: false,
        }
    }
}

impl SpikingLayerConfig {
    pub fn lif() -> Self {
        Self {
            kind: NeuronKind::Lif,
            k_learnable: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.tau > 1.0) {
            return bad("tau must be > 1");
        }
        if !(self.v_th > self.v_reset) {
            return bad("v_th must exceed v_reset");
        }
        if !(self.alpha > 0.0) {
            return bad("alpha must be > 0");
        }
        if !(self.k_min > 0.0 && self.k_min <= self.k_init && self.k_init <= self.k_max) {
            return bad("k bounds must satisfy 0 < k_min <= k_init <= k_max");
        }
        Ok(())
    }

    /// Whether this layer has a trainable scale.
    pub fn has_learnable_k(&self) -> bool {
        self.kind != NeuronKind::Lif && self.k_learnable
    }
}

/// `alpha / (2 (1 + (pi/2 * alpha * x)^2))`, the derivative of the arctangent
/// spike primitive.
#[inline]
pub fn surrogate_grad<T: Real>(x: T, alpha: T) -> T {
    let u = T::lit(PI / 2.0) * alpha * x;
    alpha / (T::lit(2.0) * (T::one() + u * u))
}

/// `atan(pi/2 * alpha * x) / pi + 1/2`, whose derivative is [`surrogate_grad`].
#[inline]
pub fn relaxed_spike<T: Real>(x: T, alpha: T) -> T {
    (T::lit(PI / 2.0) * alpha * x).atan() / T::lit(PI) + T::lit(0.5)
}

pub fn surrogate_grad_tensor<T: Real>(x: &Tensor<T>, alpha: f64) -> Tensor<T> {
    let a = T::lit(alpha);
    x.map(|v| surrogate_grad(v, a))
}

/// Forward cache for one timestep.
#[derive(Debug, Clone)]
struct StepCache<T> {
    h: Vec<T>,
    f: Vec<T>,
    s: Vec<T>,
    /// Spike value that entered the reset equation (differs from `s` only
    /// when reset paths are frozen for a detached gradient check).
    s_reset: Option<Vec<T>>,
    /// Activation pieces, present only when they were pinned.
    branch: Option<Vec<bool>>,
}

/// Per-step gradients returned by [`NeuronState::backward_step`].
#[derive(Debug)]
pub struct StepGrads<T> {
    pub input: Tensor<T>,
    pub v_prev: Tensor<T>,
    pub k: T,
}

/// Membrane state of one spiking layer, its shared scale `k` and the BPTT caches.
#[derive(Debug, Clone)]
pub struct NeuronState<T> {
    pub cfg: SpikingLayerConfig,
    pub k: Param<T>,
    v: Option<Tensor<T>>,
    caches: Vec<StepCache<T>>,
    frozen_reset: Option<Vec<Vec<T>>>,
    pinned_branch: Option<Vec<Vec<bool>>>,
    /// Per-timestep contributions to `k.grad` from the last backward pass,
    /// in forward time order.
    pub k_grad_per_step: Vec<T>,
    stats: SpikeStats,
}

/// Firing statistics accumulated since the last [`NeuronState::clear_stats`].
#[derive(Debug, Clone, Default)]
pub struct SpikeStats {
    /// Sum of spikes per neuron position (summed over batch and time).
    pub per_neuron: Vec<f64>,
    /// Number of (sample, timestep) observations folded into `per_neuron`.
    pub observations: usize,
    pub min_v: f64,
    pub max_v: f64,
}

impl SpikeStats {
    pub fn mean_rate(&self) -> f64 {
        if self.observations == 0 || self.per_neuron.is_empty() {
            return 0.0;
        }
        self.per_neuron.iter().sum::<f64>() / (self.observations * self.per_neuron.len()) as f64
    }

    pub fn neuron_rates(&self) -> Vec<f64> {
        let obs = self.observations.max(1) as f64;
        self.per_neuron.iter().map(|&c| c / obs).collect()
    }
}

impl<T: Real> NeuronState<T> {
    pub fn new(cfg: SpikingLayerConfig) -> Result<Self> {
        cfg.validate()?;
        let k = Param::scalar(T::lit(cfg.k_init));
        Ok(Self {
            cfg,
            k,
            v: None,
            caches: Vec::new(),
            frozen_reset: None,
            pinned_branch: None,
            k_grad_per_step: Vec::new(),
            stats: SpikeStats {
                min_v: f64::INFINITY,
                max_v: f64::NEG_INFINITY,
                ..Default::default()
            },
        })
    }

    pub fn k_value(&self) -> T {
        match self.cfg.kind {
            NeuronKind::Lif => T::one(),
            _ => self.k.value.item(),
        }
    }

    /// Current post-reset potential, if any step has run since the last reset.
    pub fn potential(&self) -> Option<&Tensor<T>> {
        self.v.as_ref()
    }

    pub fn steps_cached(&self) -> usize {
        self.caches.len()
    }

    pub fn stats(&self) -> &SpikeStats {
        &self.stats
    }

    pub fn clear_stats(&mut self) {
        self.stats = SpikeStats {
            min_v: f64::INFINITY,
            max_v: f64::NEG_INFINITY,
            ..Default::default()
        };
    }

    /// Restore `V = V_reset` and drop time caches; `k` is a parameter and persists.
    pub fn reset(&mut self) {
        self.v = None;
        self.caches.clear();
    }

    /// Pin the spike values used inside the reset equation to the given
    /// per-timestep tensors (relaxed gradient checks with detached reset).
    pub fn freeze_reset(&mut self, spikes: Option<Vec<Vec<T>>>) {
        self.frozen_reset = spikes;
    }

    /// Pin (or with `None`, release) which activation piece each neuron
    /// uses at each timestep, as reported by [`Self::cached_branches`].
    pub fn pin_branches(&mut self, branches: Option<Vec<Vec<bool>>>) {
        self.pinned_branch = branches;
    }

    /// Activation piece (`k H_t > 0`) taken by each neuron in the current
    /// forward pass, per timestep.
    pub fn cached_branches(&self) -> Vec<Vec<bool>> {
        let k = self.k_value();
        self.caches
            .iter()
            .map(|c| match &c.branch {
                Some(b) => b.clone(),
                None => c.h.iter().map(|&h| k * h > T::zero()).collect(),
            })
            .collect()
    }

    /// Spike outputs cached by the current forward pass, per timestep.
    pub fn cached_spikes(&self) -> Vec<Vec<T>> {
        self.caches.iter().map(|c| c.s.clone()).collect()
    }

    pub fn clamp_k(&mut self) {
        let v = self.k.value.item().as_f64().clamp(self.cfg.k_min, self.cfg.k_max);
        self.k.value = Tensor::scalar(T::lit(v));
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if let Some(v) = &self.v {
            x.expect_same_shape("neuron", v)?;
        }
        Ok(())
    }

    fn prev_v(&self, i: usize) -> T {
        match &self.v {
            Some(v) => v.data()[i],
            None => T::lit(self.cfg.v_reset),
        }
    }

    /// Membrane charge `H_t` for input `x`, without advancing the state.
    pub fn charge(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let inv_tau = T::one() / T::lit(self.cfg.tau);
        let v_reset = T::lit(self.cfg.v_reset);
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &xi)| {
                let v = self.prev_v(i);
                v + (v_reset - v) * inv_tau + xi * inv_tau
            })
            .collect();
        Tensor::new(x.shape(), data)
    }

    /// LIF firing and hard reset: returns `(S_t, V_t)`.
    pub fn fire_reset_lif(&self, h: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
        let v_th = T::lit(self.cfg.v_th);
        let v_reset = T::lit(self.cfg.v_reset);
        let s = h.map(|v| if v > v_th { T::one() } else { T::zero() });
        let v = h.map(|v| if v > v_th { v_reset } else { v });
        (s, v)
    }

    /// KLIF firing and reset: returns `(F_t, S_t, V_t)`.
    pub fn fire_reset_klif(&self, h: &Tensor<T>) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
        self.fire_scaled(h, false)
    }

    /// KLIF* firing and reset, retaining `F_t / k`: returns `(F_t, S_t, V_t)`.
    pub fn fire_reset_klif_star(&self, h: &Tensor<T>) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
        self.fire_scaled(h, true)
    }

    fn fire_scaled(&self, h: &Tensor<T>, unscale: bool) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
        let k = self.k_value();
        let v_th = T::lit(self.cfg.v_th);
        let v_reset = T::lit(self.cfg.v_reset);
        let act = self.cfg.activation;
        let f = h.map(|v| act.eval(k * v).0);
        let s = f.map(|v| if v > v_th { T::one() } else { T::zero() });
        let v = f.map(|v| {
            if v > v_th {
                v_reset
            } else if unscale {
                v / k
            } else {
                v
            }
        });
        (f, s, v)
    }

    /// Soft spike `g(F_t - V_th)` for the relaxed forward.
    pub fn relaxed_forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let h = self.charge(x)?;
        let k = self.k_value();
        let v_th = T::lit(self.cfg.v_th);
        let alpha = T::lit(self.cfg.alpha);
        let act = self.cfg.activation;
        Ok(h.map(|v| {
            let f = match self.cfg.kind {
                NeuronKind::Lif => v,
                _ => act.eval(k * v).0,
            };
            relaxed_spike(f - v_th, alpha)
        }))
    }

    /// Advance one timestep and cache what the backward pass needs.
    pub fn step(&mut self, x: &Tensor<T>, mode: FireMode) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let n = x.numel();
        let cfg = &self.cfg;
        let inv_tau = T::one() / T::lit(cfg.tau);
        let v_th = T::lit(cfg.v_th);
        let v_reset = T::lit(cfg.v_reset);
        let alpha = T::lit(cfg.alpha);
        let k = self.k_value();
        let act = cfg.activation;
        let kind = cfg.kind;
        let t = self.caches.len();
        let frozen = self.frozen_reset.as_ref().and_then(|f| f.get(t)).cloned();
        if let Some(fr) = &frozen {
            if fr.len() != n {
                return Err(Error::shape("neuron", "frozen reset spikes", n, fr.len()));
            }
        }
        let branch = self.pinned_branch.as_ref().and_then(|b| b.get(t)).cloned();
        if let Some(b) = &branch {
            if b.len() != n {
                return Err(Error::shape("neuron", "pinned activation pieces", n, b.len()));
            }
        }

        let rest;
        let v_prev: &[T] = match &self.v {
            Some(v) => v.data(),
            None => {
                rest = vec![v_reset; n];
                &rest
            }
        };
        let mut h = Vec::with_capacity(n);
        let mut f = Vec::with_capacity(n);
        let mut s = Vec::with_capacity(n);
        let mut v_new = Vec::with_capacity(n);
        for (i, (&xi, &v)) in x.data().iter().zip(v_prev).enumerate() {
            let hi = v + (v_reset - v) * inv_tau + xi * inv_tau;
            let fi = match (kind, &branch) {
                (NeuronKind::Lif, _) => hi,
                (_, Some(b)) => act.eval_branch(k * hi, b[i]).0,
                (_, None) => act.eval(k * hi).0,
            };
            let si = match mode {
                FireMode::Hard => {
                    if fi > v_th {
                        T::one()
                    } else {
                        T::zero()
                    }
                }
                FireMode::Relaxed => relaxed_spike(fi - v_th, alpha),
            };
            let sr = frozen.as_ref().map_or(si, |fr| fr[i]);
            let retained = match kind {
                NeuronKind::KlifStar => fi / k,
                _ => fi,
            };
            // Exact for hard spikes: a firing neuron lands on v_reset.
            let vi = if mode == FireMode::Hard && frozen.is_none() {
                if si > T::zero() {
                    v_reset
                } else {
                    retained
                }
            } else {
                retained * (T::one() - sr) + v_reset * sr
            };
            h.push(hi);
            f.push(fi);
            s.push(si);
            v_new.push(vi);
        }

        let spikes = Tensor::new(x.shape(), s.clone())?;
        let v_t = Tensor::new(x.shape(), v_new)?;
        v_t.ensure_finite("neuron_step")?;
        self.record_stats(&spikes, &v_t);
        self.v = Some(v_t);
        self.caches.push(StepCache {
            h,
            f,
            s,
            s_reset: frozen,
            branch,
        });
        Ok(spikes)
    }

    fn record_stats(&mut self, spikes: &Tensor<T>, v: &Tensor<T>) {
        let batch = spikes.shape()[0];
        let per = spikes.numel() / batch;
        if self.stats.per_neuron.len() != per {
            self.stats.per_neuron = vec![0.0; per];
            self.stats.observations = 0;
        }
        for sample in spikes.data().chunks(per) {
            for (acc, &s) in self.stats.per_neuron.iter_mut().zip(sample) {
                *acc += s.as_f64();
            }
        }
        self.stats.observations += batch;
        for &vi in v.data() {
            let vf = vi.as_f64();
            self.stats.min_v = self.stats.min_v.min(vf);
            self.stats.max_v = self.stats.max_v.max(vf);
        }
    }

    /// Reverse one timestep (the most recent cached one).
    ///
    /// `grad_s` is `dL/dS_t` from the next layer, `grad_v` is `dL/dV_t`
    /// carried back from timestep `t + 1` (`None` at the final step).
    pub fn backward_step(&mut self, grad_s: &Tensor<T>, grad_v: Option<&Tensor<T>>) -> Result<StepGrads<T>> {
        let cache = self.caches.pop().ok_or(Error::CacheConsumed("neuron backward_step"))?;
        let n = cache.h.len();
        if grad_s.numel() != n {
            return Err(Error::shape("neuron backward_step", "grad_s elements", n, grad_s.numel()));
        }
        if let Some(gv) = grad_v {
            if gv.numel() != n {
                return Err(Error::shape("neuron backward_step", "grad_v elements", n, gv.numel()));
            }
        }
        let cfg = &self.cfg;
        let inv_tau = T::one() / T::lit(cfg.tau);
        let leak = T::one() - inv_tau;
        let v_th = T::lit(cfg.v_th);
        let v_reset = T::lit(cfg.v_reset);
        let alpha = T::lit(cfg.alpha);
        let k = self.k_value();
        let act = cfg.activation;
        let kind = cfg.kind;
        let detach = cfg.detach_reset;
        let perturb = if cfg.break_surrogate { T::lit(1.1) } else { T::one() };

        let mut gx = Vec::with_capacity(n);
        let mut gvp = Vec::with_capacity(n);
        let mut gk = T::zero();
        for i in 0..n {
            let (hi, fi, si) = (cache.h[i], cache.f[i], cache.s[i]);
            let sr = cache.s_reset.as_ref().map_or(si, |r| r[i]);
            let gsi = grad_s.data()[i];
            let gvi = grad_v.map_or(T::zero(), |g| g.data()[i]);
            let retained = match kind {
                NeuronKind::KlifStar => fi / k,
                _ => fi,
            };
            let g_spike = if detach {
                gsi
            } else {
                gsi + gvi * (v_reset - retained)
            };
            let g_retained = gvi * (T::one() - sr);
            let sg = surrogate_grad(fi - v_th, alpha) * perturb;
            let gh = match kind {
                NeuronKind::Lif => g_spike * sg + g_retained,
                NeuronKind::Klif | NeuronKind::KlifStar => {
                    let mut gf = g_spike * sg;
                    if kind == NeuronKind::KlifStar {
                        gf += g_retained / k;
                        gk -= g_retained * fi / (k * k);
                    } else {
                        gf += g_retained;
                    }
                    let (_, dact) = match &cache.branch {
                        Some(b) => act.eval_branch(k * hi, b[i]),
                        None => act.eval(k * hi),
                    };
                    let gz = gf * dact;
                    gk += gz * hi;
                    gz * k
                }
            };
            gx.push(gh * inv_tau);
            gvp.push(gh * leak);
        }
        let shape = grad_s.shape();
        let grads = StepGrads {
            input: Tensor::new(shape, gx)?,
            v_prev: Tensor::new(shape, gvp)?,
            k: gk,
        };
        grads.input.ensure_finite("neuron_backward")?;
        Ok(grads)
    }

    /// Run `xs` through the layer for `xs.len()` timesteps.
    pub fn forward_seq(&mut self, xs: &[Tensor<T>], mode: FireMode) -> Result<Vec<Tensor<T>>> {
        xs.iter().map(|x| self.step(x, mode)).collect()
    }

    /// Full BPTT over the cached sequence. Accumulates into `k.grad` (plain
    /// sum over neurons and timesteps) and returns `dL/dX_t` for every `t`.
    pub fn backward_seq(&mut self, grad_spikes: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
        if grad_spikes.len() != self.caches.len() {
            return Err(Error::CacheConsumed("neuron backward_seq"));
        }
        let steps = grad_spikes.len();
        let mut gx = vec![None; steps];
        let mut per_step = vec![T::zero(); steps];
        let mut carry: Option<Tensor<T>> = None;
        for t in (0..steps).rev() {
            let g = self.backward_step(&grad_spikes[t], carry.as_ref())?;
            per_step[t] = g.k;
            carry = Some(g.v_prev);
            gx[t] = Some(g.input);
        }
        let total: T = per_step.iter().copied().sum();
        if self.cfg.kind != NeuronKind::Lif {
            let cur = self.k.grad.item();
            self.k.grad = Tensor::scalar(cur + total);
        }
        self.k_grad_per_step = per_step;
        Ok(gx.into_iter().map(|g| g.expect("filled")).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t1(v: f64) -> Tensor<f64> {
        Tensor::new(&[1, 1], vec![v]).unwrap()
    }

    fn state(kind: NeuronKind, k: f64) -> NeuronState<f64> {
        let cfg = SpikingLayerConfig {
            kind,
            k_init: k,
            ..SpikingLayerConfig::default()
        };
        NeuronState::new(cfg).unwrap()
    }

    fn with_v(mut s: NeuronState<f64>, v: f64) -> NeuronState<f64> {
        s.v = Some(t1(v));
        s
    }

    #[test]
    fn charge_examples() {
        let s = state(NeuronKind::Lif, 1.0);
        assert_eq!(s.charge(&t1(3.0)).unwrap().item(), 1.5);
        assert_eq!(s.charge(&t1(0.0)).unwrap().item(), 0.0);
        let s = with_v(state(NeuronKind::Lif, 1.0), 0.8);
        assert!((s.charge(&t1(0.0)).unwrap().item() - 0.4).abs() < 1e-15);
    }

    #[test]
    fn charge_rejects_shape_mismatch() {
        let mut s = state(NeuronKind::Lif, 1.0);
        s.step(&Tensor::zeros(&[1, 2]), FireMode::Hard).unwrap();
        assert!(s.charge(&Tensor::zeros(&[1, 3])).is_err());
    }

    #[test]
    fn lif_fire_reset_examples() {
        let s = state(NeuronKind::Lif, 1.0);
        let (sp, v) = s.fire_reset_lif(&t1(1.5));
        assert_eq!((sp.item(), v.item()), (1.0, 0.0));
        let (sp, v) = s.fire_reset_lif(&t1(1.0));
        assert_eq!((sp.item(), v.item()), (0.0, 1.0));
        let (sp, v) = s.fire_reset_lif(&t1(0.4));
        assert_eq!((sp.item(), v.item()), (0.0, 0.4));
    }

    #[test]
    fn klif_fire_reset_examples() {
        let one = state(NeuronKind::Klif, 1.0);
        let (f, sp, v) = one.fire_reset_klif(&t1(1.5));
        let (lsp, lv) = one.fire_reset_lif(&t1(1.5));
        assert_eq!((f.item(), sp.item(), v.item()), (1.5, lsp.item(), lv.item()));

        let two = state(NeuronKind::Klif, 2.0);
        let (f, sp, v) = two.fire_reset_klif(&t1(0.6));
        assert_eq!((f.item(), sp.item(), v.item()), (1.2, 1.0, 0.0));

        let (f, sp, v) = one.fire_reset_klif(&t1(-1.0));
        assert_eq!((f.item(), sp.item(), v.item()), (0.0, 0.0, 0.0));
    }

    #[test]
    fn klif_star_examples() {
        let two = state(NeuronKind::KlifStar, 2.0);
        let (f, sp, v) = two.fire_reset_klif_star(&t1(0.4));
        assert_eq!((f.item(), sp.item(), v.item()), (0.8, 0.0, 0.4));
        let (f, sp, v) = two.fire_reset_klif_star(&t1(0.6));
        assert_eq!((f.item(), sp.item(), v.item()), (1.2, 1.0, 0.0));

        let one_star = state(NeuronKind::KlifStar, 1.0);
        let one = state(NeuronKind::Klif, 1.0);
        for h in [-0.7, 0.3, 0.99, 1.4] {
            let a = one_star.fire_reset_klif_star(&t1(h));
            let b = one.fire_reset_klif(&t1(h));
            assert_eq!((a.0.item(), a.1.item(), a.2.item()), (b.0.item(), b.1.item(), b.2.item()));
        }
    }

    #[test]
    fn surrogate_values() {
        assert!((surrogate_grad(0.0f64, 2.0) - 1.0).abs() < 1e-15);
        assert!((surrogate_grad(1.0 / PI, 2.0) - 0.5).abs() < 1e-15);
        assert!(surrogate_grad(1e6f64, 2.0) < 1e-11);
        assert!(surrogate_grad(-1e6f64, 2.0) < 1e-11);
        let t = surrogate_grad_tensor(&Tensor::new(&[2], vec![0.0f32, 1e4]).unwrap(), 2.0);
        assert_eq!(t.data()[0], 1.0);
    }

    #[test]
    fn relaxed_spike_midpoint_and_saturation() {
        assert_eq!(relaxed_spike(0.0f64, 2.0), 0.5);
        assert!(relaxed_spike(1e9f64, 2.0) > 1.0 - 1e-9);
        assert!(relaxed_spike(-1e9f64, 2.0) < 1e-9);
    }

    #[test]
    fn relaxed_primitive_derivative_is_surrogate() {
        let mut rng = ChaCha8Rng::seed_from_u64(100);
        for _ in 0..100 {
            let x: f64 = rng.gen_range(-3.0..3.0);
            let e = 1e-5;
            let num = (relaxed_spike(x + e, 2.0) - relaxed_spike(x - e, 2.0)) / (2.0 * e);
            assert!((num - surrogate_grad(x, 2.0)).abs() < 1e-6);
        }
    }

    #[test]
    fn relaxed_forward_matches_relaxed_step() {
        let mut s = state(NeuronKind::Klif, 1.7);
        let x = Tensor::new(&[1, 3], vec![0.5, 2.5, -1.0]).unwrap();
        let soft = s.relaxed_forward(&x).unwrap();
        let stepped = s.step(&x, FireMode::Relaxed).unwrap();
        assert_eq!(soft, stepped);
        assert!(soft.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn clamp_k_examples() {
        for (k, want) in [(0.3, 0.5), (7.0, 5.0), (1.7, 1.7)] {
            let mut s = state(NeuronKind::Klif, 1.0);
            s.k.value = Tensor::scalar(k);
            s.clamp_k();
            assert_eq!(s.k.value.item(), want);
        }
    }

    #[test]
    fn config_validation() {
        assert!(SpikingLayerConfig::default().validate().is_ok());
        let bad = [
            SpikingLayerConfig { tau: 1.0, ..Default::default() },
            SpikingLayerConfig { v_th: 0.0, ..Default::default() },
            SpikingLayerConfig { alpha: 0.0, ..Default::default() },
            SpikingLayerConfig { k_init: 6.0, ..Default::default() },
            SpikingLayerConfig { k_min: 2.0, ..Default::default() },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }

    #[test]
    fn detached_silent_neuron_gradient() {
        // S = 0, no downstream spike gradient: only the retained path carries gradient.
        let cfg = SpikingLayerConfig {
            k_init: 1.5,
            detach_reset: true,
            ..Default::default()
        };
        let mut s = NeuronState::<f64>::new(cfg).unwrap();
        let x = t1(0.6); // H = 0.3, F = 0.45 < 1
        let sp = s.step(&x, FireMode::Hard).unwrap();
        assert_eq!(sp.item(), 0.0);
        let gv = t1(0.8);
        let g = s.backward_step(&t1(0.0), Some(&gv)).unwrap();
        assert!((g.v_prev.item() - 0.8 * 1.5 * 0.5).abs() < 1e-15);
        assert!((g.input.item() - 0.8 * 1.5 * 0.5).abs() < 1e-15);
        assert!((g.k - 0.8 * 0.3).abs() < 1e-15);
    }

    #[test]
    fn rectifier_dead_zone_blocks_input_gradient() {
        let mut s = state(NeuronKind::Klif, 1.0);
        s.step(&t1(-2.0), FireMode::Hard).unwrap();
        let g = s.backward_step(&t1(1.0), Some(&t1(1.0))).unwrap();
        assert_eq!(g.input.item(), 0.0);
        assert_eq!(g.v_prev.item(), 0.0);
        assert_eq!(g.k, 0.0);
    }

    #[test]
    fn backward_without_cache_errors() {
        let mut s = state(NeuronKind::Klif, 1.0);
        assert!(matches!(
            s.backward_step(&t1(0.0), None),
            Err(Error::CacheConsumed(_))
        ));
    }

    /// Relaxed-mode loss over a sequence: sum_t <w_t, S_t>.
    fn seq_loss(cfg: &SpikingLayerConfig, k: f64, xs: &[Tensor<f64>], ws: &[Tensor<f64>], frozen: Option<Vec<Vec<f64>>>) -> f64 {
        let mut s = NeuronState::<f64>::new(SpikingLayerConfig { k_init: cfg.k_min, ..cfg.clone() }).unwrap();
        s.k.value = Tensor::scalar(k);
        s.freeze_reset(frozen);
        let out = s.forward_seq(xs, FireMode::Relaxed).unwrap();
        out.iter()
            .zip(ws)
            .map(|(o, w)| o.data().iter().zip(w.data()).map(|(a, b)| a * b).sum::<f64>())
            .sum()
    }

    fn check_layer_k_grad(kind: NeuronKind, act: Activation, detach: bool) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let cfg = SpikingLayerConfig {
            kind,
            activation: act,
            detach_reset: detach,
            ..Default::default()
        };
        let steps = 4;
        let shape = [3, 5];
        let rand = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| {
            Tensor::new(&shape, (0..15).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
        };
        let xs: Vec<_> = (0..steps).map(|_| rand(&mut rng, -1.0, 3.0)).collect();
        let ws: Vec<_> = (0..steps).map(|_| rand(&mut rng, -1.0, 1.0)).collect();
        let k = 1.3;

        let mut s = NeuronState::<f64>::new(SpikingLayerConfig { k_init: 1.0, ..cfg.clone() }).unwrap();
        s.k.value = Tensor::scalar(k);
        s.forward_seq(&xs, FireMode::Relaxed).unwrap();
        let frozen = detach.then(|| s.cached_spikes());
        s.freeze_reset(frozen.clone());
        s.backward_seq(&ws).unwrap();
        let analytic = s.k.grad.item();
        let per_step: f64 = s.k_grad_per_step.iter().sum();
        assert!((per_step - analytic).abs() <= 1e-12 * analytic.abs().max(1.0));

        let e = 1e-3;
        let num = (seq_loss(&cfg, k + e, &xs, &ws, frozen.clone()) - seq_loss(&cfg, k - e, &xs, &ws, frozen)) / (2.0 * e);
        (analytic - num).abs() / analytic.abs().max(num.abs()).max(1e-8)
    }

    #[test]
    fn layer_k_gradient_matches_finite_differences() {
        for kind in [NeuronKind::Klif, NeuronKind::KlifStar] {
            for act in [Activation::Relu, Activation::Celu, Activation::LeakyRelu, Activation::Identity] {
                for detach in [false, true] {
                    let err = check_layer_k_grad(kind, act, detach);
                    assert!(err < 1e-4, "{kind} {act} detach={detach}: {err}");
                }
            }
        }
    }

    #[test]
    fn lif_ignores_k() {
        let mut s = state(NeuronKind::Lif, 1.0);
        s.k.value = Tensor::scalar(3.0);
        assert_eq!(s.k_value(), 1.0);
        s.step(&t1(1.0), FireMode::Hard).unwrap();
        s.backward_seq(&[t1(1.0)]).unwrap();
        assert_eq!(s.k.grad.item(), 0.0);
    }

    #[test]
    fn reset_clears_state_but_keeps_k() {
        let mut s = state(NeuronKind::Klif, 2.0);
        s.step(&t1(1.0), FireMode::Hard).unwrap();
        s.reset();
        assert!(s.potential().is_none());
        assert_eq!(s.steps_cached(), 0);
        assert_eq!(s.k_value(), 2.0);
        s.reset();
        assert!(s.potential().is_none());
    }

    #[test]
    fn names_round_trip() {
        for k in [NeuronKind::Lif, NeuronKind::Klif, NeuronKind::KlifStar] {
            assert_eq!(k.to_string().parse::<NeuronKind>().unwrap(), k);
        }
        for a in [Activation::Relu, Activation::Celu, Activation::LeakyRelu, Activation::Identity] {
            assert_eq!(a.to_string().parse::<Activation>().unwrap(), a);
        }
        assert!("sigmoid".parse::<Activation>().is_err());
    }
}
