//! Network assembly, the forward pass over `T` timesteps, MSE loss and
//! backpropagation through time.
//!
//! Layers run layer-major: each convolution or fully connected layer sees
//! all `T·N` inputs of a forward at once (timestep-major along the leading
//! axis), and its spiking layer then walks the `T` timesteps in order.
//! Batch normalisation pools its statistics over those `T·N` samples.

use rand::Rng;

use crate::arch::{Layer, NetworkSpec};
use crate::codec::{decode, decode_backward, ConvParams, Encoder};
use crate::error::{Error, Result};
use crate::neuron::{FireMode, NeuronKind, NeuronState, SpikingLayerConfig};
use crate::ops::{
    batchnorm_backward, batchnorm_forward, conv2d_backward, conv2d_forward, linear_backward, linear_forward,
    maxpool2d_backward, maxpool2d_forward, maxpool2d_forward_pinned, BatchNorm, BatchNormCtx, Conv2dCtx, DropoutMask, LinearCtx,
    MaxPool2dCtx, Mode, DEFAULT_EPS, DEFAULT_MOMENTUM,
};
use crate::param::Param;
use crate::tensor::{Real, Tensor};

/// Everything needed to build a [`Network`].
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub arch: NetworkSpec,
    /// Input `[C, H, W]`.
    pub input: [usize; 3],
    pub neuron: SpikingLayerConfig,
    /// Dropout probability in front of every fully connected layer.
    pub dropout: f64,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl NetworkConfig {
    pub fn new(arch: NetworkSpec, input: [usize; 3], neuron: SpikingLayerConfig) -> Self {
        Self {
            arch,
            input,
            neuron,
            dropout: 0.5,
            bn_eps: DEFAULT_EPS,
            bn_momentum: DEFAULT_MOMENTUM,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FcParams<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Real> FcParams<T> {
    pub fn init(fan_in: usize, out: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Self {
            weight: Param::uniform(&[out, fan_in], bound, rng),
            bias: Param::uniform(&[out], bound, rng),
        }
    }
}

#[derive(Debug)]
pub enum BodyLayer<T> {
    Conv {
        conv: ConvParams<T>,
        bn: BatchNorm<T>,
        spk: NeuronState<T>,
    },
    MaxPool,
    Fc {
        fc: FcParams<T>,
        spk: NeuronState<T>,
    },
}

#[derive(Debug)]
enum Cache<T> {
    Conv {
        conv: Conv2dCtx<T>,
        bn: BatchNormCtx<T>,
    },
    Pool(MaxPool2dCtx),
    Fc(FcCache<T>),
}

#[derive(Debug)]
struct FcCache<T> {
    /// Shape of the layer input before flattening.
    input_shape: Vec<usize>,
    mask: Option<DropoutMask<T>>,
    linear: LinearCtx<T>,
}

/// Result of [`Network::forward`].
#[derive(Debug, Clone)]
pub struct Forward<T> {
    /// `[N, C]` time-averaged population rates.
    pub scores: Tensor<T>,
    pub predictions: Vec<usize>,
}

/// Per-layer diagnostics accumulated since the last [`Network::clear_stats`].
#[derive(Debug, Clone, PartialEq)]
pub struct LayerDiagnostics {
    pub name: String,
    pub k: f64,
    pub rate: f64,
    pub min_v: f64,
    pub max_v: f64,
}

/// A named trainable tensor. `k_bounds` is set for learnable `k` scalars,
/// which are projected back into the interval after each update.
pub struct ParamRef<'a, T> {
    pub name: String,
    pub param: &'a mut Param<T>,
    pub k_bounds: Option<(f64, f64)>,
}

#[derive(Debug)]
pub struct Network<T> {
    pub config: NetworkConfig,
    pub encoder: Encoder<T>,
    pub body: Vec<BodyLayer<T>>,
    pub decoder: FcParams<T>,
    pub decoder_spk: NeuronState<T>,
    caches: Vec<Cache<T>>,
    decoder_cache: Option<FcCache<T>>,
    pool_pins: Option<Vec<Vec<usize>>>,
    steps: usize,
    batch: usize,
}

/// Mean over `N·C` of `(score − onehot(label))²` and its gradient.
pub fn mse_loss<T: Real>(scores: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    scores.expect_rank("mse_loss", 2)?;
    let (n, c) = (scores.shape()[0], scores.shape()[1]);
    if labels.len() != n {
        return Err(Error::shape("mse_loss", "labels", n, labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::shape("mse_loss", "label (class count)", c, bad));
    }
    let count = T::from_usize(n * c).unwrap();
    let two = T::lit(2.0);
    let mut loss = T::zero();
    let mut grad = Vec::with_capacity(n * c);
    for (i, row) in scores.data().chunks(c).enumerate() {
        for (j, &s) in row.iter().enumerate() {
            let target = if labels[i] == j { T::one() } else { T::zero() };
            let d = s - target;
            loss += d * d;
            grad.push(two * d / count);
        }
    }
    Ok((loss / count, Tensor::new(&[n, c], grad)?))
}

fn spiking_steps<T: Real>(
    spk: &mut NeuronState<T>,
    input: &Tensor<T>,
    steps: usize,
    fire: FireMode,
) -> Result<Tensor<T>> {
    let xs = input.chunks(steps)?;
    let out = spk.forward_seq(&xs, fire)?;
    Tensor::concat(&out)
}

fn spiking_backward<T: Real>(spk: &mut NeuronState<T>, grad: &Tensor<T>, steps: usize) -> Result<Tensor<T>> {
    let gs = grad.chunks(steps)?;
    let gx = spk.backward_seq(&gs)?;
    Tensor::concat(&gx)
}

fn flatten<T: Real>(x: Tensor<T>) -> Result<Tensor<T>> {
    let n = x.shape()[0];
    let f = x.numel() / n;
    x.reshape(&[n, f])
}

/// One dropout mask per forward, reused at every timestep.
fn apply_mask<T: Real>(mask: Option<&DropoutMask<T>>, x: &Tensor<T>, steps: usize) -> Result<Tensor<T>> {
    match mask {
        None => Ok(x.clone()),
        Some(m) => {
            let parts: Result<Vec<_>> = x.chunks(steps)?.iter().map(|c| m.apply(c)).collect();
            Tensor::concat(&parts?)
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn fc_forward<T: Real>(
    fc: &FcParams<T>,
    x: Tensor<T>,
    steps: usize,
    dropout: f64,
    mode: Mode,
    rng: &mut impl Rng,
) -> Result<(Tensor<T>, FcCache<T>)> {
    let input_shape = x.shape().to_vec();
    let x = flatten(x)?;
    let mask = match mode {
        Mode::Train if dropout > 0.0 => Some(DropoutMask::sample(x.numel() / steps, dropout, rng)?),
        _ => None,
    };
    let dropped = apply_mask(mask.as_ref(), &x, steps)?;
    let (y, linear) = linear_forward(&dropped, &fc.weight.value, &fc.bias.value)?;
    Ok((
        y,
        FcCache {
            input_shape,
            mask,
            linear,
        },
    ))
}

fn fc_backward<T: Real>(fc: &mut FcParams<T>, cache: FcCache<T>, grad: &Tensor<T>, steps: usize) -> Result<Tensor<T>> {
    let g = linear_backward(cache.linear, grad)?;
    fc.weight.accumulate(&g.weight)?;
    fc.bias.accumulate(&g.bias)?;
    apply_mask(cache.mask.as_ref(), &g.input, steps)?.reshape(&cache.input_shape)
}

impl<T: Real> Network<T> {
    pub fn new(config: NetworkConfig, rng: &mut impl Rng) -> Result<Self> {
        config.neuron.validate()?;
        if !(0.0..1.0).contains(&config.dropout) {
            return Err(Error::Config(format!("dropout probability {} outside [0, 1)", config.dropout)));
        }
        let [c, mut h, mut w] = config.input;
        let bn = (config.bn_eps, config.bn_momentum);
        let spec = &config.arch;
        let enc_ch = spec.encoder_channels();
        let encoder = Encoder::new(c, enc_ch, spec.encoder.len(), config.neuron.clone(), bn, rng)?;
        let mut ch = enc_ch;
        let mut flat: Option<usize> = None;
        let mut body = Vec::new();
        for layer in spec.layers() {
            match layer {
                Layer::Conv(o) => {
                    body.push(BodyLayer::Conv {
                        conv: ConvParams::init(ch, o, rng),
                        bn: BatchNorm::new(o, bn.0, bn.1),
                        spk: NeuronState::new(config.neuron.clone())?,
                    });
                    ch = o;
                }
                Layer::MaxPool => {
                    if h % 2 != 0 || w % 2 != 0 {
                        return Err(Error::Config(format!("max pooling needs even spatial size, got {h}x{w}")));
                    }
                    h /= 2;
                    w /= 2;
                    body.push(BodyLayer::MaxPool);
                }
                Layer::Fc(g) => {
                    let fan_in = flat.unwrap_or(ch * h * w);
                    body.push(BodyLayer::Fc {
                        fc: FcParams::init(fan_in, g, rng),
                        spk: NeuronState::new(config.neuron.clone())?,
                    });
                    flat = Some(g);
                }
            }
        }
        let fan_in = flat.unwrap_or(ch * h * w);
        let decoder = FcParams::init(fan_in, spec.decoder_width, rng);
        let decoder_spk = NeuronState::new(config.neuron.clone())?;
        Ok(Self {
            config,
            encoder,
            body,
            decoder,
            decoder_spk,
            caches: Vec::new(),
            decoder_cache: None,
            pool_pins: None,
            steps: 0,
            batch: 0,
        })
    }

    pub fn classes(&self) -> usize {
        self.config.arch.classes()
    }

    /// `V := V_reset` in every spiking layer and drop all time caches; `k` persists.
    pub fn reset_states(&mut self) {
        self.encoder.spk.reset();
        self.encoder.clear_cache();
        for l in &mut self.body {
            match l {
                BodyLayer::Conv { spk, .. } | BodyLayer::Fc { spk, .. } => spk.reset(),
                BodyLayer::MaxPool => {}
            }
        }
        self.decoder_spk.reset();
        self.caches.clear();
        self.decoder_cache = None;
        self.steps = 0;
    }

    /// Run `steps` timesteps on a static image batch `[N, C, H, W]`. States
    /// are reset first, so each call is independent of earlier batches.
    pub fn forward(
        &mut self,
        images: &Tensor<T>,
        steps: usize,
        mode: Mode,
        fire: FireMode,
        rng: &mut impl Rng,
    ) -> Result<Forward<T>> {
        if steps == 0 {
            return Err(Error::Config("forward needs at least one timestep".into()));
        }
        images.expect_rank("forward", 4)?;
        let [c, h, w] = self.config.input;
        let s = images.shape();
        for (axis, (&e, &g)) in [c, h, w].iter().zip(&s[1..]).enumerate() {
            if e != g {
                return Err(Error::shape("forward", format!("image axis {}", axis + 1), e, g));
            }
        }
        self.reset_states();
        let dropout = self.config.dropout;
        let spikes = self.encoder.forward(images, steps, mode, fire)?;
        let mut x = Tensor::concat(&spikes)?;
        let mut pool_idx = 0;
        for layer in &mut self.body {
            match layer {
                BodyLayer::Conv { conv, bn, spk } => {
                    let (y, conv_ctx) = conv2d_forward(&x, &conv.weight.value, &conv.bias.value)?;
                    let (y, bn_ctx) = batchnorm_forward(&y, bn, mode)?;
                    x = spiking_steps(spk, &y, steps, fire)?;
                    self.caches.push(Cache::Conv {
                        conv: conv_ctx,
                        bn: bn_ctx,
                    });
                }
                BodyLayer::MaxPool => {
                    let (y, ctx) = match self.pool_pins.as_ref().and_then(|p| p.get(pool_idx)) {
                        Some(pin) => maxpool2d_forward_pinned(&x, pin)?,
                        None => maxpool2d_forward(&x)?,
                    };
                    pool_idx += 1;
                    x = y;
                    self.caches.push(Cache::Pool(ctx));
                }
                BodyLayer::Fc { fc, spk } => {
                    let (y, cache) = fc_forward(fc, x, steps, dropout, mode, rng)?;
                    x = spiking_steps(spk, &y, steps, fire)?;
                    self.caches.push(Cache::Fc(cache));
                }
            }
        }
        let (y, cache) = fc_forward(&self.decoder, x, steps, dropout, mode, rng)?;
        self.decoder_cache = Some(cache);
        let out = self.decoder_spk.forward_seq(&y.chunks(steps)?, fire)?;
        let (scores, predictions) = decode(&out, self.config.arch.population)?;
        self.steps = steps;
        self.batch = s[0];
        Ok(Forward { scores, predictions })
    }

    /// MSE against one-hot labels, then full BPTT through every cached
    /// timestep. Gradients accumulate into the parameters' `grad` fields.
    pub fn loss_and_backward(&mut self, scores: &Tensor<T>, labels: &[usize]) -> Result<T> {
        let cache = self.decoder_cache.take().ok_or(Error::CacheConsumed("network backward"))?;
        let steps = self.steps;
        if scores.shape() != [self.batch, self.classes()] {
            return Err(Error::shape("loss_and_backward", "scores rows", self.batch, scores.shape()[0]));
        }
        let (loss, g_scores) = mse_loss(scores, labels)?;
        let g_out = decode_backward(&g_scores, steps, self.config.arch.population)?;
        let g_out = vec![g_out; steps];
        let gx = self.decoder_spk.backward_seq(&g_out)?;
        let mut g = fc_backward(&mut self.decoder, cache, &Tensor::concat(&gx)?, steps)?;
        for layer in self.body.iter_mut().rev() {
            let cache = self.caches.pop().ok_or(Error::CacheConsumed("network backward"))?;
            g = match (layer, cache) {
                (BodyLayer::Conv { conv, bn, spk }, Cache::Conv { conv: cctx, bn: bctx }) => {
                    let g = spiking_backward(spk, &g, steps)?;
                    let gb = batchnorm_backward(bctx, &g)?;
                    bn.gamma.accumulate(&gb.gamma)?;
                    bn.beta.accumulate(&gb.beta)?;
                    let gc = conv2d_backward(cctx, &gb.input)?;
                    conv.weight.accumulate(&gc.weight)?;
                    conv.bias.accumulate(&gc.bias)?;
                    gc.input
                }
                (BodyLayer::MaxPool, Cache::Pool(ctx)) => maxpool2d_backward(ctx, &g)?,
                (BodyLayer::Fc { fc, spk }, Cache::Fc(cache)) => {
                    let g = spiking_backward(spk, &g, steps)?;
                    fc_backward(fc, cache, &g, steps)?
                }
                _ => return Err(Error::CacheConsumed("network backward (layer/cache mismatch)")),
            };
        }
        self.encoder.backward(&g.chunks(steps)?)?;
        Ok(loss)
    }

    pub fn spiking_layers(&self) -> Vec<&NeuronState<T>> {
        let mut out = vec![&self.encoder.spk];
        for l in &self.body {
            if let BodyLayer::Conv { spk, .. } | BodyLayer::Fc { spk, .. } = l {
                out.push(spk);
            }
        }
        out.push(&self.decoder_spk);
        out
    }

    pub fn spiking_layers_mut(&mut self) -> Vec<&mut NeuronState<T>> {
        let mut out = vec![&mut self.encoder.spk];
        for l in &mut self.body {
            if let BodyLayer::Conv { spk, .. } | BodyLayer::Fc { spk, .. } = l {
                out.push(spk);
            }
        }
        out.push(&mut self.decoder_spk);
        out
    }

    pub fn k_values(&self) -> Vec<f64> {
        self.spiking_layers().iter().map(|s| s.k_value().as_f64()).collect()
    }

    pub fn layer_rates(&self) -> Vec<f64> {
        self.spiking_layers().iter().map(|s| s.stats().mean_rate()).collect()
    }

    pub fn diagnostics(&self) -> Vec<LayerDiagnostics> {
        self.spiking_layers()
            .iter()
            .enumerate()
            .map(|(i, s)| LayerDiagnostics {
                name: format!("spk{i}"),
                k: s.k_value().as_f64(),
                rate: s.stats().mean_rate(),
                min_v: s.stats().min_v,
                max_v: s.stats().max_v,
            })
            .collect()
    }

    /// Histogram of per-neuron firing rates for each spiking layer, `bins`
    /// equal-width bins over `[0, 1]` (a rate of exactly 1 falls in the last bin).
    pub fn rate_histograms(&self, bins: usize) -> Vec<Vec<usize>> {
        self.spiking_layers()
            .iter()
            .map(|s| {
                let mut h = vec![0; bins];
                for r in s.stats().neuron_rates() {
                    let b = ((r * bins as f64) as usize).min(bins - 1);
                    h[b] += 1;
                }
                h
            })
            .collect()
    }

    pub fn clear_stats(&mut self) {
        for s in self.spiking_layers_mut() {
            s.clear_stats();
        }
    }

    /// Reset-path spikes cached by the last forward, per spiking layer and timestep.
    pub fn cached_reset_spikes(&self) -> Vec<Vec<Vec<T>>> {
        self.spiking_layers().iter().map(|s| s.cached_spikes()).collect()
    }

    /// Pin (or with `None`, release) the reset-path spikes of every layer.
    pub fn freeze_resets(&mut self, spikes: Option<Vec<Vec<Vec<T>>>>) {
        let layers = self.spiking_layers_mut();
        match spikes {
            None => layers.into_iter().for_each(|s| s.freeze_reset(None)),
            Some(all) => layers.into_iter().zip(all).for_each(|(s, f)| s.freeze_reset(Some(f))),
        }
    }

    /// Activation piece of every neuron, per spiking layer and timestep.
    pub fn cached_activation_branches(&self) -> Vec<Vec<Vec<bool>>> {
        self.spiking_layers().iter().map(|s| s.cached_branches()).collect()
    }

    /// Pin (or with `None`, release) the activation pieces of every layer.
    pub fn pin_activation_branches(&mut self, branches: Option<Vec<Vec<Vec<bool>>>>) {
        let layers = self.spiking_layers_mut();
        match branches {
            None => layers.into_iter().for_each(|s| s.pin_branches(None)),
            Some(all) => layers.into_iter().zip(all).for_each(|(s, b)| s.pin_branches(Some(b))),
        }
    }

    /// Window choices of every max-pooling layer in the last forward.
    pub fn cached_pool_choices(&self) -> Vec<Vec<usize>> {
        self.caches
            .iter()
            .filter_map(|c| match c {
                Cache::Pool(ctx) => Some(ctx.argmax().to_vec()),
                _ => None,
            })
            .collect()
    }

    /// Pin (or with `None`, release) the window choices of every max-pooling layer.
    pub fn pin_pooling(&mut self, choices: Option<Vec<Vec<usize>>>) {
        self.pool_pins = choices;
    }

    pub fn set_break_surrogate(&mut self, on: bool) {
        self.config.neuron.break_surrogate = on;
        for s in self.spiking_layers_mut() {
            s.cfg.break_surrogate = on;
        }
    }

    /// Every trainable tensor with a stable name. `k` scalars are included
    /// only for neurons that have a learnable `k`.
    pub fn params_mut(&mut self) -> Vec<ParamRef<'_, T>> {
        fn p<'a, T>(name: String, param: &'a mut Param<T>) -> ParamRef<'a, T> {
            ParamRef {
                name,
                param,
                k_bounds: None,
            }
        }
        fn k<'a, T>(idx: usize, spk: &'a mut NeuronState<T>, out: &mut Vec<ParamRef<'a, T>>) {
            if spk.cfg.has_learnable_k() {
                let bounds = Some((spk.cfg.k_min, spk.cfg.k_max));
                out.push(ParamRef {
                    name: format!("spk{idx}.k"),
                    param: &mut spk.k,
                    k_bounds: bounds,
                });
            }
        }
        let mut out = Vec::new();
        let mut spk_idx = 0;
        for (i, b) in self.encoder.branches.iter_mut().enumerate() {
            out.push(p(format!("enc.branch{i}.weight"), &mut b.weight));
            out.push(p(format!("enc.branch{i}.bias"), &mut b.bias));
        }
        out.push(p("enc.bn.gamma".into(), &mut self.encoder.bn.gamma));
        out.push(p("enc.bn.beta".into(), &mut self.encoder.bn.beta));
        k(spk_idx, &mut self.encoder.spk, &mut out);
        for (i, l) in self.body.iter_mut().enumerate() {
            match l {
                BodyLayer::Conv { conv, bn, spk } => {
                    spk_idx += 1;
                    out.push(p(format!("conv{i}.weight"), &mut conv.weight));
                    out.push(p(format!("conv{i}.bias"), &mut conv.bias));
                    out.push(p(format!("conv{i}.bn.gamma"), &mut bn.gamma));
                    out.push(p(format!("conv{i}.bn.beta"), &mut bn.beta));
                    k(spk_idx, spk, &mut out);
                }
                BodyLayer::Fc { fc, spk } => {
                    spk_idx += 1;
                    out.push(p(format!("fc{i}.weight"), &mut fc.weight));
                    out.push(p(format!("fc{i}.bias"), &mut fc.bias));
                    k(spk_idx, spk, &mut out);
                }
                BodyLayer::MaxPool => {}
            }
        }
        out.push(p("dec.fc.weight".into(), &mut self.decoder.weight));
        out.push(p("dec.fc.bias".into(), &mut self.decoder.bias));
        k(spk_idx + 1, &mut self.decoder_spk, &mut out);
        out
    }

    pub fn zero_grad(&mut self) {
        for r in self.params_mut() {
            r.param.zero_grad();
        }
        for s in self.spiking_layers_mut() {
            s.k.zero_grad();
        }
    }

    /// Every persistent tensor: parameters, batch-norm running statistics
    /// and the `k` of every spiking layer (as rank-0 tensors).
    pub fn named_tensors(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        let bn_entries = |prefix: &str, bn: &BatchNorm<T>, out: &mut Vec<(String, Tensor<T>)>| {
            out.push((format!("{prefix}.gamma"), bn.gamma.value.clone()));
            out.push((format!("{prefix}.beta"), bn.beta.value.clone()));
            out.push((format!("{prefix}.running_mean"), bn.running_mean.clone()));
            out.push((format!("{prefix}.running_var"), bn.running_var.clone()));
        };
        for (i, b) in self.encoder.branches.iter().enumerate() {
            out.push((format!("enc.branch{i}.weight"), b.weight.value.clone()));
            out.push((format!("enc.branch{i}.bias"), b.bias.value.clone()));
        }
        bn_entries("enc.bn", &self.encoder.bn, &mut out);
        for (i, l) in self.body.iter().enumerate() {
            match l {
                BodyLayer::Conv { conv, bn, .. } => {
                    out.push((format!("conv{i}.weight"), conv.weight.value.clone()));
                    out.push((format!("conv{i}.bias"), conv.bias.value.clone()));
                    bn_entries(&format!("conv{i}.bn"), bn, &mut out);
                }
                BodyLayer::Fc { fc, .. } => {
                    out.push((format!("fc{i}.weight"), fc.weight.value.clone()));
                    out.push((format!("fc{i}.bias"), fc.bias.value.clone()));
                }
                BodyLayer::MaxPool => {}
            }
        }
        out.push(("dec.fc.weight".into(), self.decoder.weight.value.clone()));
        out.push(("dec.fc.bias".into(), self.decoder.bias.value.clone()));
        for (i, s) in self.spiking_layers().iter().enumerate() {
            out.push((format!("spk{i}.k"), s.k.value.clone()));
        }
        out
    }

    /// Overwrite every persistent tensor from `entries`, which must name
    /// exactly the tensors of [`Self::named_tensors`] with matching shapes.
    pub fn load_named(&mut self, entries: Vec<(String, Tensor<T>)>) -> Result<()> {
        let expected = self.named_tensors();
        let mut map: std::collections::HashMap<String, Tensor<T>> = entries.into_iter().collect();
        for (name, t) in &expected {
            let got = map.get(name).ok_or_else(|| Error::CheckpointMismatch {
                name: name.clone(),
                msg: "missing from checkpoint".into(),
            })?;
            if got.shape() != t.shape() {
                return Err(Error::CheckpointMismatch {
                    name: name.clone(),
                    msg: format!("shape {:?} in checkpoint, network expects {:?}", got.shape(), t.shape()),
                });
            }
        }
        if map.len() != expected.len() {
            let extra = map
                .keys()
                .find(|k| !expected.iter().any(|(n, _)| n == *k))
                .cloned()
                .unwrap_or_default();
            return Err(Error::CheckpointMismatch {
                name: extra,
                msg: "not present in this network".into(),
            });
        }
        let mut take = |name: &str| map.remove(name).expect("checked above");
        for (i, b) in self.encoder.branches.iter_mut().enumerate() {
            b.weight.value = take(&format!("enc.branch{i}.weight"));
            b.bias.value = take(&format!("enc.branch{i}.bias"));
        }
        let load_bn = |prefix: &str, bn: &mut BatchNorm<T>, take: &mut dyn FnMut(&str) -> Tensor<T>| {
            bn.gamma.value = take(&format!("{prefix}.gamma"));
            bn.beta.value = take(&format!("{prefix}.beta"));
            bn.running_mean = take(&format!("{prefix}.running_mean"));
            bn.running_var = take(&format!("{prefix}.running_var"));
        };
        load_bn("enc.bn", &mut self.encoder.bn, &mut take);
        for (i, l) in self.body.iter_mut().enumerate() {
            match l {
                BodyLayer::Conv { conv, bn, .. } => {
                    conv.weight.value = take(&format!("conv{i}.weight"));
                    conv.bias.value = take(&format!("conv{i}.bias"));
                    load_bn(&format!("conv{i}.bn"), bn, &mut take);
                }
                BodyLayer::Fc { fc, .. } => {
                    fc.weight.value = take(&format!("fc{i}.weight"));
                    fc.bias.value = take(&format!("fc{i}.bias"));
                }
                BodyLayer::MaxPool => {}
            }
        }
        self.decoder.weight.value = take("dec.fc.weight");
        self.decoder.bias.value = take("dec.fc.bias");
        let ks: Vec<Tensor<T>> = (0..self.spiking_layers().len()).map(|i| take(&format!("spk{i}.k"))).collect();
        for (s, k) in self.spiking_layers_mut().into_iter().zip(ks) {
            s.k.value = k;
        }
        self.reset_states();
        Ok(())
    }

    /// Whether every spiking layer is a plain LIF (no `k` in the dynamics).
    pub fn is_lif(&self) -> bool {
        self.config.neuron.kind == NeuronKind::Lif
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::parse_arch;
    use crate::neuron::Activation;
    use crate::testutil::rand_tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const TINY: &str = "(4C3+4C3+4C3)(encoding)-8C3-MP2-(20FC-AP10)(decoding)";

    fn tiny(neuron: SpikingLayerConfig, seed: u64) -> Network<f64> {
        let cfg = NetworkConfig::new(parse_arch(TINY).unwrap(), [1, 6, 6], neuron);
        Network::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn mse_examples() {
        let s = Tensor::new(&[1, 2], vec![1.0f64, 0.0]).unwrap();
        assert_eq!(mse_loss(&s, &[1]).unwrap().0, 1.0);
        let (l, g) = mse_loss(&s, &[0]).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.data().iter().all(|&v| v == 0.0));
        assert!(mse_loss(&s, &[2]).is_err());
    }

    #[test]
    fn dead_network_scores_zero() {
        let mut net = tiny(SpikingLayerConfig::default(), 1);
        for r in net.params_mut() {
            if r.k_bounds.is_none() && !r.name.contains("gamma") {
                r.param.value.fill(0.0);
            }
        }
        let x = rand_tensor::<f64>(&mut ChaCha8Rng::seed_from_u64(2), &[2, 1, 6, 6]);
        let out = net.forward(&x, 1, Mode::Eval, FireMode::Hard, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(out.scores.data().iter().all(|&v| v == 0.0));
        assert_eq!(out.predictions, vec![0, 0]);
    }

    #[test]
    fn zero_timesteps_rejected() {
        let mut net = tiny(SpikingLayerConfig::default(), 1);
        let x = Tensor::zeros(&[1, 1, 6, 6]);
        assert!(net.forward(&x, 0, Mode::Train, FireMode::Hard, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn rates_and_k_in_bounds() {
        let mut net = tiny(SpikingLayerConfig::default(), 3);
        let x = rand_tensor::<f64>(&mut ChaCha8Rng::seed_from_u64(4), &[3, 1, 6, 6]);
        net.forward(&x, 4, Mode::Train, FireMode::Hard, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(net.layer_rates().len(), 3);
        for d in net.diagnostics() {
            assert!((0.0..=1.0).contains(&d.rate));
            assert!((0.5..=5.0).contains(&d.k));
        }
        for h in net.rate_histograms(20) {
            assert_eq!(h.len(), 20);
        }
    }

    #[test]
    fn reset_makes_forward_independent() {
        let mut net = tiny(SpikingLayerConfig::default(), 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = rand_tensor::<f64>(&mut rng, &[2, 1, 6, 6]);
        let b = rand_tensor::<f64>(&mut rng, &[2, 1, 6, 6]);
        let first = net.forward(&a, 3, Mode::Eval, FireMode::Hard, &mut rng).unwrap();
        net.forward(&b, 3, Mode::Eval, FireMode::Hard, &mut rng).unwrap();
        net.reset_states();
        net.reset_states();
        let again = net.forward(&a, 3, Mode::Eval, FireMode::Hard, &mut rng).unwrap();
        assert_eq!(first.scores, again.scores);
    }

    #[test]
    fn second_backward_is_cache_error() {
        let mut net = tiny(SpikingLayerConfig::default(), 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = rand_tensor::<f64>(&mut rng, &[2, 1, 6, 6]);
        let out = net.forward(&x, 2, Mode::Train, FireMode::Hard, &mut rng).unwrap();
        net.loss_and_backward(&out.scores, &[0, 1]).unwrap();
        assert!(matches!(
            net.loss_and_backward(&out.scores, &[0, 1]),
            Err(Error::CacheConsumed(_))
        ));
    }

    #[test]
    fn k_persists_across_reset() {
        let mut net = tiny(SpikingLayerConfig::default(), 9);
        net.spiking_layers_mut()[1].k.value = Tensor::scalar(2.5);
        net.reset_states();
        assert_eq!(net.k_values()[1], 2.5);
    }

    #[test]
    fn param_names_cover_every_layer() {
        let mut net = tiny(SpikingLayerConfig::default(), 1);
        let names: Vec<String> = net.params_mut().into_iter().map(|r| r.name).collect();
        for n in ["enc.branch2.bias", "enc.bn.beta", "spk0.k", "conv0.bn.gamma", "spk1.k", "dec.fc.weight", "spk2.k"] {
            assert!(names.iter().any(|m| m == n), "{n} missing from {names:?}");
        }
        let mut lif = tiny(SpikingLayerConfig::lif(), 1);
        assert!(lif.params_mut().iter().all(|r| r.k_bounds.is_none()));
    }

    #[test]
    fn named_tensors_round_trip() {
        let a = tiny(SpikingLayerConfig::default(), 1);
        let mut b = tiny(SpikingLayerConfig::default(), 2);
        b.load_named(a.named_tensors()).unwrap();
        assert_eq!(a.named_tensors(), b.named_tensors());
        let cfg = NetworkConfig::new(
            parse_arch("(4C3+4C3+4C3)(encoding)-6C3-MP2-(20FC-AP10)(decoding)").unwrap(),
            [1, 6, 6],
            SpikingLayerConfig::default(),
        );
        let mut other = Network::<f64>::new(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(matches!(
            other.load_named(a.named_tensors()),
            Err(Error::CheckpointMismatch { .. })
        ));
    }

    #[test]
    fn klif_identity_unit_k_matches_lif() {
        let klif = SpikingLayerConfig {
            activation: Activation::Identity,
            k_learnable: false,
            ..SpikingLayerConfig::default()
        };
        let mut a = tiny(klif, 11);
        let mut b = tiny(SpikingLayerConfig::lif(), 11);
        let x = rand_tensor::<f64>(&mut ChaCha8Rng::seed_from_u64(12), &[2, 1, 6, 6]);
        let fa = a.forward(&x, 3, Mode::Train, FireMode::Hard, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let fb = b.forward(&x, 3, Mode::Train, FireMode::Hard, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(fa.scores, fb.scores);
        assert_eq!(a.cached_reset_spikes(), b.cached_reset_spikes());
    }
}
