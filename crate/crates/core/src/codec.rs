//! Direct image encoder and population-voting decoder.

use rand::Rng;

use crate::error::{Error, Result};
use crate::neuron::{FireMode, NeuronState, SpikingLayerConfig};
use crate::ops::{
    avgpool1d_backward, avgpool1d_forward, batchnorm_backward, batchnorm_forward, conv2d_backward,
    conv2d_forward, BatchNorm, BatchNormCtx, Conv2dCtx, Mode, KERNEL,
};
use crate::param::Param;
use crate::tensor::{Real, Tensor};

/// Weight `[O, C, 3, 3]` and bias `[O]` of one 3×3 convolution.
#[derive(Debug, Clone)]
pub struct ConvParams<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Real> ConvParams<T> {
    /// Uniform `±1/sqrt(fan_in)` initialisation for weights and biases.
    pub fn init(in_ch: usize, out_ch: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / ((in_ch * KERNEL * KERNEL) as f64).sqrt();
        Self {
            weight: Param::uniform(&[out_ch, in_ch, KERNEL, KERNEL], bound, rng),
            bias: Param::uniform(&[out_ch], bound, rng),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[0]
    }
}

#[derive(Debug)]
struct EncoderCache<T> {
    convs: Vec<Conv2dCtx<T>>,
    bn: BatchNormCtx<T>,
}

/// Parallel 3×3 convolutions summed, batch-normalised once, then one
/// spiking layer. The same image drives every timestep, so the
/// convolution and normalisation run once per forward.
#[derive(Debug)]
pub struct Encoder<T> {
    pub branches: Vec<ConvParams<T>>,
    pub bn: BatchNorm<T>,
    pub spk: NeuronState<T>,
    cache: Option<EncoderCache<T>>,
}

impl<T: Real> Encoder<T> {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        branches: usize,
        cfg: SpikingLayerConfig,
        bn: (f64, f64),
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if branches == 0 {
            return Err(Error::Config("encoder needs at least one branch".into()));
        }
        Ok(Self {
            branches: (0..branches).map(|_| ConvParams::init(in_ch, out_ch, rng)).collect(),
            bn: BatchNorm::new(out_ch, bn.0, bn.1),
            spk: NeuronState::new(cfg)?,
            cache: None,
        })
    }

    /// Sum of the branch convolutions, before normalisation and spiking.
    pub fn pre_activation(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let mut acc: Option<Tensor<T>> = None;
        for b in &self.branches {
            let (y, _) = conv2d_forward(image, &b.weight.value, &b.bias.value)?;
            match &mut acc {
                Some(a) => a.add_assign(&y)?,
                None => acc = Some(y),
            }
        }
        Ok(acc.expect("at least one branch"))
    }

    /// Present `image` for `steps` timesteps; returns the spikes of each step.
    pub fn forward(&mut self, image: &Tensor<T>, steps: usize, mode: Mode, fire: FireMode) -> Result<Vec<Tensor<T>>> {
        let mut sum: Option<Tensor<T>> = None;
        let mut convs = Vec::with_capacity(self.branches.len());
        for b in &self.branches {
            let (y, ctx) = conv2d_forward(image, &b.weight.value, &b.bias.value)?;
            convs.push(ctx);
            match &mut sum {
                Some(a) => a.add_assign(&y)?,
                None => sum = Some(y),
            }
        }
        let (current, bn) = batchnorm_forward(&sum.expect("at least one branch"), &mut self.bn, mode)?;
        let mut spikes = Vec::with_capacity(steps);
        for _ in 0..steps {
            spikes.push(self.spk.step(&current, fire)?);
        }
        self.cache = Some(EncoderCache { convs, bn });
        Ok(spikes)
    }

    /// Backpropagate the gradient of every timestep's spikes into the
    /// branch and normalisation parameters and the layer's `k`.
    pub fn backward(&mut self, grad_spikes: &[Tensor<T>]) -> Result<()> {
        let cache = self.cache.take().ok_or(Error::CacheConsumed("encoder backward"))?;
        let grad_x = self.spk.backward_seq(grad_spikes)?;
        let mut g_current = grad_x[0].clone();
        for g in &grad_x[1..] {
            g_current.add_assign(g)?;
        }
        let bn = batchnorm_backward(cache.bn, &g_current)?;
        self.bn.gamma.accumulate(&bn.gamma)?;
        self.bn.beta.accumulate(&bn.beta)?;
        for (b, ctx) in self.branches.iter_mut().zip(cache.convs) {
            let g = conv2d_backward(ctx, &bn.input)?;
            b.weight.accumulate(&g.weight)?;
            b.bias.accumulate(&g.bias)?;
        }
        Ok(())
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }
}

/// Class scores and predictions from a window of output-layer spikes.
///
/// Each input is `[N, P·C]`; the score of class `c` is the time-averaged
/// firing rate of neurons `c·P .. (c+1)·P`. Predictions break ties toward
/// the lowest class index.
pub fn decode<T: Real>(output_spikes: &[Tensor<T>], population: usize) -> Result<(Tensor<T>, Vec<usize>)> {
    let first = output_spikes.first().ok_or(Error::Config("decode: empty spike window".into()))?;
    let mut mean = first.clone();
    for s in &output_spikes[1..] {
        mean.add_assign(s)?;
    }
    let mean = mean.scale(T::one() / T::from_usize(output_spikes.len()).unwrap());
    let (scores, _) = avgpool1d_forward(&mean, population)?;
    let predictions = argmax_rows(&scores);
    Ok((scores, predictions))
}

/// Gradient with respect to each timestep's output spikes given `dL/dscores`.
/// The same tensor applies to every timestep.
pub fn decode_backward<T: Real>(grad_scores: &Tensor<T>, steps: usize, population: usize) -> Result<Tensor<T>> {
    if steps == 0 {
        return Err(Error::Config("decode: empty spike window".into()));
    }
    let (n, c) = (grad_scores.shape()[0], grad_scores.shape()[1]);
    let probe = Tensor::<T>::zeros(&[n, c * population]);
    let (_, ctx) = avgpool1d_forward(&probe, population)?;
    let g = avgpool1d_backward(ctx, grad_scores)?;
    Ok(g.scale(T::one() / T::from_usize(steps).unwrap()))
}

pub fn argmax_rows<T: Real>(scores: &Tensor<T>) -> Vec<usize> {
    let c = scores.shape()[1];
    scores
        .data()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::DEFAULT_EPS;
    use crate::testutil::{naive_conv2d, rand_tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn encoder(rng: &mut ChaCha8Rng) -> Encoder<f64> {
        Encoder::new(2, 3, 3, SpikingLayerConfig::default(), (DEFAULT_EPS, 0.1), rng).unwrap()
    }

    #[test]
    fn zero_branches_leave_single_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut enc = encoder(&mut rng);
        for b in &mut enc.branches[1..] {
            b.weight.value.fill(0.0);
            b.bias.value.fill(0.0);
        }
        let x = rand_tensor::<f64>(&mut rng, &[2, 2, 5, 5]);
        let pre = enc.pre_activation(&x).unwrap();
        let single = naive_conv2d(&x, &enc.branches[0].weight.value, &enc.branches[0].bias.value);
        assert!(pre.max_abs_diff(&single) < 1e-12);
    }

    #[test]
    fn resting_network_is_silent() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut enc = encoder(&mut rng);
        for b in &mut enc.branches {
            b.bias.value.fill(0.0);
        }
        let x = Tensor::zeros(&[2, 2, 4, 4]);
        assert!(enc.pre_activation(&x).unwrap().data().iter().all(|&v| v == 0.0));
        let spikes = enc.forward(&x, 1, Mode::Train, FireMode::Hard).unwrap();
        assert!(spikes[0].data().iter().all(|&s| s == 0.0));
    }

    #[test]
    fn same_current_every_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = SpikingLayerConfig::lif();
        let mut enc = Encoder::<f64>::new(1, 2, 3, cfg.clone(), (DEFAULT_EPS, 0.1), &mut rng).unwrap();
        let x = rand_tensor::<f64>(&mut rng, &[3, 1, 4, 4]);
        let mut bn = enc.bn.clone();
        let (current, _) = batchnorm_forward(&enc.pre_activation(&x).unwrap(), &mut bn, Mode::Train).unwrap();
        let mut reference = NeuronState::new(cfg).unwrap();
        let spikes = enc.forward(&x, 4, Mode::Train, FireMode::Hard).unwrap();
        for s in &spikes {
            assert_eq!(s, &reference.step(&current, FireMode::Hard).unwrap());
        }
    }

    #[test]
    fn backward_twice_is_cache_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut enc = encoder(&mut rng);
        let x = rand_tensor::<f64>(&mut rng, &[2, 2, 4, 4]);
        let spikes = enc.forward(&x, 2, Mode::Train, FireMode::Hard).unwrap();
        let grads: Vec<_> = spikes.iter().map(|s| Tensor::full(s.shape(), 1.0)).collect();
        enc.backward(&grads).unwrap();
        assert!(matches!(enc.backward(&grads), Err(Error::CacheConsumed(_))));
    }

    #[test]
    fn decode_one_hot_population() {
        let mut out = Tensor::zeros(&[1, 100]);
        out.data_mut()[30..40].fill(1.0f32);
        let window = vec![out.clone(), out.clone(), out];
        let (scores, pred) = decode(&window, 10).unwrap();
        let mut expected = vec![0.0f32; 10];
        expected[3] = 1.0;
        assert_eq!(scores.data(), expected.as_slice());
        assert_eq!(pred, vec![3]);
    }

    #[test]
    fn decode_silent_ties_to_zero() {
        let window = vec![Tensor::<f32>::zeros(&[2, 100]); 4];
        let (scores, pred) = decode(&window, 10).unwrap();
        assert_eq!(scores.shape(), &[2, 10]);
        assert!(scores.data().iter().all(|&v| v == 0.0));
        assert_eq!(pred, vec![0, 0]);
    }

    #[test]
    fn decode_empty_window_rejected() {
        assert!(decode::<f32>(&[], 10).is_err());
    }

    #[test]
    fn decode_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let steps = 3;
        let window: Vec<Tensor<f64>> = (0..steps).map(|_| rand_tensor(&mut rng, &[2, 20])).collect();
        let probe = rand_tensor::<f64>(&mut rng, &[2, 2]);
        let g = decode_backward(&probe, steps, 10).unwrap();
        let eps = 1e-6;
        for t in 0..steps {
            for i in 0..40 {
                let mut w = window.clone();
                w[t].data_mut()[i] += eps;
                let (up, _) = decode(&w, 10).unwrap();
                let (base, _) = decode(&window, 10).unwrap();
                let num: f64 = up
                    .data()
                    .iter()
                    .zip(base.data())
                    .zip(probe.data())
                    .map(|((u, b), p)| (u - b) / eps * p)
                    .sum();
                assert!((num - g.data()[i]).abs() < 1e-6);
            }
        }
    }
}
