//! Finite-difference verification of the whole network's BPTT gradients.
//!
//! Spikes are replaced by the smooth arctangent primitive (relaxed mode) so
//! the loss is differentiable and central differences are meaningful. With
//! a detached reset, the reset path's spikes are pinned to those of the
//! unperturbed forward so both sides differentiate the same function.
//! Max-pooling window choices and the piece of each piecewise activation
//! are pinned the same way: the analytic gradient follows the selected
//! branch, and a perturbation that crosses a kink would otherwise make the
//! difference quotient straddle two branches.
//!
//! Derivatives are estimated with the fourth-order five-point central
//! stencil, `(-f(x+2e) + 8 f(x+e) - 8 f(x-e) + f(x-2e)) / 12e`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::arch::parse_arch;
use crate::error::Result;
use crate::network::{mse_loss, Network, NetworkConfig};
use crate::neuron::{FireMode, SpikingLayerConfig};
use crate::ops::Mode;
use crate::tensor::Tensor;

pub const DEFAULT_ARCH: &str = "(4C3+4C3+4C3)(encoding)-8C3-MP2-(20FC-AP10)(decoding)";

#[derive(Debug, Clone)]
pub struct GradcheckConfig {
    pub arch: String,
    pub input: [usize; 3],
    pub steps: usize,
    pub batch: usize,
    pub eps: f64,
    pub neuron: SpikingLayerConfig,
    pub dropout: f64,
    /// Pin pooling choices and activation pieces to the unperturbed forward.
    pub pin_branches: bool,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            arch: DEFAULT_ARCH.into(),
            input: [1, 8, 8],
            steps: 3,
            batch: 2,
            eps: 1e-3,
            neuron: SpikingLayerConfig::default(),
            dropout: 0.5,
            pin_branches: true,
            seed: 0,
        }
    }
}

/// Worst element of one named parameter tensor.
#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub numel: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub params: Vec<ParamCheck>,
    pub loss: f64,
}

impl GradcheckReport {
    pub fn worst(&self) -> &ParamCheck {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
            .expect("at least one parameter")
    }

    pub fn passed(&self, tol: f64) -> bool {
        self.params.iter().all(|p| p.max_rel_err < tol)
    }

    pub fn elements(&self) -> usize {
        self.params.iter().map(|p| p.numel).sum()
    }
}

/// Relative error with a floor on the denominator so that two
/// vanishing gradients compare as equal.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

struct Harness {
    net: Network<f64>,
    images: Tensor<f64>,
    labels: Vec<usize>,
    steps: usize,
    dropout_rng: ChaCha8Rng,
}

impl Harness {
    fn loss(&mut self) -> Result<f64> {
        let mut rng = self.dropout_rng.clone();
        let out = self.net.forward(&self.images, self.steps, Mode::Train, FireMode::Relaxed, &mut rng)?;
        Ok(mse_loss(&out.scores, &self.labels)?.0)
    }
}

pub fn run(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let spec = parse_arch(&cfg.arch)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net_cfg = NetworkConfig::new(spec, cfg.input, cfg.neuron.clone());
    net_cfg.dropout = cfg.dropout;
    let net = Network::<f64>::new(net_cfg, &mut rng)?;
    let classes = net.classes();
    let [c, h, w] = cfg.input;
    let n = cfg.batch * c * h * w;
    let images = Tensor::new(&[cfg.batch, c, h, w], (0..n).map(|_| rng.gen::<f64>()).collect())?;
    let labels = (0..cfg.batch).map(|_| rng.gen_range(0..classes)).collect();
    let mut hs = Harness {
        net,
        images,
        labels,
        steps: cfg.steps,
        dropout_rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed),
    };

    hs.loss()?;
    if cfg.neuron.detach_reset {
        let frozen = hs.net.cached_reset_spikes();
        hs.net.freeze_resets(Some(frozen));
    }
    if cfg.pin_branches {
        let choices = hs.net.cached_pool_choices();
        hs.net.pin_pooling(Some(choices));
        let pieces = hs.net.cached_activation_branches();
        hs.net.pin_activation_branches(Some(pieces));
    }

    hs.net.zero_grad();
    let mut rng = hs.dropout_rng.clone();
    let out = hs.net.forward(&hs.images, hs.steps, Mode::Train, FireMode::Relaxed, &mut rng)?;
    let loss = hs.net.loss_and_backward(&out.scores, &hs.labels)?;
    let analytic: Vec<(String, Tensor<f64>)> = hs
        .net
        .params_mut()
        .into_iter()
        .map(|r| (r.name, r.param.grad.clone()))
        .collect();

    let mut params = Vec::with_capacity(analytic.len());
    for (pi, (name, grad)) in analytic.iter().enumerate() {
        let mut check = ParamCheck {
            name: name.clone(),
            numel: grad.numel(),
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for e in 0..grad.numel() {
            let orig = hs.net.params_mut()[pi].param.value.data()[e];
            let mut at = |offset: f64| -> Result<f64> {
                hs.net.params_mut()[pi].param.value.data_mut()[e] = orig + offset;
                hs.loss()
            };
            let (p1, m1, p2, m2) = (at(cfg.eps)?, at(-cfg.eps)?, at(2.0 * cfg.eps)?, at(-2.0 * cfg.eps)?);
            hs.net.params_mut()[pi].param.value.data_mut()[e] = orig;
            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * cfg.eps);
            let a = grad.data()[e];
            let err = rel_err(a, numeric);
            if err > check.max_rel_err || e == 0 {
                check.max_rel_err = err;
                check.worst_index = e;
                check.analytic = a;
                check.numeric = numeric;
            }
        }
        params.push(check);
    }
    hs.net.freeze_resets(None);
    hs.net.pin_pooling(None);
    hs.net.pin_activation_branches(None);
    Ok(GradcheckReport { params, loss })
}
