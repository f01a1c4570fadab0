//! Epoch loop, evaluation, and run outputs (metrics CSV, k trace, summary).

use std::fmt;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::checkpoint;
use crate::data::{batches, Dataset};
use crate::error::{Error, Result};
use crate::network::{Network, NetworkConfig};
use crate::neuron::{Activation, FireMode, NeuronKind, SpikingLayerConfig};
use crate::ops::Mode;
use crate::optim::{lr_at, Adam, AdamConfig};

/// Ablation conditions relative to KLIF with ReLU and learnable `k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    /// Use the neuron configuration as given.
    None,
    /// Learnable `k`, identity activation.
    OnlyK,
    /// ReLU activation, `k` fixed at 1.
    OnlyRelu,
}

impl Ablation {
    pub fn apply(self, cfg: &mut SpikingLayerConfig) {
        match self {
            Ablation::None => {}
            Ablation::OnlyK => {
                cfg.kind = NeuronKind::Klif;
                cfg.activation = Activation::Identity;
                cfg.k_learnable = true;
            }
            Ablation::OnlyRelu => {
                cfg.kind = NeuronKind::Klif;
                cfg.activation = Activation::Relu;
                cfg.k_init = 1.0;
                cfg.k_learnable = false;
            }
        }
    }
}

impl FromStr for Ablation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Ablation::None),
            "only-k" => Ok(Ablation::OnlyK),
            "only-relu" => Ok(Ablation::OnlyRelu),
            other => Err(Error::Config(format!(
                "unknown ablation `{other}` (expected one of: none only-k only-relu)"
            ))),
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Ablation::None => "none",
            Ablation::OnlyK => "only-k",
            Ablation::OnlyRelu => "only-relu",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub timesteps: usize,
    pub lr: f64,
    pub t_max: usize,
    pub lr_min: f64,
    #[serde(skip)]
    pub adam: AdamConfig,
    pub seed: u64,
    /// Accepted for interface compatibility; the engine is single-threaded
    /// and every run is reproducible from its seed.
    pub deterministic: bool,
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 64,
            timesteps: 8,
            lr: 1e-4,
            t_max: 100,
            lr_min: 0.0,
            adam: AdamConfig::default(),
            seed: 0,
            deterministic: false,
            train_limit: None,
            test_limit: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1");
        }
        if self.timesteps == 0 {
            return bad("timesteps must be at least 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("learning rate must be positive");
        }
        if !(self.lr_min >= 0.0 && self.lr_min <= self.lr) {
            return bad("lr_min must lie in [0, lr]");
        }
        Ok(())
    }
}

/// One row of the metrics CSV.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub lr: f64,
    pub k: Vec<f64>,
    pub rates: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RunMetrics {
    pub layers: usize,
    pub rows: Vec<EpochMetrics>,
}

impl RunMetrics {
    pub fn header(layers: usize) -> String {
        let mut h = String::from("epoch,train_loss,train_acc,test_acc,lr");
        for i in 0..layers {
            write!(h, ",k_layer{i}").unwrap();
        }
        for i in 0..layers {
            write!(h, ",rate_layer{i}").unwrap();
        }
        h
    }

    pub fn to_csv(&self) -> String {
        let mut s = Self::header(self.layers);
        s.push('\n');
        for r in &self.rows {
            write!(s, "{},{},{},{},{}", r.epoch, r.train_loss, r.train_acc, r.test_acc, r.lr).unwrap();
            for v in r.k.iter().chain(&r.rates) {
                write!(s, ",{v}").unwrap();
            }
            s.push('\n');
        }
        s
    }
}

/// Accuracy and per-layer firing statistics over a dataset.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub loss: f64,
    pub rates: Vec<f64>,
    /// Per layer, counts of neurons in 20 equal firing-rate bins over [0, 1].
    pub histograms: Vec<Vec<usize>>,
}

pub const HISTOGRAM_BINS: usize = 20;

/// Eval-mode pass (dropout off, running batch-norm statistics).
pub fn evaluate(net: &mut Network<f32>, data: &Dataset, batch_size: usize, timesteps: usize) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::Config("evaluation set is empty".into()));
    }
    net.clear_stats();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (mut correct, mut loss_sum) = (0usize, 0.0f64);
    for (images, labels) in batches(data, batch_size, 0, false)? {
        let out = net.forward(&images, timesteps, Mode::Eval, FireMode::Hard, &mut rng)?;
        correct += out.predictions.iter().zip(&labels).filter(|(p, l)| p == l).count();
        let (loss, _) = crate::network::mse_loss(&out.scores, &labels)?;
        loss_sum += f64::from(loss) * labels.len() as f64;
    }
    net.reset_states();
    Ok(Evaluation {
        accuracy: correct as f64 / data.len() as f64,
        loss: loss_sum / data.len() as f64,
        rates: net.layer_rates(),
        histograms: net.rate_histograms(HISTOGRAM_BINS),
    })
}

/// Training state: network, optimizer, dropout stream, and the `k` value of
/// every spiking layer after every optimizer step.
pub struct Trainer {
    pub net: Network<f32>,
    pub cfg: TrainConfig,
    adam: Adam<f32>,
    dropout_rng: ChaCha8Rng,
    pub epoch: usize,
    pub k_trace: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochSummary {
    pub train_loss: f64,
    pub train_acc: f64,
    pub lr: f64,
}

impl Trainer {
    pub fn new(net_cfg: NetworkConfig, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let net = Network::new(net_cfg, &mut init_rng)?;
        let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        dropout_rng.set_stream(1);
        let k_trace = vec![net.k_values()];
        Ok(Self {
            net,
            adam: Adam::new(cfg.adam),
            cfg,
            dropout_rng,
            epoch: 0,
            k_trace,
        })
    }

    /// Optimise over one pass of `data` with the epoch's learning rate.
    pub fn train_epoch(&mut self, data: &Dataset) -> Result<EpochSummary> {
        let lr = lr_at(self.epoch, self.cfg.lr, self.cfg.lr_min, self.cfg.t_max);
        let order_seed = self.cfg.seed ^ (self.epoch as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        let (mut loss_sum, mut correct) = (0.0f64, 0usize);
        for (images, labels) in batches(data, self.cfg.batch_size, order_seed, true)? {
            self.net.zero_grad();
            let out = self.net.forward(&images, self.cfg.timesteps, Mode::Train, FireMode::Hard, &mut self.dropout_rng)?;
            correct += out.predictions.iter().zip(&labels).filter(|(p, l)| p == l).count();
            let loss = self.net.loss_and_backward(&out.scores, &labels)?;
            loss_sum += f64::from(loss) * labels.len() as f64;
            self.adam.step(&mut self.net.params_mut(), lr)?;
            self.k_trace.push(self.net.k_values());
        }
        self.net.zero_grad();
        self.net.reset_states();
        self.epoch += 1;
        Ok(EpochSummary {
            train_loss: loss_sum / data.len() as f64,
            train_acc: correct as f64 / data.len() as f64,
            lr,
        })
    }

    /// `step,k_layer0,...` with row 0 holding the initial values.
    pub fn k_trace_csv(&self) -> String {
        let layers = self.k_trace.first().map_or(0, Vec::len);
        let mut s = String::from("step");
        for i in 0..layers {
            write!(s, ",k_layer{i}").unwrap();
        }
        s.push('\n');
        for (step, ks) in self.k_trace.iter().enumerate() {
            write!(s, "{step}").unwrap();
            for k in ks {
                write!(s, ",{k}").unwrap();
            }
            s.push('\n');
        }
        s
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub arch: String,
    pub neuron: String,
    pub activation: String,
    pub ablation: Ablation,
    pub train: TrainConfig,
    pub final_train_acc: f64,
    pub final_test_acc: f64,
    pub best_test_acc: f64,
    pub final_k: Vec<f64>,
    pub final_rates: Vec<f64>,
}

pub struct RunOutput {
    pub metrics: RunMetrics,
    pub summary: RunSummary,
    pub trainer: Trainer,
}

/// Train for `cfg.epochs`, evaluating on `test` after each epoch. When
/// `out_dir` is given, writes `metrics.csv`, `k_trace.csv`, `summary.json`
/// and `checkpoint.bin` there. `on_epoch` sees each row as it is produced.
pub fn run(
    net_cfg: NetworkConfig,
    cfg: TrainConfig,
    ablation: Ablation,
    train: &Dataset,
    test: &Dataset,
    out_dir: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<RunOutput> {
    let train = cfg.train_limit.map_or_else(|| train.clone(), |n| train.take(n));
    let test = cfg.test_limit.map_or_else(|| test.clone(), |n| test.take(n));
    let arch = net_cfg.arch.to_string();
    let (neuron, activation) = (net_cfg.neuron.kind.to_string(), net_cfg.neuron.activation.to_string());
    let mut trainer = Trainer::new(net_cfg, cfg.clone())?;
    let layers = trainer.net.spiking_layers().len();
    let mut metrics = RunMetrics { layers, rows: Vec::new() };
    let mut last_eval = None;
    for _ in 0..cfg.epochs {
        let s = trainer.train_epoch(&train)?;
        let ev = evaluate(&mut trainer.net, &test, cfg.batch_size, cfg.timesteps)?;
        let row = EpochMetrics {
            epoch: trainer.epoch,
            train_loss: s.train_loss,
            train_acc: s.train_acc,
            test_acc: ev.accuracy,
            lr: s.lr,
            k: trainer.net.k_values(),
            rates: ev.rates.clone(),
        };
        on_epoch(&row);
        metrics.rows.push(row);
        last_eval = Some(ev);
        if let Some(dir) = out_dir {
            std::fs::write(dir.join("metrics.csv"), metrics.to_csv())?;
        }
    }
    let last = metrics.rows.last().expect("epochs >= 1");
    let summary = RunSummary {
        arch,
        neuron,
        activation,
        ablation,
        train: cfg,
        final_train_acc: last.train_acc,
        final_test_acc: last.test_acc,
        best_test_acc: metrics.rows.iter().map(|r| r.test_acc).fold(0.0, f64::max),
        final_k: last.k.clone(),
        final_rates: last_eval.map(|e| e.rates).unwrap_or_default(),
    };
    if let Some(dir) = out_dir {
        std::fs::write(dir.join("k_trace.csv"), trainer.k_trace_csv())?;
        std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
        checkpoint::save(&trainer.net, &dir.join("checkpoint.bin"))?;
    }
    Ok(RunOutput { metrics, summary, trainer })
}
