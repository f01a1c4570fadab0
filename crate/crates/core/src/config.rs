//! Flat `key=value` run configuration. Files may contain `#` comments and
//! blank lines; command-line flags are applied afterwards with the same keys.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::arch::{parse_arch, NetworkSpec};
use crate::data::DatasetKind;
use crate::error::{Error, Result};
use crate::network::NetworkConfig;
use crate::neuron::SpikingLayerConfig;
use crate::train::{Ablation, TrainConfig};

pub const DEFAULT_ARCH: &str = "(128C3+128C3+128C3)(encoding)-128C3-MP2-2048FC-(100FC-AP10)(decoding)";

#[derive(Debug, Clone, Serialize)]
pub struct Settings {
    pub dataset: DatasetKind,
    pub data_dir: PathBuf,
    pub arch: String,
    pub out: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub ablation: Ablation,
    pub dropout: f64,
    #[serde(skip)]
    pub neuron: SpikingLayerConfig,
    pub train: TrainConfig,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            dataset: DatasetKind::Mnist,
            data_dir: PathBuf::from("data"),
            arch: DEFAULT_ARCH.into(),
            out: PathBuf::from("runs"),
            checkpoint: None,
            ablation: Ablation::None,
            dropout: 0.5,
            neuron: SpikingLayerConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

pub const KEYS: &[&str] = &[
    "dataset",
    "data_dir",
    "arch",
    "out",
    "checkpoint",
    "ablation",
    "dropout",
    "neuron",
    "activation",
    "tau",
    "v_th",
    "v_reset",
    "alpha",
    "k_init",
    "k_min",
    "k_max",
    "k_learnable",
    "detach_reset",
    "epochs",
    "batch_size",
    "timesteps",
    "lr",
    "t_max",
    "lr_min",
    "beta1",
    "beta2",
    "adam_eps",
    "seed",
    "deterministic",
    "train_limit",
    "test_limit",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("invalid value `{value}` for `{key}` (expected true or false)"))),
    }
}

fn parse_limit(key: &str, value: &str) -> Result<Option<usize>> {
    if value == "none" || value == "all" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

impl Settings {
    /// Set one key. Unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let n = &mut self.neuron;
        let t = &mut self.train;
        match key {
            "dataset" => self.dataset = v.parse()?,
            "data_dir" => self.data_dir = PathBuf::from(v),
            "arch" => self.arch = v.to_string(),
            "out" => self.out = PathBuf::from(v),
            "checkpoint" => self.checkpoint = Some(PathBuf::from(v)),
            "ablation" => self.ablation = v.parse()?,
            "dropout" => self.dropout = parse(key, v)?,
            "neuron" => n.kind = v.parse()?,
            "activation" => n.activation = v.parse()?,
            "tau" => n.tau = parse(key, v)?,
            "v_th" => n.v_th = parse(key, v)?,
            "v_reset" => n.v_reset = parse(key, v)?,
            "alpha" => n.alpha = parse(key, v)?,
            "k_init" => n.k_init = parse(key, v)?,
            "k_min" => n.k_min = parse(key, v)?,
            "k_max" => n.k_max = parse(key, v)?,
            "k_learnable" => n.k_learnable = parse_bool(key, v)?,
            "detach_reset" => n.detach_reset = parse_bool(key, v)?,
            "epochs" => t.epochs = parse(key, v)?,
            "batch_size" => t.batch_size = parse(key, v)?,
            "timesteps" => t.timesteps = parse(key, v)?,
            "lr" => t.lr = parse(key, v)?,
            "t_max" => t.t_max = parse(key, v)?,
            "lr_min" => t.lr_min = parse(key, v)?,
            "beta1" => t.adam.beta1 = parse(key, v)?,
            "beta2" => t.adam.beta2 = parse(key, v)?,
            "adam_eps" => t.adam.eps = parse(key, v)?,
            "seed" => t.seed = parse(key, v)?,
            "deterministic" => t.deterministic = parse_bool(key, v)?,
            "train_limit" => t.train_limit = parse_limit(key, v)?,
            "test_limit" => t.test_limit = parse_limit(key, v)?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Apply every `key=value` line of `text`; `origin` labels errors.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("{origin}:{}: expected key=value, got `{line}`", i + 1)))?;
            self.set(key.trim(), value)
                .map_err(|e| Error::Config(format!("{origin}:{}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// Neuron configuration after the ablation preset is applied.
    pub fn effective_neuron(&self) -> Result<SpikingLayerConfig> {
        let mut n = self.neuron.clone();
        self.ablation.apply(&mut n);
        n.validate()?;
        Ok(n)
    }

    pub fn network_spec(&self) -> Result<NetworkSpec> {
        parse_arch(&self.arch)
    }

    pub fn network_config(&self) -> Result<NetworkConfig> {
        let mut cfg = NetworkConfig::new(self.network_spec()?, self.dataset.image_shape(), self.effective_neuron()?);
        cfg.dropout = self.dropout;
        Ok(cfg)
    }

    /// Render as a config file that reproduces these settings.
    pub fn render(&self) -> String {
        let n = &self.neuron;
        let t = &self.train;
        let limit = |l: Option<usize>| l.map_or("none".to_string(), |v| v.to_string());
        let mut lines = vec![
            format!("dataset={}", self.dataset),
            format!("data_dir={}", self.data_dir.display()),
            format!("arch={}", self.arch),
            format!("out={}", self.out.display()),
        ];
        if let Some(c) = &self.checkpoint {
            lines.push(format!("checkpoint={}", c.display()));
        }
        lines.extend([
            format!("ablation={}", self.ablation),
            format!("dropout={}", self.dropout),
            format!("neuron={}", n.kind),
            format!("activation={}", n.activation),
            format!("tau={}", n.tau),
            format!("v_th={}", n.v_th),
            format!("v_reset={}", n.v_reset),
            format!("alpha={}", n.alpha),
            format!("k_init={}", n.k_init),
            format!("k_min={}", n.k_min),
            format!("k_max={}", n.k_max),
            format!("k_learnable={}", n.k_learnable),
            format!("detach_reset={}", n.detach_reset),
            format!("epochs={}", t.epochs),
            format!("batch_size={}", t.batch_size),
            format!("timesteps={}", t.timesteps),
            format!("lr={}", t.lr),
            format!("t_max={}", t.t_max),
            format!("lr_min={}", t.lr_min),
            format!("beta1={}", t.adam.beta1),
            format!("beta2={}", t.adam.beta2),
            format!("adam_eps={}", t.adam.eps),
            format!("seed={}", t.seed),
            format!("deterministic={}", t.deterministic),
            format!("train_limit={}", limit(t.train_limit)),
            format!("test_limit={}", limit(t.test_limit)),
        ]);
        lines.join("\n") + "\n"
    }
}
