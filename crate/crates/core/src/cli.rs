//! Command-line interface: `train`, `eval`, `gradcheck`, `trace`.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint;
use crate::config::Settings;
use crate::data::{load, Split};
use crate::error::{Error, Result};
use crate::gradcheck::{self, GradcheckConfig};
use crate::network::Network;
use crate::neuron::SpikingLayerConfig;
use crate::trace;
use crate::train::{self, evaluate, HISTOGRAM_BINS};

const GRADCHECK_TOL: f64 = 1e-4;

#[derive(Parser, Debug)]
#[command(name = "spikenet", version, about = "Train and inspect convolutional spiking neural networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a network; writes metrics, k trace, summary and checkpoint to a run directory.
    Train(Common),
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Also write per-layer firing-rate histograms (20 bins over [0, 1]) as CSV.
        #[arg(long)]
        histograms: Option<PathBuf>,
    },
    /// Finite-difference check of the analytic gradients on a small network.
    Gradcheck(GradcheckArgs),
    /// Simulate one neuron and write its `t,X,H,F,S,V` trace.
    Trace(TraceArgs),
}

#[derive(Args, Debug, Default)]
struct Common {
    /// key=value config file; flags given here override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data_dir: Option<String>,
    /// mnist, fashion or cifar10
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    arch: Option<String>,
    /// lif, klif or klif-star
    #[arg(long)]
    neuron: Option<String>,
    /// relu, celu, leaky-relu or identity
    #[arg(long)]
    activation: Option<String>,
    /// none, only-k or only-relu
    #[arg(long)]
    ablation: Option<String>,
    #[arg(long)]
    timesteps: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    deterministic: bool,
    /// Parent directory for run outputs.
    #[arg(long)]
    out: Option<String>,
    #[arg(long)]
    checkpoint: Option<String>,
    /// Any other config key, e.g. `--set tau=2 --set train_limit=10000`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Common {
    fn settings(&self) -> Result<Settings> {
        let mut s = Settings::default();
        if let Some(path) = &self.config {
            s.apply_file(path)?;
        }
        let flags = [
            ("data_dir", &self.data_dir),
            ("dataset", &self.dataset),
            ("arch", &self.arch),
            ("neuron", &self.neuron),
            ("activation", &self.activation),
            ("ablation", &self.ablation),
            ("timesteps", &self.timesteps),
            ("epochs", &self.epochs),
            ("batch_size", &self.batch_size),
            ("lr", &self.lr),
            ("seed", &self.seed),
            ("out", &self.out),
            ("checkpoint", &self.checkpoint),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                s.set(key, v)?;
            }
        }
        if self.deterministic {
            s.set("deterministic", "true")?;
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            s.set(k.trim(), v)?;
        }
        Ok(s)
    }
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value = gradcheck::DEFAULT_ARCH)]
    arch: String,
    #[arg(long, default_value = "klif")]
    neuron: String,
    #[arg(long, default_value = "relu")]
    activation: String,
    #[arg(long, default_value_t = 3)]
    timesteps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Exclude the reset path from the gradient.
    #[arg(long)]
    detach_reset: bool,
    /// Scale the surrogate derivative by 1.1 in the backward pass (must fail).
    #[arg(long)]
    break_surrogate: bool,
}

#[derive(Args, Debug)]
struct TraceArgs {
    #[arg(long, default_value = "lif")]
    neuron: String,
    #[arg(long, default_value = "relu")]
    activation: String,
    #[arg(long, default_value_t = 2.0)]
    tau: f64,
    #[arg(long, default_value_t = 1.0)]
    v_th: f64,
    #[arg(long, default_value_t = 0.0)]
    v_reset: f64,
    #[arg(long, default_value_t = 2.0)]
    alpha: f64,
    /// Scaling factor of the KLIF variants.
    #[arg(long, default_value_t = 1.0)]
    k: f64,
    /// File of input currents (comma or whitespace separated).
    #[arg(long, conflicts_with = "constant")]
    input: Option<PathBuf>,
    /// Constant input current, used when no --input file is given.
    #[arg(long, default_value_t = 3.0, allow_hyphen_values = true)]
    constant: f64,
    #[arg(long, default_value_t = 20)]
    steps: usize,
    /// Trace CSV path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the surrogate-gradient curve `x,g'(x)` over H in [-3, 3].
    #[arg(long)]
    curve: Option<PathBuf>,
}

/// Parse the process arguments and run; returns the exit code.
pub fn run_from_env() -> i32 {
    run(std::env::args_os())
}

pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let result = match cli.command {
        Command::Train(c) => cmd_train(&c),
        Command::Eval { common, histograms } => cmd_eval(&common, histograms.as_deref()),
        Command::Gradcheck(g) => cmd_gradcheck(&g),
        Command::Trace(t) => cmd_trace(&t),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

/// Fresh `<parent>/<timestamp>-seed<seed>` directory, suffixed if taken.
fn run_dir(parent: &Path, seed: u64) -> Result<PathBuf> {
    std::fs::create_dir_all(parent)?;
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
    let base = format!("{stamp}-seed{seed}");
    for i in 0.. {
        let name = if i == 0 { base.clone() } else { format!("{base}-{i}") };
        let dir = parent.join(name);
        match std::fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e.into()),
        }
    }
    unreachable!()
}

fn cmd_train(c: &Common) -> Result<i32> {
    let s = c.settings()?;
    s.train.validate()?;
    let net_cfg = s.network_config()?;
    let train_set = load(&s.data_dir, s.dataset, Split::Train)?;
    let test_set = load(&s.data_dir, s.dataset, Split::Test)?;
    let dir = run_dir(&s.out, s.train.seed)?;
    std::fs::write(dir.join("config.txt"), s.render())?;
    println!("run directory {}", dir.display());
    let out = train::run(net_cfg, s.train.clone(), s.ablation, &train_set, &test_set, Some(&dir), |r| {
        println!(
            "epoch {:>3}  loss {:.5}  train {:.4}  test {:.4}  lr {:.3e}  k {:?}",
            r.epoch,
            r.train_loss,
            r.train_acc,
            r.test_acc,
            r.lr,
            r.k.iter().map(|k| (k * 1e4).round() / 1e4).collect::<Vec<_>>()
        );
    })?;
    if let Some(path) = &s.checkpoint {
        checkpoint::save(&out.trainer.net, path)?;
    }
    println!(
        "final test accuracy {:.4} (best {:.4})",
        out.summary.final_test_acc, out.summary.best_test_acc
    );
    Ok(0)
}

fn cmd_eval(c: &Common, histograms: Option<&Path>) -> Result<i32> {
    let s = c.settings()?;
    let path = s
        .checkpoint
        .clone()
        .ok_or_else(|| Error::Config("eval needs --checkpoint".into()))?;
    let mut net = Network::<f32>::new(s.network_config()?, &mut ChaCha8Rng::seed_from_u64(0))?;
    checkpoint::load_into(&mut net, &path)?;
    let mut test_set = load(&s.data_dir, s.dataset, Split::Test)?;
    if let Some(n) = s.train.test_limit {
        test_set = test_set.take(n);
    }
    let ev = evaluate(&mut net, &test_set, s.train.batch_size, s.train.timesteps)?;
    println!("test accuracy {:.4} on {} images", ev.accuracy, test_set.len());
    for (i, (d, h)) in net.diagnostics().iter().zip(&ev.histograms).enumerate() {
        println!("layer {i} {:<6} k {:.4}  rate {:.4}  hist {:?}", d.name, d.k, d.rate, h);
    }
    if let Some(path) = histograms {
        let mut csv = String::from("layer,bin_lo,bin_hi,count\n");
        for (i, h) in ev.histograms.iter().enumerate() {
            for (b, count) in h.iter().enumerate() {
                let lo = b as f64 / HISTOGRAM_BINS as f64;
                let hi = (b + 1) as f64 / HISTOGRAM_BINS as f64;
                writeln!(csv, "{i},{lo},{hi},{count}").unwrap();
            }
        }
        std::fs::write(path, csv)?;
    }
    Ok(0)
}

fn cmd_gradcheck(g: &GradcheckArgs) -> Result<i32> {
    let neuron = SpikingLayerConfig {
        kind: g.neuron.parse()?,
        activation: g.activation.parse()?,
        detach_reset: g.detach_reset,
        break_surrogate: g.break_surrogate,
        ..SpikingLayerConfig::default()
    };
    let cfg = GradcheckConfig {
        arch: g.arch.clone(),
        steps: g.timesteps,
        neuron,
        seed: g.seed,
        ..GradcheckConfig::default()
    };
    let report = gradcheck::run(&cfg)?;
    for p in &report.params {
        println!("{:<20} n={:<6} max rel err {:.3e}", p.name, p.numel, p.max_rel_err);
    }
    let w = report.worst();
    println!(
        "worst {}[{}]: analytic {:.9e} numeric {:.9e} rel err {:.3e} over {} elements",
        w.name,
        w.worst_index,
        w.analytic,
        w.numeric,
        w.max_rel_err,
        report.elements()
    );
    if report.passed(GRADCHECK_TOL) {
        println!("PASS (tolerance {GRADCHECK_TOL:e})");
        Ok(0)
    } else {
        println!("FAIL (tolerance {GRADCHECK_TOL:e})");
        Ok(1)
    }
}

fn cmd_trace(a: &TraceArgs) -> Result<i32> {
    let cfg = SpikingLayerConfig {
        kind: a.neuron.parse()?,
        activation: a.activation.parse()?,
        tau: a.tau,
        v_th: a.v_th,
        v_reset: a.v_reset,
        alpha: a.alpha,
        k_init: a.k,
        ..SpikingLayerConfig::default()
    };
    cfg.validate()?;
    let inputs = match &a.input {
        Some(path) => trace::parse_inputs(&std::fs::read_to_string(path)?)?,
        None => vec![a.constant; a.steps],
    };
    let csv = trace::trace_csv(&trace::simulate(&cfg, &inputs)?);
    match &a.out {
        Some(path) => std::fs::write(path, csv)?,
        None => print!("{csv}"),
    }
    if let Some(path) = &a.curve {
        std::fs::write(path, trace::curve_csv(&trace::surrogate_curve(&cfg, a.k, -3.0, 3.0, 601)?))?;
    }
    Ok(0)
}
