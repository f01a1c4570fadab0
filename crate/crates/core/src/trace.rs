//! Single-neuron simulation and surrogate-gradient curves.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::neuron::{surrogate_grad, FireMode, NeuronKind, NeuronState, SpikingLayerConfig};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub t: usize,
    pub x: f64,
    pub h: f64,
    pub f: f64,
    pub s: f64,
    pub v: f64,
}

/// Drive one neuron with `inputs`, one value per timestep.
pub fn simulate(cfg: &SpikingLayerConfig, inputs: &[f64]) -> Result<Vec<TraceRow>> {
    let mut n = NeuronState::<f64>::new(cfg.clone())?;
    let k = n.k_value();
    let mut rows = Vec::with_capacity(inputs.len());
    for (t, &x) in inputs.iter().enumerate() {
        let xt = Tensor::new(&[1, 1], vec![x])?;
        let h = n.charge(&xt)?.item();
        let f = match cfg.kind {
            NeuronKind::Lif => h,
            _ => cfg.activation.eval(k * h).0,
        };
        let s = n.step(&xt, FireMode::Hard)?.item();
        let v = n.potential().expect("stepped").item();
        rows.push(TraceRow { t, x, h, f, s, v });
    }
    Ok(rows)
}

pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut s = String::from("t,X,H,F,S,V\n");
    for r in rows {
        writeln!(s, "{},{},{},{},{},{}", r.t, r.x, r.h, r.f, r.s, r.v).unwrap();
    }
    s
}

/// `dS/dF` evaluated along a sweep of membrane charge `H`:
/// `g'(act(k·H) - v_th)` for the KLIF variants, `g'(H - v_th)` for LIF.
pub fn surrogate_curve(cfg: &SpikingLayerConfig, k: f64, lo: f64, hi: f64, points: usize) -> Result<Vec<(f64, f64)>> {
    if points < 2 || !(hi > lo) {
        return Err(Error::Config("surrogate curve needs at least 2 points over a non-empty range".into()));
    }
    Ok((0..points)
        .map(|i| {
            let h = lo + (hi - lo) * i as f64 / (points - 1) as f64;
            let f = match cfg.kind {
                NeuronKind::Lif => h,
                _ => cfg.activation.eval(k * h).0,
            };
            (h, surrogate_grad(f - cfg.v_th, cfg.alpha))
        })
        .collect())
}

pub fn curve_csv(points: &[(f64, f64)]) -> String {
    let mut s = String::from("x,g'(x)\n");
    for (x, g) in points {
        writeln!(s, "{x},{g}").unwrap();
    }
    s
}

/// Parse a current trace: numbers separated by commas, whitespace or newlines.
pub fn parse_inputs(text: &str) -> Result<Vec<f64>> {
    text.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<f64>().map_err(|_| Error::Config(format!("invalid current value `{t}`"))))
        .collect()
}
