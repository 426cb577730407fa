//! Wall-clock scaling of the attention reference against the hybrid block.
//!
//! Timings use the median of several repeats after warm-up runs, on the
//! calling thread only. Cells run one after another so they never compete
//! for the CPU.

use std::hint::black_box;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attention::{attention_forward, AttentionParams, Mode};
use crate::concept::{ConceptConfig, Mixing};
use crate::error::{Error, Result};
use crate::fusion::{infomamba_block, BlockParams};
use crate::numerics::SeededRng;
use crate::ssm::SsmInit;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimingProtocol {
    pub repeats: usize,
    pub warmups: usize,
}

impl Default for TimingProtocol {
    fn default() -> Self {
        Self { repeats: 7, warmups: 2 }
    }
}

/// Median wall-clock milliseconds of `f` over `protocol.repeats` calls,
/// after `protocol.warmups` untimed calls.
pub fn median_time_ms<T>(protocol: TimingProtocol, mut f: impl FnMut() -> T) -> f64 {
    for _ in 0..protocol.warmups {
        black_box(f());
    }
    let mut times: Vec<f64> = (0..protocol.repeats.max(1))
        .map(|_| {
            let start = Instant::now();
            black_box(f());
            start.elapsed().as_secs_f64() * 1e3
        })
        .collect();
    times.sort_by(f64::total_cmp);
    times[times.len() / 2]
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::invalid("slope needs at least two paired points"));
    }
    if x.iter().chain(y).any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(Error::invalid("log-log slope needs positive finite values"));
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let k = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / k, ly.iter().sum::<f64>() / k);
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::invalid("all sequence lengths are equal"));
    }
    Ok(sxy / sxx)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BenchModel {
    Attention,
    InfomambaBlock,
}

impl BenchModel {
    pub fn name(self) -> &'static str {
        match self {
            BenchModel::Attention => "attention_ref",
            BenchModel::InfomambaBlock => "infomamba_block",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub model: BenchModel,
    pub n: usize,
    pub median_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub rows: Vec<ScalingRow>,
    pub attention_slope: f64,
    pub block_slope: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingSetup {
    pub d: usize,
    pub d_state: usize,
    pub k_max: usize,
    pub protocol: TimingProtocol,
    pub seed: u64,
}

/// Times one causal attention forward and one hybrid block forward per
/// sequence length and fits the log-log slope of each.
pub fn scaling_bench(ns: &[usize], setup: &ScalingSetup) -> Result<ScalingReport> {
    if ns.len() < 2 || ns.contains(&0) {
        return Err(Error::invalid("scaling needs at least two positive sequence lengths"));
    }
    let mut rng = SeededRng::new(setup.seed);
    let attn = AttentionParams::random(setup.d, 1.0 / (setup.d as f64).sqrt(), &mut rng);
    let base = ConceptConfig::new(setup.d);
    let k = setup.k_max.max(1);
    let concept = ConceptConfig {
        k_max: k,
        q_max: base.q_max.min(k),
        q_min: base.q_min.min(base.q_max.min(k)),
        b_hash: base.b_hash.min(k),
        ..base
    };
    let block = BlockParams::sample(concept, setup.d_state, SsmInit::default(), &mut rng)?;
    let mut rows = Vec::new();
    for &n in ns {
        let x = rng.normal_matrix(n, setup.d, 1.0);
        let t = median_time_ms(setup.protocol, || attention_forward(&attn, &x, Mode::Causal));
        rows.push(ScalingRow { model: BenchModel::Attention, n, median_ms: t });
        let t = median_time_ms(setup.protocol, || {
            infomamba_block(&block.ssm, &block.filter, &block.fusion, &x, Mixing::Attention)
        });
        rows.push(ScalingRow { model: BenchModel::InfomambaBlock, n, median_ms: t });
    }
    let slope = |model: BenchModel| {
        let pts: Vec<&ScalingRow> = rows.iter().filter(|r| r.model == model).collect();
        let x: Vec<f64> = pts.iter().map(|r| r.n as f64).collect();
        let y: Vec<f64> = pts.iter().map(|r| r.median_ms).collect();
        loglog_slope(&x, &y)
    };
    let attention_slope = slope(BenchModel::Attention)?;
    let block_slope = slope(BenchModel::InfomambaBlock)?;
    Ok(ScalingReport { rows, attention_slope, block_slope })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_exact_power_laws() {
        let x = [256.0, 512.0, 1024.0, 2048.0];
        let y2: Vec<f64> = x.iter().map(|v: &f64| 3.0 * v * v).collect();
        let y1: Vec<f64> = x.iter().map(|v: &f64| 0.5 * v).collect();
        assert!((loglog_slope(&x, &y2).unwrap() - 2.0).abs() < 1e-12);
        assert!((loglog_slope(&x, &y1).unwrap() - 1.0).abs() < 1e-12);
        assert!(loglog_slope(&x, &[1.0, 2.0, 0.0, 4.0]).is_err());
        assert!(loglog_slope(&[5.0, 5.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn median_ignores_warmups() {
        let mut calls = 0;
        let protocol = TimingProtocol { repeats: 3, warmups: 2 };
        let t = median_time_ms(protocol, || calls += 1);
        assert_eq!(calls, 5);
        assert!(t >= 0.0);
    }

    #[test]
    fn small_bench_runs() {
        let setup = ScalingSetup { d: 4, d_state: 4, k_max: 4, protocol: TimingProtocol { repeats: 1, warmups: 0 }, seed: 1 };
        let r = scaling_bench(&[16, 32], &setup).unwrap();
        assert_eq!(r.rows.len(), 4);
        assert!(r.attention_slope.is_finite() && r.block_slope.is_finite());
        assert!(scaling_bench(&[16], &setup).is_err());
    }
}
