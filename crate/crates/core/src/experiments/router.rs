//! Two-path model with a learned per-token router, and the LSDI summary of
//! its routing behaviour.
//!
//! Each token mixes a causal-attention output and a gated SSM output,
//! `y_t = ρ_t y_t^attn + (1 − ρ_t) y_t^ssm` with `ρ_t = σ(w·e_t + b)`, so
//! `1 − ρ_t` is the weight given to the recurrent ("Mamba") path. Both path
//! outputs are RMS-normalized per token before mixing; otherwise the router
//! would mostly learn to rescale the SSM state, whose magnitude grows with
//! the sequence length.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::fusion::{tape_ssm, SsmVars};
use crate::losses::{LossParts, LossWeights};
use crate::numerics::{correlation, RealMatrix, SeededRng};
use crate::ssm::{SsmInit, SsmParams};

use super::model::Evaluation;
use super::tasks::{Batch, SyntheticTask};
use super::train::{fit, TrainConfig, Trainable};

#[derive(Clone, Debug, PartialEq)]
pub struct RouterModel {
    pub embed: RealMatrix,
    pub w_q: RealMatrix,
    pub w_k: RealMatrix,
    pub w_v: RealMatrix,
    pub ssm: SsmParams,
    /// `[1 x d]`
    pub router_w: RealMatrix,
    /// `[1 x 1]`
    pub router_b: RealMatrix,
    pub read_w: RealMatrix,
    pub read_b: RealMatrix,
    /// With the attention path disabled its output is zero.
    pub attention_enabled: bool,
    /// Each position attends to at most this many most recent tokens
    /// (itself included); `0` means the full causal prefix.
    pub window: usize,
}

/// Per-token routing weights and attention-path outputs of a batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouterTrace {
    /// `ρ_t` per sequence and position.
    pub rho: Vec<Vec<f64>>,
    /// Attention-path output per sequence, `[n x d]`.
    #[serde(skip)]
    pub attn: Vec<RealMatrix>,
}

impl RouterModel {
    pub fn new(d_in: usize, d: usize, d_state: usize, n_labels: usize, attention_enabled: bool, window: usize, seed: u64) -> Result<Self> {
        if d_in == 0 || d == 0 || d_state == 0 || n_labels < 2 {
            return Err(Error::Config("router model dimensions must be positive".into()));
        }
        let mut rng = SeededRng::new(seed);
        let sd = 1.0 / (d as f64).sqrt();
        let init = SsmInit { stability_bound: 0.9999, lambda_min: 0.9, allow_negative: false };
        Ok(Self {
            embed: rng.normal_matrix(d, d_in, 1.0 / (d_in as f64).sqrt()),
            w_q: rng.normal_matrix(d, d, sd),
            w_k: rng.normal_matrix(d, d, sd),
            w_v: rng.normal_matrix(d, d, sd),
            ssm: SsmParams::sample(d, d_state, d, init, &mut rng)?,
            router_w: RealMatrix::zeros(1, d),
            router_b: RealMatrix::zeros(1, 1),
            read_w: rng.normal_matrix(n_labels, d, 0.1),
            read_b: RealMatrix::zeros(1, n_labels),
            attention_enabled,
            window,
        })
    }

    fn forward(&self, batch: &Batch, backward: bool, mut trace: Option<&mut RouterTrace>) -> Result<Evaluation> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let d = self.embed.rows();
        let mut tape = Tape::new();
        let params = self.parameters();
        let vars: Vec<_> = params.into_iter().map(|p| tape.param(p)).collect();
        let [embed, wq, wk, wv, lambda, b, c, gw, gb, rw, rb, ow, ob] = vars[..] else {
            unreachable!("parameter layout has 13 tensors")
        };
        let ssm = SsmVars { lambda, b, c, gate_w: gw, gate_b: gb };
        let mut lasts = Vec::with_capacity(batch.len());
        for x in &batch.xs {
            let n = x.rows();
            let xv = tape.constant(x.clone());
            let e = tape.matmul_t(xv, embed);
            let (_, y_ssm) = tape_ssm(&mut tape, &ssm, e, None, true);
            let y_attn = if self.attention_enabled {
                let q = tape.matmul_t(e, wq);
                let k = tape.matmul_t(e, wk);
                let v = tape.matmul_t(e, wv);
                let w = if self.window == 0 { n } else { self.window };
                tape.local_attention(q, k, v, w, 1.0 / (d as f64).sqrt())
            } else {
                tape.constant(RealMatrix::zeros(n, d))
            };
            let y_ssm = rms_normalize(&mut tape, y_ssm);
            let y_attn = if self.attention_enabled { rms_normalize(&mut tape, y_attn) } else { y_attn };
            let gate = tape.matmul_t(e, rw);
            let gate = tape.add_row(gate, rb);
            let rho = tape.sigmoid(gate);
            let diff = tape.sub(y_attn, y_ssm);
            let routed = tape.mul_col(diff, rho);
            let y = tape.add(y_ssm, routed);
            let cur = tape.add(e, y);
            lasts.push(tape.slice_rows(cur, n - 1, 1));
            if let Some(tr) = trace.as_deref_mut() {
                tr.rho.push(tape.value(rho).col(0));
                tr.attn.push(tape.value(y_attn).clone());
            }
        }
        let z = tape.stack_rows(&lasts);
        let logits = tape.matmul_t(z, ow);
        let logits = tape.add_row(logits, ob);
        let loss = tape.cross_entropy(logits, &batch.labels)?;
        let total = tape.scalar(loss);
        let grads = if backward {
            let g = tape.backward(loss);
            vars.iter().map(|&v| g.wrt(v, tape.value(v).shape())).collect()
        } else {
            Vec::new()
        };
        Ok(Evaluation {
            total,
            parts: LossParts { task: total, ..LossParts::default() },
            logits: tape.value(logits).clone(),
            grads,
        })
    }

    /// Routing weights and attention outputs on `batch`.
    pub fn trace(&self, batch: &Batch) -> Result<RouterTrace> {
        let mut tr = RouterTrace { rho: Vec::new(), attn: Vec::new() };
        self.forward(batch, false, Some(&mut tr))?;
        Ok(tr)
    }
}

const RMS_EPS: f64 = 1e-6;

/// Scales every row to unit root-mean-square, so the router compares the two
/// paths at equal magnitude.
fn rms_normalize(tape: &mut Tape, y: Var) -> Var {
    let d = tape.value(y).cols() as f64;
    let sq = tape.mul(y, y);
    let ms = tape.sum_rows(sq);
    let ms = tape.scale(ms, 1.0 / d);
    let ms = tape.offset(ms, RMS_EPS);
    let rms = tape.sqrt(ms);
    tape.div_col(y, rms)
}

impl Trainable for RouterModel {
    fn parameters(&self) -> Vec<RealMatrix> {
        vec![
            self.embed.clone(),
            self.w_q.clone(),
            self.w_k.clone(),
            self.w_v.clone(),
            RealMatrix::row_vector(&self.ssm.lambda),
            self.ssm.b.clone(),
            self.ssm.c.clone(),
            RealMatrix::row_vector(&self.ssm.gate_w),
            RealMatrix::filled(1, 1, self.ssm.gate_b),
            self.router_w.clone(),
            self.router_b.clone(),
            self.read_w.clone(),
            self.read_b.clone(),
        ]
    }

    fn set_parameters(&mut self, values: Vec<RealMatrix>) -> Result<()> {
        let current = self.parameters();
        if values.len() != current.len() || values.iter().zip(&current).any(|(a, b)| a.shape() != b.shape()) {
            return Err(Error::shape("router parameters", current.len(), values.len()));
        }
        let mut it = values.into_iter();
        let mut next = || it.next().expect("length checked");
        self.embed = next();
        self.w_q = next();
        self.w_k = next();
        self.w_v = next();
        self.ssm.lambda = next().into_data();
        self.ssm.b = next();
        self.ssm.c = next();
        self.ssm.gate_w = next().into_data();
        self.ssm.gate_b = next().get(0, 0);
        self.router_w = next();
        self.router_b = next();
        self.read_w = next();
        self.read_b = next();
        self.ssm.project_stable();
        Ok(())
    }

    fn evaluate(&self, batch: &Batch, _weights: &LossWeights, backward: bool) -> Result<Evaluation> {
        self.forward(batch, backward, None)
    }
}

/// Weights and thresholds of the long-short dependency index.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LsdiConfig {
    pub w_psr: f64,
    pub w_mw: f64,
    pub w_tcs: f64,
    /// Recurrent-path weight above which a token counts toward PSR.
    pub psr_threshold: f64,
}

impl Default for LsdiConfig {
    fn default() -> Self {
        Self { w_psr: 0.25, w_mw: 0.5, w_tcs: 0.25, psr_threshold: 0.75 }
    }
}

impl LsdiConfig {
    pub fn from_weights(w: &[f64], psr_threshold: f64) -> Result<Self> {
        let [w_psr, w_mw, w_tcs] = w[..] else {
            return Err(Error::invalid("LSDI needs exactly three weights"));
        };
        let cfg = Self { w_psr, w_mw, w_tcs, psr_threshold };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let w = [self.w_psr, self.w_mw, self.w_tcs];
        if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("LSDI weights must be nonnegative and sum to 1"));
        }
        if !(0.0..=1.0).contains(&self.psr_threshold) {
            return Err(Error::invalid("PSR threshold must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LsdiParts {
    /// Fraction of tokens routed mostly (above the threshold) to the SSM.
    pub psr: f64,
    /// Mean SSM weight `1 − ρ_t`.
    pub mw: f64,
    /// Lag-1 autocorrelation of the attention output, clamped to `[0, 1]`.
    pub tcs: f64,
    pub lsdi: f64,
}

/// `w_psr PSR + w_mw MW + w_tcs (1 − TCS)`.
pub fn lsdi(trace: &RouterTrace, cfg: &LsdiConfig) -> Result<LsdiParts> {
    cfg.validate()?;
    let tokens: Vec<f64> = trace.rho.iter().flatten().copied().collect();
    if tokens.is_empty() {
        return Err(Error::invalid("empty router trace"));
    }
    let count = tokens.len() as f64;
    let mw = tokens.iter().map(|r| 1.0 - r).sum::<f64>() / count;
    let psr = tokens.iter().filter(|&&r| 1.0 - r > cfg.psr_threshold).count() as f64 / count;
    let tcs = if trace.attn.is_empty() {
        0.0
    } else {
        let per_seq: Vec<f64> = trace.attn.iter().map(lag1_autocorrelation).collect();
        (per_seq.iter().sum::<f64>() / per_seq.len() as f64).clamp(0.0, 1.0)
    };
    let lsdi = cfg.w_psr * psr + cfg.w_mw * mw + cfg.w_tcs * (1.0 - tcs);
    Ok(LsdiParts { psr, mw, tcs, lsdi })
}

/// Correlation between `y_t` and `y_{t+1}` over all positions and channels.
pub fn lag1_autocorrelation(y: &RealMatrix) -> f64 {
    if y.rows() < 2 {
        return 0.0;
    }
    let head = &y.data()[..(y.rows() - 1) * y.cols()];
    let tail = &y.data()[y.cols()..];
    correlation(head, tail)
}

/// One router run at one lag.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouterPoint {
    pub lag: usize,
    pub seed: u64,
    pub metric: f64,
    /// Mean `1 − ρ_t` over evaluation tokens.
    pub mamba_weight: f64,
    pub lsdi: LsdiParts,
}

/// Settings shared by every cell of the router experiment.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouterSetup {
    pub task: SyntheticTask,
    /// Tokens before the lag window: `n = lag + 1 + pad`.
    pub pad: usize,
    pub d_model: usize,
    pub d_state: usize,
    pub attention_enabled: bool,
    /// Attention window; `0` is unbounded.
    pub window: usize,
    pub train: TrainConfig,
    pub lsdi: LsdiConfig,
}

/// Trains a router model at `lag` and summarizes its routing on held-out
/// sequences.
pub fn router_point(setup: &RouterSetup, lag: usize, seed: u64) -> Result<RouterPoint> {
    let task = SyntheticTask { lag, n: lag + 1 + setup.pad, seed, ..setup.task };
    task.validate()?;
    let mut model = RouterModel::new(task.feature_dim(), setup.d_model, setup.d_state, task.num_labels(), setup.attention_enabled, setup.window, seed)?;
    let (outcome, _) = fit(&mut model, &task, &setup.train, seed)?;
    let probe = task.generate(setup.train.batch.max(2), 1)?;
    let trace = model.trace(&probe)?;
    let parts = lsdi(&trace, &setup.lsdi)?;
    Ok(RouterPoint { lag, seed, metric: outcome.metric, mamba_weight: parts.mw, lsdi: parts })
}

/// Mean Mamba weight per lag, averaged over seeds, is nondecreasing up to
/// `tolerance`.
pub fn is_monotone(points: &[RouterPoint], lags: &[usize], tolerance: f64) -> bool {
    let means: Vec<f64> = lags
        .iter()
        .map(|&l| {
            let v: Vec<f64> = points.iter().filter(|p| p.lag == l).map(|p| p.mamba_weight).collect();
            v.iter().sum::<f64>() / v.len().max(1) as f64
        })
        .collect();
    means.windows(2).all(|w| w[1] >= w[0] - tolerance)
}
