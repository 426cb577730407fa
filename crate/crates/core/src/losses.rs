//! Training objectives with closed-form gradients: supervised InfoNCE on the
//! pooled streams, the standardized cross-covariance redundancy penalty,
//! cross-entropy, and their weighted total.
//!
//! Every evaluation bumps a per-thread counter so tests can assert that the
//! inference path never touches a loss.

use std::cell::Cell;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, log_sum_exp, masked_softmax, softmax_unchecked, RealMatrix};

/// Added to vector norms before dividing in cosine similarity.
pub const COSINE_EPS: f64 = 1e-12;
/// Floor for per-dimension standard deviations in the redundancy penalty.
pub const STD_EPS: f64 = 1e-8;

thread_local! {
    static LOSS_EVALS: Cell<u64> = const { Cell::new(0) };
}

pub(crate) fn record_evaluation() {
    LOSS_EVALS.with(|c| c.set(c.get() + 1));
}

/// Number of loss evaluations performed on the current thread.
pub fn loss_evaluations() -> u64 {
    LOSS_EVALS.with(Cell::get)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub beta: f64,
    pub gamma: f64,
    /// Weight of the hash-bucketing InfoMax term.
    pub eta: f64,
    pub tau_nce: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            beta: 0.1,
            gamma: 0.05,
            eta: 0.1,
            tau_nce: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("beta", self.beta), ("gamma", self.gamma), ("eta", self.eta)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(format!("loss weight {name} must be >= 0, got {v}")));
            }
        }
        if !(self.tau_nce.is_finite() && self.tau_nce > 0.0) {
            return Err(Error::invalid("tau_nce must be positive"));
        }
        Ok(())
    }
}

/// Individual loss values entering the total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub task: f64,
    pub nce_h: f64,
    pub nce_r: f64,
    pub redundancy: f64,
    pub mi_hash: f64,
}

/// `task + beta (nce_h + nce_r) + gamma red + eta mi_hash`.
///
/// The gradient contract is linear: each part's gradient enters the total
/// scaled by the same weight.
pub fn total_loss(parts: &LossParts, weights: &LossWeights) -> Result<f64> {
    weights.validate()?;
    let mut total = parts.task;
    if weights.beta != 0.0 {
        total += weights.beta * (parts.nce_h + parts.nce_r);
    }
    if weights.gamma != 0.0 {
        total += weights.gamma * parts.redundancy;
    }
    if weights.eta != 0.0 {
        total += weights.eta * parts.mi_hash;
    }
    Ok(total)
}

/// Row-normalizes `x` by `‖x_i‖ + COSINE_EPS`; also returns the raw norms.
pub(crate) fn normalize_rows(x: &RealMatrix) -> (RealMatrix, Vec<f64>) {
    let norms: Vec<f64> = (0..x.rows()).map(|r| dot(x.row(r), x.row(r)).sqrt()).collect();
    let out = RealMatrix::from_fn(x.rows(), x.cols(), |r, c| x.get(r, c) / (norms[r] + COSINE_EPS));
    (out, norms)
}

/// Pulls a gradient on the normalized rows back to the raw rows.
pub(crate) fn normalize_rows_backward(x: &RealMatrix, norms: &[f64], g: &RealMatrix) -> RealMatrix {
    let mut out = RealMatrix::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        let a = norms[r];
        let s = a + COSINE_EPS;
        let proj = if a > 0.0 { dot(x.row(r), g.row(r)) / (s * s * a) } else { 0.0 };
        for (c, o) in out.row_mut(r).iter_mut().enumerate() {
            *o = g.get(r, c) / s - x.get(r, c) * proj;
        }
    }
    out
}

/// Supervised InfoNCE with cosine similarity; anchors without a positive are
/// skipped.
pub fn info_nce(reps: &RealMatrix, labels: &[usize], tau: f64) -> Result<f64> {
    Ok(info_nce_grad(reps, labels, tau)?.0)
}

/// Number of anchors [`info_nce`] skips because their class has no other
/// member in the batch.
pub fn info_nce_skipped(labels: &[usize]) -> usize {
    labels
        .iter()
        .enumerate()
        .filter(|(i, c)| !labels.iter().enumerate().any(|(j, d)| j != *i && d == *c))
        .count()
}

pub fn info_nce_grad(reps: &RealMatrix, labels: &[usize], tau: f64) -> Result<(f64, RealMatrix)> {
    let m = reps.rows();
    if m < 2 {
        return Err(Error::invalid("InfoNCE needs at least two representations"));
    }
    if labels.len() != m {
        return Err(Error::shape("info_nce labels", m, labels.len()));
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::invalid("InfoNCE temperature must be positive"));
    }
    record_evaluation();
    let (normed, norms) = normalize_rows(reps);
    let sim = normed.matmul_t(&normed).scale(1.0 / tau);

    let mut g_sim = RealMatrix::zeros(m, m);
    let mut total = 0.0;
    let mut anchors = 0usize;
    for i in 0..m {
        let neg_mask: Vec<bool> = (0..m).map(|a| a != i).collect();
        let pos_mask: Vec<bool> = (0..m).map(|p| p != i && labels[p] == labels[i]).collect();
        if !pos_mask.iter().any(|&b| b) {
            continue;
        }
        anchors += 1;
        let row = sim.row(i);
        let pick = |mask: &[bool]| -> Vec<f64> {
            row.iter().zip(mask).filter(|(_, &k)| k).map(|(&v, _)| v).collect()
        };
        total += log_sum_exp(&pick(&neg_mask)) - log_sum_exp(&pick(&pos_mask));
        let p_neg = masked_softmax(row, &neg_mask);
        let p_pos = masked_softmax(row, &pos_mask);
        for j in 0..m {
            g_sim.set(i, j, p_neg[j] - p_pos[j]);
        }
    }
    if anchors == 0 {
        return Ok((0.0, RealMatrix::zeros(reps.rows(), reps.cols())));
    }
    let scale = 1.0 / (anchors as f64 * tau);
    let g_sym = g_sim.add(&g_sim.transpose()).scale(scale);
    let g_normed = g_sym.matmul(&normed);
    let grad = normalize_rows_backward(reps, &norms, &g_normed);
    Ok((total / anchors as f64, grad))
}

struct Standardized {
    values: RealMatrix,
    centered: RealMatrix,
    raw_std: Vec<f64>,
}

fn standardize(x: &RealMatrix) -> Standardized {
    let m = x.rows() as f64;
    let mean = x.mean_rows();
    let centered = RealMatrix::from_fn(x.rows(), x.cols(), |r, c| x.get(r, c) - mean[c]);
    let raw_std: Vec<f64> = (0..x.cols())
        .map(|c| ((0..x.rows()).map(|r| centered.get(r, c).powi(2)).sum::<f64>() / m).sqrt())
        .collect();
    let values = RealMatrix::from_fn(x.rows(), x.cols(), |r, c| centered.get(r, c) / raw_std[c].max(STD_EPS));
    Standardized {
        values,
        centered,
        raw_std,
    }
}

fn standardize_backward(s: &Standardized, g: &RealMatrix) -> RealMatrix {
    let (rows, cols) = g.shape();
    let m = rows as f64;
    let mut out = RealMatrix::zeros(rows, cols);
    for c in 0..cols {
        let sd = s.raw_std[c];
        let sigma = sd.max(STD_EPS);
        let gc_dot: f64 = (0..rows).map(|r| g.get(r, c) * s.centered.get(r, c)).sum();
        let coef = if sd > STD_EPS { gc_dot / (m * sd * sigma * sigma) } else { 0.0 };
        let g_centered: Vec<f64> = (0..rows)
            .map(|r| g.get(r, c) / sigma - s.centered.get(r, c) * coef)
            .collect();
        let mean_g = g_centered.iter().sum::<f64>() / m;
        for (r, v) in g_centered.iter().enumerate() {
            out.set(r, c, v - mean_g);
        }
    }
    out
}

/// Squared Frobenius norm of the batch cross-covariance between the
/// per-dimension standardized streams (population statistics). Dimensions
/// whose standard deviation falls below [`STD_EPS`] are divided by the floor
/// instead, so constant columns standardize to zero.
pub fn redundancy_loss(h: &RealMatrix, r: &RealMatrix) -> Result<f64> {
    Ok(redundancy_loss_grad(h, r)?.0)
}

pub fn redundancy_loss_grad(h: &RealMatrix, r: &RealMatrix) -> Result<(f64, RealMatrix, RealMatrix)> {
    if h.rows() != r.rows() {
        return Err(Error::shape("redundancy_loss batch", h.rows(), r.rows()));
    }
    if h.rows() < 2 {
        return Err(Error::invalid("redundancy penalty needs at least two samples"));
    }
    record_evaluation();
    let m = h.rows() as f64;
    let hs = standardize(h);
    let rs = standardize(r);
    let cross = hs.values.t_matmul(&rs.values).scale(1.0 / m);
    let value = cross.data().iter().map(|v| v * v).sum();
    let g_h = rs.values.matmul_t(&cross).scale(2.0 / m);
    let g_r = hs.values.matmul(&cross).scale(2.0 / m);
    Ok((value, standardize_backward(&hs, &g_h), standardize_backward(&rs, &g_r)))
}

/// Mean cross-entropy of `logits` (rows) against integer labels.
pub fn task_loss(logits: &RealMatrix, labels: &[usize]) -> Result<f64> {
    Ok(task_loss_grad(logits, labels)?.0)
}

pub fn task_loss_grad(logits: &RealMatrix, labels: &[usize]) -> Result<(f64, RealMatrix)> {
    let (m, classes) = logits.shape();
    if labels.len() != m {
        return Err(Error::shape("task_loss labels", m, labels.len()));
    }
    if m == 0 {
        return Err(Error::invalid("task loss of an empty batch"));
    }
    if let Some(&bad) = labels.iter().find(|&&c| c >= classes) {
        return Err(Error::invalid(format!("label {bad} out of range for {classes} classes")));
    }
    record_evaluation();
    let mut grad = RealMatrix::zeros(m, classes);
    let mut total = 0.0;
    for (i, &c) in labels.iter().enumerate() {
        let row = logits.row(i);
        total += log_sum_exp(row) - row[c];
        let p = softmax_unchecked(row, 1.0);
        for (j, pj) in p.iter().enumerate() {
            let onehot = if j == c { 1.0 } else { 0.0 };
            grad.set(i, j, (pj - onehot) / m as f64);
        }
    }
    Ok((total / m as f64, grad))
}
