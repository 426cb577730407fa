//! Diagnostics for when a diagonal SSM can stand in for causal attention.
//!
//! The central object is the fit of an attention kernel `w(l)`, `l = 0..=K`,
//! by an exponential mixture `Σ_i β_i λ_i^l`. The residual is measured in
//! `ℓ1`. From a fit we build the equivalent SSM, compare its outputs with the
//! attention it imitates and check the worst-case bound
//!
//! ```text
//! max_t ‖y_t^attn − y_t^ssm‖ ≤ ‖W_V‖ M max_t ε_t + M Σ_{l>K} ‖H_l‖
//! ```
//!
//! where `M = max_t ‖x_t‖` and `H_l` is the SSM's lag-`l` kernel matrix.
//! Kernels outside the exponential family (a spike at a far lag, say) leave
//! a residual floor that no small mixture closes; that floor is estimated by
//! multi-restart search and reported as empirical, never certified.

use serde::{Deserialize, Serialize};

use crate::attention::{attention_forward, attention_weights, diagonal_mass_of, AttentionParams, Mode};
use crate::concept::{concept_mix, sparsify, soft_assign, ConceptConfig, ConceptFilterParams, Mixing};
use crate::error::{Error, Result};
use crate::extended::{self, DoubleDouble as Dd};
use crate::linalg::{lstsq, singular_values, spectral_norm};
use crate::numerics::{correlation, RealMatrix, SeededRng};
use crate::ssm::{effective_kernel, spectral_radius, ssm_scan, SsmParams};

/// Largest pole magnitude the free-mode search may visit.
pub const POLE_LIMIT: f64 = 0.9999;

/// The default 64-point log-spaced pole grid on `[0.01, 0.99]`.
pub fn default_grid() -> Vec<f64> {
    let (lo, hi) = (0.01f64.ln(), 0.99f64.ln());
    (0..64).map(|i| (lo + (hi - lo) * i as f64 / 63.0).exp()).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum FitMode {
    /// Greedy nested selection of poles from a fixed grid, least-squares β.
    Grid(Vec<f64>),
    /// Pattern search over poles with `ℓ1`-optimal β; restart 0 starts from
    /// the default-grid fit, the others from seeded random poles.
    Free { restarts: usize, seed: u64 },
}

impl FitMode {
    pub fn grid() -> Self {
        FitMode::Grid(default_grid())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpMixtureFit {
    pub m: usize,
    pub lambdas: Vec<f64>,
    pub betas: Vec<f64>,
    /// Low-order parts of the coefficients; nonzero only in the interpolation
    /// regime, where the coefficients are solved in double-double precision.
    pub betas_lo: Vec<f64>,
    pub horizon: usize,
    /// `Σ_l |w(l) − Σ_i β_i λ_i^l|`.
    pub residual: f64,
    pub fitted_kernel: Vec<f64>,
    pub warning: Option<String>,
}

impl ExpMixtureFit {
    fn beta_dd(&self, i: usize) -> Dd {
        Dd::new(self.betas[i], 0.0) + Dd::from(self.betas_lo.get(i).copied().unwrap_or(0.0))
    }

    /// `Σ_i β_i λ_i^l`, accumulated in double-double.
    pub fn kernel_value(&self, lag: usize) -> f64 {
        self.kernel_value_dd(lag).to_f64()
    }

    fn kernel_value_dd(&self, lag: usize) -> Dd {
        let mut acc = Dd::ZERO;
        for (i, &l) in self.lambdas.iter().enumerate() {
            acc = acc + self.beta_dd(i) * dd_pow(l, lag);
        }
        acc
    }

    /// Recomputes the `ℓ1` residual against `w` from the stored poles and
    /// coefficients.
    pub fn recompute_residual(&self, w: &[f64]) -> f64 {
        let mut acc = Dd::ZERO;
        for (l, &wl) in w.iter().enumerate() {
            acc = acc + (Dd::from(wl) - self.kernel_value_dd(l)).abs();
        }
        acc.to_f64()
    }
}

fn dd_pow(x: f64, k: usize) -> Dd {
    let mut acc = Dd::ONE;
    let base = Dd::from(x);
    for _ in 0..k {
        acc = acc * base;
    }
    acc
}

fn basis(lambdas: &[f64], horizon: usize) -> RealMatrix {
    RealMatrix::from_fn(horizon + 1, lambdas.len(), |l, i| lambdas[i].powi(l as i32))
}

fn eval_kernel(lambdas: &[f64], betas: &[f64], horizon: usize) -> Vec<f64> {
    (0..=horizon)
        .map(|l| lambdas.iter().zip(betas).map(|(lam, b)| b * lam.powi(l as i32)).sum())
        .collect()
}

fn l1_residual(w: &[f64], lambdas: &[f64], betas: &[f64]) -> f64 {
    let k = eval_kernel(lambdas, betas, w.len() - 1);
    w.iter().zip(&k).map(|(a, b)| (a - b).abs()).sum()
}

/// `ℓ1`-optimal coefficients for fixed poles: weighted median for a single
/// pole, iteratively reweighted least squares otherwise.
fn l1_betas(w: &[f64], lambdas: &[f64]) -> Result<Vec<f64>> {
    let a = basis(lambdas, w.len() - 1);
    if lambdas.len() == 1 {
        let mut pts: Vec<(f64, f64)> = (0..w.len())
            .filter(|&l| a.get(l, 0) != 0.0)
            .map(|l| (w[l] / a.get(l, 0), a.get(l, 0).abs()))
            .collect();
        if pts.is_empty() {
            return Ok(vec![0.0]);
        }
        pts.sort_by(|x, y| x.0.total_cmp(&y.0));
        let half = pts.iter().map(|p| p.1).sum::<f64>() / 2.0;
        let mut acc = 0.0;
        for (v, wt) in &pts {
            acc += wt;
            if acc >= half {
                return Ok(vec![*v]);
            }
        }
        return Ok(vec![pts.last().map_or(0.0, |p| p.0)]);
    }
    let mut beta = lstsq(&a, w)?;
    let mut best = (l1_residual(w, lambdas, &beta), beta.clone());
    for _ in 0..40 {
        let k = eval_kernel(lambdas, &beta, w.len() - 1);
        let wts: Vec<f64> = w.iter().zip(&k).map(|(x, y)| 1.0 / (x - y).abs().max(1e-12).sqrt()).collect();
        let aw = RealMatrix::from_fn(a.rows(), a.cols(), |r, c| a.get(r, c) * wts[r]);
        let bw: Vec<f64> = w.iter().zip(&wts).map(|(x, s)| x * s).collect();
        beta = lstsq(&aw, &bw)?;
        let res = l1_residual(w, lambdas, &beta);
        if res < best.0 {
            best = (res, beta.clone());
        }
    }
    Ok(best.1)
}

fn chebyshev_nodes(count: usize) -> Vec<f64> {
    (0..count)
        .map(|j| ((2 * j + 1) as f64 * std::f64::consts::PI / (2 * count) as f64).cos())
        .collect()
}

/// Exact interpolation with `K + 1` Chebyshev poles, solved in double-double.
fn interpolate(w: &[f64]) -> Result<ExpMixtureFit> {
    let horizon = w.len() - 1;
    let lambdas = chebyshev_nodes(horizon + 1);
    let a: Vec<Vec<Dd>> = (0..=horizon).map(|l| lambdas.iter().map(|&lam| dd_pow(lam, l)).collect()).collect();
    let b: Vec<Dd> = w.iter().map(|&v| Dd::from(v)).collect();
    let sol = extended::solve(a, b).ok_or_else(|| Error::Numerical("interpolation system is singular".into()))?;
    let mut fit = ExpMixtureFit {
        m: horizon + 1,
        lambdas,
        betas: sol.iter().map(|v| v.hi).collect(),
        betas_lo: sol.iter().map(|v| v.lo).collect(),
        horizon,
        residual: 0.0,
        fitted_kernel: Vec::new(),
        warning: None,
    };
    fit.fitted_kernel = (0..=horizon).map(|l| fit.kernel_value(l)).collect();
    fit.residual = fit.recompute_residual(w);
    Ok(fit)
}

fn finish(w: &[f64], lambdas: Vec<f64>, betas: Vec<f64>) -> ExpMixtureFit {
    let horizon = w.len() - 1;
    let fitted_kernel = eval_kernel(&lambdas, &betas, horizon);
    let residual = w.iter().zip(&fitted_kernel).map(|(a, b)| (a - b).abs()).sum();
    ExpMixtureFit {
        m: lambdas.len(),
        betas_lo: vec![0.0; lambdas.len()],
        lambdas,
        betas,
        horizon,
        residual,
        fitted_kernel,
        warning: None,
    }
}

fn greedy_grid(w: &[f64], m: usize, grid: &[f64]) -> Result<ExpMixtureFit> {
    let mut chosen: Vec<f64> = Vec::new();
    let mut betas: Vec<f64> = Vec::new();
    let mut residual: f64 = w.iter().map(|v| v.abs()).sum();
    for _ in 0..m {
        let mut best: Option<(f64, f64, Vec<f64>)> = None;
        for &g in grid {
            if chosen.contains(&g) {
                continue;
            }
            let mut cand = chosen.clone();
            cand.push(g);
            let b = lstsq(&basis(&cand, w.len() - 1), w)?;
            let r = l1_residual(w, &cand, &b);
            if best.as_ref().is_none_or(|(br, _, _)| r < *br) {
                best = Some((r, g, b));
            }
        }
        match best {
            Some((r, g, b)) if r < residual => {
                chosen.push(g);
                betas = b;
                residual = r;
            }
            _ => break,
        }
    }
    // Unused slots keep β = 0 on the next unused grid poles so that the fit
    // always reports m terms.
    for &g in grid {
        if chosen.len() >= m {
            break;
        }
        if !chosen.contains(&g) {
            chosen.push(g);
            betas.push(0.0);
        }
    }
    Ok(finish(w, chosen, betas))
}

fn pattern_search(w: &[f64], start: Vec<f64>) -> Result<(Vec<f64>, Vec<f64>, f64)> {
    let objective = |lams: &[f64]| -> Result<(f64, Vec<f64>)> {
        let b = l1_betas(w, lams)?;
        Ok((l1_residual(w, lams, &b), b))
    };
    let mut lams = start;
    let (mut best, mut betas) = objective(&lams)?;
    let mut step = 0.05;
    let mut evals = 0usize;
    while step > 1e-12 && evals < 20_000 {
        let mut improved = false;
        for i in 0..lams.len() {
            for dir in [1.0, -1.0] {
                let mut cand = lams.clone();
                cand[i] = (cand[i] + dir * step).clamp(-POLE_LIMIT, POLE_LIMIT);
                if cand[i] == lams[i] {
                    continue;
                }
                evals += 1;
                let (r, b) = objective(&cand)?;
                if r < best {
                    best = r;
                    betas = b;
                    lams = cand;
                    improved = true;
                    break;
                }
            }
        }
        if !improved {
            step *= 0.5;
        }
    }
    Ok((lams, betas, best))
}

/// Fits `w` (lags `0..=K`) with `m` exponential terms.
///
/// With `m ≥ K + 1` the fit switches to exact interpolation on `K + 1`
/// poles (recording a warning when `m` had to be reduced).
pub fn fit_exp_mixture(w: &[f64], m: usize, mode: &FitMode) -> Result<ExpMixtureFit> {
    if w.is_empty() {
        return Err(Error::invalid("kernel must have at least one lag"));
    }
    if m == 0 {
        return Err(Error::invalid("need at least one exponential term"));
    }
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("kernel contains non-finite values"));
    }
    let horizon = w.len() - 1;
    if m >= horizon + 1 {
        let mut fit = interpolate(w)?;
        if m > horizon + 1 {
            fit.warning = Some(format!("m = {m} exceeds K + 1 = {}; reduced to exact interpolation", horizon + 1));
        }
        return Ok(fit);
    }
    match mode {
        FitMode::Grid(grid) => {
            if grid.iter().any(|g| !(g.abs() < 1.0)) {
                return Err(Error::invalid("grid poles must lie in (-1, 1)"));
            }
            greedy_grid(w, m, grid)
        }
        FitMode::Free { restarts, seed } => {
            let base = greedy_grid(w, m, &default_grid())?;
            let root = SeededRng::new(*seed);
            let mut best = pattern_search(w, base.lambdas.clone())?;
            for r in 1..(*restarts).max(1) {
                let mut rng = root.fork(r as u64);
                let start: Vec<f64> = (0..m).map(|_| rng.uniform_range(-0.99, 0.99)).collect();
                let cand = pattern_search(w, start)?;
                if cand.2 < best.2 {
                    best = cand;
                }
            }
            Ok(finish(w, best.0, best.1))
        }
    }
}

/// Mean over samples and positions `t ≥ K` of the normalized residual
/// `ε_t / Σ_l |w_t(l)|` of fitting each truncated kernel.
pub fn epsilon_exp(attention: &AttentionParams, samples: &[RealMatrix], m: usize, horizon: usize, mode: &FitMode) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for x in samples {
        if x.rows() <= horizon {
            return Err(Error::invalid(format!("sequence of {} tokens is too short for horizon {horizon}", x.rows())));
        }
        let a = attention_weights(attention, x, Mode::Causal)?;
        for t in horizon..x.rows() {
            let w: Vec<f64> = (0..=horizon).map(|l| a.get(t, t - l)).collect();
            let mass: f64 = w.iter().map(|v| v.abs()).sum();
            if mass == 0.0 {
                continue;
            }
            total += fit_exp_mixture(&w, m, mode)?.residual / mass;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::invalid("no kernels to fit"));
    }
    Ok(total / count as f64)
}

/// Numerical rank of the Hankel matrix `H[i, j] = w(i + j)`.
pub fn hankel_rank(w: &[f64], tol: f64) -> usize {
    if w.is_empty() {
        return 0;
    }
    let horizon = w.len() - 1;
    let rows = horizon / 2 + 1;
    let cols = horizon - horizon / 2 + 1;
    let h = RealMatrix::from_fn(rows, cols, |i, j| w[i + j]);
    let sv = singular_values(&h);
    let top = sv.first().copied().unwrap_or(0.0);
    if top == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > tol * top).count()
}

/// Channel-wise SSM whose lag-`l` kernel is `W_V Σ_i β_i λ_i^l`: each input
/// channel owns `m` states with poles `λ_i`, and the readout combines them
/// with `β` through `W_V`.
pub fn ssm_from_fit(fit: &ExpMixtureFit, w_v: &RealMatrix) -> Result<SsmParams> {
    let d = w_v.cols();
    let m = fit.m;
    if w_v.rows() == 0 || d == 0 {
        return Err(Error::invalid("W_V must be non-empty"));
    }
    let lambda: Vec<f64> = (0..d).flat_map(|_| fit.lambdas.iter().copied()).collect();
    let b = RealMatrix::from_fn(d * m, d, |s, c| if s / m == c { 1.0 } else { 0.0 });
    let c = RealMatrix::from_fn(w_v.rows(), d * m, |o, s| w_v.get(o, s / m) * fit.betas[s % m]);
    SsmParams::new(lambda, b, c, vec![0.0; d], 0.0)
}

/// Correlation over positions between the gate `g_t` and the attention
/// self-weight `w_t(0)`.
pub fn gate_alignment(ssm: &SsmParams, attention: &AttentionParams, x: &RealMatrix) -> Result<f64> {
    let a = attention_weights(attention, x, Mode::Causal)?;
    let gates = ssm.gates(x, true);
    let diag: Vec<f64> = (0..x.rows()).map(|t| a.get(t, t)).collect();
    Ok(correlation(&gates, &diag))
}

/// Summary emitted as JSON with fixed field names.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundaryReport {
    pub eps_exp: f64,
    pub hankel_rank: usize,
    pub diagonal_mass: f64,
    pub rho_lambda: f64,
    pub gate_alignment: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub inside_regime: bool,
    pub certified: bool,
}

impl BoundaryReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyOptions {
    pub mode: FitMode,
    /// Largest `ε_exp` still counted as inside the regime.
    pub eps_threshold: f64,
    /// Stability bound `r` the fitted poles must respect.
    pub stability_bound: f64,
    pub band: usize,
    pub hankel_tol: f64,
    /// Positions used for `ε_exp`: up to this many, evenly spaced over
    /// `K..n`.
    pub eps_positions: usize,
    /// SSM whose gates are compared with the attention self-weights.
    pub gate_ssm: Option<SsmParams>,
}

impl Default for ConsistencyOptions {
    fn default() -> Self {
        Self {
            mode: FitMode::Free { restarts: 2, seed: 0 },
            eps_threshold: 0.05,
            stability_bound: 0.999,
            band: 2,
            hankel_tol: 1e-8,
            eps_positions: 4,
            gate_ssm: None,
        }
    }
}

/// Full result of [`consistency_check`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyOutcome {
    pub report: BoundaryReport,
    /// Fit of the last position's kernel, deployed as the SSM.
    pub fit: Option<ExpMixtureFit>,
    /// Per-position deviation of the attention kernel from the deployed
    /// kernel, attention mass beyond `K` included.
    pub eps_t: Vec<f64>,
    pub input_bound: f64,
    pub w_v_norm: f64,
    pub tail: f64,
    pub diagnostics: Vec<String>,
}

/// Builds the SSM from the last position's kernel fit and checks the
/// worst-case output bound on `x`.
pub fn consistency_check(
    attention: &AttentionParams,
    x: &RealMatrix,
    m: usize,
    horizon: usize,
    opts: &ConsistencyOptions,
) -> Result<ConsistencyOutcome> {
    let n = x.rows();
    if n == 0 || horizon >= n {
        return Err(Error::invalid(format!("horizon {horizon} needs more than {n} tokens")));
    }
    let a = attention_weights(attention, x, Mode::Causal)?;
    let w_last: Vec<f64> = (0..=horizon).map(|l| a.get(n - 1, n - 1 - l)).collect();
    let mut diagnostics = Vec::new();
    let diag_mass = diagonal_mass_of(&a, opts.band);
    let hrank = hankel_rank(&w_last, opts.hankel_tol);
    let gate_align = match &opts.gate_ssm {
        Some(s) => gate_alignment(s, attention, x)?,
        None => 0.0,
    };

    let positions: Vec<usize> = {
        let span = n - horizon;
        let k = opts.eps_positions.clamp(1, span);
        let mut p: Vec<usize> = (0..k).map(|i| horizon + (i * (span - 1)) / (k - 1).max(1)).collect();
        p.dedup();
        p
    };
    let mut eps_sum = 0.0;
    for &t in &positions {
        let w: Vec<f64> = (0..=horizon).map(|l| a.get(t, t - l)).collect();
        let mass: f64 = w.iter().sum();
        eps_sum += fit_exp_mixture(&w, m, &opts.mode)?.residual / mass;
    }
    let eps_exp = eps_sum / positions.len() as f64;

    let fit = match fit_exp_mixture(&w_last, m, &opts.mode) {
        Ok(f) if f.residual.is_finite() && f.betas.iter().all(|b| b.is_finite()) => Some(f),
        Ok(_) => {
            diagnostics.push("fit produced non-finite coefficients".into());
            None
        }
        Err(e) => {
            diagnostics.push(format!("fit failed: {e}"));
            None
        }
    };
    let Some(fit) = fit else {
        let report = BoundaryReport {
            eps_exp,
            hankel_rank: hrank,
            diagonal_mass: diag_mass,
            rho_lambda: f64::NAN,
            gate_alignment: gate_align,
            lhs: f64::NAN,
            rhs: f64::NAN,
            inside_regime: false,
            certified: false,
        };
        return Ok(ConsistencyOutcome {
            report,
            fit: None,
            eps_t: Vec::new(),
            input_bound: 0.0,
            w_v_norm: 0.0,
            tail: 0.0,
            diagnostics,
        });
    };

    let ssm = ssm_from_fit(&fit, &attention.w_v)?;
    let rho = spectral_radius(&ssm);
    let kernel: Vec<f64> = (0..n).map(|l| fit.kernel_value(l)).collect();
    let eps_t: Vec<f64> = (0..n)
        .map(|t| {
            let near: f64 = (0..=t.min(horizon)).map(|l| (a.get(t, t - l) - kernel[l]).abs()).sum();
            let far: f64 = (horizon + 1..=t).map(|l| a.get(t, t - l)).sum();
            near + far
        })
        .collect();
    let y_attn = attention_forward(attention, x, Mode::Causal)?;
    let y_ssm = ssm_scan(&ssm, x, None, false)?.outputs;
    let lhs = (0..n)
        .map(|t| y_attn.row(t).iter().zip(y_ssm.row(t)).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt())
        .fold(0.0, f64::max);
    let input_bound = (0..n).map(|t| x.row(t).iter().map(|v| v * v).sum::<f64>().sqrt()).fold(0.0, f64::max);
    let w_v_norm = spectral_norm(&attention.w_v);
    let mut tail = 0.0;
    for l in horizon + 1..n {
        tail += spectral_norm(&effective_kernel(&ssm, None, n - 1, l)?);
    }
    let eps_max = eps_t.iter().copied().fold(0.0, f64::max);
    let rhs = w_v_norm * input_bound * eps_max + input_bound * tail;
    let inside = eps_exp <= opts.eps_threshold && rho <= opts.stability_bound;
    if eps_exp > opts.eps_threshold {
        diagnostics.push(format!("eps_exp {eps_exp:.3e} above threshold {:.3e}", opts.eps_threshold));
    }
    if rho > opts.stability_bound {
        diagnostics.push(format!("spectral radius {rho} above stability bound {}", opts.stability_bound));
    }
    if let Some(wn) = &fit.warning {
        diagnostics.push(wn.clone());
    }
    Ok(ConsistencyOutcome {
        report: BoundaryReport {
            eps_exp,
            hankel_rank: hrank,
            diagonal_mass: diag_mass,
            rho_lambda: rho,
            gate_alignment: gate_align,
            lhs,
            rhs,
            inside_regime: inside,
            certified: false,
        },
        fit: Some(fit),
        eps_t,
        input_bound,
        w_v_norm,
        tail,
        diagnostics,
    })
}

/// Empirical floor of the best `m`-term fit of a kernel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapEstimate {
    pub residual: f64,
    pub per_restart: Vec<f64>,
    pub fit: ExpMixtureFit,
    /// Always false: the floor comes from search, not proof.
    pub certified: bool,
}

/// Minimizes the `ℓ1` residual over poles and coefficients with `restarts`
/// seeded starts and reports the best value found.
pub fn inconsistency_gap(target: &[f64], m: usize, restarts: usize, seed: u64) -> Result<GapEstimate> {
    if restarts == 0 {
        return Err(Error::invalid("need at least one restart"));
    }
    let mut per_restart = Vec::with_capacity(restarts);
    let mut best: Option<ExpMixtureFit> = None;
    for r in 0..restarts {
        // Each restart is an independent single-start free fit; restart 0
        // starts from the grid fit.
        let fit = if r == 0 {
            fit_exp_mixture(target, m, &FitMode::Free { restarts: 1, seed })?
        } else {
            let horizon = target.len() - 1;
            if m >= horizon + 1 {
                fit_exp_mixture(target, m, &FitMode::grid())?
            } else {
                let mut rng = SeededRng::new(seed).fork(r as u64);
                let start: Vec<f64> = (0..m).map(|_| rng.uniform_range(-0.99, 0.99)).collect();
                let (l, b, _) = pattern_search(target, start)?;
                finish(target, l, b)
            }
        };
        per_restart.push(fit.residual);
        if best.as_ref().is_none_or(|b| fit.residual < b.residual) {
            best = Some(fit);
        }
    }
    let fit = best.expect("at least one restart");
    Ok(GapEstimate {
        residual: fit.residual,
        per_restart,
        fit,
        certified: false,
    })
}

/// Spike kernel with all mass at lag `horizon`.
pub fn spike_kernel(horizon: usize) -> Vec<f64> {
    let mut w = vec![0.0; horizon + 1];
    w[horizon] = 1.0;
    w
}

/// Reconstruction error of the concept path on the spike kernel.
///
/// The sequence has `horizon + 1` tokens whose first one carries a marker
/// feature. Two concepts are used: the marked token alone (budget 1, so its
/// assignment is exactly one-hot) and the rest. Concept attention routes the
/// second concept entirely onto the first, `W_V^c = I` and `W_U = W_V`, so the
/// last token receives `W_V x_0`, exactly what the spike attention kernel
/// produces. Returns `max_c |h_last − W_V x_0|`.
pub fn concept_spike_reconstruction(w_v: &RealMatrix, horizon: usize, seed: u64) -> Result<f64> {
    let d_content = w_v.cols();
    let d = d_content + 2;
    let (marker, constant) = (d_content, d_content + 1);
    let n = horizon + 1;
    let mut rng = SeededRng::new(seed);
    let content = rng.normal_matrix(n, d_content, 1.0);
    let x = RealMatrix::from_fn(n, d, |t, c| match c {
        c if c == marker => f64::from(u8::from(t == 0)),
        c if c == constant => 1.0,
        c => content.get(t, c),
    });
    let cfg = ConceptConfig {
        d,
        d_c: d,
        k_max: 2,
        b_hash: 1,
        tau_assign: 0.1,
        tau_h: 1.0,
        q_min: 1,
        q_max: 1,
    };
    let mut p = ConceptFilterParams::sample(cfg, &mut rng)?;
    // û = W_r x keeps the marker and constant features.
    p.w_r = RealMatrix::from_fn(d, d, |i, j| f64::from(u8::from(i == j && (j == marker || j == constant))));
    // Concept 0 scores the marker, concept 1 a constant 0.5.
    p.u = RealMatrix::from_fn(d, 2, |i, k| match (i, k) {
        (i, 0) if i == marker => 1.0,
        (i, 1) if i == constant => 0.5,
        _ => 0.0,
    });
    let big = 100.0;
    p.w_q = RealMatrix::from_fn(d, d, |i, j| if i == constant && j == 0 { 1.0 } else { 0.0 });
    p.w_k = RealMatrix::from_fn(d, d, |i, j| if i == marker && j == 0 { big } else { 0.0 });
    p.w_v = RealMatrix::identity(d);
    let w_v_full = RealMatrix::from_fn(d, d, |i, j| if i < d_content && j < d_content { w_v.get(i, j) } else { 0.0 });
    p.w_u = w_v_full.clone();
    p.hash_w = RealMatrix::zeros(1, d);
    p.hash_b = RealMatrix::zeros(1, 1);

    let r = soft_assign(&p, &x)?;
    let sets = vec![vec![0, 1]];
    let sp = sparsify(&r, &vec![0; n], &sets, &vec![1; n])?;
    let mix = concept_mix(&p, &sp.rows, &x, Mixing::Attention)?;
    let target = w_v_full.mul_vec(x.row(0));
    Ok(mix.h.row(n - 1).iter().zip(&target).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
}

/// Attention whose kernels are exactly `(1 − λ) λ^l` over real tokens.
///
/// Token layout: `d_content` content features, then position, constant and
/// sink flags. Position 0 is a sink token with zero value and a key bonus of
/// `−ln(1 − λ)`, which absorbs the geometric tail beyond the sequence start.
/// With `noise > 0` the keys also read the content features with Gaussian
/// weights of that scale, perturbing the kernels away from exact geometry.
pub fn geometric_instance(lambda: f64, n: usize, d_content: usize, noise: f64, seed: u64) -> Result<(AttentionParams, RealMatrix)> {
    if !(lambda > 0.0 && lambda < 1.0) {
        return Err(Error::invalid("geometric pole must lie in (0, 1)"));
    }
    if n < 2 {
        return Err(Error::invalid("need the sink plus at least one token"));
    }
    let d = d_content + 3;
    let (pos, one, sink) = (d_content, d_content + 1, d_content + 2);
    let mut rng = SeededRng::new(seed);
    let x = RealMatrix::from_fn(n, d, |t, c| match c {
        c if c == pos => t as f64,
        c if c == one => 1.0,
        c if c == sink => f64::from(u8::from(t == 0)),
        _ if t == 0 => 0.0,
        _ => rng.normal(),
    });
    let sqrt_d = (d as f64).sqrt();
    let decay = -lambda.ln();
    let bonus = -(1.0 - lambda).ln();
    let mut w_q = RealMatrix::zeros(d, d);
    w_q.set(0, one, sqrt_d * decay);
    w_q.set(1, one, sqrt_d * bonus);
    w_q.set(2, one, sqrt_d);
    let mut w_k = RealMatrix::zeros(d, d);
    w_k.set(0, pos, 1.0);
    w_k.set(1, sink, 1.0);
    for c in 0..d_content {
        w_k.set(2, c, noise * rng.normal());
    }
    let w_v = RealMatrix::from_fn(d, d, |i, j| if i < d_content && j < d_content { rng.normal() / (d_content as f64).sqrt() } else { 0.0 });
    Ok((AttentionParams::new(w_q, w_k, w_v)?, x))
}

/// Attention in which position `t` attends (almost) entirely to `t − lag`.
///
/// Token layout: content features, then position, squared position and a
/// constant. The logit `−α (t − s − lag)^2` expands into a bilinear form in
/// those features.
pub fn spike_instance(n: usize, d_content: usize, lag: usize, seed: u64) -> Result<(AttentionParams, RealMatrix)> {
    let d = d_content + 3;
    let (pos, pos2, one) = (d_content, d_content + 1, d_content + 2);
    let mut rng = SeededRng::new(seed);
    let x = RealMatrix::from_fn(n, d, |t, c| match c {
        c if c == pos => t as f64,
        c if c == pos2 => (t * t) as f64,
        c if c == one => 1.0,
        _ => rng.normal(),
    });
    let alpha = 20.0;
    let sqrt_d = (d as f64).sqrt();
    let mut w_q = RealMatrix::zeros(d, d);
    w_q.set(0, pos, 2.0 * alpha * sqrt_d);
    w_q.set(0, one, -2.0 * alpha * lag as f64 * sqrt_d);
    w_q.set(1, one, -alpha * sqrt_d);
    let mut w_k = RealMatrix::zeros(d, d);
    w_k.set(0, pos, 1.0);
    w_k.set(1, pos2, 1.0);
    let w_v = RealMatrix::from_fn(d, d, |i, j| if i < d_content && j < d_content { rng.normal() / (d_content as f64).sqrt() } else { 0.0 });
    Ok((AttentionParams::new(w_q, w_k, w_v)?, x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::extract_kernel;
    use proptest::prelude::*;

    fn geometric(lam: f64, k: usize, scale: f64) -> Vec<f64> {
        (0..=k).map(|l| scale * lam.powi(l as i32)).collect()
    }

    #[test]
    fn single_basis_kernel_is_exact() {
        let w = geometric(0.5, 20, 1.0);
        let fit = fit_exp_mixture(&w, 1, &FitMode::Grid(vec![0.2, 0.5, 0.8])).unwrap();
        assert_eq!(fit.lambdas, vec![0.5]);
        assert!((fit.betas[0] - 1.0).abs() < 1e-12);
        assert!(fit.residual < 1e-12);
    }

    #[test]
    fn zero_kernel_fits_with_zero_coefficients() {
        let fit = fit_exp_mixture(&[0.0; 9], 3, &FitMode::grid()).unwrap();
        assert!(fit.betas.iter().all(|&b| b == 0.0));
        assert_eq!(fit.residual, 0.0);
        assert_eq!(fit.m, 3);
    }

    #[test]
    fn two_term_free_fit_recovers_mixture() {
        let w: Vec<f64> = (0..=24).map(|l| 0.7 * 0.9f64.powi(l) + 0.3 * 0.2f64.powi(l)).collect();
        let fit = fit_exp_mixture(&w, 2, &FitMode::Free { restarts: 4, seed: 1 }).unwrap();
        assert!(fit.residual < 1e-6, "{}", fit.residual);
    }

    /// Exhaustive search over a (λ, β) lattice bounds the best single-term
    /// residual from above; the free fit must do at least as well.
    #[test]
    fn single_term_fit_beats_exhaustive_lattice() {
        let w: Vec<f64> = (0..=24).map(|l| 0.7 * 0.9f64.powi(l) + 0.3 * 0.2f64.powi(l)).collect();
        let mut oracle = f64::INFINITY;
        for i in 1..400 {
            let lam = i as f64 / 400.0;
            for j in 0..=300 {
                let beta = j as f64 / 200.0;
                let r: f64 = w.iter().enumerate().map(|(l, v)| (v - beta * lam.powi(l as i32)).abs()).sum();
                oracle = oracle.min(r);
            }
        }
        let fit = fit_exp_mixture(&w, 1, &FitMode::Free { restarts: 4, seed: 2 }).unwrap();
        assert!(fit.residual <= oracle + 1e-9, "{} vs {oracle}", fit.residual);
        assert!(fit.residual > 0.0);
    }

    #[test]
    fn interpolation_regime() {
        let w = spike_kernel(32);
        let fit = fit_exp_mixture(&w, 40, &FitMode::grid()).unwrap();
        assert_eq!(fit.m, 33);
        assert!(fit.warning.is_some());
        assert!(fit.residual < 1e-8, "{}", fit.residual);
        assert!((fit.recompute_residual(&w) - fit.residual).abs() < 1e-10);

        let one = fit_exp_mixture(&[1.0], 1, &FitMode::grid()).unwrap();
        assert_eq!(one.betas, vec![1.0]);
        assert_eq!(one.residual, 0.0);
    }

    #[test]
    fn residual_is_recomputable() {
        let mut rng = SeededRng::new(3);
        let w: Vec<f64> = (0..16).map(|_| rng.uniform()).collect();
        for mode in [FitMode::grid(), FitMode::Free { restarts: 2, seed: 3 }] {
            let fit = fit_exp_mixture(&w, 3, &mode).unwrap();
            assert!((fit.recompute_residual(&w) - fit.residual).abs() < 1e-10);
        }
    }

    #[test]
    fn grid_residual_is_monotone_in_m() {
        for seed in 0..10 {
            let mut rng = SeededRng::new(seed);
            let w: Vec<f64> = (0..=20).map(|l| rng.uniform() * 0.8f64.powi(l) + 0.1 * rng.uniform()).collect();
            let res: Vec<f64> = [1, 2, 4, 8].iter().map(|&m| fit_exp_mixture(&w, m, &FitMode::grid()).unwrap().residual).collect();
            for pair in res.windows(2) {
                assert!(pair[1] <= pair[0], "{res:?}");
            }
        }
    }

    #[test]
    fn hankel_rank_cases() {
        assert_eq!(hankel_rank(&geometric(0.6, 16, 1.0), 1e-8), 1);
        let two: Vec<f64> = (0..=16).map(|l| 0.8f64.powi(l) - 0.5 * 0.3f64.powi(l)).collect();
        assert_eq!(hankel_rank(&two, 1e-8), 2);
        assert_eq!(hankel_rank(&[0.0; 17], 1e-8), 0);
    }

    #[test]
    fn ssm_from_fit_round_trips_the_kernel() {
        let fit = finish(&geometric(0.5, 6, 1.0), vec![0.5], vec![1.0]);
        let ssm = ssm_from_fit(&fit, &RealMatrix::identity(2)).unwrap();
        for l in 0..6 {
            let h = effective_kernel(&ssm, None, 6, l).unwrap();
            assert!(h.max_abs_diff(&RealMatrix::identity(2).scale(0.5f64.powi(l as i32))) < 1e-15);
        }

        let null = finish(&[0.0; 4], vec![0.3], vec![0.0]);
        let ssm = ssm_from_fit(&null, &RealMatrix::identity(3)).unwrap();
        assert_eq!(ssm.c.max_abs(), 0.0);

        let mut rng = SeededRng::new(4);
        let fit = finish(&[0.0; 10], vec![0.9, -0.4, 0.2], vec![0.5, -1.2, 2.0]);
        let w_v = rng.normal_matrix(3, 3, 1.0);
        let ssm = ssm_from_fit(&fit, &w_v).unwrap();
        for l in 0..10 {
            let h = effective_kernel(&ssm, None, 10, l).unwrap();
            assert!(h.max_abs_diff(&w_v.scale(fit.kernel_value(l))) < 1e-10);
        }
    }

    #[test]
    fn geometric_instance_has_exact_kernels() {
        let (att, x) = geometric_instance(0.7, 20, 3, 0.0, 5).unwrap();
        for t in [1, 7, 19] {
            let k = extract_kernel(&att, &x, t, t - 1).unwrap();
            for (l, w) in k.weights.iter().enumerate() {
                assert!((w - 0.3 * 0.7f64.powi(l as i32)).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn consistency_on_exact_geometric_instance() {
        let (att, x) = geometric_instance(0.6, 24, 3, 0.0, 6).unwrap();
        let out = consistency_check(&att, &x, 1, 22, &ConsistencyOptions::default()).unwrap();
        assert!(out.report.inside_regime, "{:?}", out.diagnostics);
        assert!(out.report.lhs < 1e-8, "{}", out.report.lhs);
        assert!(out.report.lhs <= out.report.rhs);
        assert!(!out.report.certified);
    }

    #[test]
    fn consistency_without_truncation() {
        let (att, x) = geometric_instance(0.5, 12, 2, 0.0, 7).unwrap();
        let opts = ConsistencyOptions::default();
        let out = consistency_check(&att, &x, 12, 11, &opts).unwrap();
        assert!(out.tail < 1e-300 || out.tail == 0.0);
        assert!(out.report.lhs <= out.w_v_norm * out.input_bound * out.eps_t.iter().copied().fold(0.0, f64::max) + 1e-12);
    }

    #[test]
    fn spike_instance_is_outside() {
        let (att, x) = spike_instance(24, 3, 8, 8).unwrap();
        let out = consistency_check(&att, &x, 2, 20, &ConsistencyOptions::default()).unwrap();
        assert!(!out.report.inside_regime);
        assert!(out.report.eps_exp > 0.05);
        assert!(out.report.lhs <= out.report.rhs);
        assert!(out.report.diagonal_mass < 0.2);
    }

    #[test]
    fn epsilon_exp_cases() {
        let (att, x) = geometric_instance(0.6, 16, 2, 0.0, 9).unwrap();
        let uniform_att = AttentionParams::new(RealMatrix::zeros(5, 5), RealMatrix::zeros(5, 5), RealMatrix::identity(5)).unwrap();
        let geo = epsilon_exp(&att, &[x.clone()], 2, 12, &FitMode::grid()).unwrap();
        let uni = epsilon_exp(&uniform_att, &[x.clone()], 2, 12, &FitMode::grid()).unwrap();
        assert!(uni > geo, "{uni} vs {geo}");
        assert!(epsilon_exp(&att, &[x.clone()], 13, 12, &FitMode::grid()).unwrap() < 1e-8);
        let one = RealMatrix::filled(1, 5, 1.0);
        assert_eq!(epsilon_exp(&uniform_att, &[one], 1, 0, &FitMode::grid()).unwrap(), 0.0);
        assert!(epsilon_exp(&att, &[x], 2, 16, &FitMode::grid()).is_err());
    }

    #[test]
    fn gate_alignment_cases() {
        let (att, x) = geometric_instance(0.6, 16, 2, 0.0, 10).unwrap();
        let d = x.cols();
        let flat = SsmParams::new(vec![0.5], RealMatrix::zeros(1, d), RealMatrix::zeros(d, 1), vec![0.0; d], 0.3).unwrap();
        assert_eq!(gate_alignment(&flat, &att, &x).unwrap(), 0.0);

        let mut rng = SeededRng::new(10);
        let ssm = SsmParams::new(vec![0.5], RealMatrix::zeros(1, d), RealMatrix::zeros(d, 1), (0..d).map(|_| rng.normal()).collect(), 0.1).unwrap();
        let a = attention_weights(&att, &x, Mode::Causal).unwrap();
        let g = ssm.gates(&x, true);
        let diag: Vec<f64> = (0..16).map(|t| a.get(t, t)).collect();
        let (mg, md) = (g.iter().sum::<f64>() / 16.0, diag.iter().sum::<f64>() / 16.0);
        let cov: f64 = g.iter().zip(&diag).map(|(p, q)| (p - mg) * (q - md)).sum();
        let vg: f64 = g.iter().map(|p| (p - mg).powi(2)).sum();
        let vd: f64 = diag.iter().map(|q| (q - md).powi(2)).sum();
        assert!((gate_alignment(&ssm, &att, &x).unwrap() - cov / (vg * vd).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn gap_cases() {
        let spike = spike_kernel(12);
        let gap = inconsistency_gap(&spike, 2, 6, 11).unwrap();
        assert!(gap.residual > 0.5, "{}", gap.residual);
        assert!(!gap.certified);
        assert_eq!(gap.per_restart.len(), 6);

        let inside = geometric(0.4, 12, 0.8);
        assert!(inconsistency_gap(&inside, 2, 2, 12).unwrap().residual < 1e-8);
        assert!(inconsistency_gap(&spike, 13, 1, 13).unwrap().residual < 1e-8);
    }

    #[test]
    fn concept_path_reproduces_spike() {
        let mut rng = SeededRng::new(14);
        let w_v = rng.normal_matrix(3, 3, 1.0);
        assert!(concept_spike_reconstruction(&w_v, 32, 14).unwrap() < 1e-6);
    }

    #[test]
    fn report_json_has_fixed_fields() {
        let (att, x) = geometric_instance(0.6, 10, 2, 0.0, 15).unwrap();
        let out = consistency_check(&att, &x, 1, 8, &ConsistencyOptions::default()).unwrap();
        let v: serde_json::Value = serde_json::from_str(&out.report.to_json().unwrap()).unwrap();
        let keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        let mut expect = vec![
            "certified",
            "diagonal_mass",
            "eps_exp",
            "gate_alignment",
            "hankel_rank",
            "inside_regime",
            "lhs",
            "rho_lambda",
            "rhs",
        ];
        expect.sort_unstable();
        let mut got = keys.clone();
        got.sort_unstable();
        assert_eq!(got, expect);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn hankel_rank_counts_distinct_modes(seed in 0u64..1000, p in 1usize..4) {
            let mut rng = SeededRng::new(seed);
            let mut lams: Vec<f64> = Vec::new();
            while lams.len() < p {
                let l = rng.uniform_range(0.2, 0.95);
                if lams.iter().all(|m| (m - l).abs() > 0.15) {
                    lams.push(l);
                }
            }
            let betas: Vec<f64> = (0..p).map(|_| rng.uniform_range(0.5, 1.5)).collect();
            let k = 2 * p + 4;
            let w = eval_kernel(&lams, &betas, k);
            prop_assert_eq!(hankel_rank(&w, 1e-8), p);
        }

        #[test]
        fn bound_holds_on_perturbed_instances(seed in 0u64..1000, lam in 0.3f64..0.8) {
            let (att, x) = geometric_instance(lam, 16, 3, 0.05, seed).unwrap();
            let opts = ConsistencyOptions { mode: FitMode::grid(), ..ConsistencyOptions::default() };
            let out = consistency_check(&att, &x, 2, 12, &opts).unwrap();
            prop_assert!(out.report.lhs <= out.report.rhs);
        }
    }
}
