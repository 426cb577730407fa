//! Browser bindings for three small InfoMamba diagnostics.
//!
//! Each export takes plain numbers and returns a JSON string, which keeps
//! the page script free of any generated glue beyond `wasm-bindgen`'s.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use infomamba::boundary::{
    consistency_check, fit_exp_mixture, geometric_instance, hankel_rank, spike_instance, ConsistencyOptions, FitMode,
};
use infomamba::attention::{attention_weights, Mode};
use infomamba::concept::{assign, sparse_to_dense, ConceptConfig, ConceptFilterParams};
use infomamba::SeededRng;

fn to_json<T: Serialize>(v: &T) -> Result<String, String> {
    serde_json::to_string(v).map_err(|e| e.to_string())
}

/// Target kernels offered by the page.
fn target_kernel(kind: &str, param: f64, horizon: usize) -> Result<Vec<f64>, String> {
    let w = match kind {
        "geometric" => (0..=horizon).map(|l| (1.0 - param) * param.powi(l as i32)).collect(),
        "two-pole" => (0..=horizon).map(|l| 0.6 * param.powi(l as i32) + 0.4 * (-0.5f64).powi(l as i32)).collect(),
        "spike" => {
            let lag = param.round();
            if !(0.0..=horizon as f64).contains(&lag) {
                return Err(format!("spike lag {lag} outside 0..={horizon}"));
            }
            (0..=horizon).map(|l| f64::from(u8::from(l == lag as usize))).collect()
        }
        other => return Err(format!("unknown kernel {other:?}")),
    };
    Ok(w)
}

#[derive(Serialize)]
struct KernelFit {
    target: Vec<f64>,
    fitted: Vec<f64>,
    lambdas: Vec<f64>,
    betas: Vec<f64>,
    residual: f64,
    hankel_rank: usize,
}

/// Fits an `m`-term exponential mixture to a target kernel.
///
/// `kind` is `geometric` (pole `param`), `two-pole` (poles `param` and
/// −0.5) or `spike` (all mass at lag `param`).
#[wasm_bindgen]
pub fn fit_kernel(kind: &str, param: f64, horizon: usize, m: usize) -> Result<String, String> {
    let target = target_kernel(kind, param, horizon)?;
    let fit = fit_exp_mixture(&target, m, &FitMode::Free { restarts: 4, seed: 0 }).map_err(|e| e.to_string())?;
    to_json(&KernelFit {
        hankel_rank: hankel_rank(&target, 1e-8),
        fitted: fit.fitted_kernel,
        lambdas: fit.lambdas,
        betas: fit.betas,
        residual: fit.residual,
        target,
    })
}

#[derive(Serialize)]
struct Diagnosis {
    report: infomamba::boundary::BoundaryReport,
    /// Attention weights of the last position, lag 0 first.
    attention: Vec<f64>,
    fitted: Vec<f64>,
    notes: Vec<String>,
}

/// Consistency check on a constructed attention instance (`geometric` with
/// pole `param`, or `spike` at lag `param`).
#[wasm_bindgen]
pub fn diagnose_instance(kind: &str, param: f64, n: usize, horizon: usize, m: usize, seed: u64) -> Result<String, String> {
    let (att, x) = match kind {
        "geometric" => geometric_instance(param, n, 3, 0.0, seed),
        "spike" => spike_instance(n, 3, param.round().max(0.0) as usize, seed),
        other => return Err(format!("unknown instance {other:?}")),
    }
    .map_err(|e| e.to_string())?;
    let opts = ConsistencyOptions { mode: FitMode::Free { restarts: 2, seed }, ..ConsistencyOptions::default() };
    let out = consistency_check(&att, &x, m, horizon, &opts).map_err(|e| e.to_string())?;
    let a = attention_weights(&att, &x, Mode::Causal).map_err(|e| e.to_string())?;
    let attention: Vec<f64> = (0..=horizon).map(|l| a.get(n - 1, n - 1 - l)).collect();
    let fitted = out.fit.as_ref().map(|f| (0..=horizon).map(|l| f.kernel_value(l)).collect()).unwrap_or_default();
    to_json(&Diagnosis { report: out.report, attention, fitted, notes: out.diagnostics })
}

#[derive(Serialize)]
struct Assignment {
    /// Sparsified assignment, one row per token.
    weights: Vec<Vec<f64>>,
    buckets: Vec<usize>,
    budgets: Vec<usize>,
    active_concepts: usize,
}

/// Concept assignment of `n` random tokens under a pool of `k_max`
/// concepts and per-token budgets in `q_min..=q_max`.
#[wasm_bindgen]
pub fn concept_assignment(n: usize, d: usize, k_max: usize, q_min: usize, q_max: usize, seed: u64) -> Result<String, String> {
    let config = ConceptConfig { k_max, q_min, q_max, b_hash: k_max.clamp(1, 4), ..ConceptConfig::new(d) };
    let mut rng = SeededRng::new(seed);
    let params = ConceptFilterParams::sample(config, &mut rng).map_err(|e| e.to_string())?;
    let x = rng.normal_matrix(n, d, 1.0);
    let rec = assign(&params, &x).map_err(|e| e.to_string())?;
    let dense = sparse_to_dense(&rec.r_bar, k_max);
    to_json(&Assignment {
        weights: (0..n).map(|t| dense.row(t).to_vec()).collect(),
        buckets: rec.buckets,
        budgets: rec.budgets,
        active_concepts: rec.k_eff,
    })
}
