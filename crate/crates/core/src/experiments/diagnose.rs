//! Boundary diagnostics on constructed attention instances.

use serde::{Deserialize, Serialize};

use crate::attention::{attention_weights, AttentionParams, Mode};
use crate::boundary::{
    consistency_check, geometric_instance, inconsistency_gap, spike_instance, ssm_from_fit, gate_alignment, BoundaryReport,
    ConsistencyOptions, FitMode,
};
use crate::error::{Error, Result};
use crate::numerics::RealMatrix;

use super::config::Config;
use super::report::{num, Table, KERNEL_HEADER};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Instance {
    /// Kernels exactly `(1 − λ) λ^l`.
    Geometric,
    /// Geometric kernels with content-dependent key noise.
    Perturbed,
    /// All attention mass at a single lag.
    Spike,
}

impl Instance {
    pub fn name(self) -> &'static str {
        match self {
            Instance::Geometric => "geometric",
            Instance::Perturbed => "perturbed",
            Instance::Spike => "spike",
        }
    }
}

impl std::str::FromStr for Instance {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "geometric" => Ok(Instance::Geometric),
            "perturbed" => Ok(Instance::Perturbed),
            "spike" => Ok(Instance::Spike),
            _ => Err(Error::Config(format!("unknown instance {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceDiagnosis {
    pub instance: Instance,
    pub report: BoundaryReport,
    /// Best residual of an `fit_m`-term fit to the last position's kernel
    /// over seeded restarts.
    pub gap_residual: f64,
    pub diagnostics: Vec<String>,
}

pub struct Diagnosis {
    pub instances: Vec<InstanceDiagnosis>,
    /// Per `(instance, t, lag)` attention weight and deployed kernel value.
    pub kernels: Table,
}

fn build(instance: Instance, cfg: &Config) -> Result<(AttentionParams, RealMatrix)> {
    match instance {
        Instance::Geometric => geometric_instance(cfg.decay, cfg.n, cfg.content_dim, 0.0, cfg.seed),
        Instance::Perturbed => geometric_instance(cfg.decay, cfg.n, cfg.content_dim, cfg.perturbation, cfg.seed),
        Instance::Spike => spike_instance(cfg.n, cfg.content_dim, cfg.lag, cfg.seed),
    }
}

/// Runs the consistency check, the gap search and the gate alignment on
/// every configured instance.
pub fn diagnose(cfg: &Config) -> Result<Diagnosis> {
    if cfg.instances.is_empty() {
        return Err(Error::Config("instance list is empty".into()));
    }
    let kinds: Vec<Instance> = cfg.instances.iter().map(|s| s.parse()).collect::<Result<_>>()?;
    if cfg.horizon >= cfg.n {
        return Err(Error::Config(format!("horizon {} must be below n = {}", cfg.horizon, cfg.n)));
    }
    let opts = ConsistencyOptions { mode: FitMode::Free { restarts: 2, seed: cfg.seed }, ..ConsistencyOptions::default() };
    let mut kernels = Table::new("kernels", &KERNEL_HEADER, &[]);
    let mut instances = Vec::new();
    for kind in kinds {
        let (att, x) = build(kind, cfg)?;
        let mut out = consistency_check(&att, &x, cfg.fit_m, cfg.horizon, &opts)?;
        let a = attention_weights(&att, &x, Mode::Causal)?;
        let n = x.rows();
        let w_last: Vec<f64> = (0..=cfg.horizon).map(|l| a.get(n - 1, n - 1 - l)).collect();
        let gap = inconsistency_gap(&w_last, cfg.fit_m, cfg.restarts.max(1), cfg.seed)?;
        if let Some(fit) = &out.fit {
            out.report.gate_alignment = gate_alignment(&ssm_from_fit(fit, &att.w_v)?, &att, &x)?;
        }
        for t in 0..n {
            for l in 0..=t.min(cfg.horizon) {
                let fit = out.fit.as_ref().map_or(f64::NAN, |f| f.kernel_value(l));
                kernels.push(vec![kind.name().into(), t.to_string(), l.to_string(), num(a.get(t, t - l)), num(fit)])?;
            }
        }
        instances.push(InstanceDiagnosis { instance: kind, report: out.report, gap_residual: gap.residual, diagnostics: out.diagnostics });
    }
    Ok(Diagnosis { instances, kernels })
}
