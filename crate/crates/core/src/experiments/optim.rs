//! First-order optimizers with global gradient-norm clipping.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::RealMatrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum OptimizerKind {
    /// Heavy-ball momentum SGD.
    Sgd,
    Adam,
}

impl FromStr for OptimizerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::Config(format!("unknown optimizer {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    /// Momentum for SGD, first-moment decay for Adam.
    pub momentum: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub clip: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { kind: OptimizerKind::Sgd, lr: 0.05, momentum: 0.9, clip: 1.0 }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config("learning rate must be finite and >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        if !(self.clip.is_finite() && self.clip >= 0.0) {
            return Err(Error::Config("clip must be finite and >= 0".into()));
        }
        Ok(())
    }
}

const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct Optimizer {
    config: OptimizerConfig,
    first: Vec<RealMatrix>,
    second: Vec<RealMatrix>,
    steps: i32,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, first: Vec::new(), second: Vec::new(), steps: 0 })
    }

    /// Updates `params` in place; returns the gradient norm before clipping.
    pub fn step(&mut self, params: &mut [RealMatrix], grads: &[RealMatrix]) -> Result<f64> {
        if params.len() != grads.len() {
            return Err(Error::shape("gradient list", params.len(), grads.len()));
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| RealMatrix::zeros(p.rows(), p.cols())).collect();
            self.second = self.first.clone();
        }
        let norm = grads.iter().map(|g| g.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
        let scale = if self.config.clip > 0.0 && norm > self.config.clip { self.config.clip / norm } else { 1.0 };
        self.steps += 1;
        let OptimizerConfig { lr, momentum, .. } = self.config;
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = self.first[i].data_mut();
            match self.config.kind {
                OptimizerKind::Sgd => {
                    for ((pv, &gv), mv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()) {
                        *mv = momentum * *mv + scale * gv;
                        *pv -= lr * *mv;
                    }
                }
                OptimizerKind::Adam => {
                    let v = self.second[i].data_mut();
                    let c1 = 1.0 - momentum.powi(self.steps);
                    let c2 = 1.0 - ADAM_BETA2.powi(self.steps);
                    for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                        let g = scale * gv;
                        *mv = momentum * *mv + (1.0 - momentum) * g;
                        *vv = ADAM_BETA2 * *vv + (1.0 - ADAM_BETA2) * g * g;
                        *pv -= lr * (*mv / c1) / ((*vv / c2).sqrt() + ADAM_EPS);
                    }
                }
            }
        }
        Ok(norm)
    }
}
