//! Mini-batch training loop and the per-run record.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::numerics::{RealMatrix, SeededRng};

use super::model::{Evaluation, Model, ModelConfig, Variant};
use super::optim::{Optimizer, OptimizerConfig};
use super::tasks::{Batch, SyntheticTask};

/// Anything the training loop can optimize.
pub trait Trainable {
    fn parameters(&self) -> Vec<RealMatrix>;
    fn set_parameters(&mut self, values: Vec<RealMatrix>) -> Result<()>;
    fn evaluate(&self, batch: &Batch, weights: &LossWeights, backward: bool) -> Result<Evaluation>;
}

impl Trainable for Model {
    fn parameters(&self) -> Vec<RealMatrix> {
        Model::parameters(self)
    }
    fn set_parameters(&mut self, values: Vec<RealMatrix>) -> Result<()> {
        Model::set_parameters(self, values)
    }
    fn evaluate(&self, batch: &Batch, weights: &LossWeights, backward: bool) -> Result<Evaluation> {
        Model::evaluate(self, batch, weights, backward)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub train_size: usize,
    pub eval_size: usize,
    pub optimizer: OptimizerConfig,
    pub weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            batch: 32,
            train_size: 512,
            eval_size: 512,
            optimizer: OptimizerConfig::default(),
            weights: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.train_size == 0 || self.eval_size == 0 {
            return Err(Error::Config("batch, train_size and eval_size must be positive".into()));
        }
        self.optimizer.validate()?;
        self.weights.validate()
    }
}

/// Loss above which a run counts as diverged.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum RunStatus {
    Completed,
    Diverged { step: usize, loss: f64 },
}

/// Deterministic outcome of a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitOutcome {
    /// Total loss of every step's mini-batch.
    pub losses: Vec<f64>,
    /// Accuracy on the held-out evaluation set.
    pub metric: f64,
    pub status: RunStatus,
}

/// Wall-clock measurements; kept apart from the reproducible fields.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub train_ms: f64,
    pub eval_ms: f64,
}

/// Trains `model` on `task`, drawing minibatches from a fixed training set
/// in a seeded shuffled order.
pub fn fit<M: Trainable>(model: &mut M, task: &SyntheticTask, cfg: &TrainConfig, seed: u64) -> Result<(FitOutcome, Timing)> {
    cfg.validate()?;
    let train = task.generate(cfg.train_size, 0)?;
    let eval = task.generate(cfg.eval_size, 1)?;
    let mut order_rng = SeededRng::new(seed).fork(2);
    let mut opt = Optimizer::new(cfg.optimizer)?;
    let mut order: Vec<usize> = Vec::new();
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut status = RunStatus::Completed;
    let start = Instant::now();
    for step in 0..cfg.steps {
        let mut idx = Vec::with_capacity(cfg.batch);
        while idx.len() < cfg.batch.min(cfg.train_size) {
            if order.is_empty() {
                order = (0..cfg.train_size).collect();
                order_rng.shuffle(&mut order);
            }
            idx.push(order.pop().expect("refilled above"));
        }
        let ev = model.evaluate(&train.select(&idx), &cfg.weights, true)?;
        losses.push(ev.total);
        if !ev.total.is_finite() || ev.total > DIVERGENCE_LIMIT {
            status = RunStatus::Diverged { step, loss: ev.total };
            break;
        }
        let mut params = model.parameters();
        opt.step(&mut params, &ev.grads)?;
        if !params.iter().all(RealMatrix::is_finite) {
            status = RunStatus::Diverged { step, loss: f64::INFINITY };
            break;
        }
        model.set_parameters(params)?;
    }
    let train_ms = start.elapsed().as_secs_f64() * 1e3;
    let start = Instant::now();
    let metric = if matches!(status, RunStatus::Completed) { accuracy(model, &eval, cfg)? } else { f64::NAN };
    let eval_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok((FitOutcome { losses, metric, status }, Timing { train_ms, eval_ms }))
}

/// Accuracy on `data`, evaluated in chunks of the training batch size.
pub fn accuracy<M: Trainable>(model: &M, data: &Batch, cfg: &TrainConfig) -> Result<f64> {
    let mut hits = 0.0;
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(cfg.batch.max(2)) {
        let b = data.select(chunk);
        let ev = model.evaluate(&b, &LossWeights { beta: 0.0, gamma: 0.0, eta: 0.0, ..cfg.weights }, false)?;
        hits += ev.accuracy(&b.labels) * chunk.len() as f64;
    }
    Ok(hits / data.len() as f64)
}

/// Everything that determines a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub task: SyntheticTask,
    pub model: ModelConfig,
    pub variant: Variant,
    pub filler_rank: usize,
    pub train: TrainConfig,
    pub seed: u64,
}

impl RunSpec {
    /// SHA-256 of the spec's JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("spec serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub spec: RunSpec,
    pub spec_hash: String,
    pub params: usize,
    pub outcome: FitOutcome,
}

/// One run: reproducible result plus wall-clock measurements.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub result: RunResult,
    pub timing: Timing,
}

impl ExperimentRecord {
    pub fn metric(&self) -> f64 {
        self.result.outcome.metric
    }

    pub fn diverged(&self) -> bool {
        matches!(self.result.outcome.status, RunStatus::Diverged { .. })
    }
}

/// Builds the model described by `spec` and trains it.
pub fn run(spec: &RunSpec) -> Result<(Model, ExperimentRecord)> {
    let mut model = Model::new(spec.variant, spec.model, spec.filler_rank, spec.seed)?;
    let task = SyntheticTask { seed: spec.seed, ..spec.task };
    let weights = spec.variant.effective_weights(spec.train.weights);
    let train = TrainConfig { weights, ..spec.train };
    let params = model.param_count();
    let (outcome, timing) = fit(&mut model, &task, &train, spec.seed)?;
    let record = ExperimentRecord {
        result: RunResult { spec: spec.clone(), spec_hash: spec.hash(), params, outcome },
        timing,
    };
    Ok((model, record))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::tasks::TaskKind;
    use crate::linalg::lstsq;

    fn spec(task: SyntheticTask, steps: usize, lr: f64) -> RunSpec {
        RunSpec {
            task,
            model: ModelConfig {
                d_in: task.feature_dim(),
                d_model: 8,
                d_state: 4,
                depth: 1,
                n_max: task.n,
                n_labels: task.num_labels(),
                k_max: 4,
                b_hash: 2,
                q_min: 1,
                q_max: 2,
                tau_assign: 0.7,
                tau_h: 0.5,
            },
            variant: Variant::Full,
            filler_rank: 0,
            train: TrainConfig {
                steps,
                batch: 16,
                train_size: 64,
                eval_size: 64,
                optimizer: OptimizerConfig { lr, ..Default::default() },
                weights: LossWeights::default(),
            },
            seed: 3,
        }
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let task = SyntheticTask::new(TaskKind::CopyWithLag, 1, 6, 3, 1, 3).unwrap();
        let mut s = spec(task, 5, 0.0);
        s.train.batch = 64;
        let before = Model::new(s.variant, s.model, 0, s.seed).unwrap();
        let (after, rec) = run(&s).unwrap();
        assert_eq!(after, before);
        // Every step sees the whole training set, in a different order.
        let l = &rec.result.outcome.losses;
        assert!(l.iter().all(|v| (v - l[0]).abs() <= 1e-12 * l[0].abs()));
    }

    #[test]
    fn same_seed_same_curve() {
        let task = SyntheticTask::new(TaskKind::MixedDependency, 2, 8, 2, 1, 3).unwrap();
        let s = spec(task, 6, 0.05);
        let (_, a) = run(&s).unwrap();
        let (_, b) = run(&s).unwrap();
        assert_eq!(a.result, b.result);
        assert_eq!(serde_json::to_string(&a.result).unwrap(), serde_json::to_string(&b.result).unwrap());
    }

    #[test]
    fn learns_separable_toy() {
        let task = SyntheticTask::new(TaskKind::Separable, 0, 4, 2, 1, 3).unwrap();
        // A direct least-squares classifier on the last token establishes
        // that the data are separable at this size.
        let data = task.generate(256, 0).unwrap();
        let a = RealMatrix::from_fn(256, task.feature_dim() + 1, |i, j| {
            if j == task.feature_dim() { 1.0 } else { data.xs[i].get(3, j) }
        });
        let y: Vec<f64> = data.labels.iter().map(|&l| if l == 1 { 1.0 } else { -1.0 }).collect();
        let w = lstsq(&a, &y).unwrap();
        let hits = (0..256).filter(|&i| (crate::numerics::dot(a.row(i), &w) > 0.0) == (y[i] > 0.0)).count();
        assert!(hits as f64 / 256.0 >= 0.95);

        let mut s = spec(task, 200, 0.05);
        s.train.train_size = 256;
        s.train.eval_size = 256;
        let (model, rec) = run(&s).unwrap();
        assert!(rec.metric() >= 0.95, "{}", rec.metric());
        let train_acc = accuracy(&model, &data, &s.train).unwrap();
        assert!(train_acc >= 0.95, "{train_acc}");
    }

    #[test]
    fn divergence_is_reported() {
        let task = SyntheticTask::new(TaskKind::CopyWithLag, 1, 6, 3, 1, 3).unwrap();
        let mut s = spec(task, 30, 1e9);
        s.train.optimizer.clip = 0.0;
        let (_, rec) = run(&s).unwrap();
        assert!(rec.diverged());
    }
}
