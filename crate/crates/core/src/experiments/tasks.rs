//! Seeded synthetic sequence-classification tasks.
//!
//! Every token carries a class drawn uniformly from `n_classes`. Its
//! features are the one-hot class, a marker flag and `noise_dims` Gaussian
//! distractors. Labels are computed from the generated tokens only, so a
//! batch is a pure function of `(task, seed, stream)`.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{RealMatrix, SeededRng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskKind {
    /// Label is the class of the token `lag` steps before the last one.
    CopyWithLag,
    /// A marked token at a random position at least `lag` steps back;
    /// label is its class.
    SparseRecall,
    /// Label is the most frequent class among the last `lag + 1` tokens
    /// (ties go to the smaller class). Each sequence favours one class
    /// inside that window, so the majority has a clear margin at any lag.
    MajorityWindow,
    /// A marked token exactly `lag` steps back; label is its class.
    SpikeRetrieval,
    /// Joint label `C * class(last) + class(marked)`, with the marked token
    /// at a random position at least `lag` steps back. Needs both local and
    /// global information.
    MixedDependency,
    /// Two classes, linearly separable through the last token's first
    /// feature.
    Separable,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::CopyWithLag => "copy",
            TaskKind::SparseRecall => "sparse-recall",
            TaskKind::MajorityWindow => "majority",
            TaskKind::SpikeRetrieval => "spike",
            TaskKind::MixedDependency => "mixed",
            TaskKind::Separable => "separable",
        }
    }
}

impl FromStr for TaskKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "copy" => TaskKind::CopyWithLag,
            "sparse-recall" => TaskKind::SparseRecall,
            "majority" => TaskKind::MajorityWindow,
            "spike" => TaskKind::SpikeRetrieval,
            "mixed" => TaskKind::MixedDependency,
            "separable" => TaskKind::Separable,
            other => return Err(Error::Config(format!("unknown task {other:?}"))),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub kind: TaskKind,
    pub lag: usize,
    pub n: usize,
    pub n_classes: usize,
    pub noise_dims: usize,
    pub seed: u64,
}

/// A batch of sequences with one label each.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub xs: Vec<RealMatrix>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Examples `idx` in that order.
    pub fn select(&self, idx: &[usize]) -> Batch {
        Batch {
            xs: idx.iter().map(|&i| self.xs[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

const NOISE_STD: f64 = 0.5;
/// Probability that a token inside the majority window takes the favoured class.
const MAJORITY_BIAS: f64 = 0.5;

impl SyntheticTask {
    pub fn new(kind: TaskKind, lag: usize, n: usize, n_classes: usize, noise_dims: usize, seed: u64) -> Result<Self> {
        let t = Self { kind, lag, n, n_classes, noise_dims, seed };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::invalid("sequence length must be positive"));
        }
        if self.lag >= self.n {
            return Err(Error::invalid(format!("lag {} needs more than {} tokens", self.lag, self.n)));
        }
        if self.n_classes < 2 {
            return Err(Error::invalid("need at least two classes"));
        }
        Ok(())
    }

    /// Token width: one-hot class, marker flag and noise features.
    pub fn feature_dim(&self) -> usize {
        self.n_classes + 1 + self.noise_dims
    }

    pub fn num_labels(&self) -> usize {
        match self.kind {
            TaskKind::MixedDependency => self.n_classes * self.n_classes,
            TaskKind::Separable => 2,
            _ => self.n_classes,
        }
    }

    /// `count` examples from stream `stream` of this task's seed.
    pub fn generate(&self, count: usize, stream: u64) -> Result<Batch> {
        self.validate()?;
        let mut rng = SeededRng::new(self.seed).fork(stream);
        let mut xs = Vec::with_capacity(count);
        let mut labels = Vec::with_capacity(count);
        for _ in 0..count {
            let (x, y) = self.example(&mut rng);
            xs.push(x);
            labels.push(y);
        }
        Ok(Batch { xs, labels })
    }

    fn example(&self, rng: &mut SeededRng) -> (RealMatrix, usize) {
        let (n, c) = (self.n, self.n_classes);
        let marker = c;
        let mut classes: Vec<usize> = (0..n).map(|_| rng.below(c)).collect();
        if self.kind == TaskKind::MajorityWindow {
            let favoured = rng.below(c);
            for k in &mut classes[n - 1 - self.lag..] {
                if rng.uniform() < MAJORITY_BIAS {
                    *k = favoured;
                }
            }
        }
        let mut x = RealMatrix::zeros(n, self.feature_dim());
        for (t, &k) in classes.iter().enumerate() {
            x.set(t, k, 1.0);
            for j in 0..self.noise_dims {
                x.set(t, c + 1 + j, NOISE_STD * rng.normal());
            }
        }
        let last = n - 1;
        let far = last - self.lag;
        let label = match self.kind {
            TaskKind::CopyWithLag => classes[far],
            TaskKind::SpikeRetrieval => {
                x.set(far, marker, 1.0);
                classes[far]
            }
            TaskKind::SparseRecall => {
                let p = rng.below(far + 1);
                x.set(p, marker, 1.0);
                classes[p]
            }
            TaskKind::MixedDependency => {
                let p = rng.below(far + 1);
                x.set(p, marker, 1.0);
                classes[last] * c + classes[p]
            }
            TaskKind::MajorityWindow => {
                let mut counts = vec![0usize; c];
                for &k in &classes[far..] {
                    counts[k] += 1;
                }
                let best = counts.iter().copied().max().unwrap_or(0);
                counts.iter().position(|&v| v == best).unwrap_or(0)
            }
            TaskKind::Separable => {
                let y = rng.below(2);
                for t in 0..n {
                    for j in 0..x.cols() {
                        x.set(t, j, rng.normal());
                    }
                }
                let sign = if y == 1 { 1.0 } else { -1.0 };
                x.set(last, 0, sign * (0.5 + rng.uniform()));
                y
            }
        };
        (x, label)
    }
}
