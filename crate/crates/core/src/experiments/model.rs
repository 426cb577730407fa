//! Sequence classifier built from hybrid blocks, and its ablation variants.
//!
//! Tokens are embedded, passed through `depth` residual blocks and read out
//! at the last position. A low-rank per-token map before the readout (the
//! "filler") absorbs parameter-budget differences between variants so that
//! comparisons run at matched parameter counts.

use std::collections::HashMap;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::concept::{self, tape_mi_hash, AssignSource, ConceptConfig, ConceptVars, Mixing};
use crate::error::{Error, Result};
use crate::fusion::{tape_ssm, BlockParams, SsmVars};
use crate::losses::{LossParts, LossWeights};
use crate::numerics::{argmax, RealMatrix, SeededRng};
use crate::ssm::SsmInit;

use super::tasks::Batch;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    Full,
    /// Both paths computed, no injection (`P = 0`), outputs mixed linearly
    /// from `[r_t; h_t]`.
    NoImf,
    /// SSM path only.
    NoFilter,
    /// Concept filter only, `y = F h`.
    NoSsm,
    /// Neither path: the blocks are identities.
    NoBoth,
    /// Input-independent assignment from learned static logits.
    StaticR,
    /// Identity concept mixing.
    NoMix,
    /// Full architecture trained with `beta = gamma = eta = 0`.
    NoMiLoss,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::Full,
        Variant::NoImf,
        Variant::NoFilter,
        Variant::NoSsm,
        Variant::NoBoth,
        Variant::StaticR,
        Variant::NoMix,
        Variant::NoMiLoss,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoImf => "no_imf",
            Variant::NoFilter => "no_filter",
            Variant::NoSsm => "no_ssm",
            Variant::NoBoth => "no_both",
            Variant::StaticR => "static_r",
            Variant::NoMix => "no_mix",
            Variant::NoMiLoss => "no_mi_loss",
        }
    }

    fn uses_ssm(self) -> bool {
        !matches!(self, Variant::NoSsm | Variant::NoBoth)
    }

    fn uses_filter(self) -> bool {
        !matches!(self, Variant::NoFilter | Variant::NoBoth)
    }

    fn fused(self) -> bool {
        matches!(self, Variant::Full | Variant::StaticR | Variant::NoMix | Variant::NoMiLoss)
    }

    fn mixing(self) -> Mixing {
        if self == Variant::NoMix {
            Mixing::Identity
        } else {
            Mixing::Attention
        }
    }

    /// Loss weights actually used when training this variant.
    pub fn effective_weights(self, w: LossWeights) -> LossWeights {
        if self == Variant::NoMiLoss {
            LossWeights { beta: 0.0, gamma: 0.0, eta: 0.0, ..w }
        } else {
            w
        }
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_in: usize,
    pub d_model: usize,
    pub d_state: usize,
    pub depth: usize,
    /// Longest sequence, used to size the static assignment logits.
    pub n_max: usize,
    pub n_labels: usize,
    pub k_max: usize,
    pub b_hash: usize,
    pub q_min: usize,
    pub q_max: usize,
    pub tau_assign: f64,
    pub tau_h: f64,
}

impl ModelConfig {
    pub fn concept(&self) -> ConceptConfig {
        let k = self.k_max.max(1);
        let q_max = self.q_max.clamp(1, k);
        ConceptConfig {
            k_max: k,
            b_hash: self.b_hash.clamp(1, k),
            tau_assign: self.tau_assign,
            tau_h: self.tau_h,
            q_min: self.q_min.clamp(1, q_max),
            q_max,
            ..ConceptConfig::new(self.d_model)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.d_model == 0 || self.d_state == 0 || self.n_labels < 2 || self.n_max == 0 {
            return Err(Error::Config("model dimensions must be positive (and at least two labels)".into()));
        }
        self.concept().validate()
    }
}

/// Identifies one parameter tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Slot {
    Embed,
    Lambda(usize),
    B(usize),
    C(usize),
    GateW(usize),
    GateB(usize),
    U(usize),
    Wr(usize),
    Wq(usize),
    Wk(usize),
    Wv(usize),
    Wu(usize),
    Eb(usize),
    P(usize),
    F(usize),
    Mix(usize),
    StaticR(usize),
    FillerA,
    FillerB,
    ReadW,
    ReadB,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub block: BlockParams,
    /// `[d x 2d]` output mix of the no-fusion variant.
    pub mix: RealMatrix,
    /// `[n_max x k_max]` static assignment logits.
    pub static_r: RealMatrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub variant: Variant,
    pub config: ModelConfig,
    pub embed: RealMatrix,
    pub layers: Vec<Layer>,
    pub filler_a: RealMatrix,
    pub filler_b: RealMatrix,
    pub read_w: RealMatrix,
    pub read_b: RealMatrix,
}

/// Per-sequence intermediate results of the last layer that feed the
/// auxiliary losses.
struct SeqTaps {
    h: Option<Var>,
    r: Option<Var>,
    hash: Vec<(Var, Var, Vec<usize>)>,
}

/// Result of one forward (and optionally backward) pass over a batch.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub total: f64,
    pub parts: LossParts,
    pub logits: RealMatrix,
    /// Gradients in [`Model::slots`] order (empty without backward).
    pub grads: Vec<RealMatrix>,
}

impl Evaluation {
    pub fn accuracy(&self, labels: &[usize]) -> f64 {
        let hits = labels.iter().enumerate().filter(|&(i, &y)| argmax(self.logits.row(i)) == y).count();
        hits as f64 / labels.len().max(1) as f64
    }
}

impl Model {
    pub fn new(variant: Variant, config: ModelConfig, filler_rank: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = SeededRng::new(seed);
        let d = config.d_model;
        let concept = config.concept();
        let init = SsmInit { stability_bound: 0.999, lambda_min: 0.5, allow_negative: false };
        let mut layers = Vec::with_capacity(config.depth);
        for _ in 0..config.depth {
            let block = BlockParams::sample(concept, config.d_state, init, &mut rng)?;
            layers.push(Layer {
                block,
                mix: rng.normal_matrix(d, 2 * d, 1.0 / (2.0 * d as f64).sqrt()),
                static_r: rng.normal_matrix(config.n_max, concept.k_max, 0.1),
            });
        }
        Ok(Self {
            variant,
            config,
            embed: rng.normal_matrix(d, config.d_in, 1.0 / (config.d_in as f64).sqrt()),
            layers,
            filler_a: rng.normal_matrix(d, filler_rank, 1.0 / (d as f64).sqrt()),
            filler_b: RealMatrix::zeros(d, filler_rank),
            read_w: rng.normal_matrix(config.n_labels, d, 0.1),
            read_b: RealMatrix::zeros(1, config.n_labels),
        })
    }

    /// Trainable tensors of this variant, in a fixed order.
    pub fn slots(&self) -> Vec<Slot> {
        let v = self.variant;
        let mut out = vec![Slot::Embed];
        for l in 0..self.layers.len() {
            if v.uses_ssm() {
                out.extend([Slot::Lambda(l), Slot::B(l), Slot::C(l), Slot::GateW(l), Slot::GateB(l)]);
            }
            if v.uses_filter() {
                if v != Variant::StaticR {
                    out.push(Slot::U(l));
                }
                out.push(Slot::Wr(l));
                if v != Variant::NoMix {
                    out.extend([Slot::Wq(l), Slot::Wk(l), Slot::Wv(l)]);
                }
                out.extend([Slot::Wu(l), Slot::Eb(l)]);
            }
            if v.fused() {
                out.extend([Slot::P(l), Slot::F(l)]);
            }
            match v {
                Variant::NoSsm => out.push(Slot::F(l)),
                Variant::NoImf => out.push(Slot::Mix(l)),
                Variant::StaticR => out.push(Slot::StaticR(l)),
                _ => {}
            }
        }
        if self.filler_a.cols() > 0 {
            out.extend([Slot::FillerA, Slot::FillerB]);
        }
        out.extend([Slot::ReadW, Slot::ReadB]);
        out
    }

    pub fn get(&self, slot: Slot) -> RealMatrix {
        let layer = |l: usize| &self.layers[l];
        match slot {
            Slot::Embed => self.embed.clone(),
            Slot::Lambda(l) => RealMatrix::row_vector(&layer(l).block.ssm.lambda),
            Slot::B(l) => layer(l).block.ssm.b.clone(),
            Slot::C(l) => layer(l).block.ssm.c.clone(),
            Slot::GateW(l) => RealMatrix::row_vector(&layer(l).block.ssm.gate_w),
            Slot::GateB(l) => RealMatrix::filled(1, 1, layer(l).block.ssm.gate_b),
            Slot::U(l) => layer(l).block.filter.u.clone(),
            Slot::Wr(l) => layer(l).block.filter.w_r.clone(),
            Slot::Wq(l) => layer(l).block.filter.w_q.clone(),
            Slot::Wk(l) => layer(l).block.filter.w_k.clone(),
            Slot::Wv(l) => layer(l).block.filter.w_v.clone(),
            Slot::Wu(l) => layer(l).block.filter.w_u.clone(),
            Slot::Eb(l) => layer(l).block.filter.e_b.clone(),
            Slot::P(l) => layer(l).block.fusion.p.clone(),
            Slot::F(l) => layer(l).block.fusion.f.clone(),
            Slot::Mix(l) => layer(l).mix.clone(),
            Slot::StaticR(l) => layer(l).static_r.clone(),
            Slot::FillerA => self.filler_a.clone(),
            Slot::FillerB => self.filler_b.clone(),
            Slot::ReadW => self.read_w.clone(),
            Slot::ReadB => self.read_b.clone(),
        }
    }

    /// Replaces one tensor; shapes must match.
    pub fn set(&mut self, slot: Slot, value: RealMatrix) -> Result<()> {
        let current = self.get(slot).shape();
        if value.shape() != current {
            return Err(Error::shape("parameter update", format!("{current:?}"), format!("{:?}", value.shape())));
        }
        match slot {
            Slot::Embed => self.embed = value,
            Slot::Lambda(l) => {
                let ssm = &mut self.layers[l].block.ssm;
                ssm.lambda = value.into_data();
                ssm.project_stable();
            }
            Slot::B(l) => self.layers[l].block.ssm.b = value,
            Slot::C(l) => self.layers[l].block.ssm.c = value,
            Slot::GateW(l) => self.layers[l].block.ssm.gate_w = value.into_data(),
            Slot::GateB(l) => self.layers[l].block.ssm.gate_b = value.get(0, 0),
            Slot::U(l) => self.layers[l].block.filter.u = value,
            Slot::Wr(l) => self.layers[l].block.filter.w_r = value,
            Slot::Wq(l) => self.layers[l].block.filter.w_q = value,
            Slot::Wk(l) => self.layers[l].block.filter.w_k = value,
            Slot::Wv(l) => self.layers[l].block.filter.w_v = value,
            Slot::Wu(l) => self.layers[l].block.filter.w_u = value,
            Slot::Eb(l) => self.layers[l].block.filter.e_b = value,
            Slot::P(l) => self.layers[l].block.fusion.p = value,
            Slot::F(l) => self.layers[l].block.fusion.f = value,
            Slot::Mix(l) => self.layers[l].mix = value,
            Slot::StaticR(l) => self.layers[l].static_r = value,
            Slot::FillerA => self.filler_a = value,
            Slot::FillerB => self.filler_b = value,
            Slot::ReadW => self.read_w = value,
            Slot::ReadB => self.read_b = value,
        }
        Ok(())
    }

    pub fn parameters(&self) -> Vec<RealMatrix> {
        self.slots().into_iter().map(|s| self.get(s)).collect()
    }

    pub fn set_parameters(&mut self, values: Vec<RealMatrix>) -> Result<()> {
        let slots = self.slots();
        if values.len() != slots.len() {
            return Err(Error::shape("parameter list", slots.len(), values.len()));
        }
        for (s, v) in slots.into_iter().zip(values) {
            self.set(s, v)?;
        }
        Ok(())
    }

    /// Number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.slots().into_iter().map(|s| {
            let (r, c) = self.get(s).shape();
            r * c
        }).sum()
    }

    /// Forward pass on `batch`; with `backward` the gradients of the total
    /// loss with respect to every trainable tensor are returned as well.
    pub fn evaluate(&self, batch: &Batch, weights: &LossWeights, backward: bool) -> Result<Evaluation> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let weights = self.variant.effective_weights(*weights);
        weights.validate()?;
        let mut tape = Tape::new();
        let trainable: Vec<Slot> = self.slots();
        let mut vars: HashMap<Slot, Var> = HashMap::new();
        for &s in &trainable {
            vars.insert(s, tape.param(self.get(s)));
        }
        let mut var = |tape: &mut Tape, s: Slot| *vars.entry(s).or_insert_with(|| tape.constant(self.get(s)));

        let embed = var(&mut tape, Slot::Embed);
        let mut layer_vars = Vec::with_capacity(self.layers.len());
        for l in 0..self.layers.len() {
            let ssm = SsmVars {
                lambda: var(&mut tape, Slot::Lambda(l)),
                b: var(&mut tape, Slot::B(l)),
                c: var(&mut tape, Slot::C(l)),
                gate_w: var(&mut tape, Slot::GateW(l)),
                gate_b: var(&mut tape, Slot::GateB(l)),
            };
            let concept = ConceptVars {
                u: var(&mut tape, Slot::U(l)),
                w_r: var(&mut tape, Slot::Wr(l)),
                w_q: var(&mut tape, Slot::Wq(l)),
                w_k: var(&mut tape, Slot::Wk(l)),
                w_v: var(&mut tape, Slot::Wv(l)),
                w_u: var(&mut tape, Slot::Wu(l)),
                e_b: var(&mut tape, Slot::Eb(l)),
            };
            let extra = (
                var(&mut tape, Slot::P(l)),
                var(&mut tape, Slot::F(l)),
                var(&mut tape, Slot::Mix(l)),
                var(&mut tape, Slot::StaticR(l)),
            );
            layer_vars.push((ssm, concept, extra));
        }
        let fa = var(&mut tape, Slot::FillerA);
        let fb = var(&mut tape, Slot::FillerB);
        let rw = var(&mut tape, Slot::ReadW);
        let rb = var(&mut tape, Slot::ReadB);

        let mut lasts = Vec::with_capacity(batch.len());
        let mut taps = Vec::with_capacity(batch.len());
        for x in &batch.xs {
            if x.cols() != self.config.d_in {
                return Err(Error::shape("token width", self.config.d_in, x.cols()));
            }
            let xv = tape.constant(x.clone());
            let mut cur = tape.matmul_t(xv, embed);
            let mut seq = SeqTaps { h: None, r: None, hash: Vec::new() };
            for (l, (ssm, concept, (p, f, mix, sr))) in layer_vars.iter().enumerate() {
                let block = &self.layers[l].block;
                let v = self.variant;
                let filt = if v.uses_filter() {
                    let source = if v == Variant::StaticR { AssignSource::Static(*sr) } else { AssignSource::Learned };
                    let (tf, buckets) = concept::tape_filter(&mut tape, &block.filter, concept, cur, source, v.mixing())?;
                    seq.hash.push((tf.u_hat, concept.e_b, buckets));
                    Some(tf.h)
                } else {
                    None
                };
                let injection = if v.fused() { filt.map(|h| (h, *p)) } else { None };
                let r = if v.uses_ssm() { Some(tape_ssm(&mut tape, ssm, cur, injection, true).1) } else { None };
                let y = match (v, r, filt) {
                    (Variant::NoBoth, _, _) => None,
                    (Variant::NoFilter, Some(r), _) => Some(r),
                    (Variant::NoSsm, _, Some(h)) => Some(tape.matmul_t(h, *f)),
                    (Variant::NoImf, Some(r), Some(h)) => {
                        let both = tape.concat_cols(r, h);
                        Some(tape.matmul_t(both, *mix))
                    }
                    (_, Some(r), Some(h)) => {
                        let fh = tape.matmul_t(h, *f);
                        Some(tape.add(r, fh))
                    }
                    _ => unreachable!("variant path table is exhaustive"),
                };
                if let Some(y) = y {
                    cur = tape.add(cur, y);
                }
                seq.h = filt;
                seq.r = r;
            }
            let n = x.rows();
            lasts.push(tape.slice_rows(cur, n - 1, 1));
            taps.push(seq);
        }
        let mut z = tape.stack_rows(&lasts);
        if self.filler_a.cols() > 0 {
            let low = tape.matmul(z, fa);
            let back = tape.matmul_t(low, fb);
            z = tape.add(z, back);
        }
        let logits = tape.matmul_t(z, rw);
        let logits = tape.add_row(logits, rb);

        let mut parts = LossParts::default();
        let task = tape.cross_entropy(logits, &batch.labels)?;
        parts.task = tape.scalar(task);
        let mut total = task;
        let bsz = batch.len();
        if weights.beta != 0.0 || weights.gamma != 0.0 {
            let pooled = |tape: &mut Tape, pick: &dyn Fn(&SeqTaps) -> Option<Var>| -> Option<Var> {
                let rows: Option<Vec<Var>> = taps.iter().map(pick).collect();
                rows.map(|rows| {
                    let means: Vec<Var> = rows.into_iter().map(|v| tape.mean_rows(v)).collect();
                    tape.stack_rows(&means)
                })
            };
            let hbar = pooled(&mut tape, &|s| s.h);
            let rbar = pooled(&mut tape, &|s| s.r);
            if weights.beta != 0.0 && bsz >= 2 {
                for (rep, slot) in [(hbar, &mut parts.nce_h), (rbar, &mut parts.nce_r)] {
                    if let Some(rep) = rep {
                        let l = tape.info_nce(rep, &batch.labels, weights.tau_nce)?;
                        *slot = tape.scalar(l);
                        let l = tape.scale(l, weights.beta);
                        total = tape.add(total, l);
                    }
                }
            }
            if weights.gamma != 0.0 && bsz >= 2 {
                if let (Some(h), Some(r)) = (hbar, rbar) {
                    let l = tape.redundancy(h, r)?;
                    parts.redundancy = tape.scalar(l);
                    let l = tape.scale(l, weights.gamma);
                    total = tape.add(total, l);
                }
            }
        }
        if weights.eta != 0.0 {
            let tau_h = self.config.concept().tau_h;
            let mut acc: Option<Var> = None;
            for seq in &taps {
                for (u_hat, e_b, buckets) in &seq.hash {
                    let l = tape_mi_hash(&mut tape, *u_hat, *e_b, buckets, tau_h)?;
                    acc = Some(match acc {
                        Some(a) => tape.add(a, l),
                        None => l,
                    });
                }
            }
            if let Some(acc) = acc {
                let mean = tape.scale(acc, 1.0 / bsz as f64);
                parts.mi_hash = tape.scalar(mean);
                let l = tape.scale(mean, weights.eta);
                total = tape.add(total, l);
            }
        }
        let total_value = tape.scalar(total);
        let grads = if backward {
            let g = tape.backward(total);
            trainable
                .iter()
                .map(|s| {
                    let v = vars[s];
                    g.wrt(v, tape.value(v).shape())
                })
                .collect()
        } else {
            Vec::new()
        };
        Ok(Evaluation {
            total: total_value,
            parts,
            logits: tape.value(logits).clone(),
            grads,
        })
    }
}

/// Per-variant architecture choices that put every variant within 2% of
/// the largest parameter count: the SSM-only variant first widens its state,
/// then every variant pads the remaining gap with the low-rank filler.
pub fn budget_plan(config: ModelConfig, variants: &[Variant]) -> Result<Vec<(Variant, ModelConfig, usize)>> {
    if variants.is_empty() {
        return Err(Error::Config("no variants given".into()));
    }
    let base: Vec<usize> = variants
        .iter()
        .map(|&v| Model::new(v, config, 0, 0).map(|m| m.param_count()))
        .collect::<Result<_>>()?;
    let target = base.iter().copied().max().unwrap_or(0);
    let d = config.d_model;
    let depth = config.depth.max(1);
    Ok(variants
        .iter()
        .zip(&base)
        .map(|(&v, &count)| {
            let mut cfg = config;
            let mut count = count;
            if v == Variant::NoFilter {
                let per_state = depth * (2 * d + 1);
                let extra = (target - count) / per_state;
                cfg.d_state += extra;
                count += extra * per_state;
            }
            let rank = ((target - count) as f64 / (2 * d) as f64).round() as usize;
            (v, cfg, rank)
        })
        .collect())
}

/// One freshly initialized model per variant, following [`budget_plan`].
pub fn matched_models(config: ModelConfig, variants: &[Variant], seed: u64) -> Result<Vec<Model>> {
    budget_plan(config, variants)?
        .into_iter()
        .map(|(v, cfg, rank)| Model::new(v, cfg, rank, seed))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::tasks::{SyntheticTask, TaskKind};
    use crate::numerics::fd_gradient;

    pub(crate) fn tiny_config(task: &SyntheticTask, depth: usize) -> ModelConfig {
        ModelConfig {
            d_in: task.feature_dim(),
            d_model: 4,
            d_state: 3,
            depth,
            n_max: task.n,
            n_labels: task.num_labels(),
            k_max: 4,
            b_hash: 2,
            q_min: 1,
            q_max: 3,
            tau_assign: 0.7,
            tau_h: 0.5,
        }
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("nope".parse::<Variant>().is_err());
    }

    #[test]
    fn parameters_round_trip() {
        let task = SyntheticTask::new(TaskKind::MixedDependency, 2, 8, 2, 1, 0).unwrap();
        for v in Variant::ALL {
            let m = Model::new(v, tiny_config(&task, 2), 2, 1).unwrap();
            let mut copy = m.clone();
            copy.set_parameters(m.parameters()).unwrap();
            assert_eq!(copy, m);
        }
    }

    #[test]
    fn budgets_are_matched() {
        let task = SyntheticTask::new(TaskKind::MixedDependency, 2, 16, 3, 2, 0).unwrap();
        let cfg = ModelConfig { d_model: 8, d_state: 8, k_max: 8, ..tiny_config(&task, 1) };
        let models = matched_models(cfg, &Variant::ALL, 3).unwrap();
        let counts: Vec<usize> = models.iter().map(Model::param_count).collect();
        let max = *counts.iter().max().unwrap() as f64;
        for c in &counts {
            assert!((max - *c as f64).abs() / max <= 0.02, "{counts:?}");
        }
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        let task = SyntheticTask::new(TaskKind::MixedDependency, 2, 8, 2, 0, 5).unwrap();
        let batch = task.generate(4, 0).unwrap();
        let weights = LossWeights::default();
        for v in [Variant::Full, Variant::NoImf, Variant::StaticR] {
            let model = Model::new(v, tiny_config(&task, 2), 1, 9).unwrap();
            let eval = model.evaluate(&batch, &weights, true).unwrap();
            let params = model.parameters();
            for (i, p) in params.iter().enumerate() {
                let f = |flat: &[f64]| {
                    let mut m = model.clone();
                    let mut ps = params.clone();
                    ps[i] = RealMatrix::new(p.rows(), p.cols(), flat.to_vec()).unwrap();
                    m.set_parameters(ps).unwrap();
                    m.evaluate(&batch, &weights, false).unwrap().total
                };
                let fd = fd_gradient(f, p.data(), 1e-6).unwrap();
                for (a, b) in eval.grads[i].data().iter().zip(&fd) {
                    let rel = (a - b).abs() / a.abs().max(b.abs()).max(1e-3);
                    assert!(rel < 1e-4, "{v:?} slot {:?}: {a} vs {b}", model.slots()[i]);
                }
            }
        }
    }
}
