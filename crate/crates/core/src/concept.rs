//! Concept-bottleneck global filter.
//!
//! Tokens are soft-assigned to `k_max` concept centers, each token's
//! assignment is restricted to the candidate concepts of its hash bucket and
//! trimmed to an entropy-driven budget, the surviving concepts interact
//! through a small attention in concept space, and the result is scattered
//! back to the tokens. With `q` nonzeros per token the cost is
//! `O(n q d + k_eff^2 d)` instead of `O(n^2 d)`.
//!
//! Matrix conventions: `U` is `[d_c x k_max]` with centers as columns, `W_r`
//! is `[d_c x d]` acting on column tokens, the concept projections
//! `W_Q^c, W_K^c, W_V^c` are `[d x d_c]` acting on the rows of `Z`, and `W_U`
//! is `[d x d_c]`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::losses::{normalize_rows, normalize_rows_backward};
use crate::numerics::{argmax, entropy_unchecked, log_sum_exp, masked_softmax, softmax_unchecked, RealMatrix, SeededRng};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptConfig {
    pub d: usize,
    pub d_c: usize,
    pub k_max: usize,
    pub b_hash: usize,
    pub tau_assign: f64,
    pub tau_h: f64,
    pub q_min: usize,
    pub q_max: usize,
}

impl ConceptConfig {
    pub fn new(d: usize) -> Self {
        Self {
            d,
            d_c: d,
            k_max: 100,
            b_hash: 4,
            tau_assign: 0.7,
            tau_h: 0.5,
            q_min: 2,
            q_max: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d_c == 0 {
            return Err(Error::invalid("concept widths must be at least 1"));
        }
        if self.k_max == 0 || self.b_hash == 0 {
            return Err(Error::invalid("k_max and b_hash must be at least 1"));
        }
        if !(1 <= self.q_min && self.q_min <= self.q_max && self.q_max <= self.k_max) {
            return Err(Error::invalid(format!(
                "budget bounds need 1 <= q_min <= q_max <= k_max, got {} / {} / {}",
                self.q_min, self.q_max, self.k_max
            )));
        }
        for (name, v) in [("tau_assign", self.tau_assign), ("tau_h", self.tau_h)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptFilterParams {
    pub config: ConceptConfig,
    /// Concept centers as columns, `[d_c x k_max]`.
    pub u: RealMatrix,
    /// `[d_c x d]`
    pub w_r: RealMatrix,
    /// `[d x d_c]`
    pub w_q: RealMatrix,
    /// `[d x d_c]`
    pub w_k: RealMatrix,
    /// `[d x d_c]`
    pub w_v: RealMatrix,
    /// `[d x d_c]`
    pub w_u: RealMatrix,
    /// Hash head weights `[b_hash x d]`.
    pub hash_w: RealMatrix,
    /// Hash head bias `[1 x b_hash]`.
    pub hash_b: RealMatrix,
    /// Bucket embeddings as columns, `[d_c x b_hash]`.
    pub e_b: RealMatrix,
}

impl ConceptFilterParams {
    pub fn sample(config: ConceptConfig, rng: &mut SeededRng) -> Result<Self> {
        config.validate()?;
        let ConceptConfig { d, d_c, k_max, b_hash, .. } = config;
        let sd = 1.0 / (d as f64).sqrt();
        Ok(Self {
            config,
            u: rng.normal_matrix(d_c, k_max, 1.0),
            w_r: rng.normal_matrix(d_c, d, sd),
            w_q: rng.normal_matrix(d, d_c, sd),
            w_k: rng.normal_matrix(d, d_c, sd),
            w_v: rng.normal_matrix(d, d_c, sd),
            w_u: rng.normal_matrix(d, d_c, 1.0 / (d_c as f64).sqrt()),
            hash_w: rng.normal_matrix(b_hash, d, sd),
            hash_b: RealMatrix::zeros(1, b_hash),
            e_b: rng.normal_matrix(d_c, b_hash, 1.0),
        })
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        let expect = [
            ("U", &self.u, (c.d_c, c.k_max)),
            ("W_r", &self.w_r, (c.d_c, c.d)),
            ("W_Q^c", &self.w_q, (c.d, c.d_c)),
            ("W_K^c", &self.w_k, (c.d, c.d_c)),
            ("W_V^c", &self.w_v, (c.d, c.d_c)),
            ("W_U", &self.w_u, (c.d, c.d_c)),
            ("hash_w", &self.hash_w, (c.b_hash, c.d)),
            ("hash_b", &self.hash_b, (1, c.b_hash)),
            ("e_b", &self.e_b, (c.d_c, c.b_hash)),
        ];
        for (name, m, shape) in expect {
            if m.shape() != shape {
                return Err(Error::shape(
                    name,
                    format!("{}x{}", shape.0, shape.1),
                    format!("{}x{}", m.rows(), m.cols()),
                ));
            }
        }
        Ok(())
    }

    fn check_input(&self, x: &RealMatrix) -> Result<()> {
        self.validate()?;
        if x.rows() == 0 {
            return Err(Error::invalid("concept filter needs at least one token"));
        }
        if x.cols() != self.config.d {
            return Err(Error::shape("concept filter input width", self.config.d, x.cols()));
        }
        if !x.is_finite() {
            return Err(Error::invalid("concept filter input contains non-finite values"));
        }
        Ok(())
    }

    /// Projected tokens `û_t = W_r x_t` as rows, `[n x d_c]`.
    pub fn project(&self, x: &RealMatrix) -> RealMatrix {
        x.matmul_t(&self.w_r)
    }
}

/// Soft assignment `R_{t,i} = softmax_i(<W_r x_t, u_i> / τ)`, `[n x k_max]`.
pub fn soft_assign(params: &ConceptFilterParams, x: &RealMatrix) -> Result<RealMatrix> {
    params.check_input(x)?;
    let logits = params.project(x).matmul(&params.u);
    let tau = params.config.tau_assign;
    let mut r = RealMatrix::zeros(x.rows(), params.config.k_max);
    for t in 0..x.rows() {
        r.row_mut(t).copy_from_slice(&softmax_unchecked(logits.row(t), tau));
    }
    Ok(r)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HashAssignment {
    /// `p(b | x_t)`, `[n x b_hash]`.
    pub probs: RealMatrix,
    pub buckets: Vec<usize>,
}

fn hash_probs(params: &ConceptFilterParams, x: &RealMatrix) -> Result<RealMatrix> {
    params.check_input(x)?;
    let logits = x.matmul_t(&params.hash_w);
    let mut probs = RealMatrix::zeros(x.rows(), params.config.b_hash);
    for t in 0..x.rows() {
        let row: Vec<f64> = logits.row(t).iter().zip(params.hash_b.row(0)).map(|(a, b)| a + b).collect();
        probs.row_mut(t).copy_from_slice(&softmax_unchecked(&row, 1.0));
    }
    Ok(probs)
}

/// Deterministic bucketing: `b_t = argmax_b p(b | x_t)`, ties to the lowest
/// bucket.
pub fn hash_assign(params: &ConceptFilterParams, x: &RealMatrix) -> Result<HashAssignment> {
    let probs = hash_probs(params, x)?;
    let buckets = (0..probs.rows()).map(|t| argmax(probs.row(t))).collect();
    Ok(HashAssignment { probs, buckets })
}

/// Stochastic bucketing: `b_t ~ p(b | x_t)` drawn from `rng`.
pub fn hash_assign_sampled(params: &ConceptFilterParams, x: &RealMatrix, rng: &mut SeededRng) -> Result<HashAssignment> {
    let probs = hash_probs(params, x)?;
    let buckets = (0..probs.rows()).map(|t| rng.categorical(probs.row(t))).collect();
    Ok(HashAssignment { probs, buckets })
}

/// InfoMax bucketing loss on projected tokens `û` (rows) against bucket
/// embeddings `e_b` (columns), with the hard buckets as targets. Returns the
/// value and the gradients with respect to `û` and `e_b`.
pub fn mi_hash_loss_grad(
    u_hat: &RealMatrix,
    e_b: &RealMatrix,
    buckets: &[usize],
    tau_h: f64,
) -> Result<(f64, RealMatrix, RealMatrix)> {
    let n = u_hat.rows();
    if n == 0 {
        return Err(Error::invalid("MI-hash loss needs at least one token"));
    }
    if buckets.len() != n {
        return Err(Error::shape("mi_hash buckets", n, buckets.len()));
    }
    if e_b.rows() != u_hat.cols() {
        return Err(Error::shape("bucket embedding width", u_hat.cols(), e_b.rows()));
    }
    if let Some(&b) = buckets.iter().find(|&&b| b >= e_b.cols()) {
        return Err(Error::invalid(format!("bucket {b} out of range")));
    }
    if !(tau_h > 0.0) {
        return Err(Error::invalid("tau_h must be positive"));
    }
    crate::losses::record_evaluation();
    let e_rows = e_b.transpose();
    let (un, u_norms) = normalize_rows(u_hat);
    let (en, e_norms) = normalize_rows(&e_rows);
    let s = un.matmul_t(&en).scale(1.0 / tau_h);
    let mut total = 0.0;
    let mut g_s = RealMatrix::zeros(n, e_b.cols());
    for t in 0..n {
        let row = s.row(t);
        total += log_sum_exp(row) - row[buckets[t]];
        let p = softmax_unchecked(row, 1.0);
        for (b, pb) in p.iter().enumerate() {
            let target = if b == buckets[t] { 1.0 } else { 0.0 };
            g_s.set(t, b, (pb - target) / n as f64);
        }
    }
    let g_s = g_s.scale(1.0 / tau_h);
    let g_un = g_s.matmul(&en);
    let g_en = g_s.t_matmul(&un);
    let g_u = normalize_rows_backward(u_hat, &u_norms, &g_un);
    let g_e = normalize_rows_backward(&e_rows, &e_norms, &g_en).transpose();
    Ok((total / n as f64, g_u, g_e))
}

/// `−(1/n) Σ_t log softmax_b(cos(e_b, W_r x_t)/τ_h)[b_t]`.
pub fn mi_hash_loss(params: &ConceptFilterParams, x: &RealMatrix) -> Result<f64> {
    let hash = hash_assign(params, x)?;
    Ok(mi_hash_loss_grad(&params.project(x), &params.e_b, &hash.buckets, params.config.tau_h)?.0)
}

/// Candidate concepts per bucket: concept `i` joins the bucket whose
/// embedding has the largest cosine similarity with `u_i` (ties to the
/// lowest bucket).
pub fn build_candidate_sets(params: &ConceptFilterParams) -> Vec<Vec<usize>> {
    let (un, _) = normalize_rows(&params.u.transpose());
    let (en, _) = normalize_rows(&params.e_b.transpose());
    let sims = un.matmul_t(&en);
    let mut sets = vec![Vec::new(); params.config.b_hash];
    for i in 0..params.config.k_max {
        sets[argmax(sims.row(i))].push(i);
    }
    sets
}

/// Entropy budget `q_t = clamp(round(q_min + (q_max − q_min) H(R_t) / ln k_max))`.
pub fn budget(config: &ConceptConfig, r: &RealMatrix) -> Vec<usize> {
    let log_k = (config.k_max as f64).ln();
    (0..r.rows())
        .map(|t| {
            let frac = if log_k > 0.0 { entropy_unchecked(r.row(t)) / log_k } else { 0.0 };
            let q = (config.q_min as f64 + (config.q_max - config.q_min) as f64 * frac).round();
            (q.max(config.q_min as f64) as usize).min(config.q_max)
        })
        .collect()
}

/// Nonzero entries of one sparsified assignment row, by ascending concept.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparseRow {
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
}

impl SparseRow {
    pub fn from_dense(row: &[f64]) -> Self {
        let (indices, values) = row.iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(i, v)| (i, *v)).unzip();
        Self { indices, values }
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }
}

pub fn sparse_to_dense(rows: &[SparseRow], k_max: usize) -> RealMatrix {
    let mut out = RealMatrix::zeros(rows.len(), k_max);
    for (t, row) in rows.iter().enumerate() {
        for (&i, &v) in row.indices.iter().zip(&row.values) {
            out.set(t, i, v);
        }
    }
    out
}

/// Masked, budgeted and renormalized assignment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sparsified {
    pub rows: Vec<SparseRow>,
    /// Tokens whose candidate set held no mass and fell back to the global
    /// argmax.
    pub fallbacks: Vec<usize>,
}

/// Keeps the top-`q_t` entries of `R_t` inside `C(b_t)` (ties to the lowest
/// concept) and renormalizes.
pub fn sparsify(r: &RealMatrix, buckets: &[usize], sets: &[Vec<usize>], budgets: &[usize]) -> Result<Sparsified> {
    let n = r.rows();
    if buckets.len() != n || budgets.len() != n {
        return Err(Error::shape("sparsify per-token inputs", n, buckets.len().min(budgets.len())));
    }
    let mut rows = Vec::with_capacity(n);
    let mut fallbacks = Vec::new();
    for t in 0..n {
        let row = r.row(t);
        let set = sets
            .get(buckets[t])
            .ok_or_else(|| Error::invalid(format!("bucket {} has no candidate set", buckets[t])))?;
        let mut cand: Vec<usize> = set.iter().copied().filter(|&i| row[i] > 0.0).collect();
        cand.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        cand.truncate(budgets[t]);
        if cand.is_empty() {
            fallbacks.push(t);
            cand.push(argmax(row));
        }
        cand.sort_unstable();
        let mass: f64 = cand.iter().map(|&i| row[i]).sum();
        let support = row.iter().filter(|&&v| v > 0.0).count();
        let values = if cand.len() == support {
            cand.iter().map(|&i| row[i]).collect()
        } else if mass > 0.0 {
            cand.iter().map(|&i| row[i] / mass).collect()
        } else {
            vec![1.0 / cand.len() as f64; cand.len()]
        };
        rows.push(SparseRow { indices: cand, values });
    }
    Ok(Sparsified { rows, fallbacks })
}

/// Everything the assignment stage produced for one input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssignmentRecord {
    pub r: RealMatrix,
    pub r_bar: Vec<SparseRow>,
    pub buckets: Vec<usize>,
    pub budgets: Vec<usize>,
    pub k_eff: usize,
    pub fallbacks: Vec<usize>,
}

pub fn active_concepts(rows: &[SparseRow], k_max: usize) -> Vec<bool> {
    let mut active = vec![false; k_max];
    for row in rows {
        for (&i, &v) in row.indices.iter().zip(&row.values) {
            if v != 0.0 {
                active[i] = true;
            }
        }
    }
    active
}

/// Soft assignment, hashing, budgeting and sparsification in one pass.
pub fn assign(params: &ConceptFilterParams, x: &RealMatrix) -> Result<AssignmentRecord> {
    let r = soft_assign(params, x)?;
    let hash = hash_assign(params, x)?;
    let sets = build_candidate_sets(params);
    let budgets = budget(&params.config, &r);
    let sp = sparsify(&r, &hash.buckets, &sets, &budgets)?;
    let k_eff = active_concepts(&sp.rows, params.config.k_max).iter().filter(|a| **a).count();
    Ok(AssignmentRecord {
        r,
        r_bar: sp.rows,
        buckets: hash.buckets,
        budgets,
        k_eff,
        fallbacks: sp.fallbacks,
    })
}

/// How concepts interact before scattering.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mixing {
    /// Masked softmax attention among active concepts.
    Attention,
    /// `Z̃ = Z`; requires `d_c = d`.
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixOutput {
    /// Global feature per token, `[n x d]`.
    pub h: RealMatrix,
    /// Aggregated concepts `R̄^T X`, `[k_max x d]`.
    pub z: RealMatrix,
    /// Concept attention, `[k_max x k_max]`; rows and columns of inactive
    /// concepts are zero.
    pub a_c: RealMatrix,
    /// Mixed concepts, `[k_max x d_c]`.
    pub z_tilde: RealMatrix,
    pub active: Vec<bool>,
}

fn check_mix(params: &ConceptFilterParams, rows_len: usize, x: &RealMatrix, mixing: Mixing) -> Result<()> {
    params.check_input(x)?;
    if rows_len != x.rows() {
        return Err(Error::shape("assignment rows", x.rows(), rows_len));
    }
    if mixing == Mixing::Identity && params.config.d_c != params.config.d {
        return Err(Error::invalid("identity mixing needs d_c = d"));
    }
    Ok(())
}

/// Sparse concept mixing: touches only nonzero assignment entries and active
/// concepts.
pub fn concept_mix(params: &ConceptFilterParams, r_bar: &[SparseRow], x: &RealMatrix, mixing: Mixing) -> Result<MixOutput> {
    check_mix(params, r_bar.len(), x, mixing)?;
    let ConceptConfig { d, d_c, k_max, .. } = params.config;
    for row in r_bar {
        if row.indices.iter().any(|&i| i >= k_max) || row.indices.len() != row.values.len() {
            return Err(Error::invalid("sparse assignment row is malformed"));
        }
    }
    let active = active_concepts(r_bar, k_max);
    let ids: Vec<usize> = (0..k_max).filter(|&i| active[i]).collect();

    let mut z = RealMatrix::zeros(k_max, d);
    for (t, row) in r_bar.iter().enumerate() {
        let xt = x.row(t);
        for (&i, &v) in row.indices.iter().zip(&row.values) {
            for (zc, xc) in z.row_mut(i).iter_mut().zip(xt) {
                *zc += v * xc;
            }
        }
    }

    let mut a_c = RealMatrix::zeros(k_max, k_max);
    let mut z_tilde = RealMatrix::zeros(k_max, d_c);
    let z_act = RealMatrix::stack_rows(&ids.iter().map(|&i| z.row(i).to_vec()).collect::<Vec<_>>());
    match mixing {
        Mixing::Identity => {
            for &i in &ids {
                z_tilde.row_mut(i).copy_from_slice(z.row(i));
            }
        }
        Mixing::Attention if !ids.is_empty() => {
            let q = z_act.matmul(&params.w_q);
            let kk = z_act.matmul(&params.w_k);
            let v = z_act.matmul(&params.w_v);
            let logits = q.matmul_t(&kk).scale(1.0 / (d as f64).sqrt());
            for (a, &i) in ids.iter().enumerate() {
                let w = softmax_unchecked(logits.row(a), 1.0);
                for (b, &j) in ids.iter().enumerate() {
                    a_c.set(i, j, w[b]);
                }
                let out = z_tilde.row_mut(i);
                for (b, wb) in w.iter().enumerate() {
                    for (o, vv) in out.iter_mut().zip(v.row(b)) {
                        *o += wb * vv;
                    }
                }
            }
        }
        Mixing::Attention => {}
    }

    let mut gathered = RealMatrix::zeros(x.rows(), d_c);
    for (t, row) in r_bar.iter().enumerate() {
        let g = gathered.row_mut(t);
        for (&i, &v) in row.indices.iter().zip(&row.values) {
            for (gc, zc) in g.iter_mut().zip(z_tilde.row(i)) {
                *gc += v * zc;
            }
        }
    }
    let h = gathered.matmul_t(&params.w_u);
    Ok(MixOutput { h, z, a_c, z_tilde, active })
}

/// Fully materialized mixing on a dense assignment, without any sparsity
/// shortcuts.
pub fn concept_mix_dense(params: &ConceptFilterParams, r_bar: &RealMatrix, x: &RealMatrix, mixing: Mixing) -> Result<MixOutput> {
    check_mix(params, r_bar.rows(), x, mixing)?;
    let ConceptConfig { d, k_max, .. } = params.config;
    if r_bar.cols() != k_max {
        return Err(Error::shape("dense assignment width", k_max, r_bar.cols()));
    }
    let z = r_bar.t_matmul(x);
    let active: Vec<bool> = (0..k_max).map(|i| (0..r_bar.rows()).any(|t| r_bar.get(t, i) != 0.0)).collect();
    let (a_c, z_tilde) = match mixing {
        Mixing::Identity => (RealMatrix::zeros(k_max, k_max), z.clone()),
        Mixing::Attention => {
            let logits = z.matmul(&params.w_q).matmul_t(&z.matmul(&params.w_k)).scale(1.0 / (d as f64).sqrt());
            let mut a = RealMatrix::zeros(k_max, k_max);
            for i in 0..k_max {
                if active[i] {
                    a.row_mut(i).copy_from_slice(&masked_softmax(logits.row(i), &active));
                }
            }
            let zt = a.matmul(&z.matmul(&params.w_v));
            (a, zt)
        }
    };
    let h = r_bar.matmul(&z_tilde).matmul_t(&params.w_u);
    Ok(MixOutput { h, z, a_c, z_tilde, active })
}

/// Input-agnostic assignment: the first `n` rows of `R0`, softmax-normalized.
pub fn static_r_control(r0: &RealMatrix, n: usize) -> Result<RealMatrix> {
    if n > r0.rows() {
        return Err(Error::invalid(format!("static assignment has {} rows, need {n}", r0.rows())));
    }
    let mut out = RealMatrix::zeros(n, r0.cols());
    for t in 0..n {
        out.row_mut(t).copy_from_slice(&softmax_unchecked(r0.row(t), 1.0));
    }
    Ok(out)
}

/// Assignment followed by mixing: the global feature `h` of a block.
pub fn filter_forward(params: &ConceptFilterParams, x: &RealMatrix, mixing: Mixing) -> Result<(AssignmentRecord, MixOutput)> {
    let rec = assign(params, x)?;
    let mix = concept_mix(params, &rec.r_bar, x, mixing)?;
    Ok((rec, mix))
}

/// Tape handles for the differentiable concept-filter parameters.
#[derive(Clone, Copy, Debug)]
pub struct ConceptVars {
    pub u: Var,
    pub w_r: Var,
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_u: Var,
    pub e_b: Var,
}

impl ConceptVars {
    pub fn register(tape: &mut Tape, p: &ConceptFilterParams) -> Self {
        Self {
            u: tape.param(p.u.clone()),
            w_r: tape.param(p.w_r.clone()),
            w_q: tape.param(p.w_q.clone()),
            w_k: tape.param(p.w_k.clone()),
            w_v: tape.param(p.w_v.clone()),
            w_u: tape.param(p.w_u.clone()),
            e_b: tape.param(p.e_b.clone()),
        }
    }
}

/// Where the filter's assignment comes from on the tape.
#[derive(Clone, Copy, Debug)]
pub enum AssignSource {
    /// Input-dependent soft assignment, bucketed and budgeted.
    Learned,
    /// Static logits `R0` (a `[n_max x k_max]` tape variable).
    Static(Var),
}

/// Tape outputs of [`tape_filter`].
#[derive(Clone, Copy, Debug)]
pub struct TapeFilter {
    pub h: Var,
    /// Projected tokens `W_r x_t`, the input of the MI-hash loss.
    pub u_hat: Var,
}

/// Differentiable filter forward. Bucketing, budgets and the top-q mask are
/// piecewise-constant selections and enter as constants.
pub fn tape_filter(
    tape: &mut Tape,
    params: &ConceptFilterParams,
    vars: &ConceptVars,
    x: Var,
    source: AssignSource,
    mixing: Mixing,
) -> Result<(TapeFilter, Vec<usize>)> {
    let xv = tape.value(x).clone();
    params.check_input(&xv)?;
    let ConceptConfig { d, k_max, tau_assign, .. } = params.config;
    let n = xv.rows();
    let u_hat = tape.matmul_t(x, vars.w_r);
    let (r_bar, buckets) = match source {
        AssignSource::Learned => {
            let logits = tape.matmul(u_hat, vars.u);
            let logits = tape.scale(logits, 1.0 / tau_assign);
            let r = tape.softmax_rows(logits, None);
            let hash = hash_assign(params, &xv)?;
            let sets = build_candidate_sets(params);
            let budgets = budget(&params.config, tape.value(r));
            let sp = sparsify(tape.value(r), &hash.buckets, &sets, &budgets)?;
            let mut mask = RealMatrix::zeros(n, k_max);
            for (t, row) in sp.rows.iter().enumerate() {
                for &i in &row.indices {
                    mask.set(t, i, 1.0);
                }
            }
            let mask = tape.constant(mask);
            let kept = tape.mul(r, mask);
            let mass = tape.sum_rows(kept);
            (tape.div_col(kept, mass), hash.buckets)
        }
        AssignSource::Static(r0) => {
            if tape.value(r0).rows() < n {
                return Err(Error::invalid("static assignment shorter than the sequence"));
            }
            let rows = tape.slice_rows(r0, 0, n);
            (tape.softmax_rows(rows, None), hash_assign(params, &xv)?.buckets)
        }
    };
    let z = tape.t_matmul(r_bar, x);
    let rb = tape.value(r_bar);
    let active: Vec<bool> = (0..k_max).map(|i| (0..n).any(|t| rb.get(t, i) != 0.0)).collect();
    let z_tilde = match mixing {
        Mixing::Identity => {
            if params.config.d_c != d {
                return Err(Error::invalid("identity mixing needs d_c = d"));
            }
            z
        }
        Mixing::Attention => {
            let q = tape.matmul(z, vars.w_q);
            let k = tape.matmul(z, vars.w_k);
            let v = tape.matmul(z, vars.w_v);
            let logits = tape.matmul_t(q, k);
            let logits = tape.scale(logits, 1.0 / (d as f64).sqrt());
            let mask: Vec<bool> = (0..k_max * k_max).map(|e| active[e / k_max] && active[e % k_max]).collect();
            let a = tape.softmax_rows(logits, Some(&mask));
            tape.matmul(a, v)
        }
    };
    let gathered = tape.matmul(r_bar, z_tilde);
    let h = tape.matmul_t(gathered, vars.w_u);
    Ok((TapeFilter { h, u_hat }, buckets))
}

/// Records the MI-hash loss on the tape.
pub fn tape_mi_hash(tape: &mut Tape, u_hat: Var, e_b: Var, buckets: &[usize], tau_h: f64) -> Result<Var> {
    let (v, gu, ge) = mi_hash_loss_grad(tape.value(u_hat), tape.value(e_b), buckets, tau_h)?;
    Ok(tape.loss(v, vec![(u_hat, gu), (e_b, ge)]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::fd_gradient;
    use proptest::prelude::*;

    fn small(d: usize, k: usize, b: usize, seed: u64) -> (ConceptFilterParams, SeededRng) {
        let mut rng = SeededRng::new(seed);
        let cfg = ConceptConfig {
            k_max: k,
            b_hash: b,
            q_min: 1,
            q_max: k.min(3),
            ..ConceptConfig::new(d)
        };
        (ConceptFilterParams::sample(cfg, &mut rng).unwrap(), rng)
    }

    #[test]
    fn soft_assign_cases() {
        let (mut p, mut rng) = small(3, 5, 2, 1);
        let x = rng.normal_matrix(4, 3, 1.0);
        p.config.tau_assign = 1e6;
        let r = soft_assign(&p, &x).unwrap();
        for v in r.data() {
            assert!((v - 0.2).abs() < 1e-5);
        }

        // <W_r x, u_1> = 1, <W_r x, u_2> = 0.
        let cfg = ConceptConfig { d: 1, d_c: 1, k_max: 2, b_hash: 1, tau_assign: 1.0, tau_h: 1.0, q_min: 1, q_max: 2 };
        let mut p = ConceptFilterParams::sample(cfg, &mut rng).unwrap();
        p.w_r = RealMatrix::filled(1, 1, 1.0);
        p.u = RealMatrix::row_vector(&[1.0, 0.0]);
        let r = soft_assign(&p, &RealMatrix::filled(1, 1, 1.0)).unwrap();
        let e = std::f64::consts::E;
        assert!((r.get(0, 0) - e / (e + 1.0)).abs() < 1e-15);
        assert!((r.get(0, 1) - 1.0 / (e + 1.0)).abs() < 1e-15);

        let (mut p, mut rng) = small(3, 4, 2, 2);
        for i in 0..3 {
            let v = p.u.get(i, 0);
            p.u.set(i, 1, v);
        }
        let r = soft_assign(&p, &rng.normal_matrix(3, 3, 1.0)).unwrap();
        for t in 0..3 {
            assert_eq!(r.get(t, 0), r.get(t, 1));
        }
    }

    #[test]
    fn hash_assign_cases() {
        let (p, mut rng) = small(3, 4, 1, 3);
        let x = rng.normal_matrix(5, 3, 1.0);
        let h = hash_assign(&p, &x).unwrap();
        assert!(h.buckets.iter().all(|&b| b == 0));
        assert!(h.probs.data().iter().all(|&v| v == 1.0));

        let (mut p, mut rng) = small(3, 4, 4, 4);
        p.hash_w = RealMatrix::zeros(4, 3);
        let h = hash_assign(&p, &rng.normal_matrix(5, 3, 1.0)).unwrap();
        assert!(h.buckets.iter().all(|&b| b == 0));
        assert!(h.probs.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));

        let (mut p, mut rng) = small(3, 4, 4, 5);
        p.hash_b = rng.normal_matrix(1, 4, 1.0);
        let x = rng.normal_matrix(6, 3, 1.0);
        let h = hash_assign(&p, &x).unwrap();
        for t in 0..6 {
            let logits: Vec<f64> = (0..4)
                .map(|b| (0..3).map(|c| p.hash_w.get(b, c) * x.get(t, c)).sum::<f64>() + p.hash_b.get(0, b))
                .collect();
            let best = (0..4).fold(0, |best, b| if logits[b] > logits[best] { b } else { best });
            assert_eq!(h.buckets[t], best);
        }

        let a = hash_assign_sampled(&p, &x, &mut SeededRng::new(9)).unwrap();
        let b = hash_assign_sampled(&p, &x, &mut SeededRng::new(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mi_hash_cases() {
        let (p, mut rng) = small(3, 4, 1, 6);
        assert_eq!(mi_hash_loss(&p, &rng.normal_matrix(5, 3, 1.0)).unwrap(), 0.0);

        // Projected tokens orthogonal to every bucket embedding.
        let e = RealMatrix::from_rows(&[vec![0.0; 4], vec![1.0, 2.0, -1.0, 0.5]]).unwrap();
        let u = RealMatrix::from_rows(&[vec![1.0, 0.0], vec![-2.0, 0.0]]).unwrap();
        let (v, _, _) = mi_hash_loss_grad(&u, &e, &[0, 3], 0.3).unwrap();
        assert!((v - 4f64.ln()).abs() < 1e-12);

        // Zero-norm inputs stay finite.
        let (v, gu, ge) = mi_hash_loss_grad(&RealMatrix::zeros(2, 2), &e, &[1, 2], 0.3).unwrap();
        assert!(v.is_finite() && gu.is_finite() && ge.is_finite());
    }

    #[test]
    fn mi_hash_gradient_matches_fd() {
        for seed in 0..5 {
            let mut rng = SeededRng::new(seed);
            let u = rng.normal_matrix(6, 3, 1.0);
            let e = rng.normal_matrix(3, 4, 1.0);
            let buckets = [0, 3, 1, 1, 2, 0];
            let (_, gu, ge) = mi_hash_loss_grad(&u, &e, &buckets, 0.4).unwrap();
            let fu = fd_gradient(|v| mi_hash_loss_grad(&RealMatrix::from_raw(6, 3, v.to_vec()), &e, &buckets, 0.4).unwrap().0, u.data(), 1e-6).unwrap();
            let fe = fd_gradient(|v| mi_hash_loss_grad(&u, &RealMatrix::from_raw(3, 4, v.to_vec()), &buckets, 0.4).unwrap().0, e.data(), 1e-6).unwrap();
            for (a, b) in gu.data().iter().zip(&fu).chain(ge.data().iter().zip(&fe)) {
                assert!((a - b).abs() < 1e-6 * (1.0 + b.abs()), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn candidate_sets_cases() {
        let (p, _) = small(3, 6, 1, 7);
        assert_eq!(build_candidate_sets(&p), vec![(0..6).collect::<Vec<_>>()]);

        let cfg = ConceptConfig { d: 2, d_c: 2, k_max: 2, b_hash: 2, tau_assign: 1.0, tau_h: 1.0, q_min: 1, q_max: 2 };
        let mut p = ConceptFilterParams::sample(cfg, &mut SeededRng::new(1)).unwrap();
        p.u = RealMatrix::identity(2);
        p.e_b = RealMatrix::identity(2);
        assert_eq!(build_candidate_sets(&p), vec![vec![0], vec![1]]);

        let (p, _) = small(4, 20, 5, 8);
        let sets = build_candidate_sets(&p);
        for i in 0..20 {
            let ui: Vec<f64> = (0..4).map(|c| p.u.get(c, i)).collect();
            let mut best = (f64::NEG_INFINITY, 0);
            for b in 0..5 {
                let eb: Vec<f64> = (0..4).map(|c| p.e_b.get(c, b)).collect();
                let cos = crate::numerics::dot(&ui, &eb) / (crate::numerics::norm2(&ui) * crate::numerics::norm2(&eb));
                if cos > best.0 {
                    best = (cos, b);
                }
            }
            assert!(sets[best.1].contains(&i));
            assert_eq!(sets.iter().filter(|s| s.contains(&i)).count(), 1);
        }
    }

    #[test]
    fn budget_cases() {
        let cfg = ConceptConfig { k_max: 16, q_min: 2, q_max: 8, ..ConceptConfig::new(2) };
        let onehot = RealMatrix::from_fn(1, 16, |_, c| if c == 3 { 1.0 } else { 0.0 });
        assert_eq!(budget(&cfg, &onehot), vec![2]);
        assert_eq!(budget(&cfg, &RealMatrix::filled(1, 16, 1.0 / 16.0)), vec![8]);
        // Uniform over 4 of 16 concepts: H = ln 4 = 0.5 ln 16.
        let half = RealMatrix::from_fn(1, 16, |_, c| if c < 4 { 0.25 } else { 0.0 });
        assert_eq!(budget(&cfg, &half), vec![5]);
    }

    #[test]
    fn sparsify_cases() {
        let (p, mut rng) = small(3, 6, 1, 9);
        let x = rng.normal_matrix(5, 3, 1.0);
        let r = soft_assign(&p, &x).unwrap();
        let sets = build_candidate_sets(&p);
        let sp = sparsify(&r, &[0; 5], &sets, &[6; 5]).unwrap();
        assert_eq!(sparse_to_dense(&sp.rows, 6).max_abs_diff(&r), 0.0);

        let sp = sparsify(&r, &[0; 5], &sets, &[1; 5]).unwrap();
        for (t, row) in sp.rows.iter().enumerate() {
            assert_eq!(row.indices, vec![argmax(r.row(t))]);
            assert_eq!(row.values, vec![1.0]);
        }

        // Ties go to the lowest concept.
        let flat = RealMatrix::filled(1, 4, 0.25);
        let sp = sparsify(&flat, &[0], &[vec![0, 1, 2, 3]], &[2]).unwrap();
        assert_eq!(sp.rows[0].indices, vec![0, 1]);

        // An empty candidate set falls back to the global argmax.
        let row = RealMatrix::row_vector(&[0.1, 0.6, 0.3]);
        let sp = sparsify(&row, &[1], &[vec![0, 1, 2], vec![]], &[2]).unwrap();
        assert_eq!(sp.fallbacks, vec![0]);
        assert_eq!(sp.rows[0].indices, vec![1]);
    }

    #[test]
    fn sparsity_contract_exhaustive() {
        for seed in 0..20 {
            let (mut p, mut rng) = small(4, 12, 3, seed);
            p.config.q_min = 1;
            p.config.q_max = 5;
            let x = rng.normal_matrix(16, 4, 1.0);
            let rec = assign(&p, &x).unwrap();
            let sets = build_candidate_sets(&p);
            for (t, row) in rec.r_bar.iter().enumerate() {
                let s: f64 = row.values.iter().sum();
                assert!((s - 1.0).abs() < 1e-9);
                assert!(row.values.iter().all(|&v| v >= 0.0));
                if !rec.fallbacks.contains(&t) {
                    assert!(row.nnz() <= rec.budgets[t]);
                    assert!(row.indices.iter().all(|i| sets[rec.buckets[t]].contains(i)));
                }
            }
            assert!(rec.k_eff <= 12);
        }
    }

    #[test]
    fn single_concept_is_rank_one_broadcast() {
        let cfg = ConceptConfig { k_max: 1, b_hash: 1, q_min: 1, q_max: 1, ..ConceptConfig::new(3) };
        let mut rng = SeededRng::new(10);
        let p = ConceptFilterParams::sample(cfg, &mut rng).unwrap();
        let x = rng.normal_matrix(4, 3, 1.0);
        let (rec, mix) = filter_forward(&p, &x, Mixing::Attention).unwrap();
        assert_eq!(rec.k_eff, 1);
        assert_eq!(mix.a_c.get(0, 0), 1.0);
        let z1 = mix.z.row(0).to_vec();
        let col = RealMatrix::row_vector(&z1).matmul(&p.w_v).matmul_t(&p.w_u);
        for t in 0..4 {
            for c in 0..3 {
                assert!((mix.h.get(t, c) - col.get(0, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn no_mix_scatters_raw_concepts() {
        let (p, mut rng) = small(3, 5, 2, 11);
        let x = rng.normal_matrix(6, 3, 1.0);
        let rec = assign(&p, &x).unwrap();
        let mix = concept_mix(&p, &rec.r_bar, &x, Mixing::Identity).unwrap();
        let rb = sparse_to_dense(&rec.r_bar, 5);
        let expect = rb.matmul(&rb.t_matmul(&x)).matmul_t(&p.w_u);
        assert!(mix.h.max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn sparse_path_matches_dense_oracle() {
        for seed in 0..10 {
            let (p, mut rng) = small(3, 2, 2, 100 + seed);
            let x = rng.normal_matrix(4, 3, 1.0);
            let rec = assign(&p, &x).unwrap();
            let rb = sparse_to_dense(&rec.r_bar, 2);
            for mixing in [Mixing::Attention, Mixing::Identity] {
                let a = concept_mix(&p, &rec.r_bar, &x, mixing).unwrap();
                let b = concept_mix_dense(&p, &rb, &x, mixing).unwrap();
                assert!(a.h.max_abs_diff(&b.h) < 1e-12);
            }
        }
    }

    #[test]
    fn full_budget_single_bucket_equals_dense() {
        let (mut p, mut rng) = small(4, 8, 1, 12);
        p.config.q_min = 8;
        p.config.q_max = 8;
        let x = rng.normal_matrix(10, 4, 1.0);
        let (rec, mix) = filter_forward(&p, &x, Mixing::Attention).unwrap();
        let dense = concept_mix_dense(&p, &soft_assign(&p, &x).unwrap(), &x, Mixing::Attention).unwrap();
        assert!(rec.fallbacks.is_empty());
        assert!(mix.h.max_abs_diff(&dense.h) < 1e-12);
    }

    #[test]
    fn static_r_cases() {
        let (p, mut rng) = small(3, 4, 1, 13);
        let x = rng.normal_matrix(5, 3, 1.0);
        let r = static_r_control(&RealMatrix::zeros(8, 4), 5).unwrap();
        let mix = concept_mix_dense(&p, &r, &x, Mixing::Identity).unwrap();
        let mean = x.mean_rows();
        for i in 0..4 {
            for c in 0..3 {
                assert!((mix.z.get(i, c) - 0.25 * 5.0 * mean[c]).abs() < 1e-12);
            }
        }
        let cfg = ConceptConfig { k_max: 5, q_min: 1, q_max: 1, ..ConceptConfig::new(3) };
        let p = ConceptFilterParams::sample(cfg, &mut rng).unwrap();
        let r = static_r_control(&RealMatrix::identity(5).scale(1000.0), 5).unwrap();
        let mix = concept_mix_dense(&p, &r, &x, Mixing::Identity).unwrap();
        assert!(mix.z.max_abs_diff(&x) < 1e-12);
        assert!(static_r_control(&RealMatrix::zeros(4, 4), 5).is_err());
    }

    #[test]
    fn tape_filter_matches_plain_path() {
        for seed in 0..5 {
            let (p, mut rng) = small(4, 6, 2, 200 + seed);
            let x = rng.normal_matrix(7, 4, 1.0);
            for mixing in [Mixing::Attention, Mixing::Identity] {
                let (_, mix) = filter_forward(&p, &x, mixing).unwrap();
                let mut tape = Tape::new();
                let vars = ConceptVars::register(&mut tape, &p);
                let xv = tape.constant(x.clone());
                let (out, _) = tape_filter(&mut tape, &p, &vars, xv, AssignSource::Learned, mixing).unwrap();
                assert!(tape.value(out.h).max_abs_diff(&mix.h) < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_bad_configs() {
        let mut cfg = ConceptConfig::new(3);
        cfg.q_max = 200;
        assert!(cfg.validate().is_err());
        let mut cfg = ConceptConfig::new(3);
        cfg.q_min = 0;
        assert!(cfg.validate().is_err());
        let (p, mut rng) = small(3, 4, 2, 14);
        assert!(soft_assign(&p, &rng.normal_matrix(2, 5, 1.0)).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn token_permutation_permutes_h(seed in 0u64..5000, shift in 1usize..8) {
            let (p, mut rng) = small(3, 6, 2, seed);
            let x = rng.normal_matrix(8, 3, 1.0);
            let perm: Vec<usize> = (0..8).map(|i| (i + shift) % 8).collect();
            let xp = RealMatrix::from_fn(8, 3, |r, c| x.get(perm[r], c));
            let (_, a) = filter_forward(&p, &x, Mixing::Attention).unwrap();
            let (_, b) = filter_forward(&p, &xp, Mixing::Attention).unwrap();
            for r in 0..8 {
                for c in 0..3 {
                    prop_assert!((b.h.get(r, c) - a.h.get(perm[r], c)).abs() < 1e-10);
                }
            }
        }

        #[test]
        fn assignment_rows_are_distributions(seed in 0u64..5000) {
            let (p, mut rng) = small(4, 9, 3, seed);
            let x = rng.normal_matrix(6, 4, 2.0);
            let rec = assign(&p, &x).unwrap();
            for t in 0..6 {
                let s: f64 = rec.r.row(t).iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-9);
                let sb: f64 = rec.r_bar[t].values.iter().sum();
                prop_assert!((sb - 1.0).abs() < 1e-9);
            }
        }

        #[test]
        fn budget_is_monotone_in_entropy(a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let cfg = ConceptConfig { k_max: 10, q_min: 2, q_max: 8, ..ConceptConfig::new(2) };
            let row = |s: f64| {
                let mut v = vec![(1.0 - s) / 9.0; 10];
                v[0] = s;
                RealMatrix::row_vector(&v)
            };
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            // Larger peak mass (toward one-hot from above uniform) lowers entropy.
            let lo_peak = lo.max(0.1);
            let hi_peak = hi.max(0.1);
            let q_lo = budget(&cfg, &row(hi_peak))[0];
            let q_hi = budget(&cfg, &row(lo_peak))[0];
            prop_assert!(q_lo <= q_hi);
        }
    }
}
