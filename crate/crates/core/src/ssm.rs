//! Diagonal selective state-space recurrence.
//!
//! `s_t = Λ s_{t-1} + g_t (B x_t + P h_t)` with `s_0 = 0` and a scalar gate
//! `g_t = σ(gate_w · x_t + gate_b)` broadcast over the state. The gate scales
//! the injected input, never the transition, so the poles `λ_i` stay fixed
//! whatever the input.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::lstsq;
use crate::numerics::{dot, sigmoid, RealMatrix, SeededRng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsmParams {
    /// Diagonal of Λ, length `d_s`.
    pub lambda: Vec<f64>,
    /// Input map `[d_s x d]`.
    pub b: RealMatrix,
    /// Readout `[d_out x d_s]`.
    pub c: RealMatrix,
    pub gate_w: Vec<f64>,
    pub gate_b: f64,
    /// Stability bound `r` on `|λ_i|`.
    pub stability_bound: f64,
    /// When set, `|λ_i| ≤ r < 1` is enforced on construction and projection.
    pub enforce_stability: bool,
}

/// Sampling options for [`SsmParams::sample`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsmInit {
    pub stability_bound: f64,
    pub lambda_min: f64,
    /// Draw a random sign for each `λ_i`.
    pub allow_negative: bool,
}

impl Default for SsmInit {
    fn default() -> Self {
        Self {
            stability_bound: 0.99,
            lambda_min: 0.1,
            allow_negative: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanOutput {
    /// `[n x d_s]`
    pub states: RealMatrix,
    /// `[n x d_out]`
    pub outputs: RealMatrix,
    /// Gate value per position (all ones when ungated).
    pub gates: Vec<f64>,
}

/// Optional global-feature injection `P h_t` into the state update.
#[derive(Clone, Copy, Debug)]
pub struct Injection<'a> {
    /// `[n x d_h]`
    pub h: &'a RealMatrix,
    /// `[d_s x d_h]`
    pub p: &'a RealMatrix,
}

impl SsmParams {
    pub fn new(lambda: Vec<f64>, b: RealMatrix, c: RealMatrix, gate_w: Vec<f64>, gate_b: f64) -> Result<Self> {
        let params = Self {
            lambda,
            b,
            c,
            gate_w,
            gate_b,
            stability_bound: 1.0,
            enforce_stability: false,
        };
        params.validate()?;
        Ok(params)
    }

    /// Turns on the stability constraint with bound `r ∈ (0, 1)`.
    pub fn with_stability(mut self, r: f64) -> Result<Self> {
        if !(r > 0.0 && r < 1.0) {
            return Err(Error::invalid(format!("stability bound must lie in (0, 1), got {r}")));
        }
        self.stability_bound = r;
        self.enforce_stability = true;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let ds = self.lambda.len();
        if ds == 0 {
            return Err(Error::invalid("state width must be at least 1"));
        }
        if self.b.rows() != ds {
            return Err(Error::shape("B rows", ds, self.b.rows()));
        }
        if self.c.cols() != ds {
            return Err(Error::shape("C cols", ds, self.c.cols()));
        }
        if self.gate_w.len() != self.b.cols() {
            return Err(Error::shape("gate_w length", self.b.cols(), self.gate_w.len()));
        }
        if !self.lambda.iter().chain(&self.gate_w).all(|v| v.is_finite()) || !self.gate_b.is_finite() {
            return Err(Error::invalid("SSM parameters must be finite"));
        }
        if self.enforce_stability && spectral_radius(self) > self.stability_bound {
            return Err(Error::invalid(format!(
                "spectral radius {} exceeds stability bound {}",
                spectral_radius(self),
                self.stability_bound
            )));
        }
        Ok(())
    }

    /// Random parameters: `λ_i` log-uniform in `[lambda_min, r]`, Gaussian
    /// `B`, `C` scaled by fan-in, zero gate weights.
    pub fn sample(d_in: usize, d_state: usize, d_out: usize, init: SsmInit, rng: &mut SeededRng) -> Result<Self> {
        let r = init.stability_bound;
        if !(init.lambda_min > 0.0 && init.lambda_min <= r && r < 1.0) {
            return Err(Error::invalid("SSM init needs 0 < lambda_min <= r < 1"));
        }
        let (lo, hi) = (init.lambda_min.ln(), r.ln());
        let lambda = (0..d_state)
            .map(|_| {
                let mag = rng.uniform_range(lo, hi).exp();
                if init.allow_negative && rng.uniform() < 0.5 {
                    -mag
                } else {
                    mag
                }
            })
            .collect();
        let b = rng.normal_matrix(d_state, d_in, 1.0 / (d_in as f64).sqrt());
        let c = rng.normal_matrix(d_out, d_state, 1.0 / (d_state as f64).sqrt());
        Self::new(lambda, b, c, vec![0.0; d_in], 0.0)?.with_stability(r)
    }

    pub fn state_dim(&self) -> usize {
        self.lambda.len()
    }

    pub fn input_dim(&self) -> usize {
        self.b.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.c.rows()
    }

    /// Clamps every `λ_i` into `[-r, r]` when stability is enforced.
    pub fn project_stable(&mut self) {
        if self.enforce_stability {
            let r = self.stability_bound;
            for l in &mut self.lambda {
                *l = l.clamp(-r, r);
            }
        }
    }

    pub fn gates(&self, x: &RealMatrix, gated: bool) -> Vec<f64> {
        (0..x.rows())
            .map(|t| if gated { sigmoid(dot(&self.gate_w, x.row(t)) + self.gate_b) } else { 1.0 })
            .collect()
    }

    fn check(&self, x: &RealMatrix, injection: Option<Injection<'_>>) -> Result<()> {
        self.validate()?;
        if x.cols() != self.input_dim() {
            return Err(Error::shape("SSM input width", self.input_dim(), x.cols()));
        }
        if let Some(inj) = injection {
            if inj.h.rows() != x.rows() {
                return Err(Error::shape("injection length", x.rows(), inj.h.rows()));
            }
            if inj.p.shape() != (self.state_dim(), inj.h.cols()) {
                return Err(Error::shape(
                    "P",
                    format!("{}x{}", self.state_dim(), inj.h.cols()),
                    format!("{}x{}", inj.p.rows(), inj.p.cols()),
                ));
            }
        }
        Ok(())
    }

    /// Per-position state input `B x_t (+ P h_t)` before gating, `[n x d_s]`.
    fn drive(&self, x: &RealMatrix, injection: Option<Injection<'_>>) -> RealMatrix {
        let mut u = x.matmul_t(&self.b);
        if let Some(inj) = injection {
            u.add_assign(&inj.h.matmul_t(inj.p));
        }
        u
    }
}

/// Linear-time left-to-right scan.
pub fn ssm_scan(params: &SsmParams, x: &RealMatrix, injection: Option<Injection<'_>>, gated: bool) -> Result<ScanOutput> {
    params.check(x, injection)?;
    let gates = params.gates(x, gated);
    let u = params.drive(x, injection);
    let (n, ds) = (x.rows(), params.state_dim());
    let mut states = RealMatrix::zeros(n, ds);
    let mut prev = vec![0.0; ds];
    for t in 0..n {
        let g = gates[t];
        let row = states.row_mut(t);
        for i in 0..ds {
            row[i] = params.lambda[i] * prev[i] + g * u.get(t, i);
        }
        prev.copy_from_slice(row);
    }
    let outputs = states.matmul_t(&params.c);
    Ok(ScanOutput { states, outputs, gates })
}

/// Direct evaluation `s_t = Σ_{j≤t} Λ^{t-j} g_j (B x_j + P h_j)`, quadratic in
/// `n`.
pub fn unrolled_reference(
    params: &SsmParams,
    x: &RealMatrix,
    injection: Option<Injection<'_>>,
    gated: bool,
) -> Result<ScanOutput> {
    params.check(x, injection)?;
    let gates = params.gates(x, gated);
    let u = params.drive(x, injection);
    let (n, ds) = (x.rows(), params.state_dim());
    let mut states = RealMatrix::zeros(n, ds);
    for t in 0..n {
        for i in 0..ds {
            let mut acc = 0.0;
            for j in 0..=t {
                acc += params.lambda[i].powi((t - j) as i32) * gates[j] * u.get(j, i);
            }
            states.set(t, i, acc);
        }
    }
    let outputs = states.matmul_t(&params.c);
    Ok(ScanOutput { states, outputs, gates })
}

/// `H_{t,l} = g_{t-l} C Λ^l B`; pass `None` for the ungated kernel.
pub fn effective_kernel(params: &SsmParams, gates: Option<&[f64]>, t: usize, lag: usize) -> Result<RealMatrix> {
    if lag > t {
        return Err(Error::invalid(format!("lag {lag} exceeds position {t}")));
    }
    let g = match gates {
        Some(gs) => *gs
            .get(t - lag)
            .ok_or_else(|| Error::invalid(format!("no gate for position {}", t - lag)))?,
        None => 1.0,
    };
    let scaled_b = RealMatrix::from_fn(params.state_dim(), params.input_dim(), |i, j| {
        g * params.lambda[i].powi(lag as i32) * params.b.get(i, j)
    });
    Ok(params.c.matmul(&scaled_b))
}

/// Forward scan plus a backward scan over the reversed sequence.
pub fn bidirectional_scan(fwd: &SsmParams, bwd: &SsmParams, x: &RealMatrix, gated: bool) -> Result<ScanOutput> {
    if fwd.output_dim() != bwd.output_dim() {
        return Err(Error::shape("backward output width", fwd.output_dim(), bwd.output_dim()));
    }
    let f = ssm_scan(fwd, x, None, gated)?;
    let b = ssm_scan(bwd, &x.reverse_rows(), None, gated)?;
    let b_states = b.states.reverse_rows();
    let b_out = b.outputs.reverse_rows();
    let mut gates = f.gates;
    gates.extend(b.gates.into_iter().rev());
    Ok(ScanOutput {
        states: f.states.concat_cols(&b_states),
        outputs: f.outputs.add(&b_out),
        gates,
    })
}

/// `max_i |λ_i|`.
pub fn spectral_radius(params: &SsmParams) -> f64 {
    params.lambda.iter().fold(0.0, |m, l| m.max(l.abs()))
}

/// Result of [`fit_gated_kernel`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GatedKernelFit {
    pub betas: Vec<f64>,
    pub gates: Vec<f64>,
    /// Mean over targets `t` of `Σ_l |w(t,l) - g_{t-l} Σ_i β_i λ_i^l|`.
    pub residual: f64,
}

/// Fits scalar gated kernels `g_{t-l} Σ_i β_i λ_i^l` with the poles held fixed
/// to lag-indexed targets `targets[t][l]` for all positions at once.
///
/// β and the per-source gates are updated by alternating least squares. The
/// gates can only rescale whole sources, so a target built on a pole outside
/// `lambdas` stays out of reach.
pub fn fit_gated_kernel(lambdas: &[f64], targets: &[Vec<f64>], iterations: usize) -> Result<GatedKernelFit> {
    let n = targets.len();
    if lambdas.is_empty() || n == 0 {
        return Err(Error::invalid("need at least one pole and one target"));
    }
    for (t, row) in targets.iter().enumerate() {
        if row.len() != t + 1 {
            return Err(Error::shape("target row length", t + 1, row.len()));
        }
    }
    let m = lambdas.len();
    let basis = |l: usize, i: usize| lambdas[i].powi(l as i32);
    let mut gates = vec![1.0; n];
    let mut betas = vec![0.0; m];
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|t| (0..=t).map(move |l| (t, l))).collect();
    for _ in 0..iterations.max(1) {
        let a = RealMatrix::from_fn(pairs.len(), m, |r, i| {
            let (t, l) = pairs[r];
            gates[t - l] * basis(l, i)
        });
        let b: Vec<f64> = pairs.iter().map(|&(t, l)| targets[t][l]).collect();
        betas = lstsq(&a, &b)?;
        let k: Vec<f64> = (0..n).map(|l| (0..m).map(|i| betas[i] * basis(l, i)).sum()).collect();
        for (s, g) in gates.iter_mut().enumerate() {
            let (mut num, mut den) = (0.0, 0.0);
            for t in s..n {
                num += targets[t][t - s] * k[t - s];
                den += k[t - s] * k[t - s];
            }
            *g = if den > 0.0 { num / den } else { 0.0 };
        }
    }
    let k: Vec<f64> = (0..n).map(|l| (0..m).map(|i| betas[i] * basis(l, i)).sum()).collect();
    let residual = targets
        .iter()
        .enumerate()
        .map(|(t, row)| (0..=t).map(|l| (row[l] - gates[t - l] * k[l]).abs()).sum::<f64>())
        .sum::<f64>()
        / n as f64;
    Ok(GatedKernelFit { betas, gates, residual })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn random_params(d: usize, ds: usize, seed: u64) -> (SsmParams, SeededRng) {
        let mut rng = SeededRng::new(seed);
        let init = SsmInit { allow_negative: true, ..SsmInit::default() };
        let mut p = SsmParams::sample(d, ds, d, init, &mut rng).unwrap();
        p.gate_w = (0..d).map(|_| rng.normal()).collect();
        p.gate_b = rng.normal();
        (p, rng)
    }

    #[test]
    fn zero_transition_is_memoryless() {
        let (mut p, mut rng) = random_params(3, 4, 1);
        p.lambda = vec![0.0; 4];
        let x = rng.normal_matrix(6, 3, 1.0);
        let out = ssm_scan(&p, &x, None, true).unwrap();
        let bx = x.matmul_t(&p.b);
        for t in 0..6 {
            for i in 0..4 {
                assert_eq!(out.states.get(t, i), out.gates[t] * bx.get(t, i));
            }
        }
    }

    #[test]
    fn zero_input_map_gives_zero_output() {
        let (mut p, mut rng) = random_params(3, 4, 2);
        p.b = RealMatrix::zeros(4, 3);
        let x = rng.normal_matrix(6, 3, 1.0);
        let out = ssm_scan(&p, &x, None, true).unwrap();
        assert_eq!(out.states.max_abs(), 0.0);
        assert_eq!(out.outputs.max_abs(), 0.0);
    }

    #[test]
    fn two_step_scalar_algebra() {
        let p = SsmParams::new(vec![0.7], RealMatrix::filled(1, 1, 2.0), RealMatrix::filled(1, 1, 1.0), vec![0.0], 0.0).unwrap();
        let x = RealMatrix::col_vector(&[3.0, -1.0]);
        for f in [ssm_scan, unrolled_reference] {
            let out = f(&p, &x, None, false).unwrap();
            assert_eq!(out.states.get(0, 0), 6.0);
            assert!((out.states.get(1, 0) - (0.7 * 6.0 - 2.0)).abs() < 1e-15);
        }
    }

    #[test]
    fn scan_matches_unrolled_with_injection() {
        for seed in 0..10 {
            let (p, mut rng) = random_params(3, 5, seed);
            let x = rng.normal_matrix(40, 3, 1.0);
            let h = rng.normal_matrix(40, 2, 1.0);
            let pm = rng.normal_matrix(5, 2, 0.5);
            let inj = Some(Injection { h: &h, p: &pm });
            for gated in [false, true] {
                let a = ssm_scan(&p, &x, inj, gated).unwrap();
                let b = unrolled_reference(&p, &x, inj, gated).unwrap();
                assert!(a.states.max_abs_diff(&b.states) < 1e-10);
                assert!(a.outputs.max_abs_diff(&b.outputs) < 1e-10);
            }
        }
    }

    #[test]
    fn effective_kernel_cases() {
        let (p, mut rng) = random_params(3, 4, 3);
        let h0 = effective_kernel(&p, None, 5, 0).unwrap();
        assert!(h0.max_abs_diff(&p.c.matmul(&p.b)) < 1e-15);

        let scalar = SsmParams::new(vec![0.5], RealMatrix::filled(1, 1, 1.0), RealMatrix::filled(1, 1, 1.0), vec![0.0], 0.0).unwrap();
        for l in 0..10 {
            let h = effective_kernel(&scalar, None, 10, l).unwrap();
            assert_eq!(h.get(0, 0), 0.5f64.powi(l as i32));
        }

        let x = rng.normal_matrix(12, 3, 1.0);
        let out = ssm_scan(&p, &x, None, true).unwrap();
        for t in 0..12 {
            let mut y = vec![0.0; 3];
            for l in 0..=t {
                let h = effective_kernel(&p, Some(&out.gates), t, l).unwrap();
                for (o, v) in y.iter_mut().zip(h.mul_vec(x.row(t - l))) {
                    *o += v;
                }
            }
            for c in 0..3 {
                assert!((y[c] - out.outputs.get(t, c)).abs() < 1e-10);
            }
        }
        assert!(effective_kernel(&p, None, 2, 3).is_err());
    }

    #[test]
    fn bidirectional_cases() {
        let (p, mut rng) = random_params(2, 3, 4);
        let half = rng.normal_matrix(4, 2, 1.0);
        let x = RealMatrix::from_fn(8, 2, |r, c| half.get(if r < 4 { r } else { 7 - r }, c));
        let out = bidirectional_scan(&p, &p, &x, true).unwrap();
        for t in 0..8 {
            for c in 0..2 {
                assert!((out.outputs.get(t, c) - out.outputs.get(7 - t, c)).abs() < 1e-12);
            }
        }

        let mut zero = p.clone();
        zero.b = RealMatrix::zeros(3, 2);
        zero.c = RealMatrix::zeros(2, 3);
        let one_sided = bidirectional_scan(&p, &zero, &x, true).unwrap();
        let fwd = ssm_scan(&p, &x, None, true).unwrap();
        assert_eq!(one_sided.outputs, fwd.outputs);

        let (q, _) = random_params(2, 3, 5);
        let x = rng.normal_matrix(9, 2, 1.0);
        let out = bidirectional_scan(&p, &q, &x, false).unwrap();
        let (bp, bq) = (x.matmul_t(&p.b), x.matmul_t(&q.b));
        for t in 0..9 {
            let mut sf = vec![0.0; 3];
            let mut sb = vec![0.0; 3];
            for i in 0..3 {
                for j in 0..=t {
                    sf[i] += p.lambda[i].powi((t - j) as i32) * bp.get(j, i);
                }
                for j in t..9 {
                    sb[i] += q.lambda[i].powi((j - t) as i32) * bq.get(j, i);
                }
            }
            let y = p.c.mul_vec(&sf).iter().zip(q.c.mul_vec(&sb)).map(|(a, b)| a + b).collect::<Vec<_>>();
            for c in 0..2 {
                assert!((y[c] - out.outputs.get(t, c)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn spectral_radius_and_stability() {
        let p = SsmParams::new(vec![0.3, -0.9], RealMatrix::zeros(2, 1), RealMatrix::zeros(1, 2), vec![0.0], 0.0).unwrap();
        assert_eq!(spectral_radius(&p), 0.9);
        assert!(SsmParams::new(vec![], RealMatrix::zeros(0, 1), RealMatrix::zeros(1, 0), vec![0.0], 0.0).is_err());
        assert!(p.clone().with_stability(0.5).is_err());
        let mut q = p.with_stability(0.95).unwrap();
        q.lambda[1] = -1.4;
        q.project_stable();
        assert_eq!(q.lambda[1], -0.95);
        for seed in 0..200 {
            let (p, _) = random_params(2, 8, seed);
            assert!(spectral_radius(&p) < 1.0 && spectral_radius(&p) <= p.stability_bound);
        }
    }

    fn geometric_targets(lambda: f64, n: usize) -> Vec<Vec<f64>> {
        (0..n).map(|t| (0..=t).map(|l| lambda.powi(l as i32)).collect()).collect()
    }

    #[test]
    fn gated_fit_cannot_move_poles() {
        let targets = geometric_targets(0.6, 24);
        let without = fit_gated_kernel(&[0.2, 0.9], &targets, 100).unwrap();
        assert!(without.residual > 0.1, "{}", without.residual);
        let with = fit_gated_kernel(&[0.2, 0.9, 0.6], &targets, 100).unwrap();
        assert!(with.residual < 1e-8, "{}", with.residual);
    }

    #[test]
    fn causality_is_bitwise() {
        let (p, mut rng) = random_params(3, 4, 6);
        let x = rng.normal_matrix(10, 3, 1.0);
        let mut y = x.clone();
        for t in 6..10 {
            y.row_mut(t).iter_mut().for_each(|v| *v += 3.0);
        }
        let a = ssm_scan(&p, &x, None, true).unwrap();
        let b = ssm_scan(&p, &y, None, true).unwrap();
        assert_eq!(a.outputs.slice_rows(0, 6), b.outputs.slice_rows(0, 6));
        assert_eq!(a.states.slice_rows(0, 6), b.states.slice_rows(0, 6));
    }

    #[test]
    fn dimension_errors() {
        let (p, mut rng) = random_params(3, 4, 7);
        assert!(ssm_scan(&p, &rng.normal_matrix(4, 2, 1.0), None, false).is_err());
        let x = rng.normal_matrix(4, 3, 1.0);
        let h = rng.normal_matrix(4, 2, 1.0);
        let bad = RealMatrix::zeros(3, 2);
        assert!(ssm_scan(&p, &x, Some(Injection { h: &h, p: &bad }), false).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn ungated_scan_is_linear(seed in 0u64..10_000, alpha in -3.0f64..3.0, beta in -3.0f64..3.0) {
            let (p, mut rng) = random_params(3, 4, seed);
            let x1 = rng.normal_matrix(16, 3, 1.0);
            let x2 = rng.normal_matrix(16, 3, 1.0);
            let mix = x1.scale(alpha).add(&x2.scale(beta));
            let y = ssm_scan(&p, &mix, None, false).unwrap().outputs;
            let y1 = ssm_scan(&p, &x1, None, false).unwrap().outputs;
            let y2 = ssm_scan(&p, &x2, None, false).unwrap().outputs;
            prop_assert!(y.max_abs_diff(&y1.scale(alpha).add(&y2.scale(beta))) < 1e-10);
        }

        #[test]
        fn scan_matches_oracle(seed in 0u64..10_000, n in 1usize..96, gated: bool) {
            let (p, mut rng) = random_params(3, 6, seed);
            let x = rng.normal_matrix(n, 3, 1.0);
            let a = ssm_scan(&p, &x, None, gated).unwrap();
            let b = unrolled_reference(&p, &x, None, gated).unwrap();
            prop_assert!(a.outputs.max_abs_diff(&b.outputs) < 1e-10);
        }
    }
}
