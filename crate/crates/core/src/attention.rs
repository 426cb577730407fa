//! Single-head reference softmax attention.
//!
//! Tokens are rows of `X`; projections act on column vectors, so
//! `q_t = W_Q x_t` and the value matrix is `X W_V^T`. Positions are
//! zero-based throughout: the kernel of position `t` has lags `0..=t`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, masked_softmax, softmax_unchecked, RealMatrix, SeededRng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams {
    pub w_q: RealMatrix,
    pub w_k: RealMatrix,
    pub w_v: RealMatrix,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Causal,
    Bidirectional,
}

impl AttentionParams {
    pub fn new(w_q: RealMatrix, w_k: RealMatrix, w_v: RealMatrix) -> Result<Self> {
        let d = w_q.rows();
        if d == 0 {
            return Err(Error::invalid("attention width must be at least 1"));
        }
        for (name, m) in [("W_Q", &w_q), ("W_K", &w_k), ("W_V", &w_v)] {
            if m.shape() != (d, d) {
                return Err(Error::shape(name, format!("{d}x{d}"), format!("{}x{}", m.rows(), m.cols())));
            }
        }
        Ok(Self { w_q, w_k, w_v })
    }

    /// Gaussian projections with the given standard deviation.
    pub fn random(d: usize, std: f64, rng: &mut SeededRng) -> Self {
        Self {
            w_q: rng.normal_matrix(d, d, std),
            w_k: rng.normal_matrix(d, d, std),
            w_v: rng.normal_matrix(d, d, std),
        }
    }

    pub fn dim(&self) -> usize {
        self.w_q.rows()
    }

    fn check_input(&self, x: &RealMatrix) -> Result<()> {
        if x.rows() == 0 {
            return Err(Error::invalid("attention needs at least one token"));
        }
        if x.cols() != self.dim() {
            return Err(Error::shape("attention input width", self.dim(), x.cols()));
        }
        if !x.is_finite() {
            return Err(Error::invalid("attention input contains non-finite values"));
        }
        Ok(())
    }

    /// Value vectors `W_V x_t` as rows.
    pub fn values(&self, x: &RealMatrix) -> RealMatrix {
        x.matmul_t(&self.w_v)
    }
}

/// Fully materialized attention matrix `A[t, s]`.
pub fn attention_weights(params: &AttentionParams, x: &RealMatrix, mode: Mode) -> Result<RealMatrix> {
    params.check_input(x)?;
    let q = x.matmul_t(&params.w_q);
    let k = x.matmul_t(&params.w_k);
    let scale = 1.0 / (params.dim() as f64).sqrt();
    let logits = q.matmul_t(&k).scale(scale);
    let n = x.rows();
    let mut a = RealMatrix::zeros(n, n);
    for t in 0..n {
        let row = match mode {
            Mode::Causal => {
                let mask: Vec<bool> = (0..n).map(|s| s <= t).collect();
                masked_softmax(logits.row(t), &mask)
            }
            Mode::Bidirectional => softmax_unchecked(logits.row(t), 1.0),
        };
        a.row_mut(t).copy_from_slice(&row);
    }
    Ok(a)
}

/// `Y = A V`, computed one query row at a time without materializing `A`.
pub fn attention_forward(params: &AttentionParams, x: &RealMatrix, mode: Mode) -> Result<RealMatrix> {
    params.check_input(x)?;
    let q = x.matmul_t(&params.w_q);
    let k = x.matmul_t(&params.w_k);
    let v = params.values(x);
    let scale = 1.0 / (params.dim() as f64).sqrt();
    let n = x.rows();
    let mut y = RealMatrix::zeros(n, v.cols());
    let mut logits = vec![0.0; n];
    for t in 0..n {
        let span = match mode {
            Mode::Causal => t + 1,
            Mode::Bidirectional => n,
        };
        for (s, l) in logits.iter_mut().enumerate().take(span) {
            *l = scale * dot(q.row(t), k.row(s));
        }
        let weights = softmax_unchecked(&logits[..span], 1.0);
        let out = y.row_mut(t);
        for (s, &w) in weights.iter().enumerate() {
            for (o, vs) in out.iter_mut().zip(v.row(s)) {
                *o += w * vs;
            }
        }
    }
    Ok(y)
}

/// Causal attention weights of one position, indexed by lag.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionKernel {
    pub t: usize,
    pub horizon: usize,
    /// `weights[l]` is the weight from position `t` to position `t - l`.
    pub weights: Vec<f64>,
}

impl AttentionKernel {
    pub fn mass(&self) -> f64 {
        self.weights.iter().sum()
    }
}

/// Lag-indexed row `t` of an already materialized causal attention matrix.
pub fn kernel_from_weights(a: &RealMatrix, t: usize, horizon: usize) -> Result<AttentionKernel> {
    if t >= a.rows() {
        return Err(Error::invalid(format!("position {t} out of range for {} tokens", a.rows())));
    }
    if horizon > t {
        return Err(Error::invalid(format!("horizon {horizon} exceeds available lags {t}")));
    }
    let weights = (0..=horizon).map(|l| a.get(t, t - l)).collect();
    Ok(AttentionKernel { t, horizon, weights })
}

pub fn extract_kernel(params: &AttentionParams, x: &RealMatrix, t: usize, horizon: usize) -> Result<AttentionKernel> {
    if t >= x.rows() {
        return Err(Error::invalid(format!("position {t} out of range for {} tokens", x.rows())));
    }
    let a = attention_weights(params, x, Mode::Causal)?;
    kernel_from_weights(&a, t, horizon)
}

/// Mean over positions of the causal weight within `band` lags of the
/// diagonal.
pub fn diagonal_mass(params: &AttentionParams, x: &RealMatrix, band: usize) -> Result<f64> {
    let a = attention_weights(params, x, Mode::Causal)?;
    Ok(diagonal_mass_of(&a, band))
}

pub fn diagonal_mass_of(a: &RealMatrix, band: usize) -> f64 {
    let n = a.rows();
    let total: f64 = (0..n)
        .map(|t| (t.saturating_sub(band)..=t).map(|s| a.get(t, s)).sum::<f64>())
        .sum();
    total / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seeded(d: usize, seed: u64) -> (AttentionParams, SeededRng) {
        let mut rng = SeededRng::new(seed);
        (AttentionParams::random(d, 0.8, &mut rng), rng)
    }

    #[test]
    fn single_token_returns_its_value() {
        let (p, mut rng) = seeded(3, 1);
        let x = rng.normal_matrix(1, 3, 1.0);
        for mode in [Mode::Causal, Mode::Bidirectional] {
            let y = attention_forward(&p, &x, mode).unwrap();
            assert!(y.max_abs_diff(&p.values(&x)) < 1e-15);
        }
    }

    #[test]
    fn identical_tokens_give_uniform_weights() {
        let (p, _) = seeded(3, 2);
        let x = RealMatrix::from_fn(5, 3, |_, c| [0.4, -1.0, 2.0][c]);
        let y = attention_forward(&p, &x, Mode::Causal).unwrap();
        let v = p.values(&x);
        assert!(y.max_abs_diff(&v) < 1e-12);
        let k = extract_kernel(&p, &x, 3, 3).unwrap();
        for w in &k.weights {
            assert!((w - 0.25).abs() < 1e-15);
        }
        let k0 = extract_kernel(&p, &x, 0, 0).unwrap();
        assert_eq!(k0.weights, vec![1.0]);
    }

    #[test]
    fn three_token_hand_unrolled() {
        let (p, mut rng) = seeded(2, 3);
        let x = rng.normal_matrix(3, 2, 1.0);
        let y = attention_forward(&p, &x, Mode::Causal).unwrap();
        let proj = |w: &RealMatrix, t: usize| -> Vec<f64> { w.mul_vec(x.row(t)) };
        let sqrt_d = 2f64.sqrt();
        for t in 0..3 {
            let q = proj(&p.w_q, t);
            let scores: Vec<f64> = (0..=t)
                .map(|s| {
                    let k = proj(&p.w_k, s);
                    ((q[0] * k[0] + q[1] * k[1]) / sqrt_d).exp()
                })
                .collect();
            let z: f64 = scores.iter().sum();
            let mut expect = [0.0; 2];
            for (s, e) in scores.iter().enumerate() {
                let v = proj(&p.w_v, s);
                expect[0] += e / z * v[0];
                expect[1] += e / z * v[1];
            }
            assert!((y.get(t, 0) - expect[0]).abs() < 1e-13);
            assert!((y.get(t, 1) - expect[1]).abs() < 1e-13);
        }
    }

    #[test]
    fn extracted_kernel_matches_materialized_row() {
        let (p, mut rng) = seeded(4, 4);
        let x = rng.normal_matrix(9, 4, 1.0);
        let a = attention_weights(&p, &x, Mode::Causal).unwrap();
        let k = extract_kernel(&p, &x, 7, 7).unwrap();
        for (l, w) in k.weights.iter().enumerate() {
            assert_eq!(*w, a.get(7, 7 - l));
        }
        assert!((k.mass() - 1.0).abs() < 1e-12);
        assert!(extract_kernel(&p, &x, 9, 0).is_err());
        assert!(extract_kernel(&p, &x, 3, 4).is_err());
    }

    #[test]
    fn kernel_reproduces_forward() {
        let (p, mut rng) = seeded(4, 5);
        let x = rng.normal_matrix(12, 4, 1.0);
        let y = attention_forward(&p, &x, Mode::Causal).unwrap();
        let v = p.values(&x);
        for t in 0..12 {
            let k = extract_kernel(&p, &x, t, t).unwrap();
            for c in 0..4 {
                let s: f64 = k.weights.iter().enumerate().map(|(l, w)| w * v.get(t - l, c)).sum();
                assert!((s - y.get(t, c)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn diagonal_mass_cases() {
        // Large self-logit: x_t aligned with itself through W_Q = W_K = s I.
        let d = 16;
        let p = AttentionParams::new(
            RealMatrix::identity(d).scale(20.0),
            RealMatrix::identity(d).scale(20.0),
            RealMatrix::identity(d),
        )
        .unwrap();
        let x = RealMatrix::identity(d);
        assert!(diagonal_mass(&p, &x, 0).unwrap() > 1.0 - 1e-12);

        // Uniform attention: per-row mass min(b+1, t)/t with one-based t.
        let (p, _) = seeded(2, 6);
        let x = RealMatrix::filled(16, 2, 0.5);
        let expect: f64 = (1..=16).map(|t| (4.min(t) as f64) / t as f64).sum::<f64>() / 16.0;
        assert!((diagonal_mass(&p, &x, 3).unwrap() - expect).abs() < 1e-12);

        // Every query attends to token 0.
        let n = 32;
        let x = RealMatrix::from_fn(n, 2, |r, c| if c == 0 { 1.0 } else if r == 0 { 1.0 } else { 0.0 });
        let w = RealMatrix::from_rows(&[vec![0.0, 0.0], vec![60.0, 0.0]]).unwrap();
        let wk = RealMatrix::from_rows(&[vec![0.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let p = AttentionParams::new(w, wk, RealMatrix::identity(2)).unwrap();
        let a = attention_weights(&p, &x, Mode::Causal).unwrap();
        assert!(a.get(n - 1, 0) > 1.0 - 1e-12);
        assert!(diagonal_mass(&p, &x, 1).unwrap() < 0.1);
    }

    #[test]
    fn causal_outputs_are_prefix_stable() {
        let (p, mut rng) = seeded(3, 7);
        let x = rng.normal_matrix(10, 3, 1.0);
        let y_full = attention_forward(&p, &x, Mode::Causal).unwrap();
        let y_pre = attention_forward(&p, &x.slice_rows(0, 6), Mode::Causal).unwrap();
        assert_eq!(y_full.slice_rows(0, 6), y_pre);
    }

    #[test]
    fn rejects_bad_shapes() {
        let (p, _) = seeded(3, 8);
        assert!(attention_forward(&p, &RealMatrix::zeros(2, 4), Mode::Causal).is_err());
        assert!(attention_forward(&p, &RealMatrix::zeros(0, 3), Mode::Causal).is_err());
        assert!(AttentionParams::new(RealMatrix::identity(2), RealMatrix::identity(3), RealMatrix::identity(2)).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn bidirectional_is_permutation_equivariant(seed in 0u64..1000, shift in 1usize..6) {
            let (p, mut rng) = seeded(3, seed);
            let x = rng.normal_matrix(6, 3, 1.0);
            let perm: Vec<usize> = (0..6).map(|i| (i + shift) % 6).collect();
            let xp = RealMatrix::from_fn(6, 3, |r, c| x.get(perm[r], c));
            let y = attention_forward(&p, &x, Mode::Bidirectional).unwrap();
            let yp = attention_forward(&p, &xp, Mode::Bidirectional).unwrap();
            for r in 0..6 {
                for c in 0..3 {
                    prop_assert!((yp.get(r, c) - y.get(perm[r], c)).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn causal_rows_are_distributions(seed in 0u64..1000) {
            let (p, mut rng) = seeded(4, seed);
            let x = rng.normal_matrix(7, 4, 2.0);
            let a = attention_weights(&p, &x, Mode::Causal).unwrap();
            for t in 0..7 {
                let s: f64 = a.row(t).iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-9);
                for u in t + 1..7 {
                    prop_assert_eq!(a.get(t, u), 0.0);
                }
            }
        }
    }
}
