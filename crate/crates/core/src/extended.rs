//! Double-double arithmetic (an unevaluated sum `hi + lo` of two `f64`s).
//!
//! Used only where a well-posed answer is destroyed by `f64` cancellation:
//! exact interpolation of a kernel by as many exponential modes as lags,
//! whose Vandermonde system has condition numbers far beyond 1e16.

use std::ops::{Add, Div, Mul, Neg, Sub};

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DoubleDouble {
    pub hi: f64,
    pub lo: f64,
}

#[inline]
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    let err = (a - (s - bb)) + (b - bb);
    (s, err)
}

#[inline]
fn quick_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    (s, b - (s - a))
}

#[inline]
fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

impl DoubleDouble {
    pub const ZERO: Self = Self { hi: 0.0, lo: 0.0 };
    pub const ONE: Self = Self { hi: 1.0, lo: 0.0 };

    pub fn new(hi: f64, lo: f64) -> Self {
        let (hi, lo) = quick_two_sum(hi, lo);
        Self { hi, lo }
    }

    pub fn to_f64(self) -> f64 {
        self.hi + self.lo
    }

    pub fn abs(self) -> Self {
        if self.hi < 0.0 {
            -self
        } else {
            self
        }
    }
}

impl From<f64> for DoubleDouble {
    fn from(v: f64) -> Self {
        Self { hi: v, lo: 0.0 }
    }
}

impl Neg for DoubleDouble {
    type Output = Self;
    fn neg(self) -> Self {
        Self {
            hi: -self.hi,
            lo: -self.lo,
        }
    }
}

impl Add for DoubleDouble {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        let (s, e) = two_sum(self.hi, o.hi);
        let (t, f) = two_sum(self.lo, o.lo);
        let (s, e) = quick_two_sum(s, e + t);
        let (hi, lo) = quick_two_sum(s, e + f);
        Self { hi, lo }
    }
}

impl Sub for DoubleDouble {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        self + (-o)
    }
}

impl Mul for DoubleDouble {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        let (p, e) = two_prod(self.hi, o.hi);
        let e = e + (self.hi * o.lo + self.lo * o.hi);
        let (hi, lo) = quick_two_sum(p, e);
        Self { hi, lo }
    }
}

impl Div for DoubleDouble {
    type Output = Self;
    fn div(self, o: Self) -> Self {
        let q1 = self.hi / o.hi;
        let r = self - o * DoubleDouble::from(q1);
        let q2 = r.hi / o.hi;
        let r = r - o * DoubleDouble::from(q2);
        let q3 = r.hi / o.hi;
        DoubleDouble::new(q1, q2) + DoubleDouble::from(q3)
    }
}

/// Solves the square system `a x = b` by Gaussian elimination with partial
/// pivoting in double-double. Returns `None` for a singular matrix.
pub fn solve(mut a: Vec<Vec<DoubleDouble>>, mut b: Vec<DoubleDouble>) -> Option<Vec<DoubleDouble>> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[i][col].abs().to_f64().total_cmp(&a[j][col].abs().to_f64()))?;
        if a[pivot][col].hi == 0.0 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let factor = a[row][col] / a[col][col];
            if factor.hi == 0.0 {
                continue;
            }
            for k in col..n {
                let v = a[col][k];
                a[row][k] = a[row][k] - factor * v;
            }
            let v = b[col];
            b[row] = b[row] - factor * v;
        }
    }
    let mut x = vec![DoubleDouble::ZERO; n];
    for row in (0..n).rev() {
        let mut acc = b[row];
        for k in row + 1..n {
            acc = acc - a[row][k] * x[k];
        }
        x[row] = acc / a[row][row];
    }
    Some(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recovers_bits_lost_in_f64() {
        let big = DoubleDouble::from(1e17);
        let one = DoubleDouble::from(1.0);
        let r = (big + one) - big;
        assert_eq!(r.to_f64(), 1.0);
        assert_eq!((1e17 + 1.0) - 1e17, 0.0);
    }

    #[test]
    fn division_round_trips() {
        let a = DoubleDouble::from(1.0);
        let b = DoubleDouble::from(3.0);
        let q = a / b;
        let back = q * b;
        assert!((back - a).abs().to_f64() < 1e-31);
    }

    #[test]
    fn solves_ill_conditioned_vandermonde() {
        // Interpolate a unit spike at the last lag with 21 real modes.
        let n = 21;
        let nodes: Vec<f64> = (0..n)
            .map(|j| ((2 * j + 1) as f64 * std::f64::consts::PI / (2 * n) as f64).cos())
            .collect();
        let mut a = vec![vec![DoubleDouble::ZERO; n]; n];
        for (l, row) in a.iter_mut().enumerate() {
            for (i, &x) in nodes.iter().enumerate() {
                let mut p = DoubleDouble::ONE;
                for _ in 0..l {
                    p = p * DoubleDouble::from(x);
                }
                row[i] = p;
            }
        }
        let mut b = vec![DoubleDouble::ZERO; n];
        b[n - 1] = DoubleDouble::ONE;
        let x = solve(a.clone(), b.clone()).unwrap();
        for l in 0..n {
            let mut acc = DoubleDouble::ZERO;
            for i in 0..n {
                acc = acc + a[l][i] * x[i];
            }
            assert!((acc - b[l]).abs().to_f64() < 1e-20, "lag {l}");
        }
    }
}
