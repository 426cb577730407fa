//! Thin bridges onto nalgebra for the factorizations the diagnostics need.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::numerics::RealMatrix;

pub(crate) fn to_dmatrix(m: &RealMatrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.data())
}

/// Singular values in descending order.
pub fn singular_values(m: &RealMatrix) -> Vec<f64> {
    if m.rows() == 0 || m.cols() == 0 {
        return Vec::new();
    }
    let mut sv: Vec<f64> = to_dmatrix(m).singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

/// Largest singular value.
pub fn spectral_norm(m: &RealMatrix) -> f64 {
    singular_values(m).first().copied().unwrap_or(0.0)
}

/// Minimum-norm least-squares solution of `a x ≈ b`.
pub fn lstsq(a: &RealMatrix, b: &[f64]) -> Result<Vec<f64>> {
    if a.rows() != b.len() {
        return Err(Error::shape("lstsq", a.rows(), b.len()));
    }
    let svd = to_dmatrix(a).svd(true, true);
    let max_sv = svd.singular_values.max();
    let eps = f64::EPSILON * (a.rows().max(a.cols()) as f64) * max_sv;
    let x = svd
        .solve(&DVector::from_column_slice(b), eps)
        .map_err(|e| Error::Numerical(format!("least squares: {e}")))?;
    Ok(x.iter().copied().collect())
}
