//! Small dense linear-algebra helpers shared by the model modules.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{MgpError, Result};

pub type Chol = Cholesky<f64, Dyn>;

/// Cholesky factorization; `what` names the matrix in the error message.
pub fn cholesky(m: DMatrix<f64>, what: &str) -> Result<Chol> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(MgpError::NonFinite(format!("{what} has non-finite entries")));
    }
    Cholesky::new(m).ok_or_else(|| MgpError::degenerate(format!("{what} is not positive definite")))
}

/// log|A| from the Cholesky factor of A.
pub fn log_det(chol: &Chol) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

/// Solves L x = b for the lower factor of `chol`.
pub fn solve_lower(chol: &Chol, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut x = b.clone();
    chol.l_dirty().solve_lower_triangular_unchecked_mut(&mut x);
    x
}

pub fn solve_lower_vec(chol: &Chol, b: &DVector<f64>) -> DVector<f64> {
    let mut x = b.clone();
    chol.l_dirty().solve_lower_triangular_unchecked_mut(&mut x);
    x
}

/// Replaces `m` by (m + mᵀ)/2.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

pub fn mean_diagonal(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows().min(m.ncols());
    if n == 0 {
        return 0.0;
    }
    m.diagonal().iter().sum::<f64>() / n as f64
}

/// Elementwise inner product Σ_ij a_ij b_ij.
pub fn frobenius_dot(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// Numerically stable log Σ exp(v). Returns -inf when every entry is -inf.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Population variance; zero for a single value.
pub fn variance(values: impl IntoIterator<Item = f64> + Clone) -> f64 {
    let n = values.clone().into_iter().count();
    if n == 0 {
        return 0.0;
    }
    let mean = values.clone().into_iter().sum::<f64>() / n as f64;
    values.into_iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64
}

/// Linear-interpolation quantile of an ascending-sorted slice (position q·(n-1)).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Rows of `x` selected by `idx`.
pub fn select_rows(x: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), x.ncols(), |i, j| x[(idx[i], j)])
}
