//! Cholesky factorization with a jitter ladder, and triangular solves.

use crate::error::{Error, Result};
use crate::exec;
use crate::math::DenseMatrix;

/// Relative jitter ladder: each entry is multiplied by the mean diagonal of
/// the matrix being factorized. The first successful rung wins.
pub const JITTER_SCHEDULE: [f64; 4] = [0.0, 1e-8, 1e-6, 1e-4];

/// Relative tolerance for the symmetry pre-check.
const SYMMETRY_RTOL: f64 = 1e-10;

/// Which triangular system a [`tri_solve`] call targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TriSide {
    /// Solve `L x = b` by forward substitution.
    Lower,
    /// Solve `L^T x = b` by back substitution.
    LowerTransposed,
}

/// Lower-triangular Cholesky factor together with the jitter that was
/// actually added to the diagonal to obtain it.
#[derive(Debug, Clone)]
pub struct CholeskyFactor {
    lower: DenseMatrix,
    jitter_used: f64,
}

impl CholeskyFactor {
    /// Wrap an existing lower-triangular matrix as a factor.
    ///
    /// The caller is responsible for `lower` actually being lower
    /// triangular with a positive diagonal; this is used where factors are
    /// built directly (e.g. the variational covariance parameterization)
    /// rather than by factorizing.
    pub fn from_lower(lower: DenseMatrix) -> Self {
        CholeskyFactor { lower, jitter_used: 0.0 }
    }

    pub fn lower(&self) -> &DenseMatrix {
        &self.lower
    }

    pub fn jitter_used(&self) -> f64 {
        self.jitter_used
    }

    pub fn order(&self) -> usize {
        self.lower.rows()
    }
}

/// Factor a symmetric positive (semi-)definite matrix as `L L^T`.
///
/// Symmetry is checked first against a relative tolerance. The jitter
/// ladder in [`JITTER_SCHEDULE`], scaled by the mean diagonal, is then
/// walked until a rung factorizes; at most `max_attempts` rungs are tried.
pub fn cholesky_with_jitter(a: &DenseMatrix, max_attempts: usize) -> Result<CholeskyFactor> {
    if !a.is_square() {
        return Err(Error::dims(
            "cholesky",
            format!("expected square matrix, got {:?}", a.shape()),
        ));
    }
    let n = a.rows();
    let tol = SYMMETRY_RTOL * a.max_abs();
    for i in 0..n {
        for j in (i + 1)..n {
            let upper = a.get(i, j);
            let lower = a.get(j, i);
            if (upper - lower).abs() > tol {
                return Err(Error::NotSymmetric { row: i, col: j, left: upper, right: lower });
            }
        }
    }
    let scale = a.mean_diag();
    let attempts = max_attempts.max(1).min(JITTER_SCHEDULE.len());
    for &rel in JITTER_SCHEDULE.iter().take(attempts) {
        let jitter = rel * scale;
        if let Some(lower) = try_factor(a, jitter) {
            return Ok(CholeskyFactor { lower, jitter_used: jitter });
        }
    }
    Err(Error::NotPositiveDefinite { size: n, attempts })
}

/// One factorization attempt; `None` when a pivot is non-positive.
fn try_factor(a: &DenseMatrix, jitter: f64) -> Option<DenseMatrix> {
    let n = a.rows();
    let mut l = DenseMatrix::zeros(n, n);
    for j in 0..n {
        for i in j..n {
            let mut s = a.get(i, j);
            if i == j {
                s += jitter;
            }
            for k in 0..j {
                s -= l.get(i, k) * l.get(j, k);
            }
            if i == j {
                if !(s.is_finite() && s > 0.0) {
                    return None;
                }
                l.set(j, j, s.sqrt());
            } else {
                l.set(i, j, s / l.get(j, j));
            }
        }
    }
    Some(l)
}

/// Solve `L x = b` or `L^T x = b` for every column of `b`.
pub fn tri_solve(factor: &CholeskyFactor, b: &DenseMatrix, side: TriSide) -> Result<DenseMatrix> {
    solve_lower(factor.lower(), b, side)
}

/// Triangular solve against an explicit lower factor.
///
/// Internally operates on the transposed right-hand side so each solution
/// column is a contiguous row that one task can own; column solves are
/// independent, so this parallelizes without changing any result bit.
pub(crate) fn solve_lower(
    l: &DenseMatrix,
    b: &DenseMatrix,
    side: TriSide,
) -> Result<DenseMatrix> {
    let n = l.rows();
    if !l.is_square() || b.rows() != n {
        return Err(Error::dims(
            "tri_solve",
            format!("factor {:?} vs rhs {:?}", l.shape(), b.shape()),
        ));
    }
    let bt = b.transpose();
    let mut xt = DenseMatrix::zeros(b.cols(), n);
    let parallel = b.cols() * n * n >= 32 * 1024;
    exec::for_each_row(xt.data_mut(), n, parallel, |r, x| {
        let rhs = bt.row(r);
        match side {
            TriSide::Lower => {
                for i in 0..n {
                    let l_row = l.row(i);
                    let mut s = rhs[i];
                    for k in 0..i {
                        s -= l_row[k] * x[k];
                    }
                    x[i] = s / l_row[i];
                }
            }
            TriSide::LowerTransposed => {
                for i in (0..n).rev() {
                    let mut s = rhs[i];
                    for k in (i + 1)..n {
                        s -= l.get(k, i) * x[k];
                    }
                    x[i] = s / l.get(i, i);
                }
            }
        }
    });
    Ok(xt.transpose())
}

/// `log det(A)` from the factor of `A`: twice the sum of log-diagonal.
pub fn log_det_from_factor(factor: &CholeskyFactor) -> f64 {
    let l = factor.lower();
    (0..l.rows()).map(|i| l.get(i, i).ln()).sum::<f64>() * 2.0
}
