//! Dense linear algebra and random sampling primitives.
//!
//! Everything downstream (kernels, variational layers, the training loop)
//! is built on the row-major [`DenseMatrix`], the jittered Cholesky
//! routines, and the seedable [`RngStream`]. No external linear algebra
//! backend is used: the matrices involved stay small (inducing-point
//! count squared) and keeping the loops local makes the reverse-mode
//! adjoints in `tape` straightforward to verify.

mod chol;
mod matrix;
mod rng;

pub use chol::{
    cholesky_with_jitter, log_det_from_factor, tri_solve, CholeskyFactor, TriSide,
    JITTER_SCHEDULE,
};
pub(crate) use chol::solve_lower;
pub use matrix::{matmul_flags, DenseMatrix};
pub use rng::{sample_gumbel, sample_std_normal, RngStream};

/// Numerically stable `ln(sum_i exp(v_i))`.
///
/// Returns negative infinity for an empty slice (the empty sum).
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

#[cfg(test)]
mod tests {
    use super::log_sum_exp;

    #[test]
    fn log_sum_exp_matches_direct_computation_and_resists_overflow() {
        let vals = [0.0, (2.0f64).ln()];
        assert!((log_sum_exp(&vals) - 3.0f64.ln()).abs() < 1e-12);
        // Would overflow if computed naively.
        let shifted = [1000.0, 1000.0 + (2.0f64).ln()];
        assert!((log_sum_exp(&shifted) - (1000.0 + 3.0f64.ln())).abs() < 1e-9);
        assert_eq!(log_sum_exp(&[]), f64::NEG_INFINITY);
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY]), f64::NEG_INFINITY);
    }
}
