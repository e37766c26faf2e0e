//! Covariance and mean functions for the latent processes.
//!
//! Two kernels are enough for every experiment in this crate: the squared
//! exponential with per-dimension lengthscales, and a white-noise kernel.
//! Hyperparameters are stored in their constrained (positive) form; the
//! optimizer works on unconstrained values through [`positive_transform`]
//! and its inverse.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::math::DenseMatrix;

/// Covariance function specification with constrained hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KernelSpec {
    /// `k(x, x') = v * exp(-0.5 * sum_d (x_d - x'_d)^2 / l_d^2)`.
    SquaredExponential { variance: f64, lengthscales: Vec<f64> },
    /// `v` when the two points are the same element of the same set,
    /// zero otherwise.
    White { variance: f64 },
}

impl KernelSpec {
    /// Isotropic squared exponential with the lengthscale repeated for
    /// every input dimension.
    pub fn se_isotropic(variance: f64, lengthscale: f64, input_dim: usize) -> Self {
        KernelSpec::SquaredExponential {
            variance,
            lengthscales: vec![lengthscale; input_dim],
        }
    }

    pub fn validate(&self, input_dim: usize) -> Result<()> {
        match self {
            KernelSpec::SquaredExponential { variance, lengthscales } => {
                if !(variance.is_finite() && *variance > 0.0) {
                    return Err(Error::InvalidConfig(format!(
                        "kernel variance must be positive, got {variance}"
                    )));
                }
                if lengthscales.len() != input_dim {
                    return Err(Error::LengthMismatch {
                        op: "kernel lengthscales",
                        left: lengthscales.len(),
                        right: input_dim,
                    });
                }
                if let Some(l) = lengthscales.iter().find(|l| !(l.is_finite() && **l > 0.0)) {
                    return Err(Error::InvalidConfig(format!(
                        "kernel lengthscale must be positive, got {l}"
                    )));
                }
                Ok(())
            }
            KernelSpec::White { variance } => {
                if !(variance.is_finite() && *variance >= 0.0) {
                    return Err(Error::InvalidConfig(format!(
                        "white kernel variance must be non-negative, got {variance}"
                    )));
                }
                Ok(())
            }
        }
    }
}

/// Prior mean function of a process layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanFunctionSpec {
    Zero,
    /// Passes the input through unchanged; requires the layer's output
    /// dimension to equal its input dimension.
    Identity,
}

/// Evaluate a mean function at `x`, producing an `N x out_dim` matrix.
pub fn mean_function(
    mean: &MeanFunctionSpec,
    x: &DenseMatrix,
    out_dim: usize,
) -> Result<DenseMatrix> {
    match mean {
        MeanFunctionSpec::Zero => Ok(DenseMatrix::zeros(x.rows(), out_dim)),
        MeanFunctionSpec::Identity => {
            if x.cols() != out_dim {
                return Err(Error::dims(
                    "identity mean",
                    format!("input dim {} vs output dim {}", x.cols(), out_dim),
                ));
            }
            Ok(x.clone())
        }
    }
}

/// Full cross-covariance matrix `k(x1, x2)`, shaped `N1 x N2`.
pub fn gram(kernel: &KernelSpec, x1: &DenseMatrix, x2: &DenseMatrix) -> Result<DenseMatrix> {
    if x1.cols() != x2.cols() {
        return Err(Error::dims(
            "gram",
            format!("input dims differ: {} vs {}", x1.cols(), x2.cols()),
        ));
    }
    match kernel {
        KernelSpec::SquaredExponential { variance, lengthscales } => {
            kernel.validate(x1.cols())?;
            Ok(se_gram(*variance, lengthscales, x1, x2))
        }
        KernelSpec::White { variance } => Ok(white_gram(*variance, x1, x2)),
    }
}

/// Diagonal of `k(x, x)` without forming the full matrix.
pub fn gram_diag(kernel: &KernelSpec, x: &DenseMatrix) -> Result<Vec<f64>> {
    match kernel {
        KernelSpec::SquaredExponential { variance, .. } => {
            kernel.validate(x.cols())?;
            Ok(vec![*variance; x.rows()])
        }
        KernelSpec::White { variance } => Ok(vec![*variance; x.rows()]),
    }
}

/// Squared exponential gram with validated hyperparameters.
pub(crate) fn se_gram(
    variance: f64,
    lengthscales: &[f64],
    x1: &DenseMatrix,
    x2: &DenseMatrix,
) -> DenseMatrix {
    let (n1, n2, d) = (x1.rows(), x2.rows(), x1.cols());
    let inv_sq: Vec<f64> = lengthscales.iter().map(|l| 1.0 / (l * l)).collect();
    let mut out = DenseMatrix::zeros(n1, n2);
    let parallel = n1 * n2 * d >= 16 * 1024;
    exec::for_each_row(out.data_mut(), n2, parallel, |i, row| {
        let a = x1.row(i);
        for (j, o) in row.iter_mut().enumerate() {
            let b = x2.row(j);
            let mut q = 0.0;
            for k in 0..d {
                let diff = a[k] - b[k];
                q += diff * diff * inv_sq[k];
            }
            *o = variance * (-0.5 * q).exp();
        }
    });
    out
}

/// White-noise gram: `v * I` when `x1` and `x2` are the same set of points
/// (bitwise-equal matrices), an all-zero cross-covariance otherwise.
pub(crate) fn white_gram(variance: f64, x1: &DenseMatrix, x2: &DenseMatrix) -> DenseMatrix {
    if x1 == x2 {
        DenseMatrix::identity(x1.rows()).scale(variance)
    } else {
        DenseMatrix::zeros(x1.rows(), x2.rows())
    }
}

/// Softplus map from the real line onto the positive reals,
/// `ln(1 + e^x)`, stabilized for large magnitudes.
pub fn positive_transform(raw: f64) -> f64 {
    if raw > 30.0 {
        raw
    } else if raw < -30.0 {
        raw.exp()
    } else {
        raw.exp().ln_1p()
    }
}

/// Inverse of [`positive_transform`]: `ln(e^y - 1)`.
pub fn positive_transform_inverse(value: f64) -> f64 {
    assert!(value > 0.0, "positive_transform_inverse needs a positive input, got {value}");
    if value > 30.0 {
        value
    } else {
        value.exp_m1().ln()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::cholesky_with_jitter;
    use proptest::prelude::*;

    fn points(v: &[f64]) -> DenseMatrix {
        DenseMatrix::column(v)
    }

    #[test]
    fn se_gram_known_values() {
        let k = KernelSpec::SquaredExponential { variance: 2.0, lengthscales: vec![1.0] };
        let x = points(&[0.0, 1.0]);
        let g = gram(&k, &x, &x).unwrap();
        assert_eq!(g.get(0, 0), 2.0);
        assert_eq!(g.get(1, 1), 2.0);
        let expect = 2.0 * (-0.5f64).exp();
        assert!((g.get(0, 1) - expect).abs() < 1e-15);
        assert_eq!(g.get(0, 1), g.get(1, 0));
    }

    #[test]
    fn se_gram_with_ard_lengthscales() {
        // Two dims, one tight and one loose lengthscale.
        let k = KernelSpec::SquaredExponential {
            variance: 1.0,
            lengthscales: vec![0.5, 2.0],
        };
        let x1 = DenseMatrix::from_vec(1, 2, vec![0.0, 0.0]).unwrap();
        let x2 = DenseMatrix::from_vec(1, 2, vec![1.0, 1.0]).unwrap();
        let g = gram(&k, &x1, &x2).unwrap();
        let expect = (-0.5f64 * (1.0 / 0.25 + 1.0 / 4.0)).exp();
        assert!((g.get(0, 0) - expect).abs() < 1e-15);
    }

    #[test]
    fn gram_diag_matches_full_gram_diagonal() {
        let k = KernelSpec::SquaredExponential { variance: 1.7, lengthscales: vec![0.8] };
        let x = points(&[-1.0, 0.5, 2.0]);
        let full = gram(&k, &x, &x).unwrap();
        let diag = gram_diag(&k, &x).unwrap();
        for (i, d) in diag.iter().enumerate() {
            assert_eq!(*d, full.get(i, i));
        }
    }

    #[test]
    fn white_gram_distinguishes_same_and_distinct_sets() {
        let k = KernelSpec::White { variance: 0.3 };
        let x = points(&[1.0, 2.0]);
        let same = gram(&k, &x, &x).unwrap();
        assert_eq!(same, DenseMatrix::identity(2).scale(0.3));
        let other = points(&[1.0, 2.5]);
        let cross = gram(&k, &x, &other).unwrap();
        assert_eq!(cross, DenseMatrix::zeros(2, 2));
        assert_eq!(gram_diag(&k, &x).unwrap(), vec![0.3, 0.3]);
    }

    #[test]
    fn mean_functions() {
        let x = DenseMatrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(
            mean_function(&MeanFunctionSpec::Zero, &x, 3).unwrap(),
            DenseMatrix::zeros(2, 3)
        );
        assert_eq!(mean_function(&MeanFunctionSpec::Identity, &x, 2).unwrap(), x);
        assert!(mean_function(&MeanFunctionSpec::Identity, &x, 1).is_err());
    }

    #[test]
    fn validation_rejects_bad_hyperparameters() {
        let k = KernelSpec::SquaredExponential { variance: -1.0, lengthscales: vec![1.0] };
        assert!(k.validate(1).is_err());
        let k = KernelSpec::SquaredExponential { variance: 1.0, lengthscales: vec![1.0] };
        assert!(k.validate(2).is_err());
        let k = KernelSpec::SquaredExponential { variance: 1.0, lengthscales: vec![0.0] };
        assert!(k.validate(1).is_err());
    }

    #[test]
    fn positive_transform_known_values() {
        assert!((positive_transform(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((positive_transform_inverse(1.0) - 0.541_324_854_612_918).abs() < 1e-12);
        // Saturation regimes.
        assert_eq!(positive_transform(100.0), 100.0);
        assert!(positive_transform(-100.0) > 0.0);
    }

    proptest! {
        /// Rescaling an input dimension and its lengthscale together
        /// leaves the gram matrix unchanged.
        #[test]
        fn ard_rescaling_invariance(
            xs in proptest::collection::vec(-3.0f64..3.0, 8),
            scale in 0.2f64..5.0,
            l in 0.3f64..2.0,
        ) {
            let x = DenseMatrix::from_vec(4, 2, xs.clone()).unwrap();
            let k = KernelSpec::SquaredExponential {
                variance: 1.3,
                lengthscales: vec![l, 0.9],
            };
            let g = gram(&k, &x, &x).unwrap();
            let x_scaled = DenseMatrix::from_fn(4, 2, |i, j| {
                if j == 0 { x.get(i, j) * scale } else { x.get(i, j) }
            });
            let k_scaled = KernelSpec::SquaredExponential {
                variance: 1.3,
                lengthscales: vec![l * scale, 0.9],
            };
            let g_scaled = gram(&k_scaled, &x_scaled, &x_scaled).unwrap();
            for (a, b) in g.data().iter().zip(g_scaled.data()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        /// Gram matrices are symmetric and positive definite after at most
        /// the standard jitter ladder.
        #[test]
        fn gram_is_symmetric_and_factorizable(
            xs in proptest::collection::vec(-5.0f64..5.0, 6),
            variance in 0.1f64..4.0,
            l in 0.2f64..3.0,
        ) {
            let x = points(&xs);
            let k = KernelSpec::SquaredExponential { variance, lengthscales: vec![l] };
            let g = gram(&k, &x, &x).unwrap();
            for i in 0..6 {
                for j in 0..6 {
                    prop_assert_eq!(g.get(i, j), g.get(j, i));
                }
            }
            prop_assert!(cholesky_with_jitter(&g, 4).is_ok());
        }

        /// The inverse transform round-trips across many orders of
        /// magnitude.
        #[test]
        fn positive_transform_round_trip(raw in -20.0f64..40.0) {
            let v = positive_transform(raw);
            prop_assert!(v > 0.0);
            let back = positive_transform_inverse(v);
            prop_assert!((back - raw).abs() < 1e-9, "raw {raw} -> {v} -> {back}");
        }
    }
}
