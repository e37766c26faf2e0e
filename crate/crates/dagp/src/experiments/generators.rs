//! Synthetic benchmark generators for the one-dimensional experiments.

use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::math::{DenseMatrix, RngStream};

/// The noise-free signal of the noise-separation task.
pub fn choicenet_signal(x: f64) -> f64 {
    (std::f64::consts::FRAC_PI_2 * x).cos() * (-(x / 2.0) * (x / 2.0)).exp()
}

/// Signal-plus-outliers data: inputs uniform on `[-3, 3]`; with
/// probability `outlier_rate` the target is replaced by asymmetric
/// uniform noise on `[-1, 3]`, otherwise it is the signal plus
/// `N(0, 0.15^2)` observation noise.
///
/// Labels mark outliers with 1; `noiseless_y` stores the clean signal.
pub fn gen_choicenet(outlier_rate: f64, n: usize, rng: &mut RngStream) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::InvalidConfig("need at least one data point".to_string()));
    }
    if !(0.0..=1.0).contains(&outlier_rate) {
        return Err(Error::InvalidConfig(format!(
            "outlier rate must lie in [0, 1], got {outlier_rate}"
        )));
    }
    let mut x = DenseMatrix::zeros(n, 1);
    let mut y = DenseMatrix::zeros(n, 1);
    let mut clean = DenseMatrix::zeros(n, 1);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let xi = rng.uniform(-3.0, 3.0);
        let signal = choicenet_signal(xi);
        let is_outlier = rng.bernoulli(outlier_rate);
        let yi = if is_outlier {
            rng.uniform(-1.0, 3.0)
        } else {
            signal + 0.15 * rng.next_std_normal()
        };
        x.set(i, 0, xi);
        y.set(i, 0, yi);
        clean.set(i, 0, signal);
        labels.push(usize::from(is_outlier));
    }
    Ok(Dataset { x, y, labels: Some(labels), noiseless_y: Some(clean) })
}

/// Relative sampling weights and domains of the three multimodal
/// branches.
///
/// Branches 1 and 3 cover all of `[-2π, 2π]`; branch 2 only its
/// `restricted` subinterval, making the data trimodal there and bimodal
/// elsewhere. The default weights give the full-range branches a 2:1
/// data ratio and keep every mode above a fifth of the local data inside
/// the restricted interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemiBimodalConfig {
    pub weights: [f64; 3],
    /// Interval on which branch 2 is sampled.
    pub restricted: (f64, f64),
    /// Observation noise standard deviation.
    pub noise_sd: f64,
}

impl Default for SemiBimodalConfig {
    fn default() -> Self {
        SemiBimodalConfig { weights: [2.0, 0.5, 1.0], restricted: (0.0, 5.0), noise_sd: 0.005 }
    }
}

/// Noise-free value of one multimodal branch (0-based index).
pub fn semibimodal_branch_value(branch: usize, x: f64) -> f64 {
    match branch {
        0 => x.sin(),
        1 => x.sin() - 2.0 * (-0.5 * (x - 2.0) * (x - 2.0)).exp(),
        2 => -1.0 - 3.0 / (8.0 * std::f64::consts::PI) * x + 0.3 * (2.0 * x).sin(),
        _ => panic!("branch index {branch} out of range"),
    }
}

/// Multimodal data on `[-2π, 2π]`: a sine, a sine with a localized dip,
/// and a slowly decaying line, sampled according to `config`.
///
/// Labels store the branch index; `noiseless_y` the branch value.
pub fn gen_semibimodal(
    n: usize,
    config: &SemiBimodalConfig,
    rng: &mut RngStream,
) -> Result<Dataset> {
    if n < 3 {
        return Err(Error::InvalidConfig(format!("need at least three points, got {n}")));
    }
    if config.weights.iter().any(|w| *w < 0.0) || config.weights.iter().sum::<f64>() <= 0.0 {
        return Err(Error::InvalidConfig(format!(
            "branch weights must be nonnegative with positive sum, got {:?}",
            config.weights
        )));
    }
    let (lo, hi) = config.restricted;
    if !(lo < hi) {
        return Err(Error::InvalidConfig(format!(
            "restricted interval must be nonempty, got ({lo}, {hi})"
        )));
    }
    let total: f64 = config.weights.iter().sum();
    let full = 2.0 * std::f64::consts::PI;
    let mut x = DenseMatrix::zeros(n, 1);
    let mut y = DenseMatrix::zeros(n, 1);
    let mut clean = DenseMatrix::zeros(n, 1);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let u = rng.uniform(0.0, total);
        let branch = if u < config.weights[0] {
            0
        } else if u < config.weights[0] + config.weights[1] {
            1
        } else {
            2
        };
        let xi = if branch == 1 { rng.uniform(lo, hi) } else { rng.uniform(-full, full) };
        let value = semibimodal_branch_value(branch, xi);
        x.set(i, 0, xi);
        y.set(i, 0, value + config.noise_sd * rng.next_std_normal());
        clean.set(i, 0, value);
        labels.push(branch);
    }
    Ok(Dataset { x, y, labels: Some(labels), noiseless_y: Some(clean) })
}
