//! Assignment probabilities and their concrete (Gumbel-softmax) relaxation.
//!
//! Each data point belongs to exactly one of the K latent processes. The
//! prior over that choice is a softmax of the K assignment-process values
//! at the point's input; during training the discrete choice is relaxed to
//! a temperature-controlled concrete distribution so gradients can flow
//! through sampled assignments, and each training point additionally keeps
//! a variational belief logit vector that parameterizes its posterior over
//! the K processes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::SvgpLayer;
use crate::math::{DenseMatrix, RngStream};

/// Numerically stable softmax of one logit vector.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let exps: Vec<f64> = logits.iter().map(|&v| (v - m).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|e| e / total).collect()
}

/// Numerically stable log-softmax of one logit vector.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = m + logits.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
    logits.iter().map(|&v| v - lse).collect()
}

/// Index of the row maximum; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Concrete-relaxation draw from supplied standard Gumbel noise:
/// `softmax((logits + g) / temperature)`.
///
/// As the temperature approaches zero this approaches the one-hot vector
/// of `argmax(logits + g)`, i.e. an exact draw from the categorical
/// distribution with the given logits (the Gumbel-max construction).
pub fn sample_concrete(logits: &[f64], gumbels: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if logits.len() != gumbels.len() {
        return Err(Error::LengthMismatch {
            op: "sample_concrete",
            left: logits.len(),
            right: gumbels.len(),
        });
    }
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "concrete temperature must be positive, got {temperature}"
        )));
    }
    let perturbed: Vec<f64> = logits
        .iter()
        .zip(gumbels)
        .map(|(&l, &g)| (l + g) / temperature)
        .collect();
    Ok(softmax(&perturbed))
}

/// Concrete draw with fresh Gumbel noise from `rng`.
pub fn sample_concrete_with(
    logits: &[f64],
    temperature: f64,
    rng: &mut RngStream,
) -> Result<Vec<f64>> {
    let gumbels: Vec<f64> = (0..logits.len()).map(|_| rng.next_gumbel()).collect();
    sample_concrete(logits, &gumbels, temperature)
}

/// Log prior probability of each assignment given assignment-process
/// values `alpha` at one point: `log softmax(alpha)`.
pub fn assignment_log_prob(alpha: &[f64]) -> Vec<f64> {
    log_softmax(alpha)
}

/// Monte Carlo estimate of the predictive assignment weights at `x`.
///
/// Draws `n_samples` joint samples of the K assignment processes from
/// their marginals, pushes each through the softmax and averages — the
/// expectation of the renormalized assignment weights under the posterior.
pub fn predict_assignment_weights(
    alpha_layer: &SvgpLayer,
    x: &DenseMatrix,
    n_samples: usize,
    rng: &mut RngStream,
) -> Result<DenseMatrix> {
    if n_samples == 0 {
        return Err(Error::InvalidConfig("need at least one weight sample".to_string()));
    }
    let marg = alpha_layer.marginal(x)?;
    let k = alpha_layer.out_dim();
    let mut acc = DenseMatrix::zeros(x.rows(), k);
    for _ in 0..n_samples {
        let draw = marg.sample(rng);
        for i in 0..x.rows() {
            let w = softmax(draw.row(i));
            for (j, &wj) in w.iter().enumerate() {
                acc.set(i, j, acc.get(i, j) + wj);
            }
        }
    }
    Ok(acc.scale(1.0 / n_samples as f64))
}

/// Per-training-point variational belief logits over the K processes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AssignmentBelief {
    logits: DenseMatrix,
}

impl AssignmentBelief {
    /// Uniform beliefs: all logits zero.
    pub fn new_uniform(n_points: usize, n_components: usize) -> Result<Self> {
        if n_components < 1 {
            return Err(Error::InvalidConfig("need at least one component".to_string()));
        }
        Ok(AssignmentBelief { logits: DenseMatrix::zeros(n_points, n_components) })
    }

    /// Small random logits; breaks the symmetry between identically
    /// initialized processes.
    pub fn new_random(
        n_points: usize,
        n_components: usize,
        scale: f64,
        rng: &mut RngStream,
    ) -> Result<Self> {
        let mut b = Self::new_uniform(n_points, n_components)?;
        for v in b.logits.data_mut() {
            *v = scale * rng.next_std_normal();
        }
        Ok(b)
    }

    pub fn len(&self) -> usize {
        self.logits.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.rows() == 0
    }

    pub fn num_components(&self) -> usize {
        self.logits.cols()
    }

    pub fn logits(&self) -> &DenseMatrix {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut DenseMatrix {
        &mut self.logits
    }

    /// Posterior probabilities for one point.
    pub fn probabilities(&self, point: usize) -> Vec<f64> {
        softmax(self.logits.row(point))
    }

    /// Most probable component per point; ties resolve to the lowest
    /// index.
    pub fn hard_assignments(&self) -> Vec<usize> {
        (0..self.logits.rows()).map(|i| argmax(self.logits.row(i))).collect()
    }
}
