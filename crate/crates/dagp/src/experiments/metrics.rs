//! Evaluation metrics shared by all experiments.

use serde::{Deserialize, Serialize};

use crate::assignment::AssignmentBelief;
use crate::error::{Error, Result};

/// Root mean squared error between two aligned vectors.
pub fn rmse(predictions: &[f64], truth: &[f64]) -> Result<f64> {
    if predictions.len() != truth.len() {
        return Err(Error::LengthMismatch {
            op: "rmse",
            left: predictions.len(),
            right: truth.len(),
        });
    }
    if predictions.is_empty() {
        return Err(Error::InvalidConfig("rmse of an empty set".to_string()));
    }
    let sum_sq: f64 = predictions
        .iter()
        .zip(truth)
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok((sum_sq / predictions.len() as f64).sqrt())
}

/// Mean log likelihood with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MllSummary {
    pub mean: f64,
    pub std_error: f64,
}

/// Summarize per-point log predictive densities.
pub fn mll(log_densities: &[f64]) -> Result<MllSummary> {
    let n = log_densities.len();
    if n == 0 {
        return Err(Error::InvalidConfig("mean log likelihood of an empty set".to_string()));
    }
    let mean = log_densities.iter().sum::<f64>() / n as f64;
    let std_error = if n < 2 {
        0.0
    } else {
        let var = log_densities.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
            / (n - 1) as f64;
        (var / n as f64).sqrt()
    };
    Ok(MllSummary { mean, std_error })
}

/// Total soft assignment mass per component over the training beliefs.
pub fn assignment_mass(beliefs: &AssignmentBelief) -> Vec<f64> {
    let mut mass = vec![0.0; beliefs.num_components()];
    for i in 0..beliefs.len() {
        for (k, p) in beliefs.probabilities(i).iter().enumerate() {
            mass[k] += p;
        }
    }
    mass
}

/// For each ground-truth label value, the component holding the most of
/// its points (by hard assignment). Returns a vector indexed by label.
pub fn match_components_to_labels(
    assignments: &[usize],
    labels: &[usize],
    n_components: usize,
) -> Result<Vec<usize>> {
    if assignments.len() != labels.len() {
        return Err(Error::LengthMismatch {
            op: "component matching",
            left: assignments.len(),
            right: labels.len(),
        });
    }
    if assignments.is_empty() {
        return Err(Error::InvalidConfig("component matching on an empty set".to_string()));
    }
    if let Some(&bad) = assignments.iter().find(|&&a| a >= n_components) {
        return Err(Error::InvalidConfig(format!(
            "assignment {bad} out of range 0..{n_components}"
        )));
    }
    let n_labels = labels.iter().max().unwrap() + 1;
    let mut counts = vec![vec![0usize; n_components]; n_labels];
    for (&a, &l) in assignments.iter().zip(labels) {
        counts[l][a] += 1;
    }
    Ok(counts
        .iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .max_by_key(|(_, c)| **c)
                .map(|(k, _)| k)
                .unwrap_or(0)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::RngStream;

    #[test]
    fn rmse_known_values() {
        assert_eq!(rmse(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
        // Constant offset c gives |c|.
        let r = rmse(&[1.5, 2.5], &[1.0, 2.0]).unwrap();
        assert!((r - 0.5).abs() < 1e-15);
        // Hand computation: sqrt((9 + 16) / 2).
        let r = rmse(&[0.0, 0.0], &[3.0, 4.0]).unwrap();
        assert!((r - (12.5f64).sqrt()).abs() < 1e-15);
        assert!((r - 3.5355339059327378).abs() < 1e-12);
        assert!(rmse(&[1.0], &[1.0, 2.0]).is_err());
        assert!(rmse(&[], &[]).is_err());
    }

    #[test]
    fn mll_matches_hand_computation() {
        // Exact predictions under a unit-variance Gaussian.
        let lp = -0.5 * (2.0 * std::f64::consts::PI).ln();
        let s = mll(&[lp, lp, lp]).unwrap();
        assert!((s.mean - lp).abs() < 1e-15);
        assert!((s.mean + 0.918939).abs() < 1e-6);
        assert_eq!(s.std_error, 0.0);
        // Mean -2, sample sd 1, standard error 1/sqrt(3).
        let s = mll(&[-1.0, -2.0, -3.0]).unwrap();
        assert!((s.mean + 2.0).abs() < 1e-15);
        assert!((s.std_error - 1.0 / 3.0f64.sqrt()).abs() < 1e-15);
        assert!(mll(&[]).is_err());
        assert_eq!(mll(&[-1.0]).unwrap().std_error, 0.0);
    }

    #[test]
    fn tail_shift_strictly_decreases_mll() {
        // Densities of increasingly distant targets under N(0, 1).
        let lp = |y: f64| -0.5 * (2.0 * std::f64::consts::PI).ln() - 0.5 * y * y;
        let near = mll(&[lp(0.1), lp(-0.2), lp(0.0)]).unwrap();
        let far = mll(&[lp(3.1), lp(2.8), lp(3.0)]).unwrap();
        assert!(far.mean < near.mean);
    }

    #[test]
    fn component_matching_takes_majorities() {
        let assignments = [0, 0, 1, 1, 2, 1];
        let labels = [0, 0, 1, 1, 1, 1];
        let map = match_components_to_labels(&assignments, &labels, 3).unwrap();
        assert_eq!(map, vec![0, 1]);
        assert!(match_components_to_labels(&[0], &[0, 1], 2).is_err());
        assert!(match_components_to_labels(&[5], &[0], 2).is_err());
        assert!(match_components_to_labels(&[], &[], 2).is_err());
    }

    #[test]
    fn assignment_mass_sums_to_the_dataset_size() {
        let mut rng = RngStream::new(60, 0);
        let beliefs = AssignmentBelief::new_random(40, 3, 1.5, &mut rng).unwrap();
        let mass = assignment_mass(&beliefs);
        assert_eq!(mass.len(), 3);
        let total: f64 = mass.iter().sum();
        assert!((total - 40.0).abs() < 1e-9, "total mass {total}");
        assert!(mass.iter().all(|m| *m > 0.0));
    }
}
