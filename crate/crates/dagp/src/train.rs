//! Stochastic gradient training of the mixture model.
//!
//! One optimizer step draws a minibatch without replacement (reshuffling
//! each epoch), draws fresh estimator noise, differentiates a single
//! Monte Carlo estimate of the bound, and applies an Adam *ascent* update
//! to every raw parameter. The concrete-relaxation temperature follows a
//! geometric annealing schedule. Each step appends one [`TraceRow`] so
//! runs can be inspected and compared offline.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{DenseMatrix, RngStream};
use crate::model::{DagpModel, ElboNoise};
use crate::tape::Tape;

/// Gradients keyed by the stable parameter names from the model binding.
pub type NamedGradients = Vec<(String, DenseMatrix)>;

/// Differentiate one fixed-noise estimate of the bound.
///
/// Returns the per-parameter gradients (ascent direction) along with the
/// decomposed estimate at the current parameters. Any non-finite gradient
/// entry is reported as an error naming the offending parameter.
pub fn compute_gradient(
    model: &DagpModel,
    x: &DenseMatrix,
    y: &DenseMatrix,
    indices: &[usize],
    temperature: f64,
    noise: &ElboNoise,
) -> Result<(NamedGradients, crate::model::ElboEstimate)> {
    let mut tape = Tape::new();
    let (elbo, binding) = model.elbo_training_graph(&mut tape, x, y, indices, temperature, noise)?;
    let grads = tape.backward(elbo.value)?;
    let mut out = Vec::with_capacity(binding.len());
    for (name, id) in binding.iter() {
        let g = grads
            .wrt(id)
            .cloned()
            .unwrap_or_else(|| {
                let (r, c) = tape.value(id).shape();
                DenseMatrix::zeros(r, c)
            });
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient { name: name.to_string() });
        }
        out.push((name.to_string(), g));
    }
    let estimate = crate::model::ElboEstimate {
        value: tape.scalar(elbo.value),
        data_term: tape.scalar(elbo.data_term),
        assign_term: tape.scalar(elbo.assign_term),
        kl_f: tape.scalar(elbo.kl_f),
        kl_alpha: tape.scalar(elbo.kl_alpha),
        log_prior: tape.scalar(elbo.log_prior),
    };
    Ok((out, estimate))
}

/// Adam accumulator configured for gradient *ascent*.
#[derive(Debug, Clone)]
pub struct AdamState {
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    step: u64,
    first: Vec<(String, DenseMatrix)>,
    second: Vec<(String, DenseMatrix)>,
}

impl AdamState {
    pub fn new(learning_rate: f64, beta1: f64, beta2: f64, epsilon: f64) -> Result<Self> {
        if !(learning_rate.is_finite() && learning_rate > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
            return Err(Error::InvalidConfig(format!(
                "moment decays must lie in [0, 1), got {beta1} and {beta2}"
            )));
        }
        Ok(AdamState {
            learning_rate,
            beta1,
            beta2,
            epsilon,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Apply one bias-corrected ascent step to the model.
    pub fn apply(&mut self, model: &mut DagpModel, gradients: &NamedGradients) -> Result<()> {
        if self.first.is_empty() {
            self.first = gradients
                .iter()
                .map(|(n, g)| (n.clone(), DenseMatrix::zeros(g.rows(), g.cols())))
                .collect();
            self.second = self.first.clone();
        }
        if self.first.len() != gradients.len() {
            return Err(Error::LengthMismatch {
                op: "adam",
                left: self.first.len(),
                right: gradients.len(),
            });
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        let params = model.raw_parameters();
        for (i, (name, grad)) in gradients.iter().enumerate() {
            if self.first[i].0 != *name || params[i].0 != *name {
                return Err(Error::InvalidConfig(format!(
                    "parameter order changed at `{name}`"
                )));
            }
            let m = &mut self.first[i].1;
            let v = &mut self.second[i].1;
            let mut updated = params[i].1.clone();
            for (j, g) in grad.data().iter().enumerate() {
                let mj = self.beta1 * m.data()[j] + (1.0 - self.beta1) * g;
                let vj = self.beta2 * v.data()[j] + (1.0 - self.beta2) * g * g;
                m.data_mut()[j] = mj;
                v.data_mut()[j] = vj;
                let step = self.learning_rate * (mj / c1) / ((vj / c2).sqrt() + self.epsilon);
                updated.data_mut()[j] += step;
            }
            model.set_raw_parameter(name, &updated)?;
        }
        Ok(())
    }
}

/// Geometric annealing from `start` to `end` over the first
/// `fraction` of `total_steps`, constant afterwards.
pub fn temperature_at(step: usize, total_steps: usize, start: f64, end: f64, fraction: f64) -> f64 {
    if total_steps == 0 || fraction <= 0.0 {
        return end;
    }
    let horizon = (total_steps as f64 * fraction).max(1.0);
    let t = (step as f64 / horizon).min(1.0);
    start * (end / start).powf(t)
}

/// Training hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Optimizer steps to run.
    pub steps: usize,
    /// Minibatch size (clamped to the dataset size).
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Concrete-relaxation temperature at step 0.
    pub temperature_start: f64,
    /// Temperature after annealing finishes.
    pub temperature_end: f64,
    /// Fraction of `steps` spent annealing.
    pub anneal_fraction: f64,
    /// Record a trace row every this many steps (the final step is always
    /// recorded).
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 128,
            learning_rate: 0.01,
            beta1: 0.9,
            beta2: 0.99,
            temperature_start: 1.0,
            temperature_end: 0.2,
            anneal_fraction: 0.5,
            log_every: 10,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be positive".to_string()));
        }
        if self.log_every == 0 {
            return Err(Error::InvalidConfig("log_every must be positive".to_string()));
        }
        for (name, v) in [
            ("temperature_start", self.temperature_start),
            ("temperature_end", self.temperature_end),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.anneal_fraction.is_finite() && self.anneal_fraction > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "anneal_fraction must be positive, got {}",
                self.anneal_fraction
            )));
        }
        Ok(())
    }
}

/// One logged optimizer step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub elbo: f64,
    pub data_term: f64,
    pub assign_term: f64,
    pub kl_f: f64,
    pub kl_alpha: f64,
    pub temperature: f64,
    /// Wall-clock seconds since training began.
    pub seconds: f64,
}

/// Shuffled without-replacement batch iterator state.
struct EpochBatches {
    order: Vec<usize>,
    cursor: usize,
    batch: usize,
}

impl EpochBatches {
    fn new(n: usize, batch: usize) -> Self {
        EpochBatches { order: (0..n).collect(), cursor: n, batch: batch.min(n) }
    }

    fn next_batch(&mut self, rng: &mut RngStream) -> Vec<usize> {
        if self.cursor + self.batch > self.order.len() {
            rng.shuffle(&mut self.order);
            self.cursor = 0;
        }
        let out = self.order[self.cursor..self.cursor + self.batch].to_vec();
        self.cursor += self.batch;
        out
    }
}

/// Run the optimizer for `config.steps` steps, mutating `model` in place.
///
/// Training tolerates isolated non-finite gradients by skipping the
/// update, but aborts after three in a row.
pub fn train(
    model: &mut DagpModel,
    x: &DenseMatrix,
    y: &DenseMatrix,
    config: &TrainConfig,
    rng: &mut RngStream,
) -> Result<Vec<TraceRow>> {
    config.validate()?;
    let n = model.n_train();
    if x.rows() != n || y.rows() != n {
        return Err(Error::dims(
            "train",
            format!("{} training points, x has {} rows, y has {}", n, x.rows(), y.rows()),
        ));
    }
    let mut adam = AdamState::new(config.learning_rate, config.beta1, config.beta2, 1e-8)?;
    let mut batches = EpochBatches::new(n, config.batch_size);
    let mut trace = Vec::new();
    let start = Instant::now();
    let mut consecutive_failures = 0usize;
    for step in 0..config.steps {
        let idx = batches.next_batch(rng);
        let xb = gather(x, &idx);
        let yb = gather(y, &idx);
        let temperature = temperature_at(
            step,
            config.steps,
            config.temperature_start,
            config.temperature_end,
            config.anneal_fraction,
        );
        let noise = ElboNoise::draw(model, idx.len(), rng);
        match compute_gradient(model, &xb, &yb, &idx, temperature, &noise) {
            Ok((grads, estimate)) => {
                consecutive_failures = 0;
                adam.apply(model, &grads)?;
                if step % config.log_every == 0 || step + 1 == config.steps {
                    trace.push(TraceRow {
                        step,
                        elbo: estimate.value,
                        data_term: estimate.data_term,
                        assign_term: estimate.assign_term,
                        kl_f: estimate.kl_f,
                        kl_alpha: estimate.kl_alpha,
                        temperature,
                        seconds: start.elapsed().as_secs_f64(),
                    });
                }
            }
            Err(err @ Error::NonFiniteGradient { .. }) => {
                consecutive_failures += 1;
                if consecutive_failures >= 3 {
                    return Err(err);
                }
            }
            Err(other) => return Err(other),
        }
    }
    Ok(trace)
}

fn gather(m: &DenseMatrix, indices: &[usize]) -> DenseMatrix {
    DenseMatrix::from_fn(indices.len(), m.cols(), |i, j| m.get(indices[i], j))
}
