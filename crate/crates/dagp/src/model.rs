//! The assembled mixture model and its training objective.
//!
//! A [`DagpModel`] couples K latent processes (each a [`GpStack`]), one
//! assignment layer with K outputs, K likelihood noise scales, and one
//! belief logit row per training point. The minibatch objective estimated
//! here is
//!
//! ```text
//! value =   N/|B| * sum_n sum_k a_nk log N(y_n | f_k(x_n), sigma_k^2)
//!         + N/|B| * sum_n sum_k a_nk log softmax(alpha(x_n))_k
//!         - sum_k KL(q(u_k) || p(u_k)) - KL(q(u_alpha) || p(u_alpha))
//!         + sum_k log p(sigma_k)
//! ```
//!
//! with `f_k` and `alpha` reparametrized samples from their variational
//! marginals and `a_n` a concrete-relaxation sample of the point's belief
//! logits. All randomness enters through an explicit [`ElboNoise`], so the
//! same estimator can be differentiated, finite-difference checked, and
//! averaged over fresh draws.

use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::assignment::{argmax, AssignmentBelief};
use crate::error::{Error, Result};
use crate::gp::{build_layer, sample_nodes, GpStack, KernelNodes, LayerNodes, SvgpLayer};
use crate::kernels::{positive_transform, positive_transform_inverse, KernelSpec};
use crate::math::{log_sum_exp, DenseMatrix, RngStream};
use crate::tape::{NodeId, Tape};

/// Snapshot format revision.
pub const FORMAT_VERSION: u32 = 1;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Log-normal prior on a likelihood noise scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoisePrior {
    /// Mean of `ln sigma`.
    pub log_mean: f64,
    /// Standard deviation of `ln sigma`.
    pub log_sd: f64,
}

impl Default for NoisePrior {
    fn default() -> Self {
        NoisePrior { log_mean: 0.05f64.ln(), log_sd: 0.5 }
    }
}

impl NoisePrior {
    /// `ln p(sigma)` of the log-normal density.
    pub fn log_density(&self, sigma: f64) -> f64 {
        let z = (sigma.ln() - self.log_mean) / self.log_sd;
        -sigma.ln() - (self.log_sd * (2.0 * std::f64::consts::PI).sqrt()).ln() - 0.5 * z * z
    }
}

/// Decomposed single-estimate (or averaged) objective value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElboEstimate {
    pub value: f64,
    pub data_term: f64,
    pub assign_term: f64,
    pub kl_f: f64,
    pub kl_alpha: f64,
    pub log_prior: f64,
}

impl ElboEstimate {
    fn zero() -> Self {
        ElboEstimate {
            value: 0.0,
            data_term: 0.0,
            assign_term: 0.0,
            kl_f: 0.0,
            kl_alpha: 0.0,
            log_prior: 0.0,
        }
    }

    fn add(&mut self, other: &ElboEstimate) {
        self.value += other.value;
        self.data_term += other.data_term;
        self.assign_term += other.assign_term;
        self.kl_f += other.kl_f;
        self.kl_alpha += other.kl_alpha;
        self.log_prior += other.log_prior;
    }

    fn scale(&mut self, c: f64) {
        self.value *= c;
        self.data_term *= c;
        self.assign_term *= c;
        self.kl_f *= c;
        self.kl_alpha *= c;
        self.log_prior *= c;
    }
}

/// Pre-drawn noise for one Monte Carlo estimate of the objective.
///
/// Holding this fixed while parameters vary makes the estimator a
/// deterministic, differentiable function — which is what the gradient
/// checks and the pathwise gradients themselves require.
#[derive(Debug, Clone)]
pub struct ElboNoise {
    /// Standard normal draws per process, per layer: `B x P_layer`.
    pub process_eps: Vec<Vec<DenseMatrix>>,
    /// Standard normal draws for the assignment layer: `B x K`.
    pub alpha_eps: DenseMatrix,
    /// Standard Gumbel draws for the concrete relaxation: `B x K`.
    pub gumbels: DenseMatrix,
}

impl ElboNoise {
    /// Draw all noise for a batch of `batch_size` points.
    pub fn draw(model: &DagpModel, batch_size: usize, rng: &mut RngStream) -> Self {
        let process_eps = model
            .processes
            .iter()
            .map(|stack| {
                stack
                    .layers()
                    .iter()
                    .map(|layer| rng.std_normal_matrix(batch_size, layer.out_dim()))
                    .collect()
            })
            .collect();
        let k = model.num_components();
        let alpha_eps = rng.std_normal_matrix(batch_size, k);
        let mut gumbels = DenseMatrix::zeros(batch_size, k);
        for v in gumbels.data_mut() {
            *v = rng.next_gumbel();
        }
        ElboNoise { process_eps, alpha_eps, gumbels }
    }
}

/// Node handles for the objective and its reported components.
#[derive(Debug, Clone, Copy)]
pub struct ElboNodes {
    pub value: NodeId,
    pub data_term: NodeId,
    pub assign_term: NodeId,
    pub kl_f: NodeId,
    pub kl_alpha: NodeId,
    pub log_prior: NodeId,
}

/// Name-to-node mapping for every trainable leaf of an objective graph.
#[derive(Debug, Clone)]
pub struct ParamBinding {
    entries: Vec<(String, NodeId)>,
}

impl ParamBinding {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.entries.iter().map(|(n, id)| (n.as_str(), *id))
    }
}

/// All parameter leaves of one graph, grouped for the builder.
pub(crate) struct ModelNodes {
    processes: Vec<Vec<LayerNodes>>,
    alpha: LayerNodes,
    noise_raw: Vec<NodeId>,
    beliefs: NodeId,
}

/// Per-component predictive marginals plus mixture weights at a batch of
/// inputs. Variances are latent (noise-free); the stored noise scales are
/// added where observation-space densities are needed.
#[derive(Debug, Clone)]
pub struct MixturePrediction {
    /// Per component: `N x D_y` latent means.
    pub component_means: Vec<DenseMatrix>,
    /// Per component: `N x D_y` latent variances.
    pub component_variances: Vec<DenseMatrix>,
    /// `N x K` assignment weights (rows sum to one).
    pub weights: DenseMatrix,
    /// Likelihood noise scale per component.
    pub noise_sd: Vec<f64>,
}

impl MixturePrediction {
    pub fn num_points(&self) -> usize {
        self.weights.rows()
    }

    pub fn num_components(&self) -> usize {
        self.weights.cols()
    }

    /// Weight-averaged mean, `N x D_y`.
    pub fn mixture_mean(&self) -> DenseMatrix {
        let (n, d) = self.component_means[0].shape();
        DenseMatrix::from_fn(n, d, |i, j| {
            (0..self.num_components())
                .map(|k| self.weights.get(i, k) * self.component_means[k].get(i, j))
                .sum()
        })
    }

    /// Most probable component per point (ties to the lowest index).
    pub fn hard_weights(&self) -> Vec<usize> {
        (0..self.weights.rows()).map(|i| argmax(self.weights.row(i))).collect()
    }

    /// Log predictive density of observations under the full mixture,
    /// per point: `log sum_k w_k N(y | m_k, v_k + sigma_k^2)`.
    pub fn log_density(&self, y: &DenseMatrix) -> Result<Vec<f64>> {
        let (n, d) = self.component_means[0].shape();
        if y.shape() != (n, d) {
            return Err(Error::dims(
                "log_density",
                format!("y {:?} vs predictions {:?}", y.shape(), (n, d)),
            ));
        }
        Ok(crate::exec::map_indexed(n, n >= 512, |i| {
            let mut terms = Vec::with_capacity(self.num_components());
            for k in 0..self.num_components() {
                let w = self.weights.get(i, k).max(1e-300);
                terms.push(w.ln() + self.point_component_log_density(k, i, y));
            }
            log_sum_exp(&terms)
        }))
    }

    /// Log predictive density per point under a single component
    /// (observation space, weights ignored).
    pub fn component_log_density(&self, component: usize, y: &DenseMatrix) -> Result<Vec<f64>> {
        let (n, d) = self.component_means[0].shape();
        if y.shape() != (n, d) {
            return Err(Error::dims(
                "component_log_density",
                format!("y {:?} vs predictions {:?}", y.shape(), (n, d)),
            ));
        }
        if component >= self.num_components() {
            return Err(Error::InvalidConfig(format!(
                "component {component} out of range 0..{}",
                self.num_components()
            )));
        }
        Ok(crate::exec::map_indexed(n, n >= 512, |i| {
            self.point_component_log_density(component, i, y)
        }))
    }

    /// Like [`Self::component_log_density`], but under the latent
    /// function's marginal only — the likelihood noise is *not* added.
    /// This is the right density when the targets are noise-free
    /// function values rather than observations.
    pub fn component_latent_log_density(
        &self,
        component: usize,
        y: &DenseMatrix,
    ) -> Result<Vec<f64>> {
        let (n, d) = self.component_means[0].shape();
        if y.shape() != (n, d) {
            return Err(Error::dims(
                "component_latent_log_density",
                format!("y {:?} vs predictions {:?}", y.shape(), (n, d)),
            ));
        }
        if component >= self.num_components() {
            return Err(Error::InvalidConfig(format!(
                "component {component} out of range 0..{}",
                self.num_components()
            )));
        }
        Ok(crate::exec::map_indexed(n, n >= 512, |i| {
            self.point_log_density(component, i, y, 0.0)
        }))
    }

    fn point_component_log_density(&self, k: usize, i: usize, y: &DenseMatrix) -> f64 {
        self.point_log_density(k, i, y, self.noise_sd[k] * self.noise_sd[k])
    }

    fn point_log_density(&self, k: usize, i: usize, y: &DenseMatrix, noise_var: f64) -> f64 {
        let d = self.component_means[0].cols();
        let mut lp = 0.0;
        for j in 0..d {
            let var = self.component_variances[k].get(i, j) + noise_var;
            let resid = y.get(i, j) - self.component_means[k].get(i, j);
            lp += -0.5 * (LN_2PI + var.ln() + resid * resid / var);
        }
        lp
    }
}

/// Prediction-time sampling budgets.
#[derive(Debug, Clone, Copy)]
pub struct PredictOptions {
    /// Draws of the assignment processes for the weight estimate.
    pub weight_samples: usize,
    /// Draws through deep stacks for moment estimates (shallow stacks are
    /// analytic and ignore this).
    pub function_samples: usize,
}

impl Default for PredictOptions {
    fn default() -> Self {
        PredictOptions { weight_samples: 100, function_samples: 100 }
    }
}

/// Mixture of K latent processes with input-dependent assignments.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DagpModel {
    processes: Vec<GpStack>,
    alpha: SvgpLayer,
    noise_raw: Vec<f64>,
    noise_priors: Vec<Option<NoisePrior>>,
    beliefs: AssignmentBelief,
    n_train: usize,
}

impl DagpModel {
    /// Assemble a model. `noise_sd` holds the initial likelihood noise
    /// scale of each process; `n_train` fixes the belief table size and
    /// the minibatch scaling.
    pub fn new(
        processes: Vec<GpStack>,
        alpha: SvgpLayer,
        noise_sd: &[f64],
        beliefs: AssignmentBelief,
        n_train: usize,
    ) -> Result<Self> {
        let k = processes.len();
        if k == 0 {
            return Err(Error::InvalidConfig("need at least one process".to_string()));
        }
        if alpha.out_dim() != k || noise_sd.len() != k || beliefs.num_components() != k {
            return Err(Error::InvalidConfig(format!(
                "component counts disagree: {k} processes, alpha {}, noises {}, beliefs {}",
                alpha.out_dim(),
                noise_sd.len(),
                beliefs.num_components()
            )));
        }
        if beliefs.len() != n_train {
            return Err(Error::LengthMismatch {
                op: "beliefs",
                left: beliefs.len(),
                right: n_train,
            });
        }
        let in_dim = processes[0].in_dim();
        let out_dim = processes[0].out_dim();
        for stack in &processes {
            if stack.in_dim() != in_dim || stack.out_dim() != out_dim {
                return Err(Error::InvalidConfig(
                    "all processes must share input and output dimensions".to_string(),
                ));
            }
        }
        if alpha.in_dim() != in_dim {
            return Err(Error::dims(
                "alpha layer",
                format!("input dim {} vs process dim {in_dim}", alpha.in_dim()),
            ));
        }
        if let Some(s) = noise_sd.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(Error::InvalidConfig(format!("noise scale must be positive, got {s}")));
        }
        Ok(DagpModel {
            noise_raw: noise_sd.iter().map(|s| positive_transform_inverse(*s)).collect(),
            noise_priors: vec![None; k],
            processes,
            alpha,
            beliefs,
            n_train,
        })
    }

    pub fn num_components(&self) -> usize {
        self.processes.len()
    }

    pub fn in_dim(&self) -> usize {
        self.processes[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.processes[0].out_dim()
    }

    pub fn n_train(&self) -> usize {
        self.n_train
    }

    pub fn processes(&self) -> &[GpStack] {
        &self.processes
    }

    pub fn processes_mut(&mut self) -> &mut [GpStack] {
        &mut self.processes
    }

    pub fn alpha_layer(&self) -> &SvgpLayer {
        &self.alpha
    }

    pub fn beliefs(&self) -> &AssignmentBelief {
        &self.beliefs
    }

    /// Likelihood noise scale of one process.
    pub fn noise_sd(&self, component: usize) -> f64 {
        positive_transform(self.noise_raw[component])
    }

    /// Attach (or remove) a log-normal prior on one process's noise.
    pub fn set_noise_prior(&mut self, component: usize, prior: Option<NoisePrior>) -> Result<()> {
        if component >= self.num_components() {
            return Err(Error::InvalidConfig(format!(
                "component {component} out of range 0..{}",
                self.num_components()
            )));
        }
        self.noise_priors[component] = prior;
        Ok(())
    }

    pub fn noise_prior(&self, component: usize) -> Option<&NoisePrior> {
        self.noise_priors[component].as_ref()
    }

    /// Most probable component per training point.
    pub fn hard_assignments(&self) -> Vec<usize> {
        self.beliefs.hard_assignments()
    }

    /// Create leaves for every trainable parameter and record their names.
    pub(crate) fn bind(&self, tape: &mut Tape, trainable: bool) -> (ModelNodes, ParamBinding) {
        let mut entries = Vec::new();
        let mut mk = |tape: &mut Tape, name: String, value: DenseMatrix| -> NodeId {
            let id = if trainable { tape.leaf(value) } else { tape.constant(value) };
            entries.push((name, id));
            id
        };
        let mut bind_layer = |tape: &mut Tape, prefix: &str, layer: &SvgpLayer| -> LayerNodes {
            let mut by_field: Vec<(&'static str, NodeId)> = Vec::new();
            for (field, value) in layer.raw_parameters() {
                let id = mk(tape, format!("{prefix}.{field}"), value);
                by_field.push((field, id));
            }
            let get = |f: &str| {
                by_field
                    .iter()
                    .find(|(name, _)| *name == f)
                    .map(|(_, id)| *id)
                    .expect("field bound")
            };
            let kernel = match layer.kernel() {
                KernelSpec::SquaredExponential { .. } => KernelNodes::SquaredExponential {
                    variance_raw: get("kern_variance_raw"),
                    lengthscales_raw: get("kern_lengthscales_raw"),
                },
                KernelSpec::White { .. } => {
                    KernelNodes::White { variance_raw: get("kern_variance_raw") }
                }
            };
            LayerNodes {
                z: get("z"),
                m: get("m"),
                s_strict: get("s_strict"),
                s_diag_raw: get("s_diag_raw"),
                kernel,
            }
        };
        let processes: Vec<Vec<LayerNodes>> = self
            .processes
            .iter()
            .enumerate()
            .map(|(k, stack)| {
                stack
                    .layers()
                    .iter()
                    .enumerate()
                    .map(|(l, layer)| bind_layer(tape, &format!("f{k}.l{l}"), layer))
                    .collect()
            })
            .collect();
        let alpha = bind_layer(tape, "alpha", &self.alpha);
        let noise_raw: Vec<NodeId> = self
            .noise_raw
            .iter()
            .enumerate()
            .map(|(k, raw)| {
                mk(
                    tape,
                    format!("noise_raw.{k}"),
                    DenseMatrix::from_vec(1, 1, vec![*raw]).expect("1x1"),
                )
            })
            .collect();
        let beliefs = mk(tape, "beliefs".to_string(), self.beliefs.logits().clone());
        (ModelNodes { processes, alpha, noise_raw, beliefs }, ParamBinding { entries })
    }

    /// Build one Monte Carlo estimate of the objective on `tape`.
    pub(crate) fn build_elbo(
        &self,
        tape: &mut Tape,
        nodes: &ModelNodes,
        x: &DenseMatrix,
        y: &DenseMatrix,
        indices: &[usize],
        temperature: f64,
        noise: &ElboNoise,
    ) -> Result<ElboNodes> {
        let b = x.rows();
        if y.rows() != b || indices.len() != b {
            return Err(Error::dims(
                "build_elbo",
                format!("x {b} rows, y {} rows, {} indices", y.rows(), indices.len()),
            ));
        }
        if x.cols() != self.in_dim() || y.cols() != self.out_dim() {
            return Err(Error::dims(
                "build_elbo",
                format!(
                    "batch dims ({}, {}) vs model dims ({}, {})",
                    x.cols(),
                    y.cols(),
                    self.in_dim(),
                    self.out_dim()
                ),
            ));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.n_train) {
            return Err(Error::InvalidConfig(format!(
                "batch index {bad} out of range for {} training points",
                self.n_train
            )));
        }
        if !(temperature.is_finite() && temperature > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        let k_comp = self.num_components();
        let d_out = self.out_dim() as f64;
        let x_node = tape.constant(x.clone());
        let y_node = tape.constant(y.clone());

        // Latent function samples and KL per process.
        let mut kl_f: Option<NodeId> = None;
        let mut log_liks: Vec<NodeId> = Vec::with_capacity(k_comp);
        let mut sigma_nodes: Vec<NodeId> = Vec::with_capacity(k_comp);
        for (k, stack) in self.processes.iter().enumerate() {
            let mut current = x_node;
            for (l, layer) in stack.layers().iter().enumerate() {
                let graph =
                    build_layer(tape, &nodes.processes[k][l], layer.mean_spec(), current, layer.out_dim())?;
                let eps = tape.constant(noise.process_eps[k][l].clone());
                current = sample_nodes(tape, &graph.marginal, eps)?;
                kl_f = Some(match kl_f {
                    Some(acc) => tape.add(acc, graph.kl)?,
                    None => graph.kl,
                });
            }
            // log N(y | f_k, sigma_k^2), one row per batch point.
            let sigma = tape.softplus(nodes.noise_raw[k]);
            sigma_nodes.push(sigma);
            let resid = tape.sub(y_node, current)?;
            let sq = tape.square(resid);
            let row_sq = tape.row_sum(sq);
            let var = tape.square(sigma);
            let inv_var = tape.recip(var);
            let neg_half_inv = tape.scale_const(inv_var, -0.5);
            let quad = tape.scale_by_scalar(row_sq, neg_half_inv)?;
            let ln_sigma = tape.ln(sigma);
            let neg_ln_sigma = tape.scale_const(ln_sigma, -d_out);
            let with_ln = tape.add_scalar(quad, neg_ln_sigma)?;
            let ll = tape.add_const(with_ln, -0.5 * d_out * LN_2PI);
            log_liks.push(ll);
        }
        let kl_f = kl_f.expect("at least one process");

        // Assignment-process sample and its log-softmax.
        let alpha_graph = build_layer(tape, &nodes.alpha, self.alpha.mean_spec(), x_node, k_comp)?;
        let alpha_eps = tape.constant(noise.alpha_eps.clone());
        let alpha_hat = sample_nodes(tape, &alpha_graph.marginal, alpha_eps)?;
        let log_sm_alpha = tape.log_softmax_rows(alpha_hat);

        // Concrete relaxation of the per-point beliefs.
        let batch_logits = tape.gather_rows(nodes.beliefs, indices)?;
        let gumbels = tape.constant(noise.gumbels.clone());
        let perturbed = tape.add(batch_logits, gumbels)?;
        let sharpened = tape.scale_const(perturbed, 1.0 / temperature);
        let a_hat = tape.softmax_rows(sharpened);

        // Pointwise data term: sum_k a_nk ll_nk.
        let mut data_pt: Option<NodeId> = None;
        for (k, ll) in log_liks.iter().enumerate() {
            let a_col = tape.slice_col(a_hat, k)?;
            let contrib = tape.hadamard(a_col, *ll)?;
            data_pt = Some(match data_pt {
                Some(acc) => tape.add(acc, contrib)?,
                None => contrib,
            });
        }
        let data_pt = data_pt.expect("at least one process");
        // Pointwise assignment term: sum_k a_nk log softmax(alpha_n)_k.
        let assign_prod = tape.hadamard(a_hat, log_sm_alpha)?;
        let assign_pt = tape.row_sum(assign_prod);

        let scale = self.n_train as f64 / b as f64;
        let data_sum = tape.sum(data_pt);
        let data_term = tape.scale_const(data_sum, scale);
        let assign_sum = tape.sum(assign_pt);
        let assign_term = tape.scale_const(assign_sum, scale);

        // Optional log-normal noise priors.
        let mut log_prior: Option<NodeId> = None;
        for (k, prior) in self.noise_priors.iter().enumerate() {
            let Some(prior) = prior else { continue };
            let ln_sigma = tape.ln(sigma_nodes[k]);
            let centered = tape.add_const(ln_sigma, -prior.log_mean);
            let sq = tape.square(centered);
            let quad = tape.scale_const(sq, -0.5 / (prior.log_sd * prior.log_sd));
            let neg_ln = tape.scale_const(ln_sigma, -1.0);
            let partial = tape.add(quad, neg_ln)?;
            let c = -(prior.log_sd * (2.0 * std::f64::consts::PI).sqrt()).ln();
            let term = tape.add_const(partial, c);
            log_prior = Some(match log_prior {
                Some(acc) => tape.add(acc, term)?,
                None => term,
            });
        }
        let log_prior = match log_prior {
            Some(id) => id,
            None => tape.scalar_constant(0.0),
        };

        let kl_alpha = alpha_graph.kl;
        let bound_parts = tape.add(data_term, assign_term)?;
        let neg_kl_f = tape.scale_const(kl_f, -1.0);
        let neg_kl_a = tape.scale_const(kl_alpha, -1.0);
        let partial = tape.add(bound_parts, neg_kl_f)?;
        let partial = tape.add(partial, neg_kl_a)?;
        let value = tape.add(partial, log_prior)?;

        Ok(ElboNodes { value, data_term, assign_term, kl_f, kl_alpha, log_prior })
    }

    /// Trainable objective graph: leaves for every parameter plus the
    /// estimate nodes, ready for one backward sweep.
    pub fn elbo_training_graph(
        &self,
        tape: &mut Tape,
        x: &DenseMatrix,
        y: &DenseMatrix,
        indices: &[usize],
        temperature: f64,
        noise: &ElboNoise,
    ) -> Result<(ElboNodes, ParamBinding)> {
        let (nodes, binding) = self.bind(tape, true);
        let elbo = self.build_elbo(tape, &nodes, x, y, indices, temperature, noise)?;
        Ok((elbo, binding))
    }

    /// Evaluate one estimate with the given fixed noise.
    pub fn elbo_with_noise(
        &self,
        x: &DenseMatrix,
        y: &DenseMatrix,
        indices: &[usize],
        temperature: f64,
        noise: &ElboNoise,
    ) -> Result<ElboEstimate> {
        let mut tape = Tape::new();
        let (nodes, _) = self.bind(&mut tape, false);
        let elbo = self.build_elbo(&mut tape, &nodes, x, y, indices, temperature, noise)?;
        Ok(ElboEstimate {
            value: tape.scalar(elbo.value),
            data_term: tape.scalar(elbo.data_term),
            assign_term: tape.scalar(elbo.assign_term),
            kl_f: tape.scalar(elbo.kl_f),
            kl_alpha: tape.scalar(elbo.kl_alpha),
            log_prior: tape.scalar(elbo.log_prior),
        })
    }

    /// Monte Carlo objective estimate averaged over `n_samples` fresh
    /// noise draws.
    pub fn elbo(
        &self,
        x: &DenseMatrix,
        y: &DenseMatrix,
        indices: &[usize],
        temperature: f64,
        n_samples: usize,
        rng: &mut RngStream,
    ) -> Result<ElboEstimate> {
        if n_samples == 0 {
            return Err(Error::InvalidConfig("need at least one objective sample".to_string()));
        }
        let mut acc = ElboEstimate::zero();
        for _ in 0..n_samples {
            let noise = ElboNoise::draw(self, x.rows(), rng);
            let est = self.elbo_with_noise(x, y, indices, temperature, &noise)?;
            acc.add(&est);
        }
        acc.scale(1.0 / n_samples as f64);
        Ok(acc)
    }

    /// Predictive mixture at a batch of inputs.
    pub fn predict_mixture(
        &self,
        x: &DenseMatrix,
        opts: PredictOptions,
        rng: &mut RngStream,
    ) -> Result<MixturePrediction> {
        if x.cols() != self.in_dim() {
            return Err(Error::dims(
                "predict_mixture",
                format!("input dim {} vs model dim {}", x.cols(), self.in_dim()),
            ));
        }
        let n = x.rows();
        let d = self.out_dim();
        let mut component_means = Vec::with_capacity(self.num_components());
        let mut component_variances = Vec::with_capacity(self.num_components());
        for stack in &self.processes {
            if let Some(marg) = stack.shallow_marginal(x)? {
                let var = DenseMatrix::from_fn(n, d, |i, _| marg.variance[i]);
                component_means.push(marg.mean);
                component_variances.push(var);
            } else {
                if opts.function_samples < 2 {
                    return Err(Error::InvalidConfig(
                        "deep stacks need at least two prediction samples".to_string(),
                    ));
                }
                // Moment-match the deep marginal from samples.
                let s = opts.function_samples;
                let mut sum = DenseMatrix::zeros(n, d);
                let mut sum_sq = DenseMatrix::zeros(n, d);
                for _ in 0..s {
                    let draw = stack.sample_through(x, rng)?;
                    for (i, v) in draw.data().iter().enumerate() {
                        sum.data_mut()[i] += v;
                        sum_sq.data_mut()[i] += v * v;
                    }
                }
                let mean = sum.scale(1.0 / s as f64);
                let var = DenseMatrix::from_fn(n, d, |i, j| {
                    let m = mean.get(i, j);
                    let raw = sum_sq.get(i, j) / s as f64 - m * m;
                    (raw * s as f64 / (s as f64 - 1.0)).max(crate::gp::VARIANCE_FLOOR)
                });
                component_means.push(mean);
                component_variances.push(var);
            }
        }
        let weights = crate::assignment::predict_assignment_weights(
            &self.alpha,
            x,
            opts.weight_samples,
            rng,
        )?;
        let noise_sd = (0..self.num_components()).map(|k| self.noise_sd(k)).collect();
        Ok(MixturePrediction { component_means, component_variances, weights, noise_sd })
    }

    /// Raw-space values of every trainable parameter, in binding order.
    pub fn raw_parameters(&self) -> Vec<(String, DenseMatrix)> {
        let mut tape = Tape::new();
        let (_, binding) = self.bind(&mut tape, false);
        binding
            .iter()
            .map(|(name, id)| (name.to_string(), tape.value(id).clone()))
            .collect()
    }

    /// Write one raw-space parameter back by its bound name.
    pub fn set_raw_parameter(&mut self, name: &str, value: &DenseMatrix) -> Result<()> {
        if name == "beliefs" {
            if value.shape() != self.beliefs.logits().shape() {
                return Err(Error::dims(
                    "set_raw_parameter",
                    format!("beliefs {:?} vs {:?}", value.shape(), self.beliefs.logits().shape()),
                ));
            }
            *self.beliefs.logits_mut() = value.clone();
            return Ok(());
        }
        if let Some(rest) = name.strip_prefix("noise_raw.") {
            let k: usize = rest
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("bad parameter name `{name}`")))?;
            if k >= self.noise_raw.len() || value.shape() != (1, 1) {
                return Err(Error::InvalidConfig(format!("bad noise parameter `{name}`")));
            }
            self.noise_raw[k] = value.get(0, 0);
            return Ok(());
        }
        if let Some(rest) = name.strip_prefix("alpha.") {
            return self.alpha.set_raw_parameter(rest, value);
        }
        if let Some(rest) = name.strip_prefix('f') {
            let (k_str, tail) = rest
                .split_once(".l")
                .ok_or_else(|| Error::InvalidConfig(format!("bad parameter name `{name}`")))?;
            let (l_str, field) = tail
                .split_once('.')
                .ok_or_else(|| Error::InvalidConfig(format!("bad parameter name `{name}`")))?;
            let k: usize = k_str
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("bad parameter name `{name}`")))?;
            let l: usize = l_str
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("bad parameter name `{name}`")))?;
            let stack = self
                .processes
                .get_mut(k)
                .ok_or_else(|| Error::InvalidConfig(format!("no process {k}")))?;
            let layer = stack
                .layers_mut()
                .get_mut(l)
                .ok_or_else(|| Error::InvalidConfig(format!("no layer {l} in process {k}")))?;
            return layer.set_raw_parameter(field, value);
        }
        Err(Error::InvalidConfig(format!("unknown parameter `{name}`")))
    }
}

/// Serializable training artifact: the model plus everything needed to
/// reproduce predictions (seed and the target shift applied before
/// training).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Snapshot {
    pub format_version: u32,
    pub seed: u64,
    /// Shift subtracted from each target dimension before training; added
    /// back onto predictive means.
    pub y_shift: Vec<f64>,
    pub model: DagpModel,
}

impl Snapshot {
    pub fn new(model: DagpModel, seed: u64, y_shift: Vec<f64>) -> Self {
        Snapshot { format_version: FORMAT_VERSION, seed, y_shift, model }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| Error::InvalidConfig(format!("snapshot serialization failed: {e}")))
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let snap: Snapshot = serde_json::from_str(json)
            .map_err(|e| Error::InvalidConfig(format!("snapshot parse failed: {e}")))?;
        if snap.format_version != FORMAT_VERSION {
            return Err(Error::InvalidConfig(format!(
                "snapshot format {} unsupported (expected {FORMAT_VERSION})",
                snap.format_version
            )));
        }
        Ok(snap)
    }

    /// Write atomically (temp file + rename) next to the target path.
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = self.to_json()?;
        let tmp = path.with_extension("json.tmp");
        let io_err = |e: std::io::Error| Error::InvalidConfig(format!("snapshot write failed: {e}"));
        let mut f = std::fs::File::create(&tmp).map_err(io_err)?;
        f.write_all(json.as_bytes()).map_err(io_err)?;
        f.sync_all().map_err(io_err)?;
        std::fs::rename(&tmp, path).map_err(io_err)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let json = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidConfig(format!("snapshot read failed: {e}")))?;
        Snapshot::from_json(&json)
    }
}
