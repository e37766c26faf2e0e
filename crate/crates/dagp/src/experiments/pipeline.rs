//! End-to-end experiment pipelines shared by the command-line runner and
//! the acceptance tests.
//!
//! A pipeline run generates (or loads) data, centers the targets, builds
//! a model from [`ModelParams`], trains it, and writes four artifacts
//! into the output directory: `metrics.json`, `predictions.csv`,
//! `trace.csv`, and `snapshot.json`. All randomness is derived from the
//! experiment seed through fixed stream ids, so identical configurations
//! produce byte-identical metrics, predictions, and snapshots.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::cartpole::{gen_cartpole, CartpoleConfig};
use super::generators::{choicenet_signal, gen_choicenet, gen_semibimodal, SemiBimodalConfig};
use super::metrics::{assignment_mass, match_components_to_labels, mll, rmse, MllSummary};
use super::{linspace, Dataset};
use crate::assignment::AssignmentBelief;
use crate::error::{Error, Result};
use crate::gp::{GpStack, SvgpLayer};
use crate::kernels::{KernelSpec, MeanFunctionSpec};
use crate::math::{DenseMatrix, RngStream};
use crate::model::{DagpModel, MixturePrediction, NoisePrior, PredictOptions, Snapshot};
use crate::train::{train, TraceRow, TrainConfig};

// Random-stream ids per purpose, all derived from the experiment seed.
const TRAIN_DATA_STREAM: u64 = 11;
const TEST_DATA_STREAM: u64 = 12;
const INIT_STREAM: u64 = 13;
const TRAIN_STREAM: u64 = 14;
const EVAL_STREAM: u64 = 15;
// Second-system cart-pole data.
const TRAIN_DATA_B_STREAM: u64 = 16;
const TEST_DATA_B_STREAM: u64 = 17;
// Baseline models: mixed, then one per system.
const BASELINE_STREAM_BASE: u64 = 30;

/// Model structure and initialization choices.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelParams {
    /// Number of latent processes K.
    pub num_processes: usize,
    /// Inducing points per GP.
    pub num_inducing: usize,
    /// GP layers per process (1 = shallow).
    pub layers: usize,
    /// Kernel per process: either one entry shared by all processes or
    /// exactly one per process. Known kinds: `"se"`, `"white"`.
    pub kernels: Vec<String>,
    /// Initial kernel variance.
    pub kernel_variance: f64,
    /// Initial lengthscale for the latent processes. With
    /// `ard_from_data` this multiplies the per-dimension input standard
    /// deviation instead of being used directly.
    pub lengthscale: f64,
    /// Initial lengthscale for the assignment processes (same
    /// `ard_from_data` treatment).
    pub alpha_lengthscale: f64,
    /// Scale per-dimension lengthscales by the input standard deviations.
    pub ard_from_data: bool,
    /// Initial likelihood noise scale for every process.
    pub noise_sd: f64,
    /// Attach the log-normal noise prior to this process.
    pub noise_prior_process: Option<usize>,
    pub noise_prior_log_mean: f64,
    pub noise_prior_log_sd: f64,
    /// Scale the initial variational covariance factor (low values are
    /// the customary initialization for deep stacks).
    pub covariance_scale: Option<f64>,
    /// Spread of the random initial belief logits.
    pub belief_scale: f64,
}

impl Default for ModelParams {
    fn default() -> Self {
        ModelParams {
            num_processes: 2,
            num_inducing: 25,
            layers: 1,
            kernels: vec!["se".to_string()],
            kernel_variance: 1.0,
            lengthscale: 1.0,
            alpha_lengthscale: 1.0,
            ard_from_data: false,
            noise_sd: 0.1,
            noise_prior_process: None,
            noise_prior_log_mean: -2.995732273553991, // ln 0.05
            noise_prior_log_sd: 0.5,
            covariance_scale: None,
            belief_scale: 0.01,
        }
    }
}

impl ModelParams {
    fn validate(&self) -> Result<()> {
        if self.num_processes == 0 || self.num_inducing == 0 || self.layers == 0 {
            return Err(Error::InvalidConfig(
                "process, inducing, and layer counts must be positive".to_string(),
            ));
        }
        if self.kernels.is_empty()
            || (self.kernels.len() != 1 && self.kernels.len() != self.num_processes)
        {
            return Err(Error::InvalidConfig(format!(
                "need one kernel or one per process ({}), got {}",
                self.num_processes,
                self.kernels.len()
            )));
        }
        for name in &self.kernels {
            if name != "se" && name != "white" {
                return Err(Error::InvalidConfig(format!("unknown kernel kind `{name}`")));
            }
            if name == "white" && self.layers > 1 {
                return Err(Error::InvalidConfig(
                    "white kernels are only supported in shallow processes".to_string(),
                ));
            }
        }
        for (name, v) in [
            ("kernel_variance", self.kernel_variance),
            ("lengthscale", self.lengthscale),
            ("alpha_lengthscale", self.alpha_lengthscale),
            ("noise_sd", self.noise_sd),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        if let Some(p) = self.noise_prior_process {
            if p >= self.num_processes {
                return Err(Error::InvalidConfig(format!(
                    "noise prior process {p} out of range 0..{}",
                    self.num_processes
                )));
            }
        }
        if let Some(s) = self.covariance_scale {
            if !(s.is_finite() && s > 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "covariance_scale must be positive, got {s}"
                )));
            }
        }
        if !(self.belief_scale.is_finite() && self.belief_scale >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "belief_scale must be nonnegative, got {}",
                self.belief_scale
            )));
        }
        Ok(())
    }

    fn kernel_kind(&self, process: usize) -> &str {
        if self.kernels.len() == 1 { &self.kernels[0] } else { &self.kernels[process] }
    }
}

/// Per-dimension lengthscale initialization.
fn initial_lengthscales(x: &DenseMatrix, base: f64, ard_from_data: bool) -> Vec<f64> {
    let d = x.cols();
    if !ard_from_data {
        return vec![base; d];
    }
    let n = x.rows() as f64;
    (0..d)
        .map(|j| {
            let mean: f64 = (0..x.rows()).map(|i| x.get(i, j)).sum::<f64>() / n;
            let var: f64 =
                (0..x.rows()).map(|i| (x.get(i, j) - mean).powi(2)).sum::<f64>() / n;
            (base * var.sqrt()).max(1e-2)
        })
        .collect()
}

/// Assemble an untrained model on the given training inputs.
pub fn build_model(
    x: &DenseMatrix,
    out_dim: usize,
    params: &ModelParams,
    rng: &mut RngStream,
) -> Result<DagpModel> {
    params.validate()?;
    let n = x.rows();
    let d = x.cols();
    if n == 0 || out_dim == 0 {
        return Err(Error::InvalidConfig("need data and a positive output dimension".to_string()));
    }
    let f_lengthscales = initial_lengthscales(x, params.lengthscale, params.ard_from_data);
    let alpha_lengthscales =
        initial_lengthscales(x, params.alpha_lengthscale, params.ard_from_data);
    let k = params.num_processes;
    let mut processes = Vec::with_capacity(k);
    for process in 0..k {
        let mut layers = Vec::with_capacity(params.layers);
        for layer_idx in 0..params.layers {
            let last = layer_idx + 1 == params.layers;
            let layer_out = if last { out_dim } else { d };
            let kernel = match params.kernel_kind(process) {
                "se" => KernelSpec::SquaredExponential {
                    variance: params.kernel_variance,
                    lengthscales: f_lengthscales.clone(),
                },
                _ => KernelSpec::White { variance: params.kernel_variance },
            };
            let mean = if last { MeanFunctionSpec::Zero } else { MeanFunctionSpec::Identity };
            let mut layer =
                SvgpLayer::init_from_inputs(kernel, mean, x, params.num_inducing, layer_out, rng)?;
            if let Some(scale) = params.covariance_scale {
                layer.set_covariance_scale(scale)?;
            }
            layers.push(layer);
        }
        processes.push(GpStack::new(layers)?);
    }
    let alpha_kernel = KernelSpec::SquaredExponential {
        variance: params.kernel_variance,
        lengthscales: alpha_lengthscales,
    };
    let alpha =
        SvgpLayer::init_from_inputs(alpha_kernel, MeanFunctionSpec::Zero, x, params.num_inducing, k, rng)?;
    let beliefs = AssignmentBelief::new_random(n, k, params.belief_scale, rng)?;
    let mut model = DagpModel::new(processes, alpha, &vec![params.noise_sd; k], beliefs, n)?;
    if let Some(p) = params.noise_prior_process {
        model.set_noise_prior(
            p,
            Some(NoisePrior {
                log_mean: params.noise_prior_log_mean,
                log_sd: params.noise_prior_log_sd,
            }),
        )?;
    }
    Ok(model)
}

/// A plain sparse-GP regressor: the K = 1 special case of the model,
/// trained by the same loop. Returns the model, the target shift, and
/// the training trace.
pub fn baseline_gpr(
    data: &Dataset,
    params: &ModelParams,
    train_config: &TrainConfig,
    seed: u64,
    stream_base: u64,
) -> Result<(DagpModel, Vec<f64>, Vec<TraceRow>)> {
    let mut params = params.clone();
    params.num_processes = 1;
    params.kernels = vec!["se".to_string()];
    params.noise_prior_process = None;
    let (y_centered, y_shift) = center_targets(&data.y);
    let mut init_rng = RngStream::new(seed, stream_base);
    let mut model = build_model(&data.x, data.output_dim(), &params, &mut init_rng)?;
    let mut train_rng = RngStream::new(seed, stream_base + 1);
    let trace = train(&mut model, &data.x, &y_centered, train_config, &mut train_rng)?;
    Ok((model, y_shift, trace))
}

fn center_targets(y: &DenseMatrix) -> (DenseMatrix, Vec<f64>) {
    let n = y.rows() as f64;
    let shift: Vec<f64> =
        (0..y.cols()).map(|j| (0..y.rows()).map(|i| y.get(i, j)).sum::<f64>() / n).collect();
    let centered = DenseMatrix::from_fn(y.rows(), y.cols(), |i, j| y.get(i, j) - shift[j]);
    (centered, shift)
}

/// Predict at `x` and shift the component means back into the original
/// target space. Deterministic given the seed.
fn predict_original(
    model: &DagpModel,
    x: &DenseMatrix,
    y_shift: &[f64],
    seed: u64,
) -> Result<MixturePrediction> {
    let mut rng = RngStream::new(seed, EVAL_STREAM);
    let mut pred = model.predict_mixture(x, PredictOptions::default(), &mut rng)?;
    for mean in &mut pred.component_means {
        for j in 0..mean.cols() {
            for i in 0..mean.rows() {
                mean.set(i, j, mean.get(i, j) + y_shift[j]);
            }
        }
    }
    Ok(pred)
}

/// Noise-separation experiment parameters.
#[derive(Debug, Clone)]
pub struct ChoicenetParams {
    pub seed: u64,
    pub outlier_rate: f64,
    pub n_train: usize,
    /// Size of the equally spaced noise-free test grid on `[-3, 3]`.
    pub n_test: usize,
    pub model: ModelParams,
    pub train: TrainConfig,
}

impl ChoicenetParams {
    /// The benchmark setup: 1000 points, two processes (smooth signal
    /// plus white noise), 25 inducing points, noise prior on the signal
    /// process.
    pub fn new(outlier_rate: f64) -> Self {
        ChoicenetParams {
            seed: 0,
            outlier_rate,
            n_train: 1000,
            n_test: 1000,
            model: ModelParams {
                num_processes: 2,
                num_inducing: 25,
                kernels: vec!["se".to_string(), "white".to_string()],
                noise_prior_process: Some(0),
                noise_sd: 0.2,
                lengthscale: 0.5,
                ..ModelParams::default()
            },
            // Full batches: at high outlier rates minibatch gradient noise
            // keeps the signal fit from settling, and N = 1000 is cheap
            // enough to use every point each step.
            train: TrainConfig {
                steps: 20_000,
                batch_size: 1_000,
                log_every: 50,
                ..TrainConfig::default()
            },
        }
    }
}

/// Multimodal-structure experiment parameters.
#[derive(Debug, Clone)]
pub struct SemiBimodalParams {
    pub seed: u64,
    pub n_train: usize,
    pub data: SemiBimodalConfig,
    pub model: ModelParams,
    pub train: TrainConfig,
}

impl SemiBimodalParams {
    /// The benchmark setup: 350 points, four processes, 25 inducing
    /// points, squared exponential kernels everywhere.
    pub fn new() -> Self {
        SemiBimodalParams {
            seed: 0,
            n_train: 350,
            data: SemiBimodalConfig::default(),
            model: ModelParams {
                num_processes: 4,
                num_inducing: 25,
                noise_sd: 0.1,
                ..ModelParams::default()
            },
            // The branch structure needs the long tail of the schedule:
            // with fewer steps two nearby branches stay merged under one
            // inflated-noise process.
            train: TrainConfig {
                steps: 30_000,
                log_every: 50,
                ..TrainConfig::default()
            },
        }
    }
}

impl Default for SemiBimodalParams {
    fn default() -> Self {
        SemiBimodalParams::new()
    }
}

/// Mixed cart-pole experiment parameters.
#[derive(Debug, Clone)]
pub struct CartpoleParams {
    pub seed: u64,
    pub n_train_per_system: usize,
    pub n_test_per_system: usize,
    pub model: ModelParams,
    pub train: TrainConfig,
    /// Also train the plain-GP baselines (mixed and one per system).
    pub with_baselines: bool,
}

impl CartpoleParams {
    /// The benchmark setup: 500 training points per system, two
    /// processes, 100 inducing points, data-scaled lengthscales.
    pub fn new() -> Self {
        CartpoleParams {
            seed: 0,
            n_train_per_system: 500,
            n_test_per_system: 5000,
            model: ModelParams {
                num_processes: 2,
                num_inducing: 100,
                ard_from_data: true,
                noise_sd: 0.1,
                ..ModelParams::default()
            },
            train: TrainConfig {
                steps: 8_000,
                log_every: 50,
                ..TrainConfig::default()
            },
            with_baselines: true,
        }
    }
}

impl Default for CartpoleParams {
    fn default() -> Self {
        CartpoleParams::new()
    }
}

/// Model fitting on user-provided CSV data.
#[derive(Debug, Clone)]
pub struct CustomCsvParams {
    pub seed: u64,
    pub train_csv: PathBuf,
    pub test_csv: Option<PathBuf>,
    pub model: ModelParams,
    pub train: TrainConfig,
}

/// One fully specified experiment.
#[derive(Debug, Clone)]
pub enum ExperimentConfig {
    Choicenet(ChoicenetParams),
    SemiBimodal(SemiBimodalParams),
    Cartpole(CartpoleParams),
    CustomCsv(CustomCsvParams),
}

impl ExperimentConfig {
    pub fn name(&self) -> &'static str {
        match self {
            ExperimentConfig::Choicenet(_) => "choicenet",
            ExperimentConfig::SemiBimodal(_) => "semibimodal",
            ExperimentConfig::Cartpole(_) => "cartpole",
            ExperimentConfig::CustomCsv(_) => "custom_csv",
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            ExperimentConfig::Choicenet(p) => p.seed,
            ExperimentConfig::SemiBimodal(p) => p.seed,
            ExperimentConfig::Cartpole(p) => p.seed,
            ExperimentConfig::CustomCsv(p) => p.seed,
        }
    }

    pub fn set_seed(&mut self, seed: u64) {
        match self {
            ExperimentConfig::Choicenet(p) => p.seed = seed,
            ExperimentConfig::SemiBimodal(p) => p.seed = seed,
            ExperimentConfig::Cartpole(p) => p.seed = seed,
            ExperimentConfig::CustomCsv(p) => p.seed = seed,
        }
    }
}

/// Signal-recovery metrics of the noise-separation experiment. The
/// signal process is the one with the smaller fitted likelihood noise;
/// its latent density is the headline number because the test targets
/// are noise-free function values.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChoicenetMetrics {
    pub signal_component: usize,
    pub rmse_signal: f64,
    pub mll_signal_latent: MllSummary,
    pub mll_signal_observed: MllSummary,
    pub mll_mixture: MllSummary,
}

/// Structure-recovery metrics of the multimodal experiment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MultimodalMetrics {
    /// Per-component share of the soft training assignments.
    pub mass_fractions: Vec<f64>,
    pub min_mass_fraction: f64,
    /// Average predictive weights on the bimodal region
    /// `[-2pi, 0) U (5, 2pi]`.
    pub bimodal_region_weights: Vec<f64>,
    /// Largest over second-largest bimodal-region weight.
    pub bimodal_dominance_ratio: f64,
    /// Average predictive weights on the trimodal region `[0.5, 4.5]`.
    pub trimodal_region_weights: Vec<f64>,
    /// The three largest trimodal-region weights, descending.
    pub trimodal_top3: [f64; 3],
}

/// Sub-model transfer metrics for one system of the cart-pole
/// experiment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubmodelMetrics {
    pub system: usize,
    pub component: usize,
    /// Single-component MLL on the matched system's test set.
    pub mll_matched: MllSummary,
    /// The same component evaluated on the other system's test set.
    pub mll_mismatched: MllSummary,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CartpoleMetrics {
    /// Component index serving each system, matched by training
    /// assignments against the generating system.
    pub component_for_system: Vec<usize>,
    pub mll_mixed_train: MllSummary,
    pub mll_mixed_test: MllSummary,
    pub submodels: Vec<SubmodelMetrics>,
    /// Plain-GP baseline trained on the mixed set, evaluated on the
    /// mixed test set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baseline_mixed_test: Option<MllSummary>,
    /// Plain-GP baselines trained per system, evaluated on their own
    /// system's test set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baseline_specialized: Option<Vec<MllSummary>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenericMetrics {
    pub rmse: f64,
    pub mll: MllSummary,
}

/// The `metrics.json` schema.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub experiment: String,
    pub seed: u64,
    pub n_train: usize,
    /// Fitted likelihood noise scale per process.
    pub noise_sd: Vec<f64>,
    /// Soft training-assignment mass per process.
    pub assignment_mass: Vec<f64>,
    /// Objective estimate at the last logged training step.
    pub final_elbo: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub choicenet: Option<ChoicenetMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub multimodal: Option<MultimodalMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cartpole: Option<CartpoleMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub generic: Option<GenericMetrics>,
}

/// Everything a run produced, with the paths it was written to.
#[derive(Debug)]
pub struct RunArtifacts {
    pub metrics: MetricsReport,
    pub snapshot: Snapshot,
    pub trace: Vec<TraceRow>,
    pub metrics_path: PathBuf,
    pub predictions_path: PathBuf,
    pub trace_path: PathBuf,
    pub snapshot_path: PathBuf,
}

/// Evaluation of a snapshot against a data set, optionally restricted to
/// a single component.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub n_points: usize,
    pub component: Option<usize>,
    pub rmse: f64,
    pub mll: MllSummary,
}

/// Run one experiment end to end, writing all artifacts under
/// `output_dir`.
pub fn run_experiment(config: &ExperimentConfig, output_dir: &Path) -> Result<RunArtifacts> {
    let seed = config.seed();
    let (model, y_shift, trace, report, pred_inputs, pred) = match config {
        ExperimentConfig::Choicenet(p) => run_choicenet(p)?,
        ExperimentConfig::SemiBimodal(p) => run_semibimodal(p)?,
        ExperimentConfig::Cartpole(p) => run_cartpole(p)?,
        ExperimentConfig::CustomCsv(p) => run_custom(p)?,
    };
    let snapshot = Snapshot::new(model, seed, y_shift);
    std::fs::create_dir_all(output_dir)
        .map_err(|e| Error::InvalidConfig(format!("cannot create {output_dir:?}: {e}")))?;
    let metrics_path = output_dir.join("metrics.json");
    let predictions_path = output_dir.join("predictions.csv");
    let trace_path = output_dir.join("trace.csv");
    let snapshot_path = output_dir.join("snapshot.json");
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::InvalidConfig(format!("metrics serialization failed: {e}")))?;
    write_atomic(&metrics_path, format!("{json}\n").as_bytes())?;
    write_atomic(&predictions_path, &render_predictions_csv(&pred_inputs, &pred, &snapshot.y_shift)?)?;
    write_atomic(&trace_path, &render_trace_csv(&trace)?)?;
    snapshot.save(&snapshot_path)?;
    Ok(RunArtifacts {
        metrics: report,
        snapshot,
        trace,
        metrics_path,
        predictions_path,
        trace_path,
        snapshot_path,
    })
}

type TrainedPieces =
    (DagpModel, Vec<f64>, Vec<TraceRow>, MetricsReport, DenseMatrix, MixturePrediction);

fn base_report(experiment: &str, seed: u64, model: &DagpModel, trace: &[TraceRow]) -> MetricsReport {
    MetricsReport {
        experiment: experiment.to_string(),
        seed,
        n_train: model.n_train(),
        noise_sd: (0..model.num_components()).map(|k| model.noise_sd(k)).collect(),
        assignment_mass: assignment_mass(model.beliefs()),
        final_elbo: trace.last().map(|r| r.elbo),
        choicenet: None,
        multimodal: None,
        cartpole: None,
        generic: None,
    }
}

fn train_on(
    data: &Dataset,
    params: &ModelParams,
    train_config: &TrainConfig,
    seed: u64,
) -> Result<(DagpModel, Vec<f64>, Vec<TraceRow>)> {
    let (y_centered, y_shift) = center_targets(&data.y);
    let mut init_rng = RngStream::new(seed, INIT_STREAM);
    let mut model = build_model(&data.x, data.output_dim(), params, &mut init_rng)?;
    let mut train_rng = RngStream::new(seed, TRAIN_STREAM);
    let trace = train(&mut model, &data.x, &y_centered, train_config, &mut train_rng)?;
    Ok((model, y_shift, trace))
}

fn run_choicenet(p: &ChoicenetParams) -> Result<TrainedPieces> {
    let mut data_rng = RngStream::new(p.seed, TRAIN_DATA_STREAM);
    let train_ds = gen_choicenet(p.outlier_rate, p.n_train, &mut data_rng)?;
    let (model, y_shift, trace) = train_on(&train_ds, &p.model, &p.train, p.seed)?;
    // Noise-free test grid.
    let grid = linspace(-3.0, 3.0, p.n_test);
    let x_test = DenseMatrix::from_fn(p.n_test, 1, |i, _| grid[i]);
    let truth = DenseMatrix::from_fn(p.n_test, 1, |i, _| choicenet_signal(grid[i]));
    let pred = predict_original(&model, &x_test, &y_shift, p.seed)?;
    // The signal process is the one with the smaller fitted noise.
    let signal = (0..model.num_components())
        .min_by(|a, b| model.noise_sd(*a).total_cmp(&model.noise_sd(*b)))
        .expect("at least one process");
    let pred_col: Vec<f64> = (0..p.n_test).map(|i| pred.component_means[signal].get(i, 0)).collect();
    let truth_col: Vec<f64> = (0..p.n_test).map(|i| truth.get(i, 0)).collect();
    let metrics = ChoicenetMetrics {
        signal_component: signal,
        rmse_signal: rmse(&pred_col, &truth_col)?,
        mll_signal_latent: mll(&pred.component_latent_log_density(signal, &truth)?)?,
        mll_signal_observed: mll(&pred.component_log_density(signal, &truth)?)?,
        mll_mixture: mll(&pred.log_density(&truth)?)?,
    };
    let mut report = base_report("choicenet", p.seed, &model, &trace);
    report.choicenet = Some(metrics);
    Ok((model, y_shift, trace, report, x_test, pred))
}

fn average_weights(pred: &MixturePrediction) -> Vec<f64> {
    let (n, k) = pred.weights.shape();
    (0..k)
        .map(|c| (0..n).map(|i| pred.weights.get(i, c)).sum::<f64>() / n as f64)
        .collect()
}

fn run_semibimodal(p: &SemiBimodalParams) -> Result<TrainedPieces> {
    let mut data_rng = RngStream::new(p.seed, TRAIN_DATA_STREAM);
    let train_ds = gen_semibimodal(p.n_train, &p.data, &mut data_rng)?;
    let (model, y_shift, trace) = train_on(&train_ds, &p.model, &p.train, p.seed)?;
    let two_pi = 2.0 * std::f64::consts::PI;
    // Region where the data is bimodal and where it is trimodal.
    let mut bimodal_grid = linspace(-two_pi, -0.1, 120);
    bimodal_grid.extend(linspace(5.1, two_pi, 30));
    let trimodal_grid = linspace(0.5, 4.5, 80);
    let as_matrix =
        |g: &[f64]| DenseMatrix::from_fn(g.len(), 1, |i, _| g[i]);
    let bi_pred = predict_original(&model, &as_matrix(&bimodal_grid), &y_shift, p.seed)?;
    let tri_pred = predict_original(&model, &as_matrix(&trimodal_grid), &y_shift, p.seed)?;
    let bi_weights = average_weights(&bi_pred);
    let tri_weights = average_weights(&tri_pred);
    let mut bi_sorted = bi_weights.clone();
    bi_sorted.sort_by(|a, b| b.total_cmp(a));
    let mut tri_sorted = tri_weights.clone();
    tri_sorted.sort_by(|a, b| b.total_cmp(a));
    let mass = assignment_mass(model.beliefs());
    let fractions: Vec<f64> = mass.iter().map(|m| m / model.n_train() as f64).collect();
    let min_mass_fraction = fractions.iter().copied().fold(f64::INFINITY, f64::min);
    let metrics = MultimodalMetrics {
        mass_fractions: fractions,
        min_mass_fraction,
        bimodal_region_weights: bi_weights,
        bimodal_dominance_ratio: bi_sorted[0] / bi_sorted[1].max(1e-12),
        trimodal_region_weights: tri_weights,
        trimodal_top3: [tri_sorted[0], tri_sorted[1], tri_sorted[2]],
    };
    // Predictions artifact on a full-interval grid.
    let full_grid = linspace(-two_pi, two_pi, 400);
    let x_full = as_matrix(&full_grid);
    let pred = predict_original(&model, &x_full, &y_shift, p.seed)?;
    let mut report = base_report("semibimodal", p.seed, &model, &trace);
    report.multimodal = Some(metrics);
    Ok((model, y_shift, trace, report, x_full, pred))
}

fn run_cartpole(p: &CartpoleParams) -> Result<TrainedPieces> {
    let default_cfg = CartpoleConfig::default();
    let short_cfg = CartpoleConfig::short_pole();
    let mut tr_default = gen_cartpole(
        &default_cfg,
        p.n_train_per_system,
        &mut RngStream::new(p.seed, TRAIN_DATA_STREAM),
    )?;
    tr_default.labels = Some(vec![0; tr_default.len()]);
    let mut tr_short = gen_cartpole(
        &short_cfg,
        p.n_train_per_system,
        &mut RngStream::new(p.seed, TRAIN_DATA_B_STREAM),
    )?;
    tr_short.labels = Some(vec![1; tr_short.len()]);
    let train_ds = tr_default.concat(&tr_short)?;
    let te_default = gen_cartpole(
        &default_cfg,
        p.n_test_per_system,
        &mut RngStream::new(p.seed, TEST_DATA_STREAM),
    )?;
    let te_short = gen_cartpole(
        &short_cfg,
        p.n_test_per_system,
        &mut RngStream::new(p.seed, TEST_DATA_B_STREAM),
    )?;
    let te_mixed = te_default.concat(&te_short)?;

    let (model, y_shift, trace) = train_on(&train_ds, &p.model, &p.train, p.seed)?;
    let labels = train_ds.labels.as_ref().expect("labels attached above");
    let component_for_system =
        match_components_to_labels(&model.hard_assignments(), labels, model.num_components())?;

    let pred_train = predict_original(&model, &train_ds.x, &y_shift, p.seed)?;
    let pred_mixed = predict_original(&model, &te_mixed.x, &y_shift, p.seed)?;
    let pred_default = predict_original(&model, &te_default.x, &y_shift, p.seed)?;
    let pred_short = predict_original(&model, &te_short.x, &y_shift, p.seed)?;
    let mll_mixed_train = mll(&pred_train.log_density(&train_ds.y)?)?;
    let mll_mixed_test = mll(&pred_mixed.log_density(&te_mixed.y)?)?;
    let mut submodels = Vec::new();
    for system in 0..2 {
        let component = component_for_system
            .get(system)
            .copied()
            .ok_or_else(|| Error::InvalidConfig(format!("no component for system {system}")))?;
        let (own_pred, own_y, other_pred, other_y) = if system == 0 {
            (&pred_default, &te_default.y, &pred_short, &te_short.y)
        } else {
            (&pred_short, &te_short.y, &pred_default, &te_default.y)
        };
        submodels.push(SubmodelMetrics {
            system,
            component,
            mll_matched: mll(&own_pred.component_log_density(component, own_y)?)?,
            mll_mismatched: mll(&other_pred.component_log_density(component, other_y)?)?,
        });
    }

    let (baseline_mixed_test, baseline_specialized) = if p.with_baselines {
        let (bm, bm_shift, _) =
            baseline_gpr(&train_ds, &p.model, &p.train, p.seed, BASELINE_STREAM_BASE)?;
        let bm_pred = predict_original(&bm, &te_mixed.x, &bm_shift, p.seed)?;
        let mixed = mll(&bm_pred.log_density(&te_mixed.y)?)?;
        let mut specialized = Vec::new();
        for (system, (tr, te)) in
            [(&tr_default, &te_default), (&tr_short, &te_short)].iter().enumerate()
        {
            let (bs, bs_shift, _) = baseline_gpr(
                tr,
                &p.model,
                &p.train,
                p.seed,
                BASELINE_STREAM_BASE + 2 + 2 * system as u64,
            )?;
            let bs_pred = predict_original(&bs, &te.x, &bs_shift, p.seed)?;
            specialized.push(mll(&bs_pred.log_density(&te.y)?)?);
        }
        (Some(mixed), Some(specialized))
    } else {
        (None, None)
    };

    let metrics = CartpoleMetrics {
        component_for_system,
        mll_mixed_train,
        mll_mixed_test,
        submodels,
        baseline_mixed_test,
        baseline_specialized,
    };
    let mut report = base_report("cartpole", p.seed, &model, &trace);
    report.cartpole = Some(metrics);
    Ok((model, y_shift, trace, report, te_mixed.x.clone(), pred_mixed))
}

fn run_custom(p: &CustomCsvParams) -> Result<TrainedPieces> {
    let train_ds = Dataset::load_csv(&p.train_csv)?;
    let test_ds = match &p.test_csv {
        Some(path) => Some(Dataset::load_csv(path)?),
        None => None,
    };
    let (model, y_shift, trace) = train_on(&train_ds, &p.model, &p.train, p.seed)?;
    let eval_ds = test_ds.as_ref().unwrap_or(&train_ds);
    let pred = predict_original(&model, &eval_ds.x, &y_shift, p.seed)?;
    let mix_mean = pred.mixture_mean();
    let metrics = GenericMetrics {
        rmse: rmse(mix_mean.data(), eval_ds.y.data())?,
        mll: mll(&pred.log_density(&eval_ds.y)?)?,
    };
    let mut report = base_report("custom_csv", p.seed, &model, &trace);
    report.generic = Some(metrics);
    Ok((model, y_shift, trace, report, eval_ds.x.clone(), pred))
}

/// Evaluate a snapshot on a data set; with `component` the prediction is
/// restricted to that process (observation-space density).
pub fn evaluate_snapshot(
    snapshot: &Snapshot,
    data: &Dataset,
    component: Option<usize>,
) -> Result<EvaluationReport> {
    let model = &snapshot.model;
    if data.input_dim() != model.in_dim() || data.output_dim() != model.out_dim() {
        return Err(Error::dims(
            "evaluate",
            format!(
                "data dims ({}, {}) vs model dims ({}, {})",
                data.input_dim(),
                data.output_dim(),
                model.in_dim(),
                model.out_dim()
            ),
        ));
    }
    if let Some(k) = component {
        if k >= model.num_components() {
            return Err(Error::InvalidConfig(format!(
                "component {k} out of range 0..{}",
                model.num_components()
            )));
        }
    }
    let pred = predict_original(model, &data.x, &snapshot.y_shift, snapshot.seed)?;
    let (point_means, log_densities) = match component {
        Some(k) => (
            pred.component_means[k].clone(),
            pred.component_log_density(k, &data.y)?,
        ),
        None => (pred.mixture_mean(), pred.log_density(&data.y)?),
    };
    Ok(EvaluationReport {
        n_points: data.len(),
        component,
        rmse: rmse(point_means.data(), data.y.data())?,
        mll: mll(&log_densities)?,
    })
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::InvalidConfig(format!("bad output path {path:?}")))?;
    let tmp = path.with_file_name(format!("{name}.tmp"));
    let io_err = |e: std::io::Error| Error::InvalidConfig(format!("write to {path:?} failed: {e}"));
    std::fs::write(&tmp, bytes).map_err(io_err)?;
    std::fs::rename(&tmp, path).map_err(io_err)?;
    Ok(())
}

fn render_trace_csv(trace: &[TraceRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in trace {
        w.serialize(row)
            .map_err(|e| Error::InvalidConfig(format!("trace serialization failed: {e}")))?;
    }
    w.into_inner()
        .map_err(|e| Error::InvalidConfig(format!("trace buffer failed: {e}")))
}

/// Grid predictions with one weight/mean/variance column triple per
/// component (the data behind the posterior figures).
fn render_predictions_csv(
    x: &DenseMatrix,
    pred: &MixturePrediction,
    _y_shift: &[f64],
) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let d = x.cols();
    let p = pred.component_means[0].cols();
    let k = pred.num_components();
    let mut header: Vec<String> = (1..=d).map(|j| format!("x_{j}")).collect();
    for j in 0..p {
        header.push(if p == 1 { "mixture_mean".to_string() } else { format!("mixture_mean_{}", j + 1) });
    }
    for c in 0..k {
        header.push(format!("weight_{c}"));
        for j in 0..p {
            if p == 1 {
                header.push(format!("mean_{c}"));
                header.push(format!("var_{c}"));
            } else {
                header.push(format!("mean_{c}_{}", j + 1));
                header.push(format!("var_{c}_{}", j + 1));
            }
        }
    }
    w.write_record(&header)
        .map_err(|e| Error::InvalidConfig(format!("predictions header failed: {e}")))?;
    let mix = pred.mixture_mean();
    for i in 0..x.rows() {
        let mut rec: Vec<String> = Vec::with_capacity(header.len());
        for j in 0..d {
            rec.push(super::format_float(x.get(i, j)));
        }
        for j in 0..p {
            rec.push(super::format_float(mix.get(i, j)));
        }
        for c in 0..k {
            rec.push(super::format_float(pred.weights.get(i, c)));
            for j in 0..p {
                rec.push(super::format_float(pred.component_means[c].get(i, j)));
                rec.push(super::format_float(pred.component_variances[c].get(i, j)));
            }
        }
        w.write_record(&rec)
            .map_err(|e| Error::InvalidConfig(format!("predictions row failed: {e}")))?;
    }
    w.into_inner()
        .map_err(|e| Error::InvalidConfig(format!("predictions buffer failed: {e}")))
}
