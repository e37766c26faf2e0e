//! Config-file schema and its translation to experiment parameters.
//!
//! A config is a single TOML document selecting one experiment and
//! optionally overriding data, model, and training settings. Every
//! override starts from the experiment's benchmark defaults, so the
//! checked-in configs stay short. Unknown keys anywhere are errors, as
//! are keys that do not apply to the selected experiment.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use dagp::error::{Error, Result};
use dagp::experiments::{
    CartpoleParams, ChoicenetParams, CustomCsvParams, ExperimentConfig, ModelParams,
    SemiBimodalParams,
};
use dagp::train::TrainConfig;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    /// One of: choicenet, semibimodal, cartpole, custom_csv.
    experiment: String,
    seed: Option<u64>,
    /// Where artifacts go; defaults to `runs/<config-stem>`.
    output_dir: Option<PathBuf>,
    #[serde(default)]
    data: DataSection,
    #[serde(default)]
    model: ModelSection,
    #[serde(default)]
    train: TrainSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct DataSection {
    // choicenet
    outlier_rate: Option<f64>,
    n_test: Option<usize>,
    // choicenet + semibimodal
    n_train: Option<usize>,
    // semibimodal generator
    branch_weights: Option<[f64; 3]>,
    restricted_interval: Option<[f64; 2]>,
    noise_sd: Option<f64>,
    // cartpole
    n_train_per_system: Option<usize>,
    n_test_per_system: Option<usize>,
    with_baselines: Option<bool>,
    // custom_csv (paths relative to the config file)
    train_csv: Option<PathBuf>,
    test_csv: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ModelSection {
    num_processes: Option<usize>,
    num_inducing: Option<usize>,
    layers: Option<usize>,
    kernels: Option<Vec<String>>,
    kernel_variance: Option<f64>,
    lengthscale: Option<f64>,
    alpha_lengthscale: Option<f64>,
    ard_from_data: Option<bool>,
    noise_sd: Option<f64>,
    /// Switch the log-normal noise prior on or off; when on it attaches
    /// to `noise_prior_process` (default process 0).
    noise_prior: Option<bool>,
    noise_prior_process: Option<usize>,
    noise_prior_log_mean: Option<f64>,
    noise_prior_log_sd: Option<f64>,
    covariance_scale: Option<f64>,
    belief_scale: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainSection {
    steps: Option<usize>,
    batch_size: Option<usize>,
    learning_rate: Option<f64>,
    beta1: Option<f64>,
    beta2: Option<f64>,
    temperature_start: Option<f64>,
    temperature_end: Option<f64>,
    anneal_fraction: Option<f64>,
    log_every: Option<usize>,
}

impl ModelSection {
    fn apply(&self, base: &mut ModelParams) -> Result<()> {
        macro_rules! take {
            ($field:ident) => {
                if let Some(v) = self.$field.clone() {
                    base.$field = v;
                }
            };
        }
        take!(num_processes);
        take!(num_inducing);
        take!(layers);
        take!(kernels);
        take!(kernel_variance);
        take!(lengthscale);
        take!(alpha_lengthscale);
        take!(ard_from_data);
        take!(noise_sd);
        take!(noise_prior_log_mean);
        take!(noise_prior_log_sd);
        take!(belief_scale);
        if let Some(v) = self.covariance_scale {
            base.covariance_scale = Some(v);
        }
        match (self.noise_prior, self.noise_prior_process) {
            (Some(false), Some(_)) => {
                return Err(Error::InvalidConfig(
                    "noise_prior_process given but noise_prior = false".to_string(),
                ));
            }
            (Some(false), None) => base.noise_prior_process = None,
            (Some(true), p) => base.noise_prior_process = Some(p.unwrap_or(0)),
            (None, Some(p)) => base.noise_prior_process = Some(p),
            (None, None) => {}
        }
        Ok(())
    }
}

impl TrainSection {
    fn apply(&self, base: &mut TrainConfig) {
        macro_rules! take {
            ($field:ident) => {
                if let Some(v) = self.$field {
                    base.$field = v;
                }
            };
        }
        take!(steps);
        take!(batch_size);
        take!(learning_rate);
        take!(beta1);
        take!(beta2);
        take!(temperature_start);
        take!(temperature_end);
        take!(anneal_fraction);
        take!(log_every);
    }
}

impl DataSection {
    /// Reject keys that do not belong to the selected experiment.
    fn check_applicability(&self, experiment: &str) -> Result<()> {
        let mut stray: Vec<&str> = Vec::new();
        let mut claim = |set: bool, name: &'static str, allowed: &[&str]| {
            if set && !allowed.contains(&experiment) {
                stray.push(name);
            }
        };
        claim(self.outlier_rate.is_some(), "outlier_rate", &["choicenet"]);
        claim(self.n_test.is_some(), "n_test", &["choicenet"]);
        claim(self.n_train.is_some(), "n_train", &["choicenet", "semibimodal"]);
        claim(self.branch_weights.is_some(), "branch_weights", &["semibimodal"]);
        claim(
            self.restricted_interval.is_some(),
            "restricted_interval",
            &["semibimodal"],
        );
        claim(self.noise_sd.is_some(), "noise_sd", &["semibimodal"]);
        claim(
            self.n_train_per_system.is_some(),
            "n_train_per_system",
            &["cartpole"],
        );
        claim(
            self.n_test_per_system.is_some(),
            "n_test_per_system",
            &["cartpole"],
        );
        claim(self.with_baselines.is_some(), "with_baselines", &["cartpole"]);
        claim(self.train_csv.is_some(), "train_csv", &["custom_csv"]);
        claim(self.test_csv.is_some(), "test_csv", &["custom_csv"]);
        if stray.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!(
                "data keys {stray:?} do not apply to experiment `{experiment}`"
            )))
        }
    }
}

/// A fully resolved run request.
#[derive(Debug)]
pub struct ResolvedConfig {
    pub experiment: ExperimentConfig,
    pub output_dir: PathBuf,
}

/// Parse a config file and resolve all defaults. `seed_override`, when
/// given, wins over the file's seed.
pub fn load_config(path: &Path, seed_override: Option<u64>) -> Result<ResolvedConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::InvalidConfig(format!("cannot read config {path:?}: {e}")))?;
    let raw: RawConfig = toml::from_str(&text)
        .map_err(|e| Error::InvalidConfig(format!("config {path:?}: {e}")))?;
    raw.data.check_applicability(&raw.experiment)?;
    let base_dir = path.parent().unwrap_or(Path::new("."));
    let resolve = |p: &PathBuf| -> PathBuf {
        if p.is_absolute() {
            p.clone()
        } else {
            base_dir.join(p)
        }
    };

    let mut experiment = match raw.experiment.as_str() {
        "choicenet" => {
            let mut p = ChoicenetParams::new(raw.data.outlier_rate.unwrap_or(0.0));
            if let Some(n) = raw.data.n_train {
                p.n_train = n;
            }
            if let Some(n) = raw.data.n_test {
                p.n_test = n;
            }
            raw.model.apply(&mut p.model)?;
            raw.train.apply(&mut p.train);
            ExperimentConfig::Choicenet(p)
        }
        "semibimodal" => {
            let mut p = SemiBimodalParams::new();
            if let Some(n) = raw.data.n_train {
                p.n_train = n;
            }
            if let Some(w) = raw.data.branch_weights {
                p.data.weights = w;
            }
            if let Some([lo, hi]) = raw.data.restricted_interval {
                p.data.restricted = (lo, hi);
            }
            if let Some(s) = raw.data.noise_sd {
                p.data.noise_sd = s;
            }
            raw.model.apply(&mut p.model)?;
            raw.train.apply(&mut p.train);
            ExperimentConfig::SemiBimodal(p)
        }
        "cartpole" => {
            let mut p = CartpoleParams::new();
            if let Some(n) = raw.data.n_train_per_system {
                p.n_train_per_system = n;
            }
            if let Some(n) = raw.data.n_test_per_system {
                p.n_test_per_system = n;
            }
            if let Some(b) = raw.data.with_baselines {
                p.with_baselines = b;
            }
            raw.model.apply(&mut p.model)?;
            raw.train.apply(&mut p.train);
            ExperimentConfig::Cartpole(p)
        }
        "custom_csv" => {
            let train_csv = raw.data.train_csv.as_ref().ok_or_else(|| {
                Error::InvalidConfig("custom_csv requires data.train_csv".to_string())
            })?;
            let train_csv = resolve(train_csv);
            if !train_csv.exists() {
                return Err(Error::InvalidConfig(format!(
                    "train_csv {train_csv:?} does not exist"
                )));
            }
            let test_csv = raw.data.test_csv.as_ref().map(&resolve);
            if let Some(t) = &test_csv {
                if !t.exists() {
                    return Err(Error::InvalidConfig(format!("test_csv {t:?} does not exist")));
                }
            }
            let mut model = ModelParams::default();
            raw.model.apply(&mut model)?;
            let mut train = TrainConfig::default();
            raw.train.apply(&mut train);
            ExperimentConfig::CustomCsv(CustomCsvParams {
                seed: 0,
                train_csv,
                test_csv,
                model,
                train,
            })
        }
        other => {
            return Err(Error::InvalidConfig(format!(
                "unknown experiment `{other}` (expected choicenet, semibimodal, cartpole, or custom_csv)"
            )));
        }
    };

    if let Some(seed) = raw.seed {
        experiment.set_seed(seed);
    }
    if let Some(seed) = seed_override {
        experiment.set_seed(seed);
    }

    let output_dir = match &raw.output_dir {
        Some(dir) => resolve(dir),
        None => {
            let stem = path
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or("experiment");
            PathBuf::from("runs").join(stem)
        }
    };
    Ok(ResolvedConfig { experiment, output_dir })
}
