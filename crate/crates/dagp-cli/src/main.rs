//! Command-line front end: run experiments from config files, evaluate
//! snapshots, and generate benchmark datasets.
//!
//! Exit codes: 0 success, 2 configuration/input error, 3 numeric failure
//! during training or evaluation.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use dagp::error::Error;
use dagp::experiments::{gen_cartpole, gen_choicenet, gen_semibimodal};
use dagp::experiments::{
    evaluate_snapshot, run_experiment, CartpoleConfig, Dataset, SemiBimodalConfig,
};
use dagp::math::RngStream;
use dagp::model::Snapshot;

#[derive(Parser)]
#[command(
    name = "dagp",
    version,
    about = "Mixtures of sparse Gaussian processes with input-dependent data association"
)]
struct Cli {
    /// Override the experiment seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate an experiment described by a TOML config.
    Run {
        /// Path to the config file.
        config: PathBuf,
    },
    /// Evaluate a saved snapshot on a dataset CSV; prints JSON metrics.
    Evaluate {
        /// Path to a snapshot.json written by `run`.
        snapshot: PathBuf,
        /// Dataset CSV with matching input/output dimensions.
        data: PathBuf,
        /// Restrict the prediction to one component (0-based).
        #[arg(long)]
        component: Option<usize>,
    },
    /// Generate a benchmark dataset CSV plus a sibling metadata file.
    Generate {
        /// One of: choicenet, semibimodal, cartpole, cartpole_short.
        experiment: String,
        /// Output CSV path.
        out: PathBuf,
        /// Number of points (experiment-specific default otherwise).
        #[arg(long)]
        n: Option<usize>,
        /// Outlier rate for choicenet data.
        #[arg(long)]
        outlier_rate: Option<f64>,
    },
}

/// Numeric failures exit 3, everything else (config, shapes, IO) exits 2.
fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::NotPositiveDefinite { .. }
        | Error::NotSymmetric { .. }
        | Error::NonFiniteGradient { .. } => 3,
        _ => 2,
    }
}

#[derive(Serialize)]
struct DatasetMetadata<'a> {
    experiment: &'a str,
    seed: u64,
    n_points: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    outlier_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    branch_weights: Option<[f64; 3]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    cartpole: Option<CartpoleConfig>,
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Run { config } => {
            let resolved = config::load_config(&config, cli.seed)?;
            let artifacts = run_experiment(&resolved.experiment, &resolved.output_dir)?;
            println!("experiment: {}", artifacts.metrics.experiment);
            println!("seed: {}", artifacts.metrics.seed);
            if let Some(elbo) = artifacts.metrics.final_elbo {
                println!("final objective estimate: {elbo:.3}");
            }
            println!("metrics: {}", artifacts.metrics_path.display());
            println!("predictions: {}", artifacts.predictions_path.display());
            println!("trace: {}", artifacts.trace_path.display());
            println!("snapshot: {}", artifacts.snapshot_path.display());
            Ok(())
        }
        Command::Evaluate { snapshot, data, component } => {
            let snapshot = Snapshot::load(&snapshot)?;
            let dataset = Dataset::load_csv(&data)?;
            let report = evaluate_snapshot(&snapshot, &dataset, component)?;
            let json = serde_json::to_string_pretty(&report)
                .map_err(|e| Error::InvalidConfig(format!("report serialization: {e}")))?;
            println!("{json}");
            Ok(())
        }
        Command::Generate { experiment, out, n, outlier_rate } => {
            generate(&experiment, &out, n, outlier_rate, cli.seed.unwrap_or(0))
        }
    }
}

fn generate(
    experiment: &str,
    out: &Path,
    n: Option<usize>,
    outlier_rate: Option<f64>,
    seed: u64,
) -> Result<(), Error> {
    if outlier_rate.is_some() && experiment != "choicenet" {
        return Err(Error::InvalidConfig(
            "--outlier-rate only applies to choicenet".to_string(),
        ));
    }
    let mut rng = RngStream::new(seed, 1);
    let mut meta = DatasetMetadata {
        experiment,
        seed,
        n_points: 0,
        outlier_rate: None,
        branch_weights: None,
        cartpole: None,
    };
    let dataset = match experiment {
        "choicenet" => {
            let rate = outlier_rate.unwrap_or(0.0);
            meta.outlier_rate = Some(rate);
            gen_choicenet(rate, n.unwrap_or(1000), &mut rng)?
        }
        "semibimodal" => {
            let cfg = SemiBimodalConfig::default();
            meta.branch_weights = Some(cfg.weights);
            gen_semibimodal(n.unwrap_or(350), &cfg, &mut rng)?
        }
        "cartpole" => {
            let cfg = CartpoleConfig::default();
            meta.cartpole = Some(cfg.clone());
            gen_cartpole(&cfg, n.unwrap_or(500), &mut rng)?
        }
        "cartpole_short" => {
            let cfg = CartpoleConfig::short_pole();
            meta.cartpole = Some(cfg.clone());
            gen_cartpole(&cfg, n.unwrap_or(500), &mut rng)?
        }
        other => {
            return Err(Error::InvalidConfig(format!(
                "unknown experiment `{other}` (expected choicenet, semibimodal, cartpole, or cartpole_short)"
            )));
        }
    };
    meta.n_points = dataset.len();
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .map_err(|e| Error::InvalidConfig(format!("cannot create {parent:?}: {e}")))?;
        }
    }
    dataset.save_csv(out)?;
    let meta_path = out.with_extension("meta.json");
    let json = serde_json::to_string_pretty(&meta)
        .map_err(|e| Error::InvalidConfig(format!("metadata serialization: {e}")))?;
    let tmp = meta_path.with_extension("meta.json.tmp");
    std::fs::write(&tmp, format!("{json}\n"))
        .map_err(|e| Error::InvalidConfig(format!("write {tmp:?}: {e}")))?;
    std::fs::rename(&tmp, &meta_path)
        .map_err(|e| Error::InvalidConfig(format!("rename to {meta_path:?}: {e}")))?;
    println!("dataset: {}", out.display());
    println!("metadata: {}", meta_path.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
