//! End-to-end tests of the `dagp` binary: artifact layout, exit codes,
//! reproducibility, and the snapshot evaluation round trip.

use std::fs;
use std::path::Path;
use std::process::Output;

use assert_cmd::Command;
use predicates::prelude::*;

fn dagp() -> Command {
    Command::cargo_bin("dagp").expect("binary builds")
}

/// A config small enough to train in a couple of seconds.
fn tiny_config(dir: &Path, seed: u64) -> std::path::PathBuf {
    let out = dir.join("out");
    let text = format!(
        r#"
experiment = "choicenet"
seed = {seed}
output_dir = {out:?}

[data]
outlier_rate = 0.2
n_train = 60
n_test = 40

[model]
num_inducing = 6

[train]
steps = 120
batch_size = 30
log_every = 20
"#
    );
    let path = dir.join("tiny.toml");
    fs::write(&path, text).expect("write config");
    path
}

fn run_artifacts(dir: &Path) -> [std::path::PathBuf; 4] {
    ["metrics.json", "predictions.csv", "trace.csv", "snapshot.json"]
        .map(|name| dir.join("out").join(name))
}

#[test]
fn run_produces_all_artifacts() {
    let tmp = tempfile::tempdir().expect("tempdir");
    let config = tiny_config(tmp.path(), 0);
    dagp()
        .args(["run"])
        .arg(&config)
        .assert()
        .success()
        .stdout(predicate::str::contains("experiment: choicenet"))
        .stdout(predicate::str::contains("metrics:"));
    for path in run_artifacts(tmp.path()) {
        assert!(path.is_file(), "missing artifact {path:?}");
    }
    let metrics: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("out/metrics.json")).unwrap())
            .expect("valid metrics JSON");
    assert_eq!(metrics["experiment"], "choicenet");
    assert_eq!(metrics["seed"], 0);
    assert!(metrics["choicenet"]["rmse_signal"].is_f64());
}

/// Blank out the wall-clock `seconds` column: it is the one
/// intentionally non-reproducible value in the artifacts.
fn strip_seconds(trace_csv: &str) -> String {
    let mut lines = trace_csv.lines();
    let header = lines.next().expect("trace has a header");
    let seconds_col = header
        .split(',')
        .position(|c| c == "seconds")
        .expect("trace has a seconds column");
    let mut out = vec![header.to_string()];
    for line in lines {
        let fields: Vec<&str> = line.split(',').collect();
        out.push(
            fields
                .iter()
                .enumerate()
                .map(|(i, f)| if i == seconds_col { "_" } else { f })
                .collect::<Vec<_>>()
                .join(","),
        );
    }
    out.join("\n")
}

#[test]
fn reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().expect("tempdir");
    let config = tiny_config(tmp.path(), 0);
    dagp().args(["run"]).arg(&config).assert().success();
    let first: Vec<Vec<u8>> =
        run_artifacts(tmp.path()).iter().map(|p| fs::read(p).unwrap()).collect();
    dagp().args(["run"]).arg(&config).assert().success();
    for (path, before) in run_artifacts(tmp.path()).iter().zip(&first) {
        let after = fs::read(path).unwrap();
        if path.file_name().is_some_and(|n| n == "trace.csv") {
            // Training timings differ run to run; everything else in the
            // trace must not.
            let before = strip_seconds(&String::from_utf8(before.clone()).unwrap());
            let after = strip_seconds(&String::from_utf8(after).unwrap());
            assert_eq!(after, before, "{path:?} changed between identical runs");
        } else {
            assert_eq!(&after, before, "{path:?} changed between identical runs");
        }
    }
}

#[test]
fn seed_override_changes_the_outputs() {
    let tmp = tempfile::tempdir().expect("tempdir");
    let config = tiny_config(tmp.path(), 0);
    dagp().args(["run"]).arg(&config).assert().success();
    let baseline = fs::read(tmp.path().join("out/snapshot.json")).unwrap();
    dagp()
        .args(["run"])
        .arg(&config)
        .args(["--seed", "7"])
        .assert()
        .success();
    let overridden = fs::read(tmp.path().join("out/snapshot.json")).unwrap();
    assert_ne!(baseline, overridden, "seed override left the snapshot unchanged");
    let metrics: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("out/metrics.json")).unwrap())
            .unwrap();
    assert_eq!(metrics["seed"], 7);
}

#[test]
fn missing_config_exits_2_without_outputs() {
    let tmp = tempfile::tempdir().expect("tempdir");
    let missing = tmp.path().join("nope.toml");
    let output: Output = dagp()
        .args(["run"])
        .arg(&missing)
        .output()
        .expect("spawn");
    assert_eq!(output.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&output.stderr).contains("error:"));
    assert_eq!(fs::read_dir(tmp.path()).unwrap().count(), 0, "created files on failure");
}

#[test]
fn unknown_config_key_exits_2() {
    let tmp = tempfile::tempdir().expect("tempdir");
    let path = tmp.path().join("bad.toml");
    fs::write(&path, "experiment = \"choicenet\"\nbogus_key = 1\n").unwrap();
    dagp()
        .args(["run"])
        .arg(&path)
        .assert()
        .code(2)
        .stderr(predicate::str::contains("bogus_key"));
}

#[test]
fn inapplicable_data_key_exits_2() {
    let tmp = tempfile::tempdir().expect("tempdir");
    let path = tmp.path().join("bad.toml");
    fs::write(
        &path,
        "experiment = \"semibimodal\"\n[data]\noutlier_rate = 0.2\n",
    )
    .unwrap();
    dagp()
        .args(["run"])
        .arg(&path)
        .assert()
        .code(2)
        .stderr(predicate::str::contains("outlier_rate"));
}

#[test]
fn evaluate_roundtrips_snapshot_against_training_artifacts() {
    let tmp = tempfile::tempdir().expect("tempdir");
    let config = tiny_config(tmp.path(), 0);
    dagp().args(["run"]).arg(&config).assert().success();

    // Build a small evaluation set with the generator.
    let data = tmp.path().join("eval.csv");
    dagp()
        .args(["generate", "choicenet"])
        .arg(&data)
        .args(["--n", "50", "--outlier-rate", "0.0", "--seed", "3"])
        .assert()
        .success();

    let snapshot = tmp.path().join("out/snapshot.json");
    let output = dagp()
        .args(["evaluate"])
        .arg(&snapshot)
        .arg(&data)
        .output()
        .expect("spawn");
    assert!(output.status.success());
    let report: serde_json::Value =
        serde_json::from_slice(&output.stdout).expect("evaluate prints JSON");
    assert_eq!(report["n_points"], 50);
    assert!(report["rmse"].is_f64());
    assert!(report["mll"]["mean"].is_f64());

    // The same invocation reproduces the same numbers bit for bit.
    let again = dagp()
        .args(["evaluate"])
        .arg(&snapshot)
        .arg(&data)
        .output()
        .expect("spawn");
    assert_eq!(output.stdout, again.stdout, "evaluate is not deterministic");
}

#[test]
fn evaluate_component_out_of_range_exits_2() {
    let tmp = tempfile::tempdir().expect("tempdir");
    let config = tiny_config(tmp.path(), 0);
    dagp().args(["run"]).arg(&config).assert().success();
    let data = tmp.path().join("eval.csv");
    dagp()
        .args(["generate", "choicenet"])
        .arg(&data)
        .args(["--n", "20"])
        .assert()
        .success();
    dagp()
        .args(["evaluate"])
        .arg(tmp.path().join("out/snapshot.json"))
        .arg(&data)
        .args(["--component", "9"])
        .assert()
        .code(2)
        .stderr(predicate::str::contains("component"));
}

#[test]
fn generate_writes_csv_and_metadata() {
    let tmp = tempfile::tempdir().expect("tempdir");
    let csv = tmp.path().join("data/pole.csv");
    dagp()
        .args(["generate", "cartpole_short"])
        .arg(&csv)
        .args(["--n", "30"])
        .assert()
        .success()
        .stdout(predicate::str::contains("dataset:"));
    assert!(csv.is_file());
    let meta: serde_json::Value = serde_json::from_str(
        &fs::read_to_string(tmp.path().join("data/pole.meta.json")).unwrap(),
    )
    .expect("metadata is JSON");
    assert_eq!(meta["experiment"], "cartpole_short");
    assert_eq!(meta["n_points"], 30);
    assert!(meta["cartpole"]["pole_half_length"].is_f64());
    let header = fs::read_to_string(&csv).unwrap().lines().next().unwrap().to_string();
    assert!(header.split(',').count() >= 6, "expected 5 inputs + 1 output, got {header}");
}

#[test]
fn generate_rejects_outlier_rate_for_other_experiments() {
    let tmp = tempfile::tempdir().expect("tempdir");
    dagp()
        .args(["generate", "semibimodal"])
        .arg(tmp.path().join("x.csv"))
        .args(["--outlier-rate", "0.3"])
        .assert()
        .code(2)
        .stderr(predicate::str::contains("outlier"));
}

#[test]
fn generate_unknown_experiment_exits_2() {
    let tmp = tempfile::tempdir().expect("tempdir");
    dagp()
        .args(["generate", "frobnicate"])
        .arg(tmp.path().join("x.csv"))
        .assert()
        .code(2)
        .stderr(predicate::str::contains("frobnicate"));
}
