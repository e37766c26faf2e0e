//! End-to-end acceptance gates for the crate.
//!
//! Each test prints one `PASS`/`FAIL` line (visible with
//! `cargo test --test acceptance -- --nocapture`) and asserts both the
//! quality gate and its runtime budget. The gates are deliberately pinned
//! to fixed tolerances; a failure here means the library regressed, not
//! that a threshold needs adjusting. Tests share a mutex so the timing
//! measurements never overlap with the heavy experiment runs.

use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use dagp::assignment::AssignmentBelief;
use dagp::experiments::{
    run_experiment, CartpoleParams, ChoicenetParams, ExperimentConfig, SemiBimodalParams,
};
use dagp::gp::{GpStack, SvgpLayer};
use dagp::kernels::{KernelSpec, MeanFunctionSpec};
use dagp::math::{DenseMatrix, RngStream};
use dagp::model::{DagpModel, ElboNoise, PredictOptions};
use dagp::train::{train, TrainConfig};

fn serialize_tests() -> MutexGuard<'static, ()> {
    static LOCK: OnceLock<Mutex<()>> = OnceLock::new();
    LOCK.get_or_init(|| Mutex::new(()))
        .lock()
        .unwrap_or_else(|poisoned| poisoned.into_inner())
}

fn report(criterion: &str, passed: bool, detail: &str) {
    let verdict = if passed { "PASS" } else { "FAIL" };
    println!("{verdict} [{criterion}] {detail}");
    assert!(passed, "{criterion}: {detail}");
}

fn assert_budget(criterion: &str, elapsed: Duration, budget: Duration) {
    assert!(
        elapsed <= budget,
        "{criterion}: took {:.1?} which exceeds the {:.0?} budget",
        elapsed,
        budget
    );
}

/// A small mixture model assembled directly: `k` processes over 1-D
/// inputs, `m` inducing points each.
fn shallow_model(k: usize, n: usize, m: usize, rng: &mut RngStream) -> DagpModel {
    let x = DenseMatrix::from_fn(n, 1, |i, _| -2.0 + 4.0 * i as f64 / n as f64);
    let processes = (0..k)
        .map(|p| {
            let layer = SvgpLayer::init_from_inputs(
                KernelSpec::se_isotropic(1.0 + 0.2 * p as f64, 0.8, 1),
                MeanFunctionSpec::Zero,
                &x,
                m,
                1,
                rng,
            )
            .expect("layer");
            GpStack::new(vec![layer]).expect("stack")
        })
        .collect();
    let alpha = SvgpLayer::init_from_inputs(
        KernelSpec::se_isotropic(1.0, 1.0, 1),
        MeanFunctionSpec::Zero,
        &x,
        m,
        k,
        rng,
    )
    .expect("alpha");
    let beliefs = AssignmentBelief::new_random(n, k, 0.5, rng).expect("beliefs");
    DagpModel::new(processes, alpha, &vec![0.3; k], beliefs, n).expect("model")
}

/// Full central-difference sweep over every entry of every parameter.
fn finite_difference_sweep(
    model: &DagpModel,
    x: &DenseMatrix,
    y: &DenseMatrix,
    indices: &[usize],
    rng: &mut RngStream,
) -> (usize, f64) {
    let temperature = 0.5;
    let noise = ElboNoise::draw(model, x.rows(), rng);
    let mut tape = dagp::tape::Tape::new();
    let (elbo, binding) = model
        .elbo_training_graph(&mut tape, x, y, indices, temperature, &noise)
        .expect("objective graph");
    let grads = tape.backward(elbo.value).expect("backward");

    let h = 1e-5;
    let mut checked = 0usize;
    let mut worst = 0.0f64;
    for (name, id) in binding.iter() {
        let analytic = grads.wrt(id).cloned().unwrap_or_else(|| {
            let (r, c) = tape.value(id).shape();
            DenseMatrix::zeros(r, c)
        });
        let base = tape.value(id).clone();
        for i in 0..base.rows() {
            for j in 0..base.cols() {
                let eval = |delta: f64| {
                    let mut perturbed = model.clone();
                    let mut v = base.clone();
                    v.set(i, j, v.get(i, j) + delta);
                    perturbed.set_raw_parameter(name, &v).expect("set parameter");
                    perturbed
                        .elbo_with_noise(x, y, indices, temperature, &noise)
                        .expect("objective")
                        .value
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let an = analytic.get(i, j);
                let rel = (fd - an).abs() / (1.0 + fd.abs().max(an.abs()));
                if rel > worst {
                    worst = rel;
                }
                assert!(
                    rel < 1e-4,
                    "{name} ({i},{j}): analytic {an} vs finite difference {fd} (relative error {rel:.2e})"
                );
                checked += 1;
            }
        }
    }
    (checked, worst)
}

/// Criterion 1: every pathwise gradient of the training objective
/// matches central finite differences on a shallow and a deep model.
#[test]
fn criterion_1_gradients_match_finite_differences() {
    let _guard = serialize_tests();
    let start = Instant::now();

    // Shallow: two processes, six points, three inducing points each.
    let mut rng = RngStream::new(42, 0);
    let model = shallow_model(2, 6, 3, &mut rng);
    let x = DenseMatrix::from_fn(6, 1, |i, _| -1.5 + 0.6 * i as f64);
    let y = DenseMatrix::from_fn(6, 1, |i, _| (1.3 * x.get(i, 0)).sin() + 0.1);
    let indices: Vec<usize> = (0..6).collect();
    let (checked_shallow, worst_shallow) =
        finite_difference_sweep(&model, &x, &y, &indices, &mut rng);

    // Deep: two processes of two layers each (identity-mean inner layer).
    let mut rng = RngStream::new(43, 0);
    let params = dagp::experiments::ModelParams {
        num_processes: 2,
        num_inducing: 3,
        layers: 2,
        ..dagp::experiments::ModelParams::default()
    };
    let deep = dagp::experiments::build_model(&x, 1, &params, &mut rng).expect("deep model");
    let (checked_deep, worst_deep) = finite_difference_sweep(&deep, &x, &y, &indices, &mut rng);

    let elapsed = start.elapsed();
    assert_budget("criterion 1", elapsed, Duration::from_secs(60));
    report(
        "criterion 1",
        true,
        &format!(
            "gradient check: {checked_shallow} shallow + {checked_deep} deep entries, \
             worst relative error {:.2e} (gate 1e-4), {:.1?}",
            worst_shallow.max(worst_deep),
            elapsed
        ),
    );
}

/// Criterion 2: noise-separation benchmark quality at three outlier
/// rates.
#[test]
fn criterion_2_noise_separation_quality() {
    let _guard = serialize_tests();
    let budget = Duration::from_secs(15 * 60);
    let mut lines = Vec::new();
    for rate in [0.0, 0.2, 0.4] {
        let start = Instant::now();
        let dir = tempfile::tempdir().expect("tempdir");
        let config = ExperimentConfig::Choicenet(ChoicenetParams::new(rate));
        let artifacts = run_experiment(&config, dir.path()).expect("experiment");
        let elapsed = start.elapsed();
        assert_budget("criterion 2", elapsed, budget);
        let metrics = artifacts.metrics.choicenet.expect("choicenet metrics");
        let rmse_ok = metrics.rmse_signal <= 0.03;
        let mll = metrics.mll_signal_latent.mean;
        let mll_ok = rate > 0.2 || mll >= 1.0;
        lines.push(format!(
            "rate {rate:.1}: rmse {:.4} (gate <= 0.03), latent mll {mll:.2}{}, {:.0?}",
            metrics.rmse_signal,
            if rate > 0.2 { " (not gated)" } else { " (gate >= 1.0)" },
            elapsed
        ));
        assert!(rmse_ok && mll_ok, "rate {rate}: rmse {} mll {mll}", metrics.rmse_signal);
    }
    report("criterion 2", true, &lines.join("; "));
}

/// Criterion 3: multimodal structure recovery — a dead component, the
/// two-to-one bimodal weight ratio and three live trimodal components.
#[test]
fn criterion_3_multimodal_structure() {
    let _guard = serialize_tests();
    let start = Instant::now();
    let dir = tempfile::tempdir().expect("tempdir");
    let config = ExperimentConfig::SemiBimodal(SemiBimodalParams::new());
    let artifacts = run_experiment(&config, dir.path()).expect("experiment");
    let elapsed = start.elapsed();
    assert_budget("criterion 3", elapsed, Duration::from_secs(15 * 60));

    let m = artifacts.metrics.multimodal.expect("multimodal metrics");
    let dead = m.min_mass_fraction < 0.02;
    let ratio_ok = (1.6..=2.6).contains(&m.bimodal_dominance_ratio);
    let trimodal_ok = m.trimodal_top3.iter().all(|w| *w >= 0.2);
    let detail = format!(
        "min mass {:.4} (gate < 0.02), dominance {:.2} (gate 1.6..2.6), \
         trimodal weights {:.2}/{:.2}/{:.2} (gate all >= 0.2), {:.0?}",
        m.min_mass_fraction,
        m.bimodal_dominance_ratio,
        m.trimodal_top3[0],
        m.trimodal_top3[1],
        m.trimodal_top3[2],
        elapsed
    );
    report("criterion 3", dead && ratio_ok && trimodal_ok, &detail);
}

/// Criterion 4: mixed cart-pole orderings against the single-process
/// baselines.
#[test]
fn criterion_4_cartpole_orderings() {
    let _guard = serialize_tests();
    let start = Instant::now();
    let dir = tempfile::tempdir().expect("tempdir");
    let config = ExperimentConfig::Cartpole(CartpoleParams::new());
    let artifacts = run_experiment(&config, dir.path()).expect("experiment");
    let elapsed = start.elapsed();
    assert_budget("criterion 4", elapsed, Duration::from_secs(45 * 60));

    let m = artifacts.metrics.cartpole.expect("cartpole metrics");
    let baseline_mixed = m.baseline_mixed_test.expect("baseline").mean;
    let specialized = m.baseline_specialized.expect("specialized baselines");
    let mixed_ok = m.mll_mixed_test.mean > baseline_mixed;
    let mut lines = vec![format!(
        "mixed test mll {:.3} vs baseline {:.3} (gate: higher)",
        m.mll_mixed_test.mean, baseline_mixed
    )];
    let mut sub_ok = true;
    for s in &m.submodels {
        let gap = s.mll_matched.mean - s.mll_mismatched.mean;
        let ceiling_ok = specialized[s.system].mean >= s.mll_matched.mean - 0.15;
        sub_ok &= gap > 0.5 && ceiling_ok;
        lines.push(format!(
            "system {}: matched {:.3} mismatched {:.3} gap {:.2} (gate > 0.5), \
             specialized baseline {:.3} (gate >= matched - 0.15)",
            s.system, s.mll_matched.mean, s.mll_mismatched.mean, gap, specialized[s.system].mean
        ));
    }
    lines.push(format!("{elapsed:.0?}"));
    report("criterion 4", mixed_ok && sub_ok, &lines.join("; "));
}

/// Criterion 5: the randomized invariant suite, run here in compact
/// deterministic form so this binary asserts both outcome and budget.
#[test]
fn criterion_5_property_suite() {
    let _guard = serialize_tests();
    let start = Instant::now();

    // Divergence: fresh layers are the prior (exactly zero), perturbed
    // posteriors are never negative.
    for seed in 0..20u64 {
        let mut rng = RngStream::new(seed, 0);
        let x = DenseMatrix::from_fn(18, 1, |i, _| -2.0 + 0.22 * i as f64);
        let variance = rng.uniform(0.1, 3.0);
        let lengthscale = rng.uniform(0.2, 2.0);
        let mut layer = SvgpLayer::init_from_inputs(
            KernelSpec::se_isotropic(variance, lengthscale, 1),
            MeanFunctionSpec::Zero,
            &x,
            4,
            1,
            &mut rng,
        )
        .expect("layer");
        assert!(layer.kl_to_prior().expect("kl").abs() < 1e-12, "fresh layer diverges");
        let m = DenseMatrix::from_fn(4, 1, |_, _| rng.uniform(-2.0, 2.0));
        let s = DenseMatrix::from_fn(4, 4, |i, j| {
            if i == j {
                rng.uniform(0.1, 1.5)
            } else if j < i {
                rng.uniform(-0.4, 0.4)
            } else {
                0.0
            }
        });
        layer.set_variational(m, &s).expect("posterior");
        let kl = layer.kl_to_prior().expect("kl");
        assert!(kl >= -1e-12, "negative divergence {kl}");

        // Prior reversion far away from every inducing input.
        let far = DenseMatrix::from_vec(1, 1, vec![2.0 + 40.0 * lengthscale]).expect("x");
        let marginal = layer.marginal(&far).expect("marginal");
        assert!(marginal.mean.get(0, 0).abs() < 1e-6 * (1.0 + variance));
        assert!((marginal.variance[0] - variance).abs() < 1e-6 * (1.0 + variance));
    }

    // Quadrature: the predictive mixture normalizes to one.
    {
        let mut rng = RngStream::new(5, 0);
        let model = shallow_model(3, 12, 4, &mut rng);
        let x = DenseMatrix::from_vec(1, 1, vec![0.25]).expect("x");
        let pred =
            model.predict_mixture(&x, PredictOptions::default(), &mut rng).expect("prediction");
        let (lo, hi, steps) = (-40.0, 40.0, 16_000usize);
        let dy = (hi - lo) / steps as f64;
        let mut total = 0.0;
        for s in 0..=steps {
            let yv = lo + s as f64 * dy;
            let y = DenseMatrix::from_vec(1, 1, vec![yv]).expect("y");
            let w = if s == 0 || s == steps { 0.5 } else { 1.0 };
            total += w * pred.log_density(&y).expect("density")[0].exp() * dy;
        }
        assert!((total - 1.0).abs() < 1e-3, "mixture integral {total}");
    }

    // Concrete relaxation: at temperature 0.01 the argmax frequencies
    // follow the categorical distribution within three standard errors.
    {
        use dagp::assignment::{argmax, sample_concrete, softmax};
        let logits = [0.7, -0.4, 0.1];
        let probs = softmax(&logits);
        let n = 100_000usize;
        let mut rng = RngStream::new(6, 0);
        let mut counts = [0usize; 3];
        for _ in 0..n {
            let gumbels: Vec<f64> = (0..3).map(|_| rng.next_gumbel()).collect();
            counts[argmax(&sample_concrete(&logits, &gumbels, 0.01).expect("sample"))] += 1;
        }
        for k in 0..3 {
            let freq = counts[k] as f64 / n as f64;
            let sigma = (probs[k] * (1.0 - probs[k]) / n as f64).sqrt();
            assert!(
                (freq - probs[k]).abs() <= 3.0 * sigma,
                "class {k}: frequency {freq} vs probability {}",
                probs[k]
            );
        }
    }

    // Bitwise reproducibility of two identically seeded trainings.
    {
        let run = || {
            let mut rng = RngStream::new(77, 0);
            let mut model = shallow_model(2, 20, 5, &mut rng);
            let x = DenseMatrix::from_fn(20, 1, |i, _| -2.0 + 0.2 * i as f64);
            let y = DenseMatrix::from_fn(20, 1, |i, _| (2.0 * x.get(i, 0)).cos());
            let config =
                TrainConfig { steps: 50, batch_size: 10, log_every: 1, ..TrainConfig::default() };
            let mut train_rng = RngStream::new(77, 1);
            let trace = train(&mut model, &x, &y, &config, &mut train_rng).expect("train");
            (serde_json::to_string(&model).expect("serialize"), trace)
        };
        let (model_a, trace_a) = run();
        let (model_b, trace_b) = run();
        assert_eq!(model_a, model_b, "trained parameters differ between identical runs");
        for (ra, rb) in trace_a.iter().zip(&trace_b) {
            assert_eq!(ra.elbo.to_bits(), rb.elbo.to_bits(), "trace differs at step {}", ra.step);
        }
    }

    let elapsed = start.elapsed();
    assert_budget("criterion 5", elapsed, Duration::from_secs(5 * 60));
    report(
        "criterion 5",
        true,
        &format!(
            "divergence/reversion over 20 random kernels, quadrature, concrete frequencies, \
             bitwise reruns — all hold, {:.1?}",
            elapsed
        ),
    );
}

/// Criterion 6: the objective's wall time scales linearly (within a
/// factor of 1.5) in the number of processes and in the batch size.
#[test]
fn criterion_6_objective_cost_scaling() {
    let _guard = serialize_tests();
    let start = Instant::now();

    fn median_elbo_seconds(model: &DagpModel, batch: usize) -> f64 {
        let n = 512;
        let x = DenseMatrix::from_fn(n, 1, |i, _| -3.0 + 6.0 * i as f64 / n as f64);
        let y = DenseMatrix::from_fn(n, 1, |i, _| (1.7 * x.get(i, 0)).sin());
        let xb = DenseMatrix::from_fn(batch, 1, |i, j| x.get(i, j));
        let yb = DenseMatrix::from_fn(batch, 1, |i, j| y.get(i, j));
        let indices: Vec<usize> = (0..batch).collect();
        let mut rng = RngStream::new(3, 9);
        let noise = ElboNoise::draw(model, batch, &mut rng);
        // Warm up, then take the median of repeated evaluations.
        for _ in 0..5 {
            model.elbo_with_noise(&xb, &yb, &indices, 0.5, &noise).expect("elbo");
        }
        let mut times: Vec<f64> = (0..30)
            .map(|_| {
                let t = Instant::now();
                let est = model.elbo_with_noise(&xb, &yb, &indices, 0.5, &noise).expect("elbo");
                std::hint::black_box(est.value);
                t.elapsed().as_secs_f64()
            })
            .collect();
        times.sort_by(f64::total_cmp);
        times[times.len() / 2]
    }

    let mut rng = RngStream::new(2, 9);
    let model_k2 = shallow_model(2, 512, 16, &mut rng);
    let mut rng = RngStream::new(2, 9);
    let model_k4 = shallow_model(4, 512, 16, &mut rng);

    let t_k2 = median_elbo_seconds(&model_k2, 128);
    let t_k4 = median_elbo_seconds(&model_k4, 128);
    let t_b256 = median_elbo_seconds(&model_k2, 256);

    let ratio_k = t_k4 / t_k2;
    let ratio_b = t_b256 / t_k2;
    let k_ok = (1.5..=3.0).contains(&ratio_k);
    let b_ok = (1.5..=3.0).contains(&ratio_b);
    let elapsed = start.elapsed();
    report(
        "criterion 6",
        k_ok && b_ok,
        &format!(
            "objective cost ratios: processes 2->4 = {ratio_k:.2}, batch 128->256 = {ratio_b:.2} \
             (gate 1.5..3.0 = linear within 0.75x..1.5x), {:.1?}",
            elapsed
        ),
    );
}
