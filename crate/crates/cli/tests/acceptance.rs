//! Acceptance gate for the toolkit: nine end-to-end behavioral checks
//! covering gradient correctness, the uncertainty algebra, the planted-shift
//! reproductions, adaptation ablation ordering, measurement reference
//! values, CLI determinism, and the alternating training schedule. Each test
//! prints exactly one PASS/FAIL line and enforces its own runtime budget.

use ndarray::{Array1, Array2};
use rand::Rng;
use std::path::Path;
use std::process::Command;
use std::time::Instant;
use utrcaf_core::caf::{
    adapt_value_grad, calibration_value_grad, loss_adapt, loss_discover, loss_div, loss_forget,
    loss_kd, run_caf, AdaptTargets, CafConfig, CalibrationWeights, Phase,
};
use utrcaf_core::eval::{
    accuracy_utr_curve, build_report, corresponding_angle, leep, logme, masked_accuracy, mmd, nce,
    proxy_a_distance, split_channels, MEASUREMENT_NAMES,
};
use utrcaf_core::model::{
    cross_entropy_ls, grad::ce_ls_value_grad, grad::forward_pass, init_params, perturb_params,
    predict_labels, train_source, Activation, ArchitectureSpec, Dataset, ModelParams, NoiseMode,
    TrainConfig,
};
use utrcaf_core::synth::{gen_planted_shift, gen_planted_shift_with_permutation, PlantedShiftSpec};
use utrcaf_core::utr::{
    channel_ud, spectrum_from_encoders, utr_domain, utr_domain_online, utr_instance,
    PerturbationConfig, UtrInstance, UtrSpectrum,
};
use utrcaf_core::{io, rng};

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

/// Prints the single verdict line for a check, then enforces it together
/// with the check's runtime budget.
fn verdict(ok: bool, started: Instant, budget_secs: u64, label: &str, detail: &str) {
    let elapsed = started.elapsed();
    println!(
        "{}: {label} ({elapsed:.1?}){}{detail}",
        if ok { "PASS" } else { "FAIL" },
        if detail.is_empty() { "" } else { " — " },
    );
    assert!(ok, "{label}: {detail}");
    assert!(
        elapsed.as_secs() < budget_secs,
        "{label} exceeded its {budget_secs}s budget: {elapsed:?}"
    );
}

fn linear_arch() -> ArchitectureSpec {
    ArchitectureSpec {
        input_dim: 16,
        hidden_dims: vec![],
        bottleneck_dim: 16,
        num_classes: 4,
        activation: Activation::Relu,
    }
}

fn planted(seed: u64) -> (Dataset<f64>, Dataset<f64>, Vec<usize>) {
    let spec = PlantedShiftSpec {
        seed,
        ..PlantedShiftSpec::default()
    };
    let (source, target, manifest) = gen_planted_shift::<f64>(&spec).unwrap();
    (source, target, manifest.ground_truth_corrupt_dims.unwrap())
}

fn trained(source: &Dataset<f64>, seed: u64) -> ModelParams<f64> {
    let cfg = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    train_source(source, &linear_arch(), &cfg).unwrap()
}

fn target_spectrum(params: &ModelParams<f64>, target: &Dataset<f64>, seed: u64) -> UtrSpectrum<f64> {
    let cfg = PerturbationConfig {
        seed,
        ..PerturbationConfig::default()
    };
    channel_ud(params, target.features.view(), &cfg).unwrap()
}

// ---------------------------------------------------------------------------
// Gradients
// ---------------------------------------------------------------------------

/// Central finite differences over every parameter entry of `params`.
fn fd_gradient(params: &mut ModelParams<f64>, mut loss: impl FnMut(&ModelParams<f64>) -> f64) -> Vec<f64> {
    let h = 1e-5;
    let count = params.entry_count();
    let mut numeric = Vec::with_capacity(count);
    for idx in 0..count {
        let mut probe = |delta: f64, params: &mut ModelParams<f64>| -> f64 {
            let mut i = 0;
            params.visit_entries_mut(|v| {
                if i == idx {
                    *v += delta;
                }
                i += 1;
            });
            let value = loss(params);
            let mut j = 0;
            params.visit_entries_mut(|v| {
                if j == idx {
                    *v -= delta;
                }
                j += 1;
            });
            value
        };
        let plus = probe(h, params);
        let minus = probe(-h, params);
        numeric.push((plus - minus) / (2.0 * h));
    }
    numeric
}

fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| {
            let diff = (a - n).abs();
            let scale = a.abs().max(n.abs());
            // Entries a loss does not touch carry only finite-difference
            // noise; below 1e-9 absolute they count as matching.
            if diff <= 1e-9 {
                0.0
            } else {
                diff / scale
            }
        })
        .fold(0.0, f64::max)
}

#[test]
fn analytic_gradients_match_finite_differences() {
    let t0 = Instant::now();
    let arch = ArchitectureSpec {
        input_dim: 3,
        hidden_dims: vec![4],
        bottleneck_dim: 3,
        num_classes: 3,
        activation: Activation::Tanh,
    };
    let mut worst: Vec<(String, f64)> = Vec::new();
    for instance in 0..20u64 {
        let mut r = rng::stream(instance, "acceptance-grad", 0);
        let mut params: ModelParams<f64> = init_params(&arch, instance).unwrap();
        let x = Array2::from_shape_fn((4, 3), |_| r.gen_range(-1.5..1.5));
        let labels: Vec<usize> = (0..4).map(|_| r.gen_range(0..3)).collect();
        let source_feats = Array2::from_shape_fn((4, 3), |_| r.gen_range(-1.0..1.0));
        let kd_w = Array1::from_shape_fn(3, |_| r.gen_range(0.1..1.0));
        let risk_rows = vec![0, 2];

        let only = |lambda: f64, gamma: f64, discover: f64, div: f64| CalibrationWeights {
            lambda,
            gamma,
            discover,
            div,
        };
        let calibration = |params: &ModelParams<f64>, w: &CalibrationWeights| {
            calibration_value_grad(
                params,
                x.view(),
                source_feats.view(),
                kd_w.view(),
                &labels,
                &risk_rows,
                w,
            )
            .unwrap()
        };

        let mut check = |name: &str, analytic: Vec<f64>, numeric: Vec<f64>| {
            worst.push((format!("{name}#{instance}"), max_rel_error(&analytic, &numeric)));
        };

        let (_, grads) = ce_ls_value_grad(&params, x.view(), &labels, 0.1).unwrap();
        let analytic = grads.flatten();
        let numeric = fd_gradient(&mut params, |p| {
            let fwd = forward_pass(p, x.view()).unwrap();
            cross_entropy_ls(fwd.probs.view(), &labels, 0.1).unwrap()
        });
        check("smoothed_cross_entropy", analytic, numeric);

        let analytic = calibration(&params, &only(1.0, 0.0, 0.0, 0.0)).1.flatten();
        let numeric = fd_gradient(&mut params, |p| {
            let fwd = forward_pass(p, x.view()).unwrap();
            loss_kd(source_feats.view(), fwd.features().view(), kd_w.view()).unwrap()
        });
        check("distillation", analytic, numeric);

        let analytic = calibration(&params, &only(0.0, 1.0, 0.0, 0.0)).1.flatten();
        let numeric = fd_gradient(&mut params, |p| {
            let fwd = forward_pass(p, x.view()).unwrap();
            loss_forget(fwd.probs.view(), &labels, &risk_rows).unwrap()
        });
        check("forget", analytic, numeric);

        let analytic = calibration(&params, &only(0.0, 0.0, 1.0, 0.0)).1.flatten();
        let numeric = fd_gradient(&mut params, |p| {
            let fwd = forward_pass(p, x.view()).unwrap();
            loss_discover(fwd.probs.view())
        });
        check("discover", analytic, numeric);

        let analytic = calibration(&params, &only(0.0, 0.0, 0.0, 1.0)).1.flatten();
        let numeric = fd_gradient(&mut params, |p| {
            let fwd = forward_pass(p, x.view()).unwrap();
            loss_div(fwd.probs.view())
        });
        check("diversity", analytic, numeric);

        let (_, grads) = adapt_value_grad(&params, x.view(), &AdaptTargets::Hard(&labels)).unwrap();
        let analytic = grads.flatten();
        let numeric = fd_gradient(&mut params, |p| {
            let fwd = forward_pass(p, x.view()).unwrap();
            loss_adapt(fwd.probs.view(), &labels).unwrap()
        });
        check("adapt", analytic, numeric);
    }
    let (worst_name, worst_err) = worst
        .iter()
        .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
        .unwrap();
    verdict(
        *worst_err <= 1e-4,
        t0,
        30,
        "analytic gradients of all six losses match central finite differences",
        &format!("worst relative error {worst_err:.2e} at {worst_name}"),
    );
}

// ---------------------------------------------------------------------------
// Uncertainty algebra
// ---------------------------------------------------------------------------

#[test]
fn uncertainty_spectrum_algebra_identities_hold() {
    let t0 = Instant::now();
    let mut fails = Vec::new();

    // Grand mean agreement between the two marginals.
    let mut r = rng::stream(5, "acceptance-algebra", 0);
    let spectrum =
        UtrSpectrum::new(Array2::<f64>::from_shape_fn((40, 7), |_| r.gen_range(0.0..2.0)), "random")
            .unwrap();
    let d = utr_domain(&spectrum).unwrap();
    let i = utr_instance(&spectrum).unwrap();
    let gap = (d.values.mean().unwrap() - i.values.mean().unwrap()).abs();
    if gap > 1e-9 {
        fails.push(format!("marginal means differ by {gap:.2e}"));
    }

    // Full-momentum online update reproduces the batch statistic.
    let previous = utr_domain(
        &UtrSpectrum::new(Array2::<f64>::from_shape_fn((10, 7), |_| r.gen_range(0.0..2.0)), "prev")
            .unwrap(),
    )
    .unwrap();
    let online = utr_domain_online(Some(&previous), &spectrum, 1.0).unwrap();
    let gap = online
        .values
        .iter()
        .zip(&d.values)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    if gap > 1e-9 {
        fails.push(format!("momentum-1 online update deviates by {gap:.2e}"));
    }

    // Zero perturbation range leaves nothing to vary.
    let params: ModelParams<f64> = init_params(&linear_arch(), 3).unwrap();
    let x = Array2::from_shape_fn((12, 16), |_| r.gen_range(-1.0..1.0));
    let cfg = PerturbationConfig {
        low: 0.0,
        high: 0.0,
        ..PerturbationConfig::default()
    };
    let zero = channel_ud(&params, x.view(), &cfg).unwrap();
    if zero.values().iter().any(|&v| v != 0.0) {
        fails.push("zero-width perturbation produced nonzero variance".into());
    }

    // Two scalar draws on a bias-free linear encoder follow the closed form
    // ((r1 - r2) / 2)^2 * (W x)_i^2 exactly.
    let arch = ArchitectureSpec {
        input_dim: 5,
        hidden_dims: vec![],
        bottleneck_dim: 5,
        num_classes: 3,
        activation: Activation::Relu,
    };
    let mut base: ModelParams<f64> = init_params(&arch, 8).unwrap();
    for v in base.encoder_layers[0].bias.iter_mut() {
        *v = 0.0;
    }
    let (r1, r2) = (0.031, -0.044);
    let mut s1 = rng::stream(0, "acceptance-scalar", 1);
    let mut s2 = rng::stream(0, "acceptance-scalar", 2);
    let m1 = perturb_params(&base, NoiseMode::Scalar, r1, r1, &mut s1).unwrap();
    let m2 = perturb_params(&base, NoiseMode::Scalar, r2, r2, &mut s2).unwrap();
    let xs = Array2::from_shape_fn((9, 5), |_| r.gen_range(-1.5..1.5));
    let spectrum = spectrum_from_encoders(&[m1, m2], xs.view(), "pair").unwrap();
    let wx = xs.dot(&base.encoder_layers[0].weight.t());
    let half_gap = (r1 - r2) / 2.0;
    let worst = spectrum
        .values()
        .iter()
        .zip(wx.iter())
        .map(|(&got, &z)| (got - half_gap * half_gap * z * z).abs())
        .fold(0.0, f64::max);
    if worst > 1e-9 {
        fails.push(format!("scalar-mode closed form off by {worst:.2e}"));
    }

    verdict(
        fails.is_empty(),
        t0,
        10,
        "uncertainty spectrum obeys its algebraic identities",
        &fails.join("; "),
    );
}

// ---------------------------------------------------------------------------
// Planted-shift reproductions
// ---------------------------------------------------------------------------

#[test]
fn low_uncertainty_channels_predict_better_and_high_ones_are_expendable() {
    let t0 = Instant::now();
    let mut low_wins = 0usize;
    let mut ablation_matches = 0usize;
    let mut ablation_total = 0usize;
    for &s in &SEEDS {
        let (source, target, _) = planted(s);
        let params = trained(&source, s);
        let domain = utr_domain(&target_spectrum(&params, &target, s)).unwrap();
        let split = split_channels(&domain, 8).unwrap();

        let acc_low = masked_accuracy(&params, &target, &split.low_idx).unwrap();
        let acc_high = masked_accuracy(&params, &target, &split.high_idx).unwrap();
        if acc_low > acc_high {
            low_wins += 1;
        }

        // Oracle: dropping a channel the ranking calls untrustworthy should
        // cost the target less than it costs the source.
        let all: Vec<usize> = (0..16).collect();
        let base_s = masked_accuracy(&params, &source, &all).unwrap();
        let base_t = masked_accuracy(&params, &target, &all).unwrap();
        for &channel in &split.high_idx {
            let keep: Vec<usize> = (0..16).filter(|&j| j != channel).collect();
            let hurt_s = base_s - masked_accuracy(&params, &source, &keep).unwrap();
            let hurt_t = base_t - masked_accuracy(&params, &target, &keep).unwrap();
            ablation_total += 1;
            if hurt_t < hurt_s {
                ablation_matches += 1;
            }
        }
    }
    let match_frac = ablation_matches as f64 / ablation_total as f64;
    verdict(
        low_wins >= 4 && match_frac >= 0.6,
        t0,
        180,
        "low-uncertainty channel half predicts the target better and flags expendable channels",
        &format!(
            "masked accuracy favors the low half on {low_wins}/5 seeds; {ablation_matches}/{ablation_total} flagged channels hurt the target less when ablated"
        ),
    );
}

#[test]
fn classical_measurements_favor_the_low_uncertainty_half() {
    let t0 = Instant::now();
    let mut favor_count = vec![0usize; MEASUREMENT_NAMES.len()];
    for &s in &SEEDS {
        let (source, target, _) = planted(s);
        let params = trained(&source, s);
        let domain = utr_domain(&target_spectrum(&params, &target, s)).unwrap();
        let split = split_channels(&domain, 8).unwrap();
        let report = build_report(&params, &source, &target, &split, s).unwrap();
        for (slot, name) in favor_count.iter_mut().zip(MEASUREMENT_NAMES) {
            if report.entries[name].favors_low() {
                *slot += 1;
            }
        }
    }
    let majorities: Vec<&str> = MEASUREMENT_NAMES
        .iter()
        .zip(&favor_count)
        .filter(|(_, &c)| c >= 3)
        .map(|(&n, _)| n)
        .collect();
    let tally: Vec<String> = MEASUREMENT_NAMES
        .iter()
        .zip(&favor_count)
        .map(|(n, c)| format!("{n} {c}/5"))
        .collect();
    verdict(
        majorities.len() >= 5,
        t0,
        180,
        "at least five of seven transferability measurements favor the low-uncertainty half",
        &format!(
            "{} measurements reach a majority of seeds [{}]",
            majorities.len(),
            tally.join(", ")
        ),
    );
}

#[test]
fn full_adaptation_beats_the_adaptation_only_baseline() {
    let t0 = Instant::now();
    let mut margins = Vec::new();
    for &s in &SEEDS {
        let (source, target, _) = planted(s);
        let params = trained(&source, s);
        let accuracy_of = |p: &ModelParams<f64>| {
            let pred = predict_labels(p, target.features.view()).unwrap();
            let labels = target.require_labels().unwrap();
            pred.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / labels.len() as f64
        };
        let full_cfg = CafConfig {
            perturb: PerturbationConfig {
                seed: s,
                ..PerturbationConfig::default()
            },
            lambda0: 1.0,
            lambda_cutoff_epoch: 6,
            div_weight: 1.0,
            train: TrainConfig {
                learning_rate: 0.01,
                seed: s,
                ..TrainConfig::default()
            },
            ..CafConfig::default()
        };
        let baseline_cfg = CafConfig {
            lambda0: 0.0,
            gamma: 0.0,
            discover_weight: 0.0,
            div_weight: 0.0,
            ..full_cfg.clone()
        };
        let full = accuracy_of(&run_caf(&params, &target, &full_cfg).unwrap().target_params);
        let baseline =
            accuracy_of(&run_caf(&params, &target, &baseline_cfg).unwrap().target_params);
        margins.push((full - baseline) * 100.0);
    }
    let mean = margins.iter().sum::<f64>() / margins.len() as f64;
    verdict(
        mean >= 2.0,
        t0,
        300,
        "calibrated adaptation beats the adaptation-only baseline by two points",
        &format!(
            "mean margin {mean:+.2} accuracy points (per seed: {})",
            margins
                .iter()
                .map(|m| format!("{m:+.1}"))
                .collect::<Vec<_>>()
                .join(", ")
        ),
    );
}

fn curve_endpoints(instance: &UtrInstance<f64>, correct: &[bool]) -> Option<(f64, f64)> {
    let lo = instance.values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = instance.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let thresholds: Vec<f64> = (0..20).map(|j| lo + (hi - lo) * j as f64 / 19.0).collect();
    let points = accuracy_utr_curve(instance, correct, &thresholds).unwrap();
    let first = points.iter().find_map(|p| p.accuracy)?;
    let last = points
        .iter()
        .rev()
        .find(|p| p.count >= 20)
        .and_then(|p| p.accuracy)?;
    Some((first, last))
}

#[test]
fn accuracy_declines_as_instance_uncertainty_rises() {
    let t0 = Instant::now();
    let mut wins = 0usize;
    let mut detail = Vec::new();
    for &s in &SEEDS {
        let (source, target, _) = planted(s);
        let params = trained(&source, s);
        let instance = utr_instance(&target_spectrum(&params, &target, s)).unwrap();
        let pred = predict_labels(&params, target.features.view()).unwrap();
        let labels = target.require_labels().unwrap();
        let correct: Vec<bool> = pred.iter().zip(labels).map(|(p, l)| p == l).collect();
        let (first, last) = curve_endpoints(&instance, &correct)
            .expect("curve endpoints defined on the planted task");
        if first > last {
            wins += 1;
        }
        detail.push(format!("{first:.3}>{last:.3}"));
    }
    verdict(
        wins >= 4,
        t0,
        60,
        "accuracy at the lowest uncertainty threshold beats the populated high end",
        &format!("{wins}/5 seeds ({})", detail.join(", ")),
    );
}

// ---------------------------------------------------------------------------
// Measurement reference values
// ---------------------------------------------------------------------------

/// Product of seeded Givens rotations: orthogonal by construction.
fn random_rotation(dim: usize, seed: u64) -> Array2<f64> {
    let mut r = rng::stream(seed, "acceptance-rotation", 0);
    let mut q = Array2::<f64>::eye(dim);
    for a in 0..dim {
        for b in (a + 1)..dim {
            let theta: f64 = r.gen_range(0.0..std::f64::consts::TAU);
            let (c, s) = (theta.cos(), theta.sin());
            for row in 0..dim {
                let (u, v) = (q[[row, a]], q[[row, b]]);
                q[[row, a]] = c * u - s * v;
                q[[row, b]] = s * u + c * v;
            }
        }
    }
    q
}

#[test]
fn measurement_reference_values_hold() {
    let t0 = Instant::now();
    let mut fails = Vec::new();
    let mut check = |ok: bool, what: &str| {
        if !ok {
            fails.push(what.to_string());
        }
    };
    let mut r = rng::stream(2, "acceptance-measure", 0);

    let x = Array2::from_shape_fn((60, 5), |_| r.gen_range(-1.0..1.0));
    let far = &x + 25.0;
    check(mmd(x.view(), x.view()).unwrap() <= 1e-12, "mmd of identical samples is zero");
    check(
        mmd(x.view(), far.view()).unwrap() > 0.5,
        "mmd separates distant clusters",
    );

    let spec = PlantedShiftSpec {
        n_per_domain: 500,
        shift_strength: 0.0,
        ..PlantedShiftSpec::default()
    };
    let identity: Vec<usize> = (0..spec.num_classes).collect();
    let (same_a, same_b, _) = gen_planted_shift_with_permutation::<f64>(&spec, &identity).unwrap();
    check(
        mmd(same_a.features.view(), same_b.features.view()).unwrap() <= 0.1,
        "mmd of matching distributions stays under 0.1",
    );

    let mut ad_rng = rng::stream(2, "acceptance-measure", 1);
    let same = proxy_a_distance(x.view(), x.view(), &mut ad_rng).unwrap();
    let apart = proxy_a_distance(x.view(), far.view(), &mut ad_rng).unwrap();
    check(same <= 0.7, "proxy A-distance of identical samples is small");
    check(apart >= 1.5, "proxy A-distance of separated clusters nears 2");

    let angle_same: f64 = corresponding_angle(x.view(), x.view(), 3).unwrap();
    check(angle_same.abs() <= 1e-6, "corresponding angle of a matrix with itself is zero");

    let labels: Vec<usize> = (0..60).map(|i| i % 4).collect();
    let mut one_hot = Array2::<f64>::zeros((60, 4));
    for (i, &l) in labels.iter().enumerate() {
        one_hot[[i, l]] = 1.0;
    }
    let uniform = Array2::<f64>::from_elem((60, 4), 0.25);
    check(
        leep(one_hot.view(), &labels).unwrap().abs() <= 1e-9,
        "leep of a perfect one-hot predictor is zero",
    );
    check(
        (leep(uniform.view(), &labels).unwrap() - 0.25f64.ln()).abs() <= 1e-9,
        "leep of a uniform predictor is ln(1/K)",
    );

    check(nce(&labels, &labels).unwrap().abs() <= 1e-12, "nce of identical labelings is zero");
    let constant = vec![0usize; 60];
    let halves: Vec<usize> = (0..60).map(|i| i % 2).collect();
    check(
        (nce(&constant, &halves).unwrap() + std::f64::consts::LN_2).abs() <= 1e-9,
        "nce of an uninformative predictor is -ln 2",
    );

    let feats = Array2::from_shape_fn((80, 6), |_| r.gen_range(-1.0..1.0));
    let ylab: Vec<usize> = (0..80).map(|_| r.gen_range(0..3)).collect();
    let plain = logme(feats.view(), &ylab, 200, 1e-9).unwrap();
    let rotated_feats = feats.dot(&random_rotation(6, 4));
    let rotated = logme(rotated_feats.view(), &ylab, 200, 1e-9).unwrap();
    check(
        (plain.value - rotated.value).abs() <= 1e-6,
        "logme is rotation invariant",
    );
    let signal = Array2::from_shape_fn((80, 1), |(i, _)| ylab[i] as f64 + 0.01 * r.gen_range(-1.0..1.0));
    let noise = Array2::from_shape_fn((80, 1), |_| r.gen_range(-1.0..1.0));
    check(
        logme(signal.view(), &ylab, 200, 1e-9).unwrap().value
            > logme(noise.view(), &ylab, 200, 1e-9).unwrap().value,
        "logme prefers a predictive feature over noise",
    );

    verdict(
        fails.is_empty(),
        t0,
        60,
        "transferability measurements reproduce their reference values",
        &fails.join("; "),
    );
}

// ---------------------------------------------------------------------------
// CLI determinism and atomicity
// ---------------------------------------------------------------------------

fn cli(args: &[&str], config: &Path, dir: &Path) {
    let out = Command::new(env!("CARGO_BIN_EXE_utrcaf"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(dir)
        .env_remove("UTRCAF_SEED")
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "utrcaf {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

const PIPELINE_FILES: [&str; 13] = [
    "source.csv",
    "target.csv",
    "manifest.json",
    "source_model.json",
    "spectrum.csv",
    "utr_d.csv",
    "utr_i.csv",
    "adapted_model.json",
    "adapted_state.json",
    "loss_history.csv",
    "report.json",
    "report.csv",
    "curve.csv",
];

#[test]
fn cli_outputs_are_reproducible_and_never_truncated() {
    let t0 = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("config.json");
    std::fs::write(
        &config,
        r#"{
            "data": {"n_per_domain": 400, "seed": 5},
            "train": {"epochs": 20, "seed": 5},
            "perturb": {"seed": 5},
            "caf": {"max_epochs": 8, "lambda_cutoff_epoch": 4,
                    "train": {"seed": 5}, "perturb": {"seed": 5}},
            "eval": {"curve_points": 10}
        }"#,
    )
    .unwrap();
    let dir = tmp.path().join("out");
    let commands = ["synth", "train-source", "utr", "adapt", "eval"];

    let mut fails = Vec::new();
    for command in commands {
        cli(&[command], &config, &dir);
    }
    let snapshot: Vec<Vec<u8>> = PIPELINE_FILES
        .iter()
        .map(|f| std::fs::read(dir.join(f)).unwrap())
        .collect();
    for command in commands {
        cli(&[command], &config, &dir);
    }
    for (f, before) in PIPELINE_FILES.iter().zip(&snapshot) {
        if &std::fs::read(dir.join(f)).unwrap() != before {
            fails.push(format!("{f} not byte-identical across reruns"));
        }
    }

    // Round-trips are exact.
    let dataset: Dataset<f64> = io::load_dataset(&dir.join("source.csv")).unwrap();
    let copy = tmp.path().join("copy.csv");
    io::save_dataset(&dataset, &copy).unwrap();
    let reread: Dataset<f64> = io::load_dataset(&copy).unwrap();
    if reread.features != dataset.features || reread.labels != dataset.labels {
        fails.push("dataset CSV round-trip not exact".into());
    }
    let params: ModelParams<f64> = io::load_checkpoint(&dir.join("source_model.json")).unwrap();
    let copy = tmp.path().join("copy.json");
    io::save_checkpoint(&params, &copy).unwrap();
    let reread: ModelParams<f64> = io::load_checkpoint(&copy).unwrap();
    if reread != params {
        fails.push("checkpoint JSON round-trip not exact".into());
    }

    // A sigkilled writer must not leave truncated files at declared paths.
    let big_config = tmp.path().join("big.json");
    std::fs::write(&big_config, r#"{"data": {"n_per_domain": 400000}}"#).unwrap();
    let crash_dir = tmp.path().join("crash");
    let mut child = Command::new(env!("CARGO_BIN_EXE_utrcaf"))
        .args(["synth", "--config"])
        .arg(&big_config)
        .arg("--out")
        .arg(&crash_dir)
        .spawn()
        .unwrap();
    std::thread::sleep(std::time::Duration::from_millis(300));
    unsafe {
        libc::kill(child.id() as i32, libc::SIGKILL);
    }
    child.wait().unwrap();
    for f in ["source.csv", "target.csv"] {
        let path = crash_dir.join(f);
        if path.exists() {
            let complete = io::load_dataset::<f64>(&path)
                .map(|d| d.features.nrows() == 400000)
                .unwrap_or(false);
            if !complete {
                fails.push(format!("{f} exists but is truncated after kill"));
            }
        }
    }

    verdict(
        fails.is_empty(),
        t0,
        120,
        "pipeline outputs are byte-reproducible, round-trip exact, and crash-safe",
        &fails.join("; "),
    );
}

// ---------------------------------------------------------------------------
// Alternating schedule
// ---------------------------------------------------------------------------

#[test]
fn schedule_alternates_phases_and_drops_distillation_at_the_cutoff() {
    let t0 = Instant::now();
    let spec = PlantedShiftSpec {
        n_per_domain: 120,
        seed: 7,
        ..PlantedShiftSpec::default()
    };
    let (source, target, _) = gen_planted_shift::<f64>(&spec).unwrap();
    let params = train_source(
        &source,
        &linear_arch(),
        &TrainConfig {
            epochs: 10,
            seed: 7,
            ..TrainConfig::default()
        },
    )
    .unwrap();
    let cfg = CafConfig {
        max_epochs: 6,
        lambda_cutoff_epoch: 4,
        ..CafConfig::default()
    };
    let state = run_caf(&params, &target, &cfg).unwrap();

    let mut fails = Vec::new();
    let phase_of_epoch = |epoch: usize| -> Vec<Phase> {
        let mut phases: Vec<Phase> = state
            .loss_history
            .iter()
            .filter(|rec| rec.epoch == epoch)
            .map(|rec| rec.phase)
            .collect();
        phases.dedup();
        phases
    };
    for epoch in 0..6 {
        let phases = phase_of_epoch(epoch);
        let expected = if epoch % 2 == 0 {
            Phase::Calibration
        } else {
            Phase::Adaptation
        };
        if phases != vec![expected] {
            fails.push(format!("epoch {epoch} recorded phases {phases:?}"));
        }
    }
    let calibration_epochs: std::collections::BTreeSet<usize> = state
        .loss_history
        .iter()
        .filter(|rec| rec.phase == Phase::Calibration)
        .map(|rec| rec.epoch)
        .collect();
    let adaptation_epochs: std::collections::BTreeSet<usize> = state
        .loss_history
        .iter()
        .filter(|rec| rec.phase == Phase::Adaptation)
        .map(|rec| rec.epoch)
        .collect();
    if calibration_epochs.len() != 3 || adaptation_epochs.len() != 3 {
        fails.push(format!(
            "expected 3 calibration and 3 adaptation phases, got {} and {}",
            calibration_epochs.len(),
            adaptation_epochs.len()
        ));
    }

    let lambdas: Vec<(usize, f64)> = state
        .loss_history
        .iter()
        .filter(|rec| rec.loss_name == "lambda")
        .map(|rec| (rec.epoch, rec.value))
        .collect();
    if lambdas != vec![(0, 10.0), (2, 10.0), (4, 0.0)] {
        fails.push(format!("distillation weight schedule was {lambdas:?}"));
    }

    verdict(
        fails.is_empty(),
        t0,
        60,
        "calibration and adaptation alternate and the distillation weight steps to zero",
        &fails.join("; "),
    );
}
