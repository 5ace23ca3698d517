mod common;

use common::*;
use lensformer::detector::ModelConfig;

const SEEDS: std::ops::Range<u64> = 0..20;

#[test]
fn every_op_matches_central_differences() {
    let mut failures = Vec::new();
    for (name, err, tol) in op_gradient_report(SEEDS) {
        println!("{name:<30} worst rel-err {err:.2e} (tol {tol:.0e})");
        if !(err < tol) {
            failures.push(format!("{name}: {err:.3e} >= {tol:.0e}"));
        }
    }
    assert!(failures.is_empty(), "{failures:#?}");
}

#[test]
fn desk_detector_parameter_gradients() {
    let cfg = ModelConfig::desk();
    for seed in SEEDS {
        let e = detector_gradient_error(&cfg, seed, 2);
        assert!(e < OP_TOL, "seed {seed}: {e:.3e}");
    }
}

#[test]
fn cnn_only_and_two_tower_gradients() {
    let cfg = ModelConfig::desk();
    for seed in 0..3 {
        assert!(detector_gradient_error(&cfg.cnn_only(), seed, 2) < OP_TOL);
        assert!(detector_gradient_error(&cfg.two_tower(), seed, 2) < OP_TOL);
    }
}

#[test]
fn finite_difference_oracle_flags_a_wrong_gradient() {
    // Guard against a vacuous checker: scale's forward is fed through a
    // non-differentiable detour that the tape does not see.
    let x = random_tensor(&mut rng(1), &[3], 0.5, 1.0);
    let errs = gradient_errors(1, &[x], |tape, v| {
        let doubled = tape.constant(v[0].value().map(|a| a * a));
        v[0].add(&doubled)
    });
    assert!(errs[0] > 1e-2);
}
