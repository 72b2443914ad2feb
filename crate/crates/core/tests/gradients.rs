mod common;

use common::{gradient_cases, run_gradient_suite, FD_TOL};

#[test]
fn every_op_and_loss_matches_finite_differences() {
    for (name, worst) in run_gradient_suite(5) {
        assert!(worst <= FD_TOL, "{name}: max relative error {worst:e}");
    }
}

#[test]
fn suite_covers_every_loss() {
    let names: Vec<&str> = gradient_cases().iter().map(|(n, _)| *n).collect();
    for required in [
        "asc_loss",
        "seg_cross_entropy",
        "asc_objective",
        "build_affinity_space",
        "adversarial_loss",
        "discriminator_loss",
    ] {
        assert!(names.contains(&required), "missing {required}");
    }
}
