mod common;

use common::GradCase;

const TOL: f64 = 1e-4;

fn check(c: GradCase) {
    assert!(c.tensors > 0, "{}: nothing checked", c.name);
    assert!(c.worst < TOL, "{}: relative error {:.3e}", c.name, c.worst);
}

#[test]
fn adain_matches_finite_differences() {
    check(common::adain_case());
}

#[test]
fn diversify_matches_finite_differences() {
    check(common::diversify_case());
}

#[test]
fn style_mlp_matches_finite_differences() {
    check(common::style_mlp_case());
}

#[test]
fn dfe_block_matches_finite_differences() {
    check(common::dfe_case());
}

#[test]
fn reversed_path_matches_finite_differences() {
    check(common::grl_case());
}

#[test]
fn losses_match_finite_differences() {
    check(common::losses_case());
}

#[test]
fn full_model_micro_batch_matches_finite_differences() {
    check(common::full_model_case());
}

#[test]
fn each_component_alone_matches_finite_differences() {
    for (dda, dfe, dd) in [(false, false, false), (true, false, false), (false, true, false), (false, false, true)] {
        let c = common::model_case(common::tiny_model(dda, dfe, dd));
        assert!(c.worst < TOL, "dda={dda} dfe={dfe} dd={dd}: {:.3e}", c.worst);
    }
}
