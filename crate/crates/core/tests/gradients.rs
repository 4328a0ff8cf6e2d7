mod common;

use common::gradcases::{self, TOL};

fn check(err: f64) {
    assert!(err < TOL, "relative error {err:.3e}");
}

#[test]
fn linear() {
    check(gradcases::linear());
}

#[test]
fn conv1d() {
    check(gradcases::conv1d());
}

#[test]
fn elementwise_activations() {
    check(gradcases::elementwise_activations());
}

#[test]
fn shape_ops() {
    check(gradcases::shape_ops());
}

#[test]
fn softmax_and_channel_attention() {
    check(gradcases::softmax_and_channel_attention());
}

#[test]
fn dropout_with_fixed_mask() {
    check(gradcases::dropout_with_fixed_mask());
}

#[test]
fn lstm_step_over_a_sequence() {
    check(gradcases::lstm_step_over_a_sequence());
}

#[test]
fn losses() {
    check(gradcases::losses());
}

#[test]
fn kl_and_reparameterization() {
    check(gradcases::kl_and_reparameterization());
}

#[test]
fn full_rate_model() {
    check(gradcases::full_rate_model());
}

#[test]
fn full_vae_model() {
    check(gradcases::full_vae_model());
}
