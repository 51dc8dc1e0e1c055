mod common;

use common::grad_cases::*;
use repcnn::nn::focal_loss;
use repcnn::Tensor;

fn assert_all(cases: Cases) {
    for (label, err) in cases {
        assert!(err < TOL, "{label}: {err}");
    }
}

#[test]
fn conv_configs() {
    assert_all(conv_cases());
}

#[test]
fn batchnorm_configs() {
    assert_all(batchnorm_cases());
}

#[test]
fn activation_configs() {
    assert_all(activation_cases());
}

#[test]
fn repblock_configs() {
    assert_all(repblock_cases());
}

#[test]
fn focal_loss_configs() {
    assert_all(focal_cases());
}

#[test]
fn whole_model_configs() {
    assert_all(model_cases());
}

#[test]
fn focal_loss_hand_value() {
    let (loss, _) = focal_loss(&Tensor::from_vec(vec![0.0]), &Tensor::from_vec(vec![1.0]), 2.0, 0.25).unwrap();
    let oracle = 0.25 * 0.25 * std::f64::consts::LN_2;
    assert!((loss as f64 - oracle).abs() < 1e-7, "{loss} vs {oracle}");
}
