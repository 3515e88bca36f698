//! Reverse-mode gradients against central finite differences in `f64`.

mod common;

use common::{GRAD_CASES, GRAD_TOLERANCE};

fn run(name: &str) {
    let (_, case) = GRAD_CASES
        .iter()
        .find(|(n, _)| *n == name)
        .expect("known case");
    let err = case().expect("case evaluates");
    assert!(err <= GRAD_TOLERANCE, "{name}: max relative error {err:e}");
}

#[test]
fn binary_ops() {
    run("binary");
}

#[test]
fn unary_ops() {
    run("unary");
}

#[test]
fn matmul_and_linear() {
    run("matmul");
}

#[test]
fn movement_ops() {
    run("movement");
}

#[test]
fn reductions_softmax_layer_norm() {
    run("reduction");
}

#[test]
fn window_and_subpixel_layouts() {
    run("layout");
}

#[test]
fn cosine_attention_and_bias() {
    run("attention");
}

#[test]
fn stl2_block() {
    run("stl2");
}

#[test]
fn tab_block() {
    run("tab");
}

#[test]
fn full_model() {
    run("model");
}
