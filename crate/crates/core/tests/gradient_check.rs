mod common;

use belmil::encoder::{AttentionMode, ModelParams};
use belmil::loss::LossConfig;
use belmil::train::compute_gradients;
use common::*;

fn assert_within(check: GradientCheck, label: &str) {
    println!(
        "{label}: {} entries, worst relative error CE {:.2e}, CE+BEL {:.2e} ({})",
        check.checked_entries, check.ce_only, check.with_bel, check.worst_tensor
    );
    assert!(check.ce_only < 1e-4, "{label}: CE gradient error {:.2e}", check.ce_only);
    assert!(check.with_bel < 1e-4, "{label}: CE+BEL gradient error {:.2e}", check.with_bel);
}

#[test]
fn exact_attention_gradients_match_central_differences() {
    let check = check_gradients(AttentionMode::Exact, None, ProbePoint::UnitClassToken, FD_STEP);
    assert_within(check, "exact");
}

#[test]
fn gradients_under_a_fixed_dropout_mask_match_central_differences() {
    let check = check_gradients(AttentionMode::Nystrom, Some(5), ProbePoint::UnitClassToken, FD_STEP);
    assert_within(check, "nystrom with dropout");
}

#[test]
fn default_initialization_gradients_match_with_a_finer_step() {
    let check = check_gradients(AttentionMode::Nystrom, Some(5), ProbePoint::DefaultInit, 1e-4);
    assert_within(check, "nystrom with dropout, default init, h = 1e-4");
}

#[test]
fn duplicated_cross_entropy_doubles_its_gradient() {
    // Seeding the backward sweep twice with the same upstream gradient is the
    // same as differentiating 2 · CE.
    let config = small_config(AttentionMode::Exact);
    let params = ModelParams::init(&config, &mut rng(3));
    let features = gaussian(5, 16, 4);
    let once = compute_gradients(&params, &features, 2, None, &LossConfig::default(), &config, None).unwrap();
    let trace = belmil::encoder::trace(&features, &params, &config, None).unwrap();
    let mut seed = ndarray::Array2::from_shape_vec((1, 3), trace.probs()).unwrap();
    seed[[0, 2]] -= 1.0;
    let mut twice = trace.tape.backward(&[(trace.logits, seed.clone()), (trace.logits, seed)]);
    for (var, single) in trace.params.tensors().into_iter().zip(&once.grads) {
        let doubled = twice.take(*var).unwrap();
        for (d, s) in doubled.iter().zip(single) {
            assert!((d - 2.0 * s).abs() <= 1e-12 * (1.0 + s.abs()));
        }
    }
}
