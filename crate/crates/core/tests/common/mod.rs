#![allow(dead_code)]

use belmil::data::{BagMeta, FeatureBag};
use belmil::encoder::{AttentionMode, EncoderConfig, ModelParams};
use belmil::loss::{bel, cross_entropy, LossConfig, PrototypeBank};
use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut r = rng(seed);
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(&mut r))
}

pub fn gaussian_vec(len: usize, seed: u64) -> Array1<f64> {
    let mut r = rng(seed);
    Array1::from_shape_simple_fn(len, || StandardNormal.sample(&mut r))
}

pub fn bag(id: &str, label: usize, features: Array2<f64>) -> FeatureBag {
    let meta = BagMeta {
        bag_id: id.into(),
        patient_id: format!("patient-{id}"),
        label,
    };
    FeatureBag::new(meta, features.mapv(|v| v as f32)).unwrap()
}

/// The small model used by the gradient criteria: H = 16, D = 32, 2 blocks, 3 classes.
pub fn small_config(attention: AttentionMode) -> EncoderConfig {
    EncoderConfig {
        input_width: 16,
        model_width: 32,
        ffn_width: 32,
        class_count: 3,
        blocks: 2,
        heads: 4,
        landmarks: 64,
        pinv_iterations: belmil::encoder::attention::PINV_ITERATIONS,
        attention_dropout: 0.2,
        attention,
    }
}

pub fn random_bank(classes: usize, width: usize, seed: u64) -> PrototypeBank {
    let mut bank = PrototypeBank::new(classes);
    for c in 0..classes {
        bank.set(c, gaussian_vec(width, seed + c as u64));
    }
    bank
}

/// `(cross-entropy, embedding loss)` of one forward pass, evaluated directly
/// from the model outputs.
pub fn loss_terms(
    features: &Array2<f64>,
    params: &ModelParams,
    config: &EncoderConfig,
    label: usize,
    bank: &PrototypeBank,
    dropout_seed: Option<u64>,
) -> (f64, f64) {
    let mut r = dropout_seed.map(rng);
    let out = belmil::encoder::forward(
        features,
        params,
        config,
        r.as_mut().map(|r| r as &mut dyn rand::RngCore),
    )
    .unwrap();
    let ce = cross_entropy(&out.probs, label);
    let b = bel(&out.embedding, label, bank, &LossConfig::default()).unwrap();
    (ce, b)
}

/// Central-difference step of the gradient criterion.
pub const FD_STEP: f64 = 1e-3;
/// Denominator floor for the relative error. Gradients that vanish by symmetry
/// (key biases under softmax shift invariance) are compared in absolute terms.
pub const FD_FLOOR: f64 = 1e-3;

pub struct GradientCheck {
    /// Worst per-tensor relative error of the cross-entropy-only gradient.
    pub ce_only: f64,
    /// Worst per-tensor relative error with the embedding loss active.
    pub with_bel: f64,
    pub worst_tensor: String,
    pub checked_entries: usize,
}

fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    norm(&diff) / norm(analytic).max(norm(numeric)).max(FD_FLOOR)
}

/// Parameters at which the gradients are probed.
#[derive(Clone, Copy, PartialEq)]
pub enum ProbePoint {
    /// Default initialization. The class token starts at scale 0.02 and feeds
    /// a LayerNorm, so the loss is sharply curved along it and a 1e-3 step
    /// leaves a truncation error of the same order as the tolerance.
    DefaultInit,
    /// Default initialization with a unit-scale class token.
    UnitClassToken,
}

/// Compares every parameter's analytic gradient against central differences
/// with step `step` on an N = 8 bag, once without and once with a complete
/// prototype bank.
pub fn check_gradients(
    attention: AttentionMode,
    dropout_seed: Option<u64>,
    point: ProbePoint,
    step: f64,
) -> GradientCheck {
    use belmil::train::compute_gradients;

    let config = small_config(attention);
    let mut params = ModelParams::init(&config, &mut rng(11));
    if point == ProbePoint::UnitClassToken {
        params.cls_token = gaussian(1, config.model_width, 14);
    }
    let features = gaussian(8, 16, 12);
    let label = 1;
    let bank = random_bank(3, 32, 13);
    let loss = LossConfig::default();
    let analytic = |bank: Option<&PrototypeBank>| {
        let mut r = dropout_seed.map(rng);
        compute_gradients(
            &params,
            &features,
            label,
            bank,
            &loss,
            &config,
            r.as_mut().map(|r| r as &mut dyn rand::RngCore),
        )
        .unwrap()
    };
    let ce_only = analytic(None);
    let with_bel = analytic(Some(&bank));
    assert!(!ce_only.loss.bel_active && with_bel.loss.bel_active);

    let mut perturbed = params.clone();
    let mut report = GradientCheck {
        ce_only: 0.0,
        with_bel: 0.0,
        worst_tensor: String::new(),
        checked_entries: 0,
    };
    for (index, name) in params.names().iter().enumerate() {
        let len = params.tensors()[index].len();
        let mut num_ce = vec![0.0; len];
        let mut num_total = vec![0.0; len];
        for j in 0..len {
            let original = params.tensors()[index].as_slice().unwrap()[j];
            let mut eval = |delta: f64| {
                perturbed.tensors_mut()[index].as_slice_mut().unwrap()[j] = original + delta;
                loss_terms(&features, &perturbed, &config, label, &bank, dropout_seed)
            };
            let (ce_plus, bel_plus) = eval(step);
            let (ce_minus, bel_minus) = eval(-step);
            perturbed.tensors_mut()[index].as_slice_mut().unwrap()[j] = original;
            num_ce[j] = (ce_plus - ce_minus) / (2.0 * step);
            num_total[j] = (ce_plus + bel_plus - ce_minus - bel_minus) / (2.0 * step);
        }
        let e_ce = relative_error(ce_only.grads[index].as_slice().unwrap(), &num_ce);
        let e_total = relative_error(with_bel.grads[index].as_slice().unwrap(), &num_total);
        if e_ce.max(e_total) > report.ce_only.max(report.with_bel) {
            report.worst_tensor = name.clone();
        }
        report.ce_only = report.ce_only.max(e_ce);
        report.with_bel = report.with_bel.max(e_total);
        report.checked_entries += len;
    }
    report
}
