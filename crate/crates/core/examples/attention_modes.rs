//! Exact versus Nyström attention on one bag: class probabilities, attention
//! weights, and how the landmark count trades accuracy for cost.
//!
//! ```bash
//! cargo run --release --example attention_modes
//! ```

use belmil::encoder::{forward, AttentionMode, EncoderConfig, ModelParams};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn main() -> belmil::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let features = Array2::from_shape_simple_fn((120, 32), || StandardNormal.sample(&mut rng));

    let exact_config = EncoderConfig {
        attention: AttentionMode::Exact,
        ..EncoderConfig::tiny(32, 3)
    };
    let params = ModelParams::init(&exact_config, &mut ChaCha8Rng::seed_from_u64(2));
    println!("{} parameters", params.parameter_count());

    let exact = forward(&features, &params, &exact_config, None)?;
    println!("exact      p = {:.4?}", exact.probs);
    let mut top: Vec<(usize, f64)> = exact.alpha.iter().copied().enumerate().collect();
    top.sort_by(|a, b| b.1.total_cmp(&a.1));
    println!("           top instances by α: {:.4?}", &top[..5]);

    for landmarks in [8, 32, 128] {
        let config = EncoderConfig {
            attention: AttentionMode::Nystrom,
            landmarks,
            ..exact_config.clone()
        };
        let out = forward(&features, &params, &config, None)?;
        let gap = out
            .alpha
            .iter()
            .zip(&exact.alpha)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        println!("m_L = {landmarks:<4} p = {:.4?}, max |α − α_exact| = {gap:.2e}", out.probs);
    }

    // Dropout on the attention weights is active only with an rng.
    let mut dropout = ChaCha8Rng::seed_from_u64(3);
    let noisy = forward(&features, &params, &exact_config, Some(&mut dropout))?;
    println!("with dropout p = {:.4?}", noisy.probs);
    Ok(())
}
