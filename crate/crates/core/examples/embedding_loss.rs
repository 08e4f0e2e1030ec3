//! The prototype bank and the bag embedding loss: warm-up, the pull and push
//! terms, and the EMA update.
//!
//! ```bash
//! cargo run --example embedding_loss
//! ```

use belmil::loss::{bel, bel_with_grad, total_loss, update_bank, LossConfig, PrototypeBank};
use ndarray::array;

fn main() -> belmil::Result<()> {
    let config = LossConfig::default();
    let mut bank = PrototypeBank::new(3);

    // Until every class has a prototype only cross-entropy counts.
    let probs = [0.7, 0.2, 0.1];
    let b = array![1.0, 0.0, 0.0];
    let (total, parts) = total_loss(&probs, 0, &b, &bank, &config)?;
    println!("empty bank: total {total:.4}, BEL active {}", parts.bel_active);

    bank.set(0, array![1.0, 0.1, 0.0]);
    bank.set(1, array![0.0, 1.0, 0.0]);
    bank.set(2, array![0.6, 0.0, 0.8]);
    println!("max cross-class cosine {:.3}", bank.max_cross_similarity(config.epsilon).unwrap());

    for (name, embedding) in [
        ("near its own prototype", array![1.0, 0.05, 0.0]),
        ("between classes 0 and 2", array![0.8, 0.0, 0.6]),
        ("pointing at class 1", array![0.0, 1.0, 0.0]),
    ] {
        let (loss, grad) = bel_with_grad(&embedding, 0, &bank, &config)?;
        println!("label 0, {name:<24} BEL {loss:.4}, |∇| {:.4}", grad.dot(&grad).sqrt());
    }

    // Margin m: pushes stop once a foreign prototype is within cosine m.
    for margin in [0.0, 0.25, 0.5] {
        let c = LossConfig { margin, ..config };
        println!("m = {margin:.2}: BEL {:.4}", bel(&array![0.8, 0.0, 0.6], 0, &bank, &c)?);
    }

    // With λ = 0.996 a prototype drifts slowly toward new embeddings.
    let target = array![0.0, 0.0, 1.0];
    for step in 1..=1000 {
        update_bank(&mut bank, 0, &target, config.update_ratio);
        if [1, 10, 100, 1000].contains(&step) {
            println!("after {step:>4} updates prototype 0 = {:.3}", bank.get(0).unwrap());
        }
    }
    Ok(())
}
