//! Generate a synthetic MIL dataset, write it to disk, and read it back.
//!
//! ```bash
//! cargo run --example synthetic_dataset -- /tmp/belmil-synth
//! ```

use belmil::data::{make_splits, synth_generate, Dataset, SynthConfig};

fn main() -> belmil::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "target/example-synth".into());
    let config = SynthConfig {
        witness_rate: 0.2,
        ..SynthConfig::default()
    };
    let synth = synth_generate(&config, 7)?;

    let instances: usize = synth.dataset.bags.iter().map(|b| b.instance_count()).sum();
    let witnesses: usize = synth.witnesses.iter().flatten().filter(|w| **w).count();
    println!(
        "{} bags, {instances} instances, {witnesses} witnesses ({:.1}%)",
        synth.dataset.bags.len(),
        100.0 * witnesses as f64 / instances as f64
    );

    let manifest = synth.dataset.save(&out)?;
    let reloaded = Dataset::load(&manifest)?;
    assert_eq!(reloaded.bags, synth.dataset.bags);
    println!("wrote and reloaded {}", manifest.display());

    let split = make_splits(&reloaded.manifest, 0.2, 5, 7)?;
    println!("test bags: {}", split.test_ids.len());
    for fold in &split.folds {
        println!("  fold train {} / validation {}", fold.train_ids.len(), fold.validation_ids.len());
    }
    Ok(())
}
