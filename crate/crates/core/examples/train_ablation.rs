//! Desk-scale ablation: the same synthetic split trained with and without the
//! bag embedding loss. Saves each best checkpoint and reloads it for testing.
//!
//! ```bash
//! cargo run --release --example train_ablation -- 40
//! ```

use belmil::data::{make_splits, synth_generate, SynthConfig};
use belmil::encoder::EncoderConfig;
use belmil::metrics::evaluate;
use belmil::train::{cross_validate, predict, TrainConfig};
use belmil::Checkpoint;

fn main() -> belmil::Result<()> {
    let epochs: usize = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(15);
    let seed = 7;
    let synth = synth_generate(
        &SynthConfig {
            witness_rate: 0.2,
            ..SynthConfig::default()
        },
        seed,
    )?;
    let dataset = &synth.dataset;
    let split = make_splits(&dataset.manifest, 0.2, 1, seed)?;
    let out = std::env::temp_dir().join("belmil-train-ablation");
    std::fs::create_dir_all(&out).map_err(|e| belmil::Error::io(&out, e))?;

    for use_bel in [true, false] {
        let config = TrainConfig {
            learning_rate: 3e-4,
            epochs,
            seed,
            use_bel,
            encoder: EncoderConfig {
                model_width: 64,
                ffn_width: 64,
                landmarks: 16,
                ..EncoderConfig::tiny(dataset.manifest.feature_width, dataset.manifest.class_count)
            },
            ..TrainConfig::default()
        };
        let run = cross_validate(dataset, &split, &config)?;
        let fold = &run.folds[0];
        let report = &fold.result.report;
        println!("{}", if use_bel { "CE + BEL" } else { "CE only" });
        for e in report.epochs.iter().step_by((epochs / 5).max(1)) {
            println!(
                "  epoch {:>3}: CE {:.4}  BEL {:.4}  val acc {:.3}",
                e.epoch, e.cross_entropy, e.bel, e.validation_accuracy
            );
        }
        let cosine = fold.result.last.bank.max_cross_similarity(config.loss.epsilon).unwrap_or(f64::NAN);
        println!(
            "  best epoch {}, test accuracy {:.3}, max prototype cosine {cosine:.3}",
            report.best_epoch, fold.test_metrics.accuracy
        );

        let path = out.join(if use_bel { "bel.milt" } else { "ce.milt" });
        fold.result.best.save(&path)?;
        let restored = Checkpoint::load(&path)?;
        let test = dataset.select(&split.test_ids)?;
        let metrics = evaluate(&predict(&restored.params, &restored.config, &test)?)?;
        println!("  reloaded {}: test accuracy {:.3}", path.display(), metrics.accuracy);
    }
    Ok(())
}
