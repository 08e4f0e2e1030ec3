//! Bag-level metrics from a prediction set, the files `report` writes, and
//! the fold-wise mean ± sample standard deviation.
//!
//! ```bash
//! cargo run --example metrics_report
//! ```

use belmil::metrics::{evaluate, mean_std, Prediction, PredictionSet};
use belmil::report::emit_report;

fn main() -> belmil::Result<()> {
    let rows = [
        (0, [0.80, 0.15, 0.05], [0.6, 0.3, 0.1]),
        (0, [0.40, 0.50, 0.10], [0.2, 0.2, 0.6]),
        (1, [0.10, 0.70, 0.20], [0.5, 0.25, 0.25]),
        (1, [0.30, 0.30, 0.40], [1.0 / 3.0; 3]),
        (2, [0.05, 0.15, 0.80], [0.1, 0.1, 0.8]),
        (2, [0.20, 0.20, 0.60], [0.7, 0.2, 0.1]),
    ];
    let preds = PredictionSet {
        class_count: 3,
        predictions: rows
            .iter()
            .enumerate()
            .map(|(i, (label, probs, alpha))| Prediction {
                bag_id: format!("bag-{i}"),
                label: *label,
                probs: probs.to_vec(),
                attention: Some(alpha.to_vec()),
            })
            .collect(),
    };

    let report = evaluate(&preds)?;
    println!("accuracy {:.3}, macro F1 {:.3}", report.accuracy, report.macro_f1);
    println!("macro AUROC {:.3?}, per class {:.3?}", report.auroc_macro, report.auroc_per_class);
    println!("PR-AUC per class {:.3?}", report.pr_auc);
    println!("confusion (true × predicted) {:?}", report.confusion);

    let dir = std::env::temp_dir().join("belmil-report");
    let files = emit_report(&report, &preds, &dir)?;
    println!("wrote {} and {} PR curves to {}", files.metrics.display(), files.pr_curves.len(), dir.display());

    let folds = mean_std(&[0.5, 0.6, 0.7, 0.6, 0.6]).expect("non-empty");
    println!("fold accuracies 0.5 0.6 0.7 0.6 0.6 → {:.2} ± {:.4}", folds.mean, folds.std);
    Ok(())
}
