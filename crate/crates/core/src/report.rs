//! Writes metrics, PR-curve points, and attention weights to disk.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::metrics::{pr_curves, MetricsReport, PredictionSet};

/// Paths written by [`emit_report`].
#[derive(Clone, Debug, Default)]
pub struct ReportFiles {
    pub metrics: PathBuf,
    pub pr_curves: Vec<PathBuf>,
    pub attention: Option<PathBuf>,
}

/// Writes `metrics.json`, one `pr_curve_class_<c>.csv` per class with
/// positives, and `attention.csv` when any prediction carries attention.
pub fn emit_report(report: &MetricsReport, preds: &PredictionSet, dir: impl AsRef<Path>) -> Result<ReportFiles> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let metrics = dir.join("metrics.json");
    fs::write(&metrics, serde_json::to_string_pretty(report)?).map_err(|e| Error::io(&metrics, e))?;

    let mut files = ReportFiles {
        metrics,
        ..ReportFiles::default()
    };
    for (class, curve) in pr_curves(preds).into_iter().enumerate() {
        let Some(curve) = curve else { continue };
        let path = dir.join(format!("pr_curve_class_{class}.csv"));
        let mut writer = csv::Writer::from_path(&path)?;
        writer.write_record(["threshold", "precision", "recall"])?;
        for point in curve {
            writer.write_record([
                point.threshold.to_string(),
                point.precision.to_string(),
                point.recall.to_string(),
            ])?;
        }
        writer.flush().map_err(|e| Error::io(&path, e))?;
        files.pr_curves.push(path);
    }

    if preds.predictions.iter().any(|p| p.attention.is_some()) {
        let path = dir.join("attention.csv");
        write_attention(preds, &path)?;
        files.attention = Some(path);
    }
    Ok(files)
}

/// Long-format `(bag_id, instance, alpha)` rows.
pub fn write_attention(preds: &PredictionSet, path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(["bag_id", "instance", "alpha"])?;
    for p in &preds.predictions {
        for (i, a) in p.attention.iter().flatten().enumerate() {
            writer.write_record([p.bag_id.clone(), i.to_string(), a.to_string()])?;
        }
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<MetricsReport> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn write_predictions(preds: &PredictionSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, serde_json::to_string_pretty(preds)?).map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: impl AsRef<Path>) -> Result<PredictionSet> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let preds: PredictionSet = serde_json::from_str(&text)?;
    preds.validate()?;
    Ok(preds)
}
