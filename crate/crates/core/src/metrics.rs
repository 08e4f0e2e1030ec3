//! Classification metrics over bag-level predictions.
//!
//! Argmax ties go to the lowest class index. F1 and AUROC are macro
//! (unweighted) averages; a class with no predictions and no positives has
//! F1 = 0. PR-AUC is the step-wise sum of recall increments times precision.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub bag_id: String,
    pub label: usize,
    pub probs: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attention: Option<Vec<f64>>,
}

impl Prediction {
    pub fn predicted(&self) -> usize {
        argmax(&self.probs)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub class_count: usize,
    pub predictions: Vec<Prediction>,
}

impl PredictionSet {
    pub fn validate(&self) -> Result<()> {
        for p in &self.predictions {
            if p.probs.len() != self.class_count || p.label >= self.class_count {
                return Err(Error::InvalidConfig(format!(
                    "prediction for {} does not match {} classes",
                    p.bag_id, self.class_count
                )));
            }
            let total: f64 = p.probs.iter().sum();
            if (total - 1.0).abs() > 1e-5 {
                return Err(Error::InvalidConfig(format!(
                    "probabilities for {} sum to {total}",
                    p.bag_id
                )));
            }
        }
        Ok(())
    }

    fn scores(&self, class: usize) -> (Vec<f64>, Vec<bool>) {
        self.predictions
            .iter()
            .map(|p| (p.probs[class], p.label == class))
            .unzip()
    }
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

fn non_empty(preds: &PredictionSet) -> Result<()> {
    if preds.predictions.is_empty() {
        Err(Error::Empty("prediction set"))
    } else {
        Ok(())
    }
}

pub fn accuracy(preds: &PredictionSet) -> Result<f64> {
    non_empty(preds)?;
    let correct = preds
        .predictions
        .iter()
        .filter(|p| p.predicted() == p.label)
        .count();
    Ok(correct as f64 / preds.predictions.len() as f64)
}

/// `confusion[true][predicted]`.
pub fn confusion_matrix(preds: &PredictionSet) -> Vec<Vec<usize>> {
    let mut m = vec![vec![0; preds.class_count]; preds.class_count];
    for p in &preds.predictions {
        m[p.label][p.predicted()] += 1;
    }
    m
}

pub fn per_class_f1(confusion: &[Vec<usize>]) -> Vec<f64> {
    (0..confusion.len())
        .map(|c| {
            let tp = confusion[c][c];
            let fp: usize = (0..confusion.len()).filter(|&r| r != c).map(|r| confusion[r][c]).sum();
            let fn_: usize = (0..confusion.len()).filter(|&k| k != c).map(|k| confusion[c][k]).sum();
            let denom = 2 * tp + fp + fn_;
            if denom == 0 {
                0.0
            } else {
                2.0 * tp as f64 / denom as f64
            }
        })
        .collect()
}

pub fn macro_f1(preds: &PredictionSet) -> Result<f64> {
    non_empty(preds)?;
    let f1 = per_class_f1(&confusion_matrix(preds));
    Ok(f1.iter().sum::<f64>() / f1.len() as f64)
}

/// Rank-based (Mann–Whitney) AUROC with half credit for ties.
///
/// `None` unless there is at least one positive and one negative.
pub fn auroc_binary(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|p| **p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // average 1-based rank of the tie group
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += avg_rank * order[i..=j].iter().filter(|&&k| positive[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AurocReport {
    pub macro_auroc: f64,
    /// `None` for classes without both positives and negatives.
    pub per_class: Vec<Option<f64>>,
}

impl AurocReport {
    pub fn skipped(&self) -> Vec<usize> {
        (0..self.per_class.len())
            .filter(|&c| self.per_class[c].is_none())
            .collect()
    }
}

/// One-vs-rest AUROC averaged over evaluable classes.
pub fn auroc_macro(preds: &PredictionSet) -> Result<AurocReport> {
    non_empty(preds)?;
    let per_class: Vec<Option<f64>> = (0..preds.class_count)
        .map(|c| {
            let (scores, positive) = preds.scores(c);
            auroc_binary(&scores, &positive)
        })
        .collect();
    let evaluable: Vec<f64> = per_class.iter().flatten().copied().collect();
    if evaluable.is_empty() {
        return Err(Error::NoEvaluableClass);
    }
    Ok(AurocReport {
        macro_auroc: evaluable.iter().sum::<f64>() / evaluable.len() as f64,
        per_class,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Precision and recall at every distinct score, descending.
///
/// A bag counts as positive when its score is at least the threshold. The
/// curve is bracketed by `(+∞, 1, 0)` and `(−∞, prevalence, 1)`.
pub fn pr_curve(scores: &[f64], positive: &[bool]) -> Option<Vec<PrPoint>> {
    let n_pos = positive.iter().filter(|p| **p).count();
    if n_pos == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![PrPoint {
        threshold: f64::INFINITY,
        precision: 1.0,
        recall: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            if positive[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(PrPoint {
            threshold,
            precision: tp as f64 / (tp + fp) as f64,
            recall: tp as f64 / n_pos as f64,
        });
    }
    points.push(PrPoint {
        threshold: f64::NEG_INFINITY,
        precision: n_pos as f64 / scores.len() as f64,
        recall: 1.0,
    });
    Some(points)
}

/// Step-wise area `Σ (R_k − R_{k−1}) · P_k` over the distinct thresholds.
pub fn pr_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let curve = pr_curve(scores, positive)?;
    let inner = &curve[..curve.len() - 1];
    Some(
        inner
            .windows(2)
            .map(|w| (w[1].recall - w[0].recall) * w[1].precision)
            .sum(),
    )
}

/// One-vs-rest PR-AUC per class; `None` for classes without positives.
pub fn pr_auc_per_class(preds: &PredictionSet) -> Vec<Option<f64>> {
    (0..preds.class_count)
        .map(|c| {
            let (scores, positive) = preds.scores(c);
            pr_auc(&scores, &positive)
        })
        .collect()
}

pub fn pr_curves(preds: &PredictionSet) -> Vec<Option<Vec<PrPoint>>> {
    (0..preds.class_count)
        .map(|c| {
            let (scores, positive) = preds.scores(c);
            pr_curve(&scores, &positive)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub macro_f1: f64,
    /// `None` when no class has both positives and negatives.
    pub auroc_macro: Option<f64>,
    pub auroc_per_class: Vec<Option<f64>>,
    pub pr_auc: Vec<Option<f64>>,
    pub confusion: Vec<Vec<usize>>,
}

pub fn evaluate(preds: &PredictionSet) -> Result<MetricsReport> {
    preds.validate()?;
    let (auroc_macro, auroc_per_class) = match auroc_macro(preds) {
        Ok(r) => (Some(r.macro_auroc), r.per_class),
        Err(Error::NoEvaluableClass) => (None, vec![None; preds.class_count]),
        Err(e) => return Err(e),
    };
    Ok(MetricsReport {
        accuracy: accuracy(preds)?,
        macro_f1: macro_f1(preds)?,
        auroc_macro,
        auroc_per_class,
        pr_auc: pr_auc_per_class(preds),
        confusion: confusion_matrix(preds),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

/// Mean and sample (n − 1) standard deviation; the deviation is 0 for one value.
pub fn mean_std(values: &[f64]) -> Option<MeanStd> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Some(MeanStd { mean, std })
}

/// Fold-wise aggregate of [`MetricsReport`]s.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub folds: usize,
    pub std_kind: String,
    pub accuracy: MeanStd,
    pub macro_f1: MeanStd,
    pub auroc_macro: Option<MeanStd>,
    pub pr_auc: Vec<Option<MeanStd>>,
}

pub fn summarize(reports: &[MetricsReport]) -> Result<MetricsSummary> {
    if reports.is_empty() {
        return Err(Error::Empty("fold reports"));
    }
    let collect = |f: &dyn Fn(&MetricsReport) -> Option<f64>| -> Vec<f64> {
        reports.iter().filter_map(f).collect()
    };
    let classes = reports[0].pr_auc.len();
    Ok(MetricsSummary {
        folds: reports.len(),
        std_kind: "sample".into(),
        accuracy: mean_std(&collect(&|r| Some(r.accuracy))).expect("non-empty"),
        macro_f1: mean_std(&collect(&|r| Some(r.macro_f1))).expect("non-empty"),
        auroc_macro: mean_std(&collect(&|r| r.auroc_macro)),
        pr_auc: (0..classes)
            .map(|c| mean_std(&collect(&|r| r.pr_auc.get(c).copied().flatten())))
            .collect(),
    })
}
