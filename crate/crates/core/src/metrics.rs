//! Evaluation metrics: class-wise precision/recall with macro averages,
//! accuracy, and binary AUC, plus the CSV row format evaluation runs emit.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionMetrics {
    pub per_class: Vec<ClassMetrics>,
    /// Unweighted class mean.
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub accuracy: f64,
}

/// Per-class precision and recall from predicted/actual class indices.
/// Empty denominators (no predictions or no members of a class) count as 0.
pub fn confusion_metrics(
    predicted: &[usize],
    actual: &[usize],
    num_classes: usize,
) -> Result<ConfusionMetrics> {
    if predicted.len() != actual.len() {
        return Err(Error::DimMismatch(format!(
            "{} predictions vs {} labels",
            predicted.len(),
            actual.len()
        )));
    }
    if predicted.is_empty() {
        return Err(Error::InvalidArgument("no predictions".into()));
    }
    if num_classes < 2 {
        return Err(Error::InvalidArgument("need at least 2 classes".into()));
    }
    let mut confusion = vec![vec![0usize; num_classes]; num_classes];
    let mut correct = 0usize;
    for (&p, &a) in predicted.iter().zip(actual) {
        if p >= num_classes || a >= num_classes {
            return Err(Error::InvalidArgument(format!(
                "label out of range: predicted {p}, actual {a}, classes {num_classes}"
            )));
        }
        confusion[a][p] += 1;
        if p == a {
            correct += 1;
        }
    }
    let mut per_class = Vec::with_capacity(num_classes);
    for c in 0..num_classes {
        let tp = confusion[c][c];
        let fp: usize = (0..num_classes).filter(|&a| a != c).map(|a| confusion[a][c]).sum();
        let fn_: usize = (0..num_classes).filter(|&p| p != c).map(|p| confusion[c][p]).sum();
        let precision = if tp + fp == 0 {
            0.0
        } else {
            tp as f64 / (tp + fp) as f64
        };
        let recall = if tp + fn_ == 0 {
            0.0
        } else {
            tp as f64 / (tp + fn_) as f64
        };
        per_class.push(ClassMetrics { precision, recall });
    }
    let macro_precision = per_class.iter().map(|m| m.precision).sum::<f64>() / num_classes as f64;
    let macro_recall = per_class.iter().map(|m| m.recall).sum::<f64>() / num_classes as f64;
    Ok(ConfusionMetrics {
        per_class,
        macro_precision,
        macro_recall,
        accuracy: correct as f64 / predicted.len() as f64,
    })
}

/// Binary AUC as the Mann-Whitney statistic, computed from midranks so ties
/// contribute one half. Requires both classes to be present.
pub fn auc(scores: &[f64], labels: &[usize]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::DimMismatch(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::InvalidArgument("AUC is binary only".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("scores".into()));
    }
    let positives = labels.iter().filter(|&&l| l == 1).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::InvalidArgument(
            "AUC needs both classes present".into(),
        ));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // midranks over tie groups
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j + 2) as f64 / 2.0; // ranks are 1-based
        for &idx in &order[i..=j] {
            if labels[idx] == 1 {
                rank_sum_pos += midrank;
            }
        }
        i = j + 1;
    }
    let p = positives as f64;
    let u = rank_sum_pos - p * (p + 1.0) / 2.0;
    Ok(u / (p * negatives as f64))
}

/// One evaluation run, serialized as a fixed-schema CSV row.
#[derive(Debug, Clone)]
pub struct MetricsReport {
    pub run_id: String,
    pub method: String,
    pub extractor_tag: String,
    pub k: Option<usize>,
    pub l: Option<usize>,
    pub combinator: Option<String>,
    /// Macro-averaged precision.
    pub precision: f64,
    /// Macro-averaged recall.
    pub recall: f64,
    pub accuracy: f64,
    pub auc: Option<f64>,
    pub seed: String,
}

pub const CSV_HEADER: &str =
    "run_id,method,extractor_tag,k,l,combinator,precision,recall,accuracy,auc,seed";

fn opt_num<T: std::fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map(|x| x.to_string()).unwrap_or_default()
}

impl MetricsReport {
    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{:.6},{:.6},{:.6},{},{}",
            self.run_id,
            self.method,
            self.extractor_tag,
            opt_num(&self.k),
            opt_num(&self.l),
            self.combinator.clone().unwrap_or_default(),
            self.precision,
            self.recall,
            self.accuracy,
            self.auc.map(|a| format!("{a:.6}")).unwrap_or_default(),
            self.seed
        )
    }
}
