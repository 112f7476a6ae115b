//! Confusion matrices, accuracy/precision/recall/F-score, and fold
//! aggregation.

use serde::{Deserialize, Serialize};

use crate::error::{KdisError, Result};

/// Counts indexed `[true][predicted]`, 1-based classes stored 0-based.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
    positive: usize,
}

impl ConfusionMatrix {
    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Class treated as positive for precision and recall (default 2).
    pub fn positive(&self) -> usize {
        self.positive
    }

    pub fn with_positive(mut self, positive: usize) -> Result<Self> {
        if positive == 0 || positive > self.classes {
            return Err(KdisError::invalid(format!(
                "positive class {positive} outside 1..={}",
                self.classes
            )));
        }
        self.positive = positive;
        Ok(self)
    }

    pub fn count(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[(truth - 1) * self.classes + predicted - 1]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (1..=self.classes).map(|c| self.count(c, c)).sum()
    }

    pub fn true_positives(&self) -> u64 {
        self.count(self.positive, self.positive)
    }

    pub fn false_positives(&self) -> u64 {
        (1..=self.classes)
            .filter(|&t| t != self.positive)
            .map(|t| self.count(t, self.positive))
            .sum()
    }

    pub fn false_negatives(&self) -> u64 {
        (1..=self.classes)
            .filter(|&p| p != self.positive)
            .map(|p| self.count(self.positive, p))
            .sum()
    }

    pub fn true_negatives(&self) -> u64 {
        self.total() - self.true_positives() - self.false_positives() - self.false_negatives()
    }
}

pub fn confusion(
    predictions: &[usize],
    truths: &[usize],
    classes: usize,
) -> Result<ConfusionMatrix> {
    if predictions.len() != truths.len() {
        return Err(KdisError::invalid(format!(
            "{} predictions vs {} truths",
            predictions.len(),
            truths.len()
        )));
    }
    if predictions.is_empty() {
        return Err(KdisError::invalid("metrics are undefined for zero samples"));
    }
    if classes < 2 {
        return Err(KdisError::invalid("need at least two classes"));
    }
    let mut counts = vec![0u64; classes * classes];
    for (i, (&p, &t)) in predictions.iter().zip(truths).enumerate() {
        if p == 0 || p > classes || t == 0 || t > classes {
            return Err(KdisError::invalid(format!(
                "label pair ({t}, {p}) at index {i} outside 1..={classes}"
            )));
        }
        counts[(t - 1) * classes + p - 1] += 1;
    }
    Ok(ConfusionMatrix {
        classes,
        counts,
        positive: 2,
    })
}

/// Standard deviations accompanying a fold-averaged report.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSpread {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
    /// Population standard deviation over folds, when this is an aggregate.
    pub spread: Option<MetricSpread>,
}

/// Harmonic mean of precision and recall; 0 when both are 0.
pub fn f_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn metrics(cm: &ConfusionMatrix) -> Result<MetricsReport> {
    let total = cm.total();
    if total == 0 {
        return Err(KdisError::invalid("empty confusion matrix"));
    }
    let tp = cm.true_positives();
    let precision = ratio(tp, tp + cm.false_positives());
    let recall = ratio(tp, tp + cm.false_negatives());
    Ok(MetricsReport {
        accuracy: ratio(cm.trace(), total),
        precision,
        recall,
        f_score: f_score(precision, recall),
        spread: None,
    })
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Arithmetic mean and population standard deviation of each metric.
pub fn summarize_folds(per_fold: &[MetricsReport]) -> Result<MetricsReport> {
    if per_fold.is_empty() {
        return Err(KdisError::invalid("no folds to summarize"));
    }
    let (accuracy, sa) = mean_std(per_fold.iter().map(|r| r.accuracy));
    let (precision, sp) = mean_std(per_fold.iter().map(|r| r.precision));
    let (recall, sr) = mean_std(per_fold.iter().map(|r| r.recall));
    let (f, sf) = mean_std(per_fold.iter().map(|r| r.f_score));
    Ok(MetricsReport {
        accuracy,
        precision,
        recall,
        f_score: f,
        spread: Some(MetricSpread {
            accuracy: sa,
            precision: sp,
            recall: sr,
            f_score: sf,
        }),
    })
}

/// One line of a report CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub model: String,
    /// Fold index, or `None` for the aggregate.
    pub fold: Option<usize>,
    pub report: MetricsReport,
}

/// `model,fold,accuracy,precision,recall,f_score`. Aggregates are written as
/// two lines with fold `mean` and fold `std`.
pub fn report_csv(rows: &[ReportRow]) -> String {
    let mut out = String::from("model,fold,accuracy,precision,recall,f_score\n");
    for row in rows {
        let r = &row.report;
        match row.fold {
            Some(fold) => out.push_str(&format!(
                "{},{},{:.6},{:.6},{:.6},{:.6}\n",
                row.model, fold, r.accuracy, r.precision, r.recall, r.f_score
            )),
            None => {
                out.push_str(&format!(
                    "{},mean,{:.6},{:.6},{:.6},{:.6}\n",
                    row.model, r.accuracy, r.precision, r.recall, r.f_score
                ));
                if let Some(s) = r.spread {
                    out.push_str(&format!(
                        "{},std,{:.6},{:.6},{:.6},{:.6}\n",
                        row.model, s.accuracy, s.precision, s.recall, s.f_score
                    ));
                }
            }
        }
    }
    out
}

/// Aligned text table: one row per model, each cell `mean (std)`.
pub fn format_table(title: &str, rows: &[(String, MetricsReport)]) -> String {
    let cell = |mean: f64, std: Option<f64>| match std {
        Some(s) => format!("{mean:.3} ({s:.3})"),
        None => format!("{mean:.3}"),
    };
    let header = ["Methods", "Accuracy", "Precision", "Recall", "F-score"];
    let body: Vec<[String; 5]> = rows
        .iter()
        .map(|(name, r)| {
            let s = r.spread;
            [
                name.clone(),
                cell(r.accuracy, s.map(|s| s.accuracy)),
                cell(r.precision, s.map(|s| s.precision)),
                cell(r.recall, s.map(|s| s.recall)),
                cell(r.f_score, s.map(|s| s.f_score)),
            ]
        })
        .collect();
    let mut widths = header.map(str::len);
    for row in &body {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.len());
        }
    }
    let line = |cells: [&str; 5]| {
        let mut s = format!("{:<w$}", cells[0], w = widths[0]);
        for (c, w) in cells[1..].iter().zip(&widths[1..]) {
            s.push_str(&format!("  {c:>w$}"));
        }
        s.push('\n');
        s
    };
    let mut out = format!("{title}\n");
    out.push_str(&line(header));
    out.push_str(&format!(
        "{}\n",
        "-".repeat(widths.iter().sum::<usize>() + 8)
    ));
    for row in &body {
        out.push_str(&line([&row[0], &row[1], &row[2], &row[3], &row[4]]));
    }
    out
}
