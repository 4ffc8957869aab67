//! Confusion-matrix based classification metrics with macro averaging.
//!
//! Conventions, stated so reports are deterministic: any 0/0 rate is 0,
//! macro scores are unweighted class means, and the micro row equals
//! accuracy (micro precision and recall coincide for single-label
//! classification).

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("prediction/label length mismatch: {preds} vs {labels}")]
    LengthMismatch { preds: usize, labels: usize },
    #[error("class index {index} out of range for {classes} classes")]
    IndexOutOfRange { index: usize, classes: usize },
    #[error("empty confusion matrix")]
    EmptyConfusion,
    #[error("ragged confusion matrix")]
    RaggedConfusion,
}

/// counts[true][predicted]
pub fn confusion_matrix(
    preds: &[usize],
    labels: &[usize],
    n_classes: usize,
) -> Result<Vec<Vec<u64>>, MetricsError> {
    if preds.len() != labels.len() {
        return Err(MetricsError::LengthMismatch {
            preds: preds.len(),
            labels: labels.len(),
        });
    }
    let mut counts = vec![vec![0u64; n_classes]; n_classes];
    for (&p, &y) in preds.iter().zip(labels) {
        for index in [p, y] {
            if index >= n_classes {
                return Err(MetricsError::IndexOutOfRange {
                    index,
                    classes: n_classes,
                });
            }
        }
        counts[y][p] += 1;
    }
    Ok(counts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Number of samples whose true label is this class.
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub confusion: Vec<Vec<u64>>,
    pub accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub n_samples: u64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn compute_metrics(confusion: &[Vec<u64>]) -> Result<MetricsReport, MetricsError> {
    let c = confusion.len();
    if c == 0 {
        return Err(MetricsError::EmptyConfusion);
    }
    if confusion.iter().any(|row| row.len() != c) {
        return Err(MetricsError::RaggedConfusion);
    }
    let n_samples: u64 = confusion.iter().flatten().sum();
    if n_samples == 0 {
        return Err(MetricsError::EmptyConfusion);
    }

    let mut per_class = Vec::with_capacity(c);
    for k in 0..c {
        let true_pos = confusion[k][k];
        let col_sum: u64 = (0..c).map(|i| confusion[i][k]).sum();
        let row_sum: u64 = confusion[k].iter().sum();
        let precision = ratio(true_pos, col_sum);
        let recall = ratio(true_pos, row_sum);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        per_class.push(ClassMetrics {
            precision,
            recall,
            f1,
            support: row_sum,
        });
    }

    let trace: u64 = (0..c).map(|k| confusion[k][k]).sum();
    let mean = |f: fn(&ClassMetrics) -> f64| -> f64 {
        per_class.iter().map(f).sum::<f64>() / c as f64
    };
    Ok(MetricsReport {
        confusion: confusion.to_vec(),
        accuracy: trace as f64 / n_samples as f64,
        macro_precision: mean(|m| m.precision),
        macro_recall: mean(|m| m.recall),
        macro_f1: mean(|m| m.f1),
        per_class,
        n_samples,
    })
}

impl MetricsReport {
    /// One row per class, then macro and micro rows. The micro row holds
    /// accuracy in all three metric columns.
    pub fn to_csv(&self, class_names: &[String]) -> String {
        let mut out = String::from("class,precision,recall,f1,support\n");
        for (m, name) in self.per_class.iter().zip(class_names) {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                name, m.precision, m.recall, m.f1, m.support
            ));
        }
        out.push_str(&format!(
            "macro,{},{},{},{}\n",
            self.macro_precision, self.macro_recall, self.macro_f1, self.n_samples
        ));
        out.push_str(&format!(
            "micro,{a},{a},{a},{n}\n",
            a = self.accuracy,
            n = self.n_samples
        ));
        out
    }
}
