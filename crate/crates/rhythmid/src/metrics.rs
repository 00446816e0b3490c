//! Classification metrics and loss-curve smoothing.
//!
//! Balanced accuracy is the mean per-class recall. Classes with zero true
//! samples in the scored set contribute nothing; they are excluded from the
//! mean and counted so the exclusion is auditable.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("confusion matrix holds no samples")]
    Empty,
    #[error("class index {class} out of range for {n_classes} classes")]
    OutOfRange { class: usize, n_classes: usize },
    #[error("cannot merge confusion matrices of {0} and {1} classes")]
    MergeSize(usize, usize),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// True-class x predicted-class counts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    n_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(n_classes: usize) -> Self {
        Self {
            n_classes,
            counts: vec![0; n_classes * n_classes],
        }
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn add(&mut self, true_class: usize, predicted: usize) -> Result<(), MetricsError> {
        for class in [true_class, predicted] {
            if class >= self.n_classes {
                return Err(MetricsError::OutOfRange {
                    class,
                    n_classes: self.n_classes,
                });
            }
        }
        self.counts[true_class * self.n_classes + predicted] += 1;
        Ok(())
    }

    pub fn count(&self, true_class: usize, predicted: usize) -> u64 {
        self.counts[true_class * self.n_classes + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Addition is associative and commutative, so partial matrices computed
    /// in parallel can be merged in any order.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<(), MetricsError> {
        if self.n_classes != other.n_classes {
            return Err(MetricsError::MergeSize(self.n_classes, other.n_classes));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// Recall of one class, `None` when the class has no true samples.
    pub fn recall(&self, class: usize) -> Option<f64> {
        let row = &self.counts[class * self.n_classes..(class + 1) * self.n_classes];
        let support: u64 = row.iter().sum();
        if support == 0 {
            return None;
        }
        Some(row[class] as f64 / support as f64)
    }

    pub fn to_csv<W: Write>(&self, mut w: W) -> Result<(), MetricsError> {
        for i in 0..self.n_classes {
            let row: Vec<String> = (0..self.n_classes)
                .map(|j| self.count(i, j).to_string())
                .collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Mean per-class recall over classes with at least one true sample.
pub fn balanced_accuracy(cm: &ConfusionMatrix) -> Result<f64, MetricsError> {
    if cm.total() == 0 {
        return Err(MetricsError::Empty);
    }
    let mut sum = 0.0;
    let mut scored = 0usize;
    for class in 0..cm.n_classes() {
        if let Some(r) = cm.recall(class) {
            sum += r;
            scored += 1;
        }
    }
    Ok(sum / scored as f64)
}

/// Expected accuracy of a uniform random predictor over `classes` classes.
pub fn chance_level(classes: usize) -> f64 {
    assert!(classes >= 1, "need at least one class");
    1.0 / classes as f64
}

/// Four-decimal display form of the chance level, e.g. `0.0009` for 1166.
pub fn chance_level_display(classes: usize) -> String {
    format!("{:.4}", chance_level(classes))
}

/// Summary of one evaluation pass.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct MetricsReport {
    pub balanced_accuracy: f64,
    pub accuracy: f64,
    pub chance_level: f64,
    pub n_classes_scored: usize,
    pub n_excluded_classes: usize,
    pub n_samples: u64,
    /// Per-class recall; `None` for classes with no true samples. Kept out
    /// of the JSON report, which carries only the summary fields.
    #[serde(skip)]
    pub per_class_recall: Vec<Option<f64>>,
}

impl MetricsReport {
    pub fn from_confusion(cm: &ConfusionMatrix) -> Result<Self, MetricsError> {
        let total = cm.total();
        if total == 0 {
            return Err(MetricsError::Empty);
        }
        let per_class_recall: Vec<Option<f64>> =
            (0..cm.n_classes()).map(|c| cm.recall(c)).collect();
        let n_classes_scored = per_class_recall.iter().flatten().count();
        let correct: u64 = (0..cm.n_classes()).map(|c| cm.count(c, c)).sum();
        Ok(Self {
            balanced_accuracy: balanced_accuracy(cm)?,
            accuracy: correct as f64 / total as f64,
            chance_level: chance_level(cm.n_classes()),
            n_classes_scored,
            n_excluded_classes: cm.n_classes() - n_classes_scored,
            n_samples: total,
            per_class_recall,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Trailing moving average. The first `window-1` points average over the
/// available prefix, so output length equals input length.
pub fn moving_average<T: Scalar>(series: &[T], window: usize) -> Vec<T> {
    assert!(window >= 1, "window must be positive");
    let mut out = Vec::with_capacity(series.len());
    for i in 0..series.len() {
        let lo = (i + 1).saturating_sub(window);
        let mut acc = T::zero();
        for &v in &series[lo..=i] {
            acc += v;
        }
        out.push(acc / T::of((i + 1 - lo) as f64));
    }
    out
}

/// Index of the row maximum; ties resolve to the lowest index.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0usize;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}
