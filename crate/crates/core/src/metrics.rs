//! Stage-wise classification metrics.
//!
//! Ratios whose denominator is zero are reported as `None` rather than 0 or
//! 1, and averages over replications skip them.

use crate::model::Label;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("label lists differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("no records to score")]
    Empty,
    #[error("unknown label value {0}")]
    UnknownLabel(f64),
}

/// Binary (one-vs-rest) confusion counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// Counts with the positive class swapped.
    pub fn flipped(&self) -> Self {
        Self {
            tp: self.tn,
            fp: self.fn_,
            tn: self.tp,
            fn_: self.fp,
        }
    }
}

/// 3×3 counts in the fixed class order (0, 0.5, 1); `[truth][predicted]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MulticlassCounts {
    pub matrix: [[u64; 3]; 3],
}

impl MulticlassCounts {
    pub fn from_labels(y_true: &[Label], y_pred: &[Label]) -> Result<Self, MetricsError> {
        check_lengths(y_true.len(), y_pred.len())?;
        let mut matrix = [[0u64; 3]; 3];
        for (t, p) in y_true.iter().zip(y_pred) {
            matrix[t.index()][p.index()] += 1;
        }
        Ok(Self { matrix })
    }

    pub fn one_vs_rest(&self, positive: Label) -> ConfusionCounts {
        let c = positive.index();
        let mut out = ConfusionCounts::default();
        for t in 0..3 {
            for p in 0..3 {
                let n = self.matrix[t][p];
                match (t == c, p == c) {
                    (true, true) => out.tp += n,
                    (true, false) => out.fn_ += n,
                    (false, true) => out.fp += n,
                    (false, false) => out.tn += n,
                }
            }
        }
        out
    }
}

fn check_lengths(a: usize, b: usize) -> Result<(), MetricsError> {
    if a != b {
        return Err(MetricsError::LengthMismatch(a, b));
    }
    if a == 0 {
        return Err(MetricsError::Empty);
    }
    Ok(())
}

/// One-vs-rest counts against `positive`.
pub fn confusion(y_true: &[Label], y_pred: &[Label], positive: Label) -> Result<ConfusionCounts, MetricsError> {
    check_lengths(y_true.len(), y_pred.len())?;
    let mut c = ConfusionCounts::default();
    for (&t, &p) in y_true.iter().zip(y_pred) {
        match (t == positive, p == positive) {
            (true, true) => c.tp += 1,
            (true, false) => c.fn_ += 1,
            (false, true) => c.fp += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// [`confusion`] over numeric labels (`0`, `0.5`, `1`).
pub fn confusion_from_values(y_true: &[f64], y_pred: &[f64], positive: f64) -> Result<ConfusionCounts, MetricsError> {
    let parse = |v: &f64| Label::from_value(*v).ok_or(MetricsError::UnknownLabel(*v));
    let t: Vec<Label> = y_true.iter().map(parse).collect::<Result<_, _>>()?;
    let p: Vec<Label> = y_pred.iter().map(parse).collect::<Result<_, _>>()?;
    confusion(&t, &p, parse(&positive)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricReport {
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub ppv: Option<f64>,
    pub npv: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub prevalence: Option<f64>,
    pub detection_rate: Option<f64>,
    pub detection_prevalence: Option<f64>,
    pub balanced_accuracy: Option<f64>,
}

pub const METRIC_NAMES: [&str; 11] = [
    "sensitivity",
    "specificity",
    "ppv",
    "npv",
    "precision",
    "recall",
    "f1",
    "prevalence",
    "detection_rate",
    "detection_prevalence",
    "balanced_accuracy",
];

impl MetricReport {
    /// Values in [`METRIC_NAMES`] order.
    pub fn values(&self) -> [Option<f64>; 11] {
        [
            self.sensitivity,
            self.specificity,
            self.ppv,
            self.npv,
            self.precision,
            self.recall,
            self.f1,
            self.prevalence,
            self.detection_rate,
            self.detection_prevalence,
            self.balanced_accuracy,
        ]
    }
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn classification_report(c: &ConfusionCounts) -> MetricReport {
    let n = c.total();
    let sens = ratio(c.tp, c.tp + c.fn_);
    let spec = ratio(c.tn, c.tn + c.fp);
    let ppv = ratio(c.tp, c.tp + c.fp);
    let npv = ratio(c.tn, c.tn + c.fn_);
    let f1 = match (ppv, sens) {
        (Some(p), Some(s)) if p + s > 0.0 => Some(2.0 * p * s / (p + s)),
        _ => None,
    };
    MetricReport {
        sensitivity: sens,
        specificity: spec,
        ppv,
        npv,
        precision: ppv,
        recall: sens,
        f1,
        prevalence: ratio(c.tp + c.fn_, n),
        detection_rate: ratio(c.tp, n),
        detection_prevalence: ratio(c.tp + c.fp, n),
        balanced_accuracy: match (sens, spec) {
            (Some(a), Some(b)) => Some(0.5 * (a + b)),
            _ => None,
        },
    }
}

/// Running mean over reports that skips absent values.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricAverage {
    sums: [f64; 11],
    counts: [u64; 11],
}

impl MetricAverage {
    pub fn add(&mut self, r: &MetricReport) {
        for (i, v) in r.values().iter().enumerate() {
            if let Some(v) = v {
                self.sums[i] += v;
                self.counts[i] += 1;
            }
        }
    }

    pub fn means(&self) -> [Option<f64>; 11] {
        std::array::from_fn(|i| (self.counts[i] > 0).then(|| self.sums[i] / self.counts[i] as f64))
    }

    /// Number of reports that contributed to each metric.
    pub fn coverage(&self) -> [u64; 11] {
        self.counts
    }
}
