//! Confusion-matrix metrics with malignant as the positive class.

use serde::{Deserialize, Serialize};

use crate::patch::Label;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn new(tp: usize, fp: usize, fn_: usize, tn: usize) -> Self {
        Self { tp, fp, tn, fn_ }
    }

    pub fn from_predictions(predictions: &[Label], labels: &[Label]) -> Result<Self> {
        if predictions.len() != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} predictions for {} labels",
                predictions.len(),
                labels.len()
            )));
        }
        let mut c = Self::default();
        for (&p, &t) in predictions.iter().zip(labels) {
            c.record(p, t);
        }
        Ok(c)
    }

    pub fn record(&mut self, prediction: Label, truth: Label) {
        match (prediction, truth) {
            (Label::Malignant, Label::Malignant) => self.tp += 1,
            (Label::Malignant, Label::Benign) => self.fp += 1,
            (Label::Benign, Label::Benign) => self.tn += 1,
            (Label::Benign, Label::Malignant) => self.fn_ += 1,
        }
    }

    pub fn merge(&mut self, other: &Confusion) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.tn += other.tn;
        self.fn_ += other.fn_;
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

fn pct(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| 100.0 * num as f64 / den as f64)
}

/// Counts plus percentages; a ratio with a zero denominator is `None`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub confusion: Confusion,
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub f1: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
}

impl MetricsReport {
    pub fn from_confusion(c: Confusion) -> Self {
        let precision = pct(c.tp, c.tp + c.fp);
        let sensitivity = pct(c.tp, c.tp + c.fn_);
        let f1 = match (precision, sensitivity) {
            (Some(p), Some(s)) if p + s > 0.0 => Some(2.0 * p * s / (p + s)),
            _ => None,
        };
        Self {
            confusion: c,
            accuracy: pct(c.tp + c.tn, c.total()),
            precision,
            f1,
            sensitivity,
            specificity: pct(c.tn, c.tn + c.fp),
        }
    }

    /// Values in table order: accuracy, precision, F1, sensitivity,
    /// specificity.
    pub fn row(&self) -> [Option<f64>; 5] {
        [
            self.accuracy,
            self.precision,
            self.f1,
            self.sensitivity,
            self.specificity,
        ]
    }
}

pub fn confusion_metrics(predictions: &[Label], labels: &[Label]) -> Result<MetricsReport> {
    Confusion::from_predictions(predictions, labels).map(MetricsReport::from_confusion)
}

pub const CSV_HEADER: &str = "method,fold,TP,FP,TN,FN,Accuracy,Precision,F1-score,Sensitivity,Specificity";

/// One CSV line; absent ratios are left empty.
pub fn csv_row(method: &str, fold: &str, m: &MetricsReport) -> String {
    let c = m.confusion;
    let mut line = format!("{method},{fold},{},{},{},{}", c.tp, c.fp, c.tn, c.fn_);
    for v in m.row() {
        line.push(',');
        if let Some(v) = v {
            line.push_str(&format!("{v:.2}"));
        }
    }
    line
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions() {
        let labels = [Label::Benign, Label::Malignant, Label::Malignant];
        let m = confusion_metrics(&labels, &labels).unwrap();
        assert!(m.row().iter().all(|v| *v == Some(100.0)));
    }

    #[test]
    fn undefined_ratios_are_absent() {
        let m = confusion_metrics(&[Label::Benign; 4], &[Label::Benign; 4]).unwrap();
        assert_eq!(m.precision, None);
        assert_eq!(m.sensitivity, None);
        assert_eq!(m.f1, None);
        assert_eq!(m.specificity, Some(100.0));
        assert!(csv_row("x", "0", &m).ends_with(",100.00,,,,100.00"));
    }

    #[test]
    fn length_mismatch() {
        assert!(confusion_metrics(&[Label::Benign], &[]).is_err());
    }
}
