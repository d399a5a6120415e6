//! Classification quality: confusion matrix, OA, AA and Cohen's kappa.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub classes: usize,
    /// Row-major `classes × classes`, rows = truth, columns = prediction.
    pub confusion: Vec<u64>,
    pub overall_accuracy: f64,
    pub average_accuracy: f64,
    pub kappa: f64,
    /// Recall per class; `None` for classes absent from the truth labels.
    pub per_class_accuracy: Vec<Option<f64>>,
    /// Classes with no truth samples, left out of the average accuracy.
    pub absent_classes: Vec<usize>,
}

impl Metrics {
    pub fn total(&self) -> u64 {
        self.confusion.iter().sum()
    }

    pub fn count(&self, truth: usize, predicted: usize) -> u64 {
        self.confusion[truth * self.classes + predicted]
    }

    pub fn from_confusion(classes: usize, confusion: Vec<u64>) -> Result<Self> {
        if confusion.len() != classes * classes {
            return Err(Error::Shape {
                op: "confusion matrix",
                axis: "cells",
                expected: classes * classes,
                found: confusion.len(),
            });
        }
        let total: u64 = confusion.iter().sum();
        if total == 0 {
            return Err(Error::config("confusion matrix is empty"));
        }
        let n = total as f64;
        let row = |k: usize| confusion[k * classes..(k + 1) * classes].iter().sum::<u64>();
        let col = |k: usize| (0..classes).map(|t| confusion[t * classes + k]).sum::<u64>();
        let trace: u64 = (0..classes).map(|k| confusion[k * classes + k]).sum();

        let per_class_accuracy: Vec<Option<f64>> = (0..classes)
            .map(|k| match row(k) {
                0 => None,
                r => Some(confusion[k * classes + k] as f64 / r as f64),
            })
            .collect();
        let absent_classes = (0..classes).filter(|&k| per_class_accuracy[k].is_none()).collect();
        let present: Vec<f64> = per_class_accuracy.iter().flatten().copied().collect();
        let average_accuracy = present.iter().sum::<f64>() / present.len() as f64;

        let p_o = trace as f64 / n;
        let p_e = (0..classes)
            .map(|k| (row(k) as f64 / n) * (col(k) as f64 / n))
            .sum::<f64>();
        // p_e = 1 only when truth and prediction are the same single class
        let kappa = if p_e < 1.0 { (p_o - p_e) / (1.0 - p_e) } else { 1.0 };

        Ok(Self {
            classes,
            confusion,
            overall_accuracy: p_o,
            average_accuracy,
            kappa,
            per_class_accuracy,
            absent_classes,
        })
    }
}

/// Metrics of zero-based predictions against zero-based truth labels.
pub fn compute_metrics(truth: &[usize], predicted: &[usize], classes: usize) -> Result<Metrics> {
    if truth.len() != predicted.len() {
        return Err(Error::Shape {
            op: "compute_metrics",
            axis: "samples",
            expected: truth.len(),
            found: predicted.len(),
        });
    }
    let mut confusion = vec![0u64; classes * classes];
    for (&t, &p) in truth.iter().zip(predicted) {
        for label in [t, p] {
            if label >= classes {
                return Err(Error::Label { label, classes });
            }
        }
        confusion[t * classes + p] += 1;
    }
    Metrics::from_confusion(classes, confusion)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_prediction() {
        let y = [0, 1, 2, 2, 1];
        let m = compute_metrics(&y, &y, 3).unwrap();
        assert_eq!((m.overall_accuracy, m.average_accuracy, m.kappa), (1.0, 1.0, 1.0));
    }

    #[test]
    fn constant_prediction_on_balanced_classes() {
        let m = compute_metrics(&[0, 0, 1, 1], &[0, 0, 0, 0], 2).unwrap();
        assert_eq!(m.overall_accuracy, 0.5);
        assert_eq!(m.average_accuracy, 0.5);
        assert_eq!(m.kappa, 0.0);
    }

    #[test]
    fn absent_class_is_excluded_from_aa() {
        let m = compute_metrics(&[0, 0, 1], &[0, 2, 1], 3).unwrap();
        assert_eq!(m.absent_classes, vec![2]);
        assert_eq!(m.average_accuracy, (0.5 + 1.0) / 2.0);
        assert_eq!(m.total(), 3);
    }

    #[test]
    fn errors() {
        assert!(compute_metrics(&[0], &[0, 1], 2).is_err());
        assert!(compute_metrics(&[0], &[2], 2).is_err());
        assert!(compute_metrics(&[], &[], 2).is_err());
    }
}
