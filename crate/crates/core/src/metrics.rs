//! Evaluation metrics: IoU, MAE, cosine similarity and binary accuracy.

use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricKind {
    Iou,
    Mae,
    CosineSimilarity,
    Accuracy,
}

impl MetricKind {
    pub fn higher_is_better(self) -> bool {
        !matches!(self, MetricKind::Mae)
    }

    /// `a` is at least as good as `b` up to `slack`.
    pub fn no_worse(self, a: f64, b: f64, slack: f64) -> bool {
        if self.higher_is_better() {
            a >= b - slack
        } else {
            a <= b + slack
        }
    }

    pub fn strictly_better(self, a: f64, b: f64) -> bool {
        if self.higher_is_better() {
            a > b
        } else {
            a < b
        }
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MetricKind::Iou => "iou",
            MetricKind::Mae => "mae",
            MetricKind::CosineSimilarity => "cosine-similarity",
            MetricKind::Accuracy => "accuracy",
        })
    }
}

/// Per-class intersection and union pixel counts, accumulated over batches.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct IouCounts {
    pub intersection: Vec<u64>,
    pub union: Vec<u64>,
}

impl IouCounts {
    pub fn new(classes: usize) -> Self {
        IouCounts {
            intersection: vec![0; classes],
            union: vec![0; classes],
        }
    }

    pub fn add(&mut self, pred: &[usize], truth: &[usize]) {
        for (&p, &t) in pred.iter().zip(truth) {
            if p == t {
                self.intersection[p] += 1;
                self.union[p] += 1;
            } else {
                self.union[p] += 1;
                self.union[t] += 1;
            }
        }
    }

    /// Mean IoU over classes with a non-empty union; `None` if all are empty.
    pub fn mean(&self) -> Option<f64> {
        let ious: Vec<f64> = self
            .intersection
            .iter()
            .zip(&self.union)
            .filter(|(_, &u)| u > 0)
            .map(|(&i, &u)| i as f64 / u as f64)
            .collect();
        (!ious.is_empty()).then(|| ious.iter().sum::<f64>() / ious.len() as f64)
    }
}

pub fn mean_iou(pred: &[usize], truth: &[usize], classes: usize) -> Option<f64> {
    let mut c = IouCounts::new(classes);
    c.add(pred, truth);
    c.mean()
}

pub fn mae(pred: &[f64], truth: &[f64]) -> f64 {
    pred.iter().zip(truth).map(|(a, b)| (a - b).abs()).sum::<f64>() / pred.len().max(1) as f64
}

/// Fraction of `pred >= 0.5` agreeing with `truth >= 0.5`.
pub fn binary_accuracy(prob: &[f64], truth: &[f64]) -> f64 {
    let hits = prob
        .iter()
        .zip(truth)
        .filter(|(p, t)| (**p >= 0.5) == (**t >= 0.5))
        .count();
    hits as f64 / prob.len().max(1) as f64
}

/// Mean cosine similarity between vectors laid out along axis 1 of
/// `[N, C, inner...]` buffers. Zero-norm pairs contribute 0.
pub fn mean_cosine(pred: &[f64], truth: &[f64], n: usize, c: usize) -> f64 {
    let inner = pred.len() / (n * c).max(1);
    let mut total = 0.0;
    for s in 0..n {
        for i in 0..inner {
            let (mut pp, mut tt, mut pt) = (0.0, 0.0, 0.0);
            for ch in 0..c {
                let at = (s * c + ch) * inner + i;
                pp += pred[at] * pred[at];
                tt += truth[at] * truth[at];
                pt += pred[at] * truth[at];
            }
            if pp > 0.0 && tt > 0.0 {
                total += pt / (pp.sqrt() * tt.sqrt());
            }
        }
    }
    total / (n * inner).max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_cases() {
        let m = [0, 1, 1, 0];
        assert_eq!(mean_iou(&m, &m, 2), Some(1.0));

        // class 1 predicted on {0,1}, true on {2,3}: disjoint
        let mut c = IouCounts::new(2);
        c.add(&[1, 1, 0, 0], &[0, 0, 1, 1]);
        assert_eq!(c.intersection[1], 0);

        // pred = {A,B}, gt = {B,C}
        let mut c = IouCounts::new(2);
        c.add(&[1, 1, 0, 0], &[0, 1, 1, 0]);
        assert!((c.intersection[1] as f64 / c.union[1] as f64 - 1.0 / 3.0).abs() < 1e-15);

        // classes with empty unions are excluded from the mean
        assert_eq!(mean_iou(&[0, 0], &[0, 0], 3), Some(1.0));
    }

    #[test]
    fn scalar_metrics() {
        assert_eq!(mae(&[1.0, 2.0], &[1.5, 1.0]), 0.75);
        assert_eq!(binary_accuracy(&[0.9, 0.2, 0.5], &[1.0, 1.0, 1.0]), 2.0 / 3.0);
        let v = [1.0, 0.0, 0.0, 2.0];
        assert!((mean_cosine(&v, &v, 1, 2) - 1.0).abs() < 1e-15);
        assert!(MetricKind::Mae.no_worse(0.11, 0.10, 0.02));
        assert!(!MetricKind::Iou.no_worse(0.70, 0.75, 0.02));
        assert!(MetricKind::Mae.strictly_better(0.1, 0.2));
    }
}
