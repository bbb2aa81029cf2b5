use serde::{Deserialize, Serialize};

use crate::dataio::Task;
use crate::tensor::kernels;

/// Evaluation metrics; `None` marks a metric that is undefined for the
/// task or for the given predictions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub acc7: Option<f64>,
    pub acc2: Option<f64>,
    pub f1: Option<f64>,
    pub mae: Option<f64>,
    pub corr: Option<f64>,
    /// Binary accuracy.
    pub acc: Option<f64>,
}

impl Metrics {
    pub fn compute(task: Task, predictions: &[f64], labels: &[f64]) -> Self {
        match task {
            Task::Regression => regression_metrics(predictions, labels),
            Task::Binary => binary_metrics(predictions, labels),
        }
    }

    /// `(name, value)` pairs in a fixed order.
    pub fn fields(&self) -> [(&'static str, Option<f64>); 6] {
        [
            ("Acc2", self.acc2),
            ("Acc7", self.acc7),
            ("F1", self.f1),
            ("MAE", self.mae),
            ("Corr", self.corr),
            ("Acc", self.acc),
        ]
    }
}

/// Round half away from zero, then clamp to `[−3, 3]`.
pub fn sentiment_class(x: f64) -> i32 {
    libm::round(x).clamp(-3.0, 3.0) as i32
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Pearson correlation; `None` when either side has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let ma = mean(a.iter().copied())?;
    let mb = mean(b.iter().copied())?;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    (saa > 0.0 && sbb > 0.0).then(|| (sab / libm::sqrt(saa * sbb)).clamp(-1.0, 1.0))
}

pub fn regression_metrics(pred: &[f64], labels: &[f64]) -> Metrics {
    let pairs = || pred.iter().zip(labels);
    let acc7 = mean(pairs().map(|(p, y)| f64::from(u8::from(sentiment_class(*p) == sentiment_class(*y)))));
    let mae = mean(pairs().map(|(p, y)| libm::fabs(p - y)));
    // Neutral labels are excluded from the binary metrics.
    let (mut tp, mut fp, mut fn_, mut correct, mut total) = (0usize, 0usize, 0usize, 0usize, 0usize);
    for (&p, &y) in pairs() {
        if y == 0.0 {
            continue;
        }
        total += 1;
        let (pp, yp) = (p > 0.0, y > 0.0);
        correct += usize::from(pp == yp);
        match (pp, yp) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    let acc2 = (total > 0).then(|| correct as f64 / total as f64);
    let denom = 2 * tp + fp + fn_;
    let f1 = (total > 0 && denom > 0).then(|| 2.0 * tp as f64 / denom as f64);
    Metrics {
        acc7,
        acc2,
        f1,
        mae,
        corr: pearson(pred, labels),
        acc: None,
    }
}

/// `logits` are thresholded at probability 0.5.
pub fn binary_metrics(logits: &[f64], labels: &[f64]) -> Metrics {
    let probs: alloc::vec::Vec<f64> = logits.iter().map(|&z| kernels::sigmoid(z)).collect();
    let acc = mean(
        probs
            .iter()
            .zip(labels)
            .map(|(p, y)| f64::from(u8::from((*p >= 0.5) == (*y > 0.5)))),
    );
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (p, y) in probs.iter().zip(labels) {
        match (*p >= 0.5, *y > 0.5) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    let denom = 2 * tp + fp + fn_;
    Metrics {
        acc,
        f1: (denom > 0).then(|| 2.0 * tp as f64 / denom as f64),
        ..Metrics::default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictor() {
        let y = [1.5, -2.0, 0.3, 2.9];
        let m = regression_metrics(&y, &y);
        assert_eq!(m.acc7, Some(1.0));
        assert_eq!(m.acc2, Some(1.0));
        assert_eq!(m.f1, Some(1.0));
        assert_eq!(m.mae, Some(0.0));
        assert!((m.corr.unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hand_example() {
        let m = regression_metrics(&[1.2, -0.5], &[1.0, -1.0]);
        assert!((m.mae.unwrap() - 0.35).abs() < 1e-12);
        assert_eq!(m.acc2, Some(1.0));
        assert_eq!(m.acc7, Some(1.0));
    }

    #[test]
    fn rounding_rule() {
        assert_eq!(sentiment_class(-0.5), -1);
        assert_eq!(sentiment_class(0.5), 1);
        assert_eq!(sentiment_class(0.49), 0);
        assert_eq!(sentiment_class(7.2), 3);
        assert_eq!(sentiment_class(-3.6), -3);
    }

    #[test]
    fn neutral_labels_are_excluded() {
        let m = regression_metrics(&[1.0, -1.0, 1.0], &[1.0, -1.0, 0.0]);
        assert_eq!(m.acc2, Some(1.0));
        let only = regression_metrics(&[1.0, 2.0], &[0.0, 0.0]);
        assert_eq!(only.acc2, None);
        assert_eq!(only.f1, None);
    }

    #[test]
    fn constant_predictions_have_no_correlation() {
        assert_eq!(pearson(&[1.0, 1.0, 1.0], &[0.0, 1.0, 2.0]), None);
        let r = pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap();
        assert!((r + 1.0).abs() < 1e-12);
    }

    #[test]
    fn binary_accuracy() {
        let m = binary_metrics(&[2.0, -1.0, 0.5, -3.0], &[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(m.acc, Some(0.75));
        assert!((m.f1.unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(m.mae, None);
    }
}
