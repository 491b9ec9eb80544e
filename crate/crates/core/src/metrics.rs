//! Threshold metrics, ROC construction and AUC.
//!
//! Degenerate ratios (0/0) are reported as `None` and serialize to `null`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
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
}

fn check_lengths(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::LengthMismatch { scores: scores.len(), labels: labels.len() });
    }
    if scores.is_empty() {
        return Err(Error::Contract("no scores to evaluate".into()));
    }
    if let Some(bad) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::Contract(format!("label {bad} is not 0 or 1")));
    }
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::Contract(format!("score {bad} is not finite")));
    }
    Ok(())
}

/// Tallies predictions, where a record is predicted positive iff its score is
/// at least `threshold`.
pub fn confusion(scores: &[f64], labels: &[u8], threshold: f64) -> Result<ConfusionCounts> {
    check_lengths(scores, labels)?;
    let mut c = ConfusionCounts::default();
    for (&s, &y) in scores.iter().zip(labels) {
        match (s >= threshold, y == 1) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScalarMetrics {
    pub accuracy: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub precision: Option<f64>,
    pub f1: Option<f64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn scalar_metrics(c: &ConfusionCounts) -> ScalarMetrics {
    let sensitivity = ratio(c.tp, c.tp + c.fn_);
    let precision = ratio(c.tp, c.tp + c.fp);
    let f1 = match (precision, sensitivity) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
        _ => None,
    };
    ScalarMetrics {
        accuracy: ratio(c.tp + c.tn, c.total()),
        sensitivity,
        specificity: ratio(c.tn, c.tn + c.fp),
        precision,
        f1,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// `(fpr, tpr)` from `(0,0)` to `(1,1)`.
    pub points: Vec<(f64, f64)>,
    /// Distinct scores, descending; `points[i + 1]` is the operating point at `thresholds[i]`.
    pub thresholds: Vec<f64>,
    pub auc: f64,
}

/// Trapezoidal area under a piecewise-linear curve.
pub fn trapezoid(points: &[(f64, f64)]) -> f64 {
    points.windows(2).map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0).sum()
}

fn class_totals(labels: &[u8]) -> Result<(u64, u64)> {
    let pos = labels.iter().filter(|&&l| l == 1).count() as u64;
    let neg = labels.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedAuc(format!(
            "need both classes, got {pos} positive and {neg} negative"
        )));
    }
    Ok((pos, neg))
}

/// ROC curve over every distinct score, with tied records flipping together.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<RocCurve> {
    check_lengths(scores, labels)?;
    let (pos, neg) = class_totals(labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut points = vec![(0.0, 0.0)];
    let mut thresholds = Vec::new();
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        while i < order.len() && scores[order[i]] == t {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        thresholds.push(t);
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    let auc = trapezoid(&points);
    Ok(RocCurve { points, thresholds, auc })
}

/// Pair-counting AUC: P(score⁺ > score⁻) with half credit for ties. O(P·N).
pub fn auc_bruteforce(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_lengths(scores, labels)?;
    let (pos, neg) = class_totals(labels)?;
    let mut credit = 0.0f64;
    let with = |class: u8| scores.iter().zip(labels).filter(move |(_, &l)| l == class).map(|(&s, _)| s);
    for sp in with(1) {
        for sn in with(0) {
            if sp > sn {
                credit += 1.0;
            } else if sp == sn {
                credit += 0.5;
            }
        }
    }
    Ok(credit / (pos as f64 * neg as f64))
}

/// Everything reported for one evaluated dataset split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetEval {
    pub dataset: String,
    pub n: usize,
    pub threshold: f64,
    pub confusion: ConfusionCounts,
    pub accuracy: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub precision: Option<f64>,
    pub f1: Option<f64>,
    pub auc: Option<f64>,
    pub roc: Option<RocCurve>,
}

pub fn evaluate_scores(dataset: &str, scores: &[f64], labels: &[u8], threshold: f64) -> Result<DatasetEval> {
    let confusion = confusion(scores, labels, threshold)?;
    let m = scalar_metrics(&confusion);
    let roc = match roc_auc(scores, labels) {
        Ok(r) => Some(r),
        Err(Error::UndefinedAuc(msg)) => {
            log::warn!("{dataset}: AUC undefined ({msg})");
            None
        }
        Err(e) => return Err(e),
    };
    Ok(DatasetEval {
        dataset: dataset.to_string(),
        n: scores.len(),
        threshold,
        confusion,
        accuracy: m.accuracy,
        sensitivity: m.sensitivity,
        specificity: m.specificity,
        precision: m.precision,
        f1: m.f1,
        auc: roc.as_ref().map(|r| r.auc),
        roc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn confusion_small_case() {
        let c = confusion(&[0.9, 0.2], &[1, 0], 0.5).unwrap();
        assert_eq!(c, ConfusionCounts { tp: 1, fp: 0, tn: 1, fn_: 0 });
        assert!(matches!(confusion(&[0.9], &[1, 0], 0.5), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn threshold_is_inclusive() {
        let c = confusion(&[0.5], &[0], 0.5).unwrap();
        assert_eq!(c.fp, 1);
    }

    #[test]
    fn undefined_ratios_are_none() {
        let m = scalar_metrics(&ConfusionCounts { tp: 0, fp: 0, tn: 5, fn_: 3 });
        assert_eq!(m.precision, None);
        assert_eq!(m.f1, None);
        assert_eq!(m.sensitivity, Some(0.0));
        let m = scalar_metrics(&ConfusionCounts { tp: 2, fp: 1, tn: 0, fn_: 0 });
        assert_eq!(m.sensitivity, Some(1.0));
    }

    #[test]
    fn mann_whitney_example() {
        let s = [0.1, 0.4, 0.35, 0.8];
        let y = [0, 0, 1, 1];
        assert_abs_diff_eq!(roc_auc(&s, &y).unwrap().auc, 0.75, epsilon = 1e-12);
        assert_abs_diff_eq!(auc_bruteforce(&s, &y).unwrap(), 0.75, epsilon = 1e-12);
        let flipped: Vec<u8> = y.iter().map(|l| 1 - l).collect();
        assert_abs_diff_eq!(roc_auc(&s, &flipped).unwrap().auc, 0.25, epsilon = 1e-12);
    }

    #[test]
    fn ties_and_degenerate_inputs() {
        assert_eq!(auc_bruteforce(&[0.3; 6], &[0, 1, 0, 1, 1, 0]).unwrap(), 0.5);
        let r = roc_auc(&[0.3; 6], &[0, 1, 0, 1, 1, 0]).unwrap();
        assert_eq!(r.points, vec![(0.0, 0.0), (1.0, 1.0)]);
        assert_eq!(r.auc, 0.5);
        assert!(matches!(roc_auc(&[0.1, 0.2], &[1, 1]), Err(Error::UndefinedAuc(_))));
        assert!(matches!(auc_bruteforce(&[0.1, 0.2], &[0, 0]), Err(Error::UndefinedAuc(_))));
    }

    #[test]
    fn perfect_classifier_passes_through_top_left() {
        let r = roc_auc(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0]).unwrap();
        assert!(r.points.contains(&(0.0, 1.0)));
        assert_eq!(r.auc, 1.0);
        assert_eq!(r.thresholds, vec![0.9, 0.8, 0.2, 0.1]);
    }
}
