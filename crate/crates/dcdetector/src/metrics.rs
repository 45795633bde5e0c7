//! Detection metrics with the point-adjustment protocol.
//!
//! Point adjustment credits a detector with an entire ground-truth anomaly
//! segment as soon as any point inside the segment is flagged: every
//! contiguous run of 1-labels containing at least one predicted point is
//! filled in before counting. Predictions outside labeled segments are
//! untouched.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Confusion counts and derived rates for one evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub true_negatives: usize,
    /// Whether point adjustment was applied before counting.
    pub adjusted: bool,
}

/// Applies point adjustment: any hit inside a ground-truth segment marks
/// the whole segment as detected.
pub fn point_adjust(pred: &[bool], gt: &[bool]) -> Result<Vec<bool>> {
    if pred.len() != gt.len() {
        return Err(Error::Domain(format!(
            "prediction length {} does not match ground truth length {}",
            pred.len(),
            gt.len()
        )));
    }
    let mut adjusted = pred.to_vec();
    let n = gt.len();
    let mut i = 0;
    while i < n {
        if gt[i] {
            let start = i;
            let mut end = i;
            while end < n && gt[end] {
                end += 1;
            }
            if pred[start..end].iter().any(|&p| p) {
                for a in &mut adjusted[start..end] {
                    *a = true;
                }
            }
            i = end;
        } else {
            i += 1;
        }
    }
    Ok(adjusted)
}

/// Computes the confusion matrix and precision/recall/F1/accuracy, with
/// optional point adjustment first. With `adjust`, accuracy is computed on
/// the adjusted predictions as well. Empty-denominator rates are 0.
pub fn compute_metrics(pred: &[bool], gt: &[bool], adjust: bool) -> Result<MetricsReport> {
    if pred.len() != gt.len() {
        return Err(Error::Domain(format!(
            "prediction length {} does not match ground truth length {}",
            pred.len(),
            gt.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Domain("cannot evaluate empty vectors".into()));
    }
    let effective: Vec<bool> = if adjust { point_adjust(pred, gt)? } else { pred.to_vec() };
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    let mut tn = 0usize;
    for (&p, &g) in effective.iter().zip(gt) {
        match (p, g) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    let rate = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let precision = rate(tp, tp + fp);
    let recall = rate(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(MetricsReport {
        accuracy: rate(tp + tn, pred.len()),
        precision,
        recall,
        f1,
        true_positives: tp,
        false_positives: fp,
        false_negatives: fn_,
        true_negatives: tn,
        adjusted: adjust,
    })
}
