//! ROC analysis for the detection score and cut-off selection.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub tpr: f64,
    pub fpr: f64,
}

/// Operating points ordered by increasing threshold; a sample is called
/// positive when its score is strictly greater than the threshold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

impl RocCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("threshold,fpr,tpr\n");
        for p in &self.points {
            s.push_str(&format!("{},{},{}\n", p.threshold, p.fpr, p.tpr));
        }
        s
    }
}

/// Builds the ROC curve over `scores` (label `true` = positive) and picks the
/// threshold maximizing Youden's J = TPR - FPR, preferring the smaller
/// threshold on ties.
///
/// Thresholds sit below the smallest score (at zero when every score is
/// positive, so non-negative scores keep a non-negative cut-off), halfway
/// between consecutive distinct scores, and at the largest score itself, so a
/// perfectly separable sample yields a cut-off strictly between the classes.
pub fn roc_and_cutoff(scores: &[f64], labels: &[bool]) -> Result<(RocCurve, f64)> {
    if scores.len() != labels.len() {
        return Err(Error::shape(format!("{} scores, {} labels", scores.len(), labels.len())));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFinite { index: i });
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass);
    }

    let mut distinct: Vec<f64> = scores.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();

    let mut thresholds = Vec::with_capacity(distinct.len() + 1);
    thresholds.push(if distinct[0] > 0.0 { 0.0 } else { distinct[0] - 1.0 });
    for pair in distinct.windows(2) {
        thresholds.push(0.5 * (pair[0] + pair[1]));
    }
    thresholds.push(distinct[distinct.len() - 1]);

    // sort samples once and sweep upward
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let (mut tp, mut fp) = (pos, neg);
    let mut cursor = 0;
    let mut points = Vec::with_capacity(thresholds.len());
    for &t in &thresholds {
        while cursor < order.len() && scores[order[cursor]] <= t {
            if labels[order[cursor]] {
                tp -= 1;
            } else {
                fp -= 1;
            }
            cursor += 1;
        }
        points.push(RocPoint { threshold: t, tpr: tp as f64 / pos as f64, fpr: fp as f64 / neg as f64 });
    }

    // points run from (1, 1) down to (0, 0)
    let auc = points.windows(2).map(|w| (w[0].fpr - w[1].fpr) * (w[0].tpr + w[1].tpr) * 0.5).sum();

    let mut best = points[0];
    for p in &points[1..] {
        if p.tpr - p.fpr > best.tpr - best.fpr {
            best = *p;
        }
    }
    Ok((RocCurve { points, auc }, best.threshold))
}
