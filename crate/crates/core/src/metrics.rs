//! Segmentation and localization metrics.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Dataset-level confusion counts; rows are ground truth, columns predictions.
#[derive(Clone, Debug, PartialEq)]
pub struct Confusion {
    classes: usize,
    counts: Vec<u64>,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Confusion { classes, counts: vec![0; classes * classes] }
    }

    /// Adds one image. Pixels where `exclude` is non-zero (e.g. the patch
    /// footprint) are skipped.
    pub fn add(&mut self, preds: &[usize], labels: &[usize], exclude: Option<&[f32]>) -> Result<()> {
        if preds.len() != labels.len() || exclude.is_some_and(|e| e.len() != labels.len()) {
            return Err(Error::shape("predictions, labels and exclusion mask must align"));
        }
        for (i, (&p, &l)) in preds.iter().zip(labels).enumerate() {
            if exclude.is_some_and(|e| e[i] != 0.0) {
                continue;
            }
            if p >= self.classes || l >= self.classes {
                return Err(Error::invalid(format!("class id outside 0..{}", self.classes)));
            }
            self.counts[l * self.classes + p] += 1;
        }
        Ok(())
    }

    pub fn count(&self, label: usize, pred: usize) -> u64 {
        self.counts[label * self.classes + pred]
    }

    /// IoU per class; `None` for classes absent from both labels and predictions.
    pub fn class_iou(&self) -> Vec<Option<f64>> {
        (0..self.classes)
            .map(|c| {
                let tp = self.count(c, c);
                let fn_: u64 = (0..self.classes).map(|p| self.count(c, p)).sum::<u64>() - tp;
                let fp: u64 = (0..self.classes).map(|l| self.count(l, c)).sum::<u64>() - tp;
                let union = tp + fn_ + fp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    /// Mean IoU over classes that occur; NaN if no pixel was counted.
    pub fn miou(&self) -> f64 {
        let ious: Vec<f64> = self.class_iou().into_iter().flatten().collect();
        if ious.is_empty() {
            f64::NAN
        } else {
            ious.iter().sum::<f64>() / ious.len() as f64
        }
    }
}

pub fn miou(preds: &[usize], labels: &[usize], exclude: Option<&[f32]>, classes: usize) -> Result<f64> {
    let mut c = Confusion::new(classes);
    c.add(preds, labels, exclude)?;
    Ok(c.miou())
}

/// IoU of two binary indicator maps (non-zero = set). Two empty sets give 1.
pub fn mask_iou(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.expect_same_shape(b)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (x, y) = (x != 0.0, y != 0.0);
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// True- and false-positive rates of the rule `score > threshold`.
pub fn detection_rates(scores: &[f64], positive: &[bool], threshold: f64) -> Result<(f64, f64)> {
    if scores.len() != positive.len() {
        return Err(Error::shape("scores and labels differ in length"));
    }
    let (mut tp, mut p, mut fp, mut n) = (0usize, 0usize, 0usize, 0usize);
    for (&s, &pos) in scores.iter().zip(positive) {
        let flag = s > threshold;
        if pos {
            p += 1;
            tp += flag as usize;
        } else {
            n += 1;
            fp += flag as usize;
        }
    }
    let rate = |a: usize, b: usize| if b == 0 { f64::NAN } else { a as f64 / b as f64 };
    Ok((rate(tp, p), rate(fp, n)))
}
