//! Generalized zero-shot segmentation evaluation: confusion-matrix
//! accumulation and pixel accuracy / mean accuracy / mean IoU over shared and
//! private class subsets, plus their harmonic means.
//!
//! Subset conventions: subset PA counts only pixels whose ground truth lies
//! in the subset; MA averages per-class recall over subset classes with at
//! least one ground-truth pixel; per-class IoU is computed on the full
//! matrix and mIoU averages subset classes with nonzero union. A subset with
//! no ground-truth pixels reports zeros and raises a flag rather than erroring.

use crate::{BudaError, Result};
use serde::{Deserialize, Serialize};

/// Ground-truth marker for pixels that carry no label.
pub const ABSENT_LABEL: u16 = 0xFFFF;

/// Row = ground truth, column = prediction, u64 pixel counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub n_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(n_classes: usize) -> Self {
        ConfusionMatrix { n_classes, counts: vec![0; n_classes * n_classes] }
    }

    pub fn count(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.n_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sum(&self, gt: usize) -> u64 {
        self.counts[gt * self.n_classes..(gt + 1) * self.n_classes].iter().sum()
    }

    pub fn col_sum(&self, pred: usize) -> u64 {
        (0..self.n_classes).map(|gt| self.count(gt, pred)).sum()
    }

    /// Adds one (prediction, ground truth) pixel pair per position, skipping
    /// pixels with [`ABSENT_LABEL`] ground truth.
    pub fn accumulate(&mut self, pred: &[u16], gt: &[u16]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(BudaError::Shape(format!(
                "confusion: {} predictions vs {} ground-truth pixels",
                pred.len(),
                gt.len()
            )));
        }
        for (p, g) in pred.iter().zip(gt) {
            if *g == ABSENT_LABEL {
                continue;
            }
            let (p, g) = (*p as usize, *g as usize);
            if g >= self.n_classes || p >= self.n_classes {
                return Err(BudaError::Contract(format!(
                    "confusion: label ({g}, {p}) outside {} classes",
                    self.n_classes
                )));
            }
            self.counts[g * self.n_classes + p] += 1;
        }
        Ok(())
    }

    /// Elementwise merge; matrices accumulated per grid can be combined in a
    /// final ordered pass.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if self.n_classes != other.n_classes {
            return Err(BudaError::Shape(format!(
                "confusion merge: {} vs {} classes",
                self.n_classes, other.n_classes
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// IoU per class on the full matrix; `None` where the union is zero.
    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        (0..self.n_classes)
            .map(|c| {
                let inter = self.count(c, c);
                let union = self.row_sum(c) + self.col_sum(c) - inter;
                if union == 0 {
                    None
                } else {
                    Some(inter as f64 / union as f64)
                }
            })
            .collect()
    }
}

/// PA/MA/mIoU (percent) over one class subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetMetrics {
    pub pa: f64,
    pub ma: f64,
    pub miou: f64,
    /// Ground-truth pixels whose class lies in the subset.
    pub n_gt_pixels: u64,
    /// True when the subset had no ground-truth pixels and the zeros above
    /// are placeholders, not measurements.
    pub no_gt_pixels: bool,
}

/// Computes (PA, MA, mIoU) in percent for `subset` against a full matrix.
pub fn subset_metrics(cm: &ConfusionMatrix, subset: &[usize]) -> Result<SubsetMetrics> {
    if subset.is_empty() {
        return Err(BudaError::Contract("subset_metrics: empty class subset".into()));
    }
    if let Some(c) = subset.iter().find(|c| **c >= cm.n_classes) {
        return Err(BudaError::Contract(format!(
            "subset_metrics: class {c} outside {} classes",
            cm.n_classes
        )));
    }
    let n_gt_pixels: u64 = subset.iter().map(|c| cm.row_sum(*c)).sum();
    if n_gt_pixels == 0 {
        return Ok(SubsetMetrics { pa: 0.0, ma: 0.0, miou: 0.0, n_gt_pixels: 0, no_gt_pixels: true });
    }
    let correct: u64 = subset.iter().map(|c| cm.count(*c, *c)).sum();
    let pa = 100.0 * correct as f64 / n_gt_pixels as f64;

    let recalls: Vec<f64> = subset
        .iter()
        .filter(|c| cm.row_sum(**c) > 0)
        .map(|c| cm.count(*c, *c) as f64 / cm.row_sum(*c) as f64)
        .collect();
    let ma = 100.0 * recalls.iter().sum::<f64>() / recalls.len() as f64;

    let ious: Vec<f64> = subset
        .iter()
        .filter_map(|c| {
            let inter = cm.count(*c, *c);
            let union = cm.row_sum(*c) + cm.col_sum(*c) - inter;
            (union > 0).then(|| inter as f64 / union as f64)
        })
        .collect();
    let miou = if ious.is_empty() {
        0.0
    } else {
        100.0 * ious.iter().sum::<f64>() / ious.len() as f64
    };
    Ok(SubsetMetrics { pa, ma, miou, n_gt_pixels, no_gt_pixels: false })
}

/// 2ab/(a+b), or 0 when both sides are 0.
pub fn harmonic_mean(a: f64, b: f64) -> f64 {
    if a + b == 0.0 {
        0.0
    } else {
        2.0 * a * b / (a + b)
    }
}

/// Full GZSL evaluation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub shared: SubsetMetrics,
    pub private: SubsetMetrics,
    pub h_pa: f64,
    pub h_ma: f64,
    pub h_iou: f64,
    /// IoU percent per class id on the full matrix; `null` where undefined.
    pub per_class_iou: Vec<Option<f64>>,
    pub n_eval_pixels: u64,
}

impl MetricsReport {
    pub fn csv_header() -> &'static str {
        "shared_pa,shared_ma,shared_miou,private_pa,private_ma,private_miou,h_pa,h_ma,h_iou"
    }

    /// Metric values in [`Self::csv_header`] column order.
    pub fn csv_values(&self) -> [f64; 9] {
        [
            self.shared.pa,
            self.shared.ma,
            self.shared.miou,
            self.private.pa,
            self.private.ma,
            self.private.miou,
            self.h_pa,
            self.h_ma,
            self.h_iou,
        ]
    }

    /// One-decimal percentages in [`Self::csv_header`] column order.
    pub fn csv_row(&self) -> String {
        self.csv_values().map(|v| format!("{v:.1}")).join(",")
    }
}

/// Assembles subset metrics for disjoint shared/private sets plus harmonics.
pub fn gzsl_report(
    cm: &ConfusionMatrix,
    shared_set: &[usize],
    private_set: &[usize],
) -> Result<MetricsReport> {
    for s in shared_set {
        if private_set.contains(s) {
            return Err(BudaError::Contract(format!(
                "gzsl: class {s} appears in both shared and private sets"
            )));
        }
    }
    for c in 0..cm.n_classes {
        if cm.row_sum(c) > 0 && !shared_set.contains(&c) && !private_set.contains(&c) {
            return Err(BudaError::Contract(format!(
                "gzsl: evaluated class {c} belongs to neither subset"
            )));
        }
    }
    let shared = subset_metrics(cm, shared_set)?;
    let private = subset_metrics(cm, private_set)?;
    let per_class_iou =
        cm.per_class_iou().into_iter().map(|o| o.map(|v| 100.0 * v)).collect();
    Ok(MetricsReport {
        h_pa: harmonic_mean(shared.pa, private.pa),
        h_ma: harmonic_mean(shared.ma, private.ma),
        h_iou: harmonic_mean(shared.miou, private.miou),
        shared,
        private,
        per_class_iou,
        n_eval_pixels: cm.total(),
    })
}
