//! Binarization and the five segmentation metrics, micro-averaged over
//! pooled confusion counts. mIoU is the unweighted mean of the foreground
//! and background IoU, so background recognition counts.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::{forward_inference, TUnetParams};
use crate::synth::Sample;
use crate::tape::Precision;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub true_pos: u64,
    pub false_pos: u64,
    pub true_neg: u64,
    pub false_neg: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.true_pos + self.false_pos + self.true_neg + self.false_neg
    }

    /// Counts merge by addition (commutative/associative), so per-image
    /// counts can be pooled in any order.
    pub fn merge(&mut self, other: &ConfusionCounts) {
        self.true_pos += other.true_pos;
        self.false_pos += other.false_pos;
        self.true_neg += other.true_neg;
        self.false_neg += other.false_neg;
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsReport {
    pub miou: f64,
    pub dice: f64,
    pub pixel_acc: f64,
    pub precision: f64,
    pub recall: f64,
    pub counts: ConfusionCounts,
}

/// Threshold a probability map with a strict `>`; exactly-threshold pixels
/// stay background. Values must lie in [0,1].
pub fn binarize(prob: &Tensor, threshold: f64) -> Result<Tensor> {
    if let Some(bad) = prob.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Validation(format!(
            "binarize: probability {bad} outside [0,1]"
        )));
    }
    let data = prob
        .data()
        .iter()
        .map(|&p| if p > threshold { 1.0 } else { 0.0 })
        .collect();
    Tensor::from_vec(prob.shape().to_vec(), data)
}

/// Exact confusion counts of two equal-shape binary masks.
pub fn confusion(pred: &Tensor, gt: &Tensor) -> Result<ConfusionCounts> {
    if pred.shape() != gt.shape() {
        return Err(Error::Dim(format!(
            "confusion: prediction {:?} does not match ground truth {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    let mut counts = ConfusionCounts::default();
    for (&p, &y) in pred.data().iter().zip(gt.data()) {
        if (p != 0.0 && p != 1.0) || (y != 0.0 && y != 1.0) {
            return Err(Error::Validation(
                "confusion: masks must contain only 0 and 1".into(),
            ));
        }
        match (p == 1.0, y == 1.0) {
            (true, true) => counts.true_pos += 1,
            (true, false) => counts.false_pos += 1,
            (false, true) => counts.false_neg += 1,
            (false, false) => counts.true_neg += 1,
        }
    }
    Ok(counts)
}

/// A class absent from both masks scores 1 on its degenerate ratio; absent
/// from only one side scores 0. Keeps all-background slices from zeroing mIoU.
fn ratio(num: u64, den: u64, absent_in_both: bool) -> f64 {
    if den == 0 {
        if absent_in_both {
            1.0
        } else {
            0.0
        }
    } else {
        num as f64 / den as f64
    }
}

pub fn compute_metrics(counts: &ConfusionCounts) -> Result<MetricsReport> {
    let c = *counts;
    if c.total() == 0 {
        return Err(Error::Contract("compute_metrics: zero pixels".into()));
    }
    let no_pos_pred = c.true_pos + c.false_pos == 0;
    let no_pos_gt = c.true_pos + c.false_neg == 0;
    let precision = ratio(c.true_pos, c.true_pos + c.false_pos, no_pos_gt);
    let recall = ratio(c.true_pos, c.true_pos + c.false_neg, no_pos_pred);
    let dice = ratio(
        2 * c.true_pos,
        2 * c.true_pos + c.false_pos + c.false_neg,
        true, // denominator 0 ⟺ positives absent from both
    );
    let iou_fg = ratio(c.true_pos, c.true_pos + c.false_pos + c.false_neg, true);
    let iou_bg = ratio(c.true_neg, c.true_neg + c.false_pos + c.false_neg, true);
    let pixel_acc = (c.true_pos + c.true_neg) as f64 / c.total() as f64;
    Ok(MetricsReport {
        miou: 0.5 * (iou_fg + iou_bg),
        dice,
        pixel_acc,
        precision,
        recall,
        counts: c,
    })
}

/// Run the model over a split, pool the confusion counts (micro-averaging),
/// and compute the metrics once.
pub fn evaluate(
    cfg: &ModelConfig,
    params: &TUnetParams,
    split: &[Sample],
    threshold: f64,
    precision: Precision,
) -> Result<MetricsReport> {
    if split.is_empty() {
        return Err(Error::Contract("evaluate: empty split".into()));
    }
    let mut counts = ConfusionCounts::default();
    for sample in split {
        let prob = forward_inference(cfg, params, &sample.image, precision)?;
        let pred = binarize(&prob, threshold)?;
        counts.merge(&confusion(&pred, &sample.mask)?);
    }
    compute_metrics(&counts)
}
