//! Image-level detection outcome gated by IoU.

use serde::{Deserialize, Serialize};

use super::overlap::mask_overlap;

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Detection {
    Tp,
    Fn,
    Tn,
    Fp,
}

/// Classifies one (image, class) pair. A hit needs IoU strictly above
/// `threshold`.
pub fn detect_classify(pred: &[bool], gt: &[bool], threshold: f64) -> Detection {
    let has_pred = pred.iter().any(|&v| v);
    let has_gt = gt.iter().any(|&v| v);
    match (has_gt, has_pred) {
        (false, false) => Detection::Tn,
        (false, true) => Detection::Fp,
        (true, false) => Detection::Fn,
        (true, true) => {
            if mask_overlap(pred, gt).1 > threshold {
                Detection::Tp
            } else {
                Detection::Fn
            }
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectionCounts {
    pub tp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
    pub fp: usize,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

impl DetectionCounts {
    pub fn record(&mut self, d: Detection) {
        match d {
            Detection::Tp => self.tp += 1,
            Detection::Fn => self.fn_ += 1,
            Detection::Tn => self.tn += 1,
            Detection::Fp => self.fp += 1,
        }
    }

    pub fn merge(&mut self, other: &DetectionCounts) {
        self.tp += other.tp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
        self.fp += other.fp;
    }

    pub fn total(&self) -> usize {
        self.tp + self.fn_ + self.tn + self.fp
    }

    pub fn precision(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn specificity(&self) -> Option<f64> {
        ratio(self.tn, self.tn + self.fp)
    }

    pub fn f1(&self) -> Option<f64> {
        let (p, r) = (self.precision()?, self.recall()?);
        (p + r > 0.0).then(|| 2.0 * p * r / (p + r))
    }
}
