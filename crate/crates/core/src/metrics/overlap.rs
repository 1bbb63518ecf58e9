//! Region-overlap metrics on label maps.

use serde::{Deserialize, Serialize};

/// Per-foreground-class Dice and IoU plus pixel accuracy over all classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Overlap {
    /// Entry `c-1` holds class `c`.
    pub dsc: Vec<f64>,
    pub iou: Vec<f64>,
    pub acc: f64,
}

/// Dice and IoU of two binary masks; both empty counts as perfect agreement.
pub fn mask_overlap(pred: &[bool], gt: &[bool]) -> (f64, f64) {
    assert_eq!(pred.len(), gt.len(), "mask sizes differ");
    let (mut inter, mut p, mut g) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.iter().zip(gt) {
        inter += (a && b) as usize;
        p += a as usize;
        g += b as usize;
    }
    if p + g == 0 {
        return (1.0, 1.0);
    }
    let union = p + g - inter;
    (2.0 * inter as f64 / (p + g) as f64, inter as f64 / union as f64)
}

pub fn class_mask(labels: &[u8], class: usize) -> Vec<bool> {
    labels.iter().map(|&l| l as usize == class).collect()
}

pub fn overlap_metrics(pred: &[u8], gt: &[u8], classes: usize) -> Overlap {
    assert_eq!(pred.len(), gt.len(), "label maps differ in size");
    let (mut dsc, mut iou) = (Vec::new(), Vec::new());
    for c in 1..classes {
        let (d, i) = mask_overlap(&class_mask(pred, c), &class_mask(gt, c));
        dsc.push(d);
        iou.push(i);
    }
    let correct = pred.iter().zip(gt).filter(|(a, b)| a == b).count();
    Overlap {
        dsc,
        iou,
        acc: if pred.is_empty() {
            1.0
        } else {
            correct as f64 / pred.len() as f64
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_maps_are_perfect() {
        let m = [0u8, 1, 2, 2, 1, 0];
        let o = overlap_metrics(&m, &m, 3);
        assert_eq!(o.dsc, vec![1.0, 1.0]);
        assert_eq!(o.iou, vec![1.0, 1.0]);
        assert_eq!(o.acc, 1.0);
    }

    #[test]
    fn disjoint_masks_score_zero() {
        let p = [true, true, false, false];
        let g = [false, false, true, false];
        assert_eq!(mask_overlap(&p, &g), (0.0, 0.0));
    }

    #[test]
    fn pixel_count_case() {
        // 4×4 maps: |P| = 4, |G| = 6, |P∩G| = 3
        let mut p = [false; 16];
        let mut g = [false; 16];
        for i in [0, 1, 2, 3] {
            p[i] = true;
        }
        for i in [1, 2, 3, 4, 5, 6] {
            g[i] = true;
        }
        let (d, i) = mask_overlap(&p, &g);
        assert_eq!(d, 0.6);
        assert_eq!(i, 3.0 / 7.0);
    }

    #[test]
    fn both_empty_is_one() {
        assert_eq!(mask_overlap(&[false; 9], &[false; 9]), (1.0, 1.0));
    }
}
