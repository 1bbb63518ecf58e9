//! Per-image evaluation and dataset-level aggregation.

use serde::{Deserialize, Serialize};

use super::detection::{detect_classify, Detection, DetectionCounts};
use super::overlap::{class_mask, overlap_metrics};
use super::surface::surface_distances;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class: usize,
    pub dsc: f64,
    pub iou: f64,
    /// `None` when either mask is empty.
    pub hd: Option<f64>,
    pub hd95: Option<f64>,
    pub asd: Option<f64>,
    pub detection: Detection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageReport {
    pub id: String,
    pub acc: f64,
    pub classes: Vec<ClassReport>,
}

impl ImageReport {
    pub fn mean_dsc(&self) -> f64 {
        mean(self.classes.iter().map(|c| c.dsc)).unwrap_or(1.0)
    }
}

/// Evaluates one predicted label map against ground truth.
pub fn evaluate_image(
    id: &str,
    pred: &[u8],
    gt: &[u8],
    (h, w): (usize, usize),
    classes: usize,
    iou_threshold: f64,
) -> ImageReport {
    let overlap = overlap_metrics(pred, gt, classes);
    let class_reports = (1..classes)
        .map(|c| {
            let (pm, gm) = (class_mask(pred, c), class_mask(gt, c));
            let sd = surface_distances(&pm, &gm, h, w);
            ClassReport {
                class: c,
                dsc: overlap.dsc[c - 1],
                iou: overlap.iou[c - 1],
                hd: sd.map(|d| d.hd),
                hd95: sd.map(|d| d.hd95),
                asd: sd.map(|d| d.asd),
                detection: detect_classify(&pm, &gm, iou_threshold),
            }
        })
        .collect();
    ImageReport {
        id: id.to_string(),
        acc: overlap.acc,
        classes: class_reports,
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for v in values {
        s += v;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSummary {
    pub class: usize,
    pub dsc: f64,
    pub iou: f64,
    pub hd: Option<f64>,
    pub hd95: Option<f64>,
    pub asd: Option<f64>,
    /// Images on which the distance metrics were defined.
    pub distance_valid: usize,
}

/// Aggregate metrics: fractions for overlap, pixels for distances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub images: usize,
    pub acc: f64,
    pub dsc: f64,
    pub iou: f64,
    pub hd: Option<f64>,
    pub hd95: Option<f64>,
    pub asd: Option<f64>,
    pub classes: Vec<ClassSummary>,
    pub detection: DetectionCounts,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub specificity: Option<f64>,
    pub f1: Option<f64>,
}

impl MetricReport {
    pub fn aggregate(reports: &[ImageReport]) -> Self {
        let num_classes = reports.first().map_or(0, |r| r.classes.len());
        let classes: Vec<ClassSummary> = (0..num_classes)
            .map(|k| {
                let col = || reports.iter().map(move |r| &r.classes[k]);
                ClassSummary {
                    class: k + 1,
                    dsc: mean(col().map(|c| c.dsc)).unwrap_or(0.0),
                    iou: mean(col().map(|c| c.iou)).unwrap_or(0.0),
                    hd: mean(col().filter_map(|c| c.hd)),
                    hd95: mean(col().filter_map(|c| c.hd95)),
                    asd: mean(col().filter_map(|c| c.asd)),
                    distance_valid: col().filter(|c| c.hd.is_some()).count(),
                }
            })
            .collect();
        let mut detection = DetectionCounts::default();
        for c in reports.iter().flat_map(|r| &r.classes) {
            detection.record(c.detection);
        }
        MetricReport {
            images: reports.len(),
            acc: mean(reports.iter().map(|r| r.acc)).unwrap_or(0.0),
            dsc: mean(classes.iter().map(|c| c.dsc)).unwrap_or(0.0),
            iou: mean(classes.iter().map(|c| c.iou)).unwrap_or(0.0),
            hd: mean(classes.iter().filter_map(|c| c.hd)),
            hd95: mean(classes.iter().filter_map(|c| c.hd95)),
            asd: mean(classes.iter().filter_map(|c| c.asd)),
            precision: detection.precision(),
            recall: detection.recall(),
            specificity: detection.specificity(),
            f1: detection.f1(),
            classes,
            detection,
        }
    }

    pub const CSV_HEADER: &'static str = "id,images,acc,dsc,iou,hd,hd95,asd,tp,fn,tn,fp";

    /// One CSV row for the aggregate, labelled `all`.
    pub fn csv_row(&self) -> String {
        format!(
            "all,{},{},{},{},{},{},{},{},{},{},{}",
            self.images,
            self.acc,
            self.dsc,
            self.iou,
            opt(self.hd),
            opt(self.hd95),
            opt(self.asd),
            self.detection.tp,
            self.detection.fn_,
            self.detection.tn,
            self.detection.fp
        )
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

impl ImageReport {
    /// Per-image CSV row in the [`MetricReport::CSV_HEADER`] layout.
    pub fn csv_row(&self) -> String {
        let mut counts = DetectionCounts::default();
        for c in &self.classes {
            counts.record(c.detection);
        }
        let m = |f: fn(&ClassReport) -> Option<f64>| mean(self.classes.iter().filter_map(f));
        format!(
            "{},1,{},{},{},{},{},{},{},{},{},{}",
            self.id,
            self.acc,
            self.mean_dsc(),
            mean(self.classes.iter().map(|c| c.iou)).unwrap_or(1.0),
            opt(m(|c| c.hd)),
            opt(m(|c| c.hd95)),
            opt(m(|c| c.asd)),
            counts.tp,
            counts.fn_,
            counts.tn,
            counts.fp
        )
    }
}
