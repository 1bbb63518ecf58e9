//! Training loss and evaluation metrics.

pub mod detection;
pub mod loss;
pub mod overlap;
pub mod report;
pub mod surface;

pub use detection::{detect_classify, Detection, DetectionCounts, DEFAULT_IOU_THRESHOLD};
pub use overlap::{mask_overlap, overlap_metrics, Overlap};
pub use report::{evaluate_image, ClassReport, ImageReport, MetricReport};
pub use surface::{surface_distances, SurfaceDistances};
